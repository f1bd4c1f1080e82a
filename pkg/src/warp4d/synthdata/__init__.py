"""Synthetic paired two-view data: kinematic-chain arms over a textured plane."""

from .generate import (
    SceneSample,
    SynthConfig,
    anchor_ground_truth,
    anchor_pixels,
    check_sample,
    generate_dataset,
    generate_sample,
    list_samples,
    load_sample,
    load_view,
    scene_geometry,
    visibility_oracle,
    write_sample,
)
from .kinematics import KinematicChain, Link, chain_center, end_effector, forward_kinematics, random_motion
from .render import Background, Capsule, Sphere, cast_rays, chain_primitives, render, visible_from

__all__ = [
    "Background", "Capsule", "KinematicChain", "Link", "SceneSample", "Sphere", "SynthConfig",
    "anchor_ground_truth", "anchor_pixels",
    "cast_rays", "chain_center", "chain_primitives", "check_sample", "end_effector",
    "forward_kinematics", "generate_dataset", "generate_sample", "list_samples", "load_sample", "load_view",
    "random_motion", "render", "scene_geometry", "visibility_oracle", "visible_from", "write_sample",
]
