"""Paired two-view sample generation and the on-disk dataset layout.

Layout per sample::

    <root>/<sample-id>/meta.json
    <root>/<sample-id>/view_a/{frame_%04d.png, depth_%04d.f32, mask_%04d.png, camera.json}
    <root>/<sample-id>/view_b/...
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .. import io
from ..errors import ValidationError
from ..geometry import Camera, Pixel, project_points, rot_axis, rot_z
from ..rng import derive_seed, stream
from .kinematics import KinematicChain, Link, chain_center, forward_kinematics, random_motion
from .render import Background, chain_primitives, pixel_rays, render, visible_from

log = logging.getLogger(__name__)

DEFAULT_FRAMES = 49
DEFAULT_HW = (384, 672)


@dataclass
class SynthConfig:
    n_frames: int = DEFAULT_FRAMES
    height: int = DEFAULT_HW[0]
    width: int = DEFAULT_HW[1]
    n_links: tuple = (3, 7)            # inclusive
    reach: tuple = (1.2, 1.8)          # total chain length
    link_radius: tuple = (0.05, 0.09)
    step_fraction: float = 0.01
    focal: float = 0.9                 # fx = fy = focal * width
    base_position: tuple = (0.0, 0.9, 3.5)
    look_at: tuple = (0.0, 0.3, 3.5)
    cam_shift: tuple = (0.3, 0.15)     # |x|, |y| bound on camera-B centre
    cam_back: tuple = (0.4, 0.8)       # camera-B distance behind camera A
    cam_roll_deg: float = 1.0
    background: str = "smooth"
    background_depth: float = 6.0
    background_image: str = None
    background_extent: float = 8.0
    chain: dict = None                 # explicit chain spec instead of randomisation

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synthdata config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.n_frames < 1 or self.height < 1 or self.width < 1:
            raise ValidationError("n_frames, height and width must be positive")
        lo, hi = self.n_links
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad n_links range {self.n_links!r}")
        if not 0 <= self.step_fraction <= 1:
            raise ValidationError("step_fraction must lie in [0, 1]")

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))


@dataclass(frozen=True, eq=False)
class SceneSample:
    frames_a: np.ndarray
    frames_b: np.ndarray
    depths_a: np.ndarray
    depths_b: np.ndarray
    masks_a: np.ndarray
    masks_b: np.ndarray
    cam_a: Camera
    cam_b: Camera
    joint_traj: np.ndarray
    centers: np.ndarray  # (frames, 3) world-frame arm centre
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frames_a)

    def view(self, name):
        if name == "a":
            return self.frames_a, self.depths_a, self.masks_a, self.cam_a
        if name == "b":
            return self.frames_b, self.depths_b, self.masks_b, self.cam_b
        raise ValueError(name)


def random_chain(rng, cfg: SynthConfig):
    n = int(rng.integers(cfg.n_links[0], cfg.n_links[1] + 1))
    lengths = rng.uniform(0.5, 1.0, n)
    lengths *= rng.uniform(*cfg.reach) / lengths.sum()
    links = []
    for i in range(n):
        if i == 0:
            axis = (1.0, 0.0, 0.0)  # base twist about the arm's long axis
        else:
            axis = ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0))[int(rng.integers(2))]
        lo = rng.uniform(-1.2, -0.3)
        hi = rng.uniform(0.3, 1.2)
        color = rng.uniform(0.25, 0.95, 3)
        links.append(Link(float(lengths[i]), float(rng.uniform(*cfg.link_radius)), axis, (lo, hi), tuple(color)))
    # local +x points up (world -y), with a random heading about vertical
    heading = rng.uniform(-np.pi, np.pi)
    R = rot_axis((0.0, -1.0, 0.0), heading) @ np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    base = np.eye(4)
    base[:3, :3] = R
    base[:3, 3] = cfg.base_position
    return KinematicChain(links, base)


def look_at(center, target, roll=0.0):
    f = np.asarray(target, dtype=np.float64) - center
    f /= np.linalg.norm(f)
    x = np.cross(f, (0.0, -1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = rot_z(roll) @ np.stack([x, y, f])
    return R, -R @ center


def camera_pair(rng, cfg: SynthConfig):
    fx = cfg.focal * cfg.width
    cx, cy = (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0
    cam_a = Camera.from_intrinsics(fx, fx, cx, cy)
    sx, sy = cfg.cam_shift
    center_b = np.array([rng.uniform(-sx, sx), rng.uniform(-sy, sy), -rng.uniform(*cfg.cam_back)])
    roll = np.deg2rad(rng.uniform(-cfg.cam_roll_deg, cfg.cam_roll_deg))
    R, T = look_at(center_b, cfg.look_at, roll)
    return cam_a, Camera.from_intrinsics(fx, fx, cx, cy, R, T)


def make_background(cfg: SynthConfig, seed):
    image = None
    if cfg.background == "image":
        if not cfg.background_image:
            raise ValidationError("background 'image' needs background_image")
        image = io.read_png(cfg.background_image)
    name = None
    if image is not None:
        name = "image-" + Path(cfg.background_image).stem
    return Background(cfg.background_depth, cfg.background, seed, image, cfg.background_extent, name=name)


def chain_id(chain):
    blob = json.dumps(chain.to_dict(), sort_keys=True).encode()
    return f"{chain.n_joints}dof-{hashlib.sha1(blob).hexdigest()[:8]}"


def generate_sample(cfg: SynthConfig, seed: int) -> SceneSample:
    if cfg.chain is not None:
        chain = KinematicChain.from_dict(cfg.chain)
    else:
        chain = random_chain(stream(seed, "chain"), cfg)
    traj = random_motion(chain, cfg.n_frames, cfg.step_fraction, derive_seed(seed, "motion"))
    cam_a, cam_b = camera_pair(stream(seed, "camera"), cfg)
    bg_seed = derive_seed(seed, "background") % (2**31)
    bg = make_background(cfg, bg_seed)
    hw = (cfg.height, cfg.width)

    out = {k: [] for k in ("frames_a", "frames_b", "depths_a", "depths_b", "masks_a", "masks_b")}
    centers = []
    for q in traj:
        poses = forward_kinematics(chain, q)
        prims = chain_primitives(chain, poses)
        centers.append(chain_center(chain, poses))
        for tag, cam in (("a", cam_a), ("b", cam_b)):
            r = render(prims, bg, cam, hw)
            out["frames_" + tag].append(r["rgb"])
            out["depths_" + tag].append(r["depth"])
            out["masks_" + tag].append(r["fg_mask"])

    cid = chain_id(chain)
    meta = {
        "seed": int(seed),
        "chain_id": cid,
        "background_id": bg.id,
        "background_seed": int(bg_seed),
        "chain": chain.to_dict(),
        "caption": f"chain-{cid} on {bg.id} background",
        "config": cfg.to_dict(),
    }
    return SceneSample(
        **{k: np.stack(v) for k, v in out.items()},
        cam_a=cam_a, cam_b=cam_b, joint_traj=traj, centers=np.array(centers), meta=meta,
    )


def scene_geometry(s: SceneSample, frame):
    """Primitives and background that produced frame ``frame`` of ``s``."""
    chain = KinematicChain.from_dict(s.meta["chain"])
    prims = chain_primitives(chain, forward_kinematics(chain, s.joint_traj[frame]))
    bg = make_background(SynthConfig.from_dict(s.meta["config"]), s.meta["background_seed"])
    return prims, bg


def visibility_oracle(s: SceneSample, frame, src="a", tgt="b"):
    """Target-view pixels whose surface point is seen by the source camera.

    Built from the renderer alone: each target pixel's surface point is
    re-cast from the source camera and must be the first hit and land inside
    the source image.
    """
    _, depth, _, cam_t = s.view(tgt)
    cam_s = s.view(src)[3]
    H, W = depth.shape[1:]
    prims, bg = scene_geometry(s, frame)
    X = cam_t.center + depth[frame].reshape(-1, 1) * pixel_rays(cam_t, (H, W))
    vis = visible_from(cam_s, X, prims, bg)
    uv = project_points(cam_s.world_to_camera(X), cam_s.K)
    inside = (uv[:, 0] >= -0.5) & (uv[:, 0] < W - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < H - 0.5)
    return (vis & inside).reshape(H, W)


def anchor_pixels(s: SceneSample, view="a", depth_noise=0.0, seed=0):
    """Arm centre of every frame as seen from ``view``: pixel plus camera depth.

    ``depth_noise`` is a relative standard deviation applied to the depths.
    """
    cam = s.view(view)[3]
    P = cam.world_to_camera(s.centers)
    uv = project_points(P, cam.K)
    z = P[:, 2].copy()
    if depth_noise:
        z *= 1.0 + depth_noise * stream(seed, "depth-noise").standard_normal(len(z))
    return [Pixel(u, d) for u, d in zip(uv, z)]


def anchor_ground_truth(s: SceneSample, indices, view="b"):
    """Projection into ``view`` of the mean true centre over ``indices``."""
    cam = s.view(view)[3]
    P = cam.world_to_camera(s.centers[list(indices)])
    return project_points(P.mean(axis=0), cam.K)


def check_sample(s: SceneSample):
    """Raise ``ValidationError`` if a sample breaks its invariants."""
    n = s.n_frames
    for name in ("frames_b", "depths_a", "depths_b", "masks_a", "masks_b", "joint_traj", "centers"):
        if len(getattr(s, name)) != n:
            raise ValidationError(f"{name} has {len(getattr(s, name))} frames, expected {n}")
    from .render import background_depth

    hw = s.depths_a.shape[1:]
    for tag in ("a", "b"):
        frames, depths, masks, cam = s.view(tag)
        if frames.min() < 0 or frames.max() > 1:
            raise ValidationError(f"view {tag}: colours outside [0, 1]")
        bg = background_depth(Background(s.meta["config"]["background_depth"]), cam, hw)
        if np.any(masks & ~(depths < bg)):
            raise ValidationError(f"view {tag}: foreground pixel not in front of the background")


def write_sample(sample: SceneSample, path):
    path = Path(path)
    for tag in ("a", "b"):
        frames, depths, masks, cam = sample.view(tag)
        d = path / f"view_{tag}"
        d.mkdir(parents=True, exist_ok=True)
        for i in range(len(frames)):
            io.write_png(d / f"frame_{i:04d}.png", frames[i])
            io.write_zbuf(d / f"depth_{i:04d}.f32", depths[i])
            io.write_png(d / f"mask_{i:04d}.png", masks[i])
        io.write_json(d / "camera.json", cam.to_dict())
    meta = dict(sample.meta)
    meta["joint_traj"] = sample.joint_traj.tolist()
    meta["centers"] = sample.centers.tolist()
    io.write_json(path / "meta.json", meta)


def load_view(path, cam: Camera = None):
    """Frames, depths, masks and camera of one view directory.

    ``cam`` replaces ``camera.json``, which then need not exist.
    """
    path = Path(path)
    frames = sorted(path.glob("frame_*.png"))
    if not frames:
        raise ValidationError(f"{path}: no frames")
    rgb = np.stack([io.read_png(p)[..., :3] for p in frames])
    depth = np.stack([io.read_zbuf(path / p.name.replace("frame_", "depth_").replace(".png", ".f32"))
                      for p in frames]).astype(np.float64)
    masks = []
    for p in frames:
        m = path / p.name.replace("frame_", "mask_")
        masks.append(io.read_mask(m) if m.exists() else np.zeros(depth.shape[1:], dtype=bool))
    if cam is None:
        cam = Camera.from_dict(io.read_json(path / "camera.json"))
    return rgb, depth, np.stack(masks), cam


def load_sample(path) -> SceneSample:
    path = Path(path)
    fa, da, ma, ca = load_view(path / "view_a")
    fb, db, mb, cb = load_view(path / "view_b")
    meta = io.read_json(path / "meta.json")
    traj = np.asarray(meta.pop("joint_traj"))
    centers = np.asarray(meta.pop("centers"))
    return SceneSample(fa, fb, da, db, ma, mb, ca, cb, traj, centers, meta)


def list_samples(root):
    root = Path(root)
    if (root / "meta.json").exists():
        return [root]
    found = sorted(p.parent for p in root.glob("*/meta.json"))
    if not found:
        raise ValidationError(f"{root}: no samples found")
    return found


def sample_seed(seed, index):
    return derive_seed(seed, "sample", index)


def _gen_one(job):
    cfg_dict, seed, index, out = job
    cfg = SynthConfig.from_dict(cfg_dict)
    sample = generate_sample(cfg, sample_seed(seed, index))
    write_sample(sample, Path(out) / f"sample_{index:05d}")
    return index


def generate_dataset(cfg: SynthConfig, out, num_samples, seed, workers=1):
    """Generate ``num_samples`` samples; output is independent of ``workers``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), seed, i, str(out)) for i in range(num_samples)]
    if workers <= 1:
        for j in jobs:
            _gen_one(j)
            log.info("sample %d done", j[2])
    else:
        with get_context("spawn").Pool(workers) as pool:
            for i in pool.imap_unordered(_gen_one, jobs):
                log.info("sample %d done", i)
    return [out / f"sample_{i:05d}" for i in range(num_samples)]
