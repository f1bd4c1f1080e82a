"""Serial kinematic chains built from capsule links.

Each link rotates about its joint axis (expressed in the parent frame at the
joint) and then extends ``length`` along its local +x axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, LimitViolationError
from ..geometry import check_rotation, rot_axis


@dataclass(frozen=True)
class Link:
    length: float
    radius: float
    axis: tuple
    joint_limits: tuple
    color: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if axis.shape != (3,) or not abs(n - 1.0) < 1e-9:
            raise DomainError(f"joint axis must be a unit 3-vector, got {self.axis!r}")
        if not (self.length > 0 and self.radius > 0):
            raise DomainError("link length and radius must be positive")
        lo, hi = self.joint_limits
        if not lo < hi:
            raise DomainError(f"joint limits must satisfy lo < hi, got {self.joint_limits!r}")
        object.__setattr__(self, "axis", tuple(float(v) for v in axis))
        object.__setattr__(self, "joint_limits", (float(lo), float(hi)))
        object.__setattr__(self, "color", tuple(float(v) for v in self.color))

    @property
    def range(self):
        return self.joint_limits[1] - self.joint_limits[0]


def _pose(R=None, t=None):
    M = np.eye(4)
    if R is not None:
        M[:3, :3] = R
    if t is not None:
        M[:3, 3] = t
    return M


@dataclass(frozen=True, eq=False)
class KinematicChain:
    links: tuple
    base_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        B = np.array(self.base_pose, dtype=np.float64)
        if B.shape != (4, 4):
            raise DomainError("base_pose must be a 4x4 rigid transform")
        check_rotation(B[:3, :3])
        B.setflags(write=False)
        object.__setattr__(self, "base_pose", B)

    @property
    def n_joints(self):
        return len(self.links)

    @property
    def limits(self):
        return np.array([l.joint_limits for l in self.links]).reshape(-1, 2)

    def default_pose(self):
        """Mid-range joint angles."""
        return self.limits.mean(axis=1)

    def to_dict(self):
        return {
            "base_pose": [[float(v) for v in row] for row in self.base_pose],
            "links": [
                {"length": l.length, "radius": l.radius, "axis": list(l.axis),
                 "joint_limits": list(l.joint_limits), "color": list(l.color)}
                for l in self.links
            ],
        }

    @classmethod
    def from_dict(cls, d):
        links = [Link(l["length"], l["radius"], tuple(l["axis"]), tuple(l["joint_limits"]),
                      tuple(l.get("color", (0.8, 0.8, 0.8)))) for l in d["links"]]
        return cls(links, np.asarray(d.get("base_pose", np.eye(4)), dtype=np.float64))


def forward_kinematics(chain: KinematicChain, angles):
    """Per-link 4x4 world poses (joint frame, after the joint rotation)."""
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    if len(angles) != chain.n_joints:
        raise DomainError(f"expected {chain.n_joints} joint angles, got {len(angles)}")
    poses = []
    M = chain.base_pose.copy()
    for i, (link, q) in enumerate(zip(chain.links, angles)):
        lo, hi = link.joint_limits
        if not lo <= q <= hi:
            raise LimitViolationError(i, float(q), link.joint_limits)
        M = M @ _pose(rot_axis(link.axis, q))
        poses.append(M.copy())
        M = M @ _pose(t=(link.length, 0.0, 0.0))
    return poses


def link_segments(chain, poses):
    """Start and end points (world) of every link, each (n_links, 3)."""
    starts = np.array([P[:3, 3] for P in poses]).reshape(-1, 3)
    ends = np.array([P[:3, :3] @ (l.length, 0.0, 0.0) + P[:3, 3]
                     for P, l in zip(poses, chain.links)]).reshape(-1, 3)
    return starts, ends


def end_effector(chain, angles):
    poses = forward_kinematics(chain, angles)
    return link_segments(chain, poses)[1][-1]


def chain_center(chain, poses):
    """Mean of all joint positions plus the end effector."""
    starts, ends = link_segments(chain, poses)
    return np.vstack([starts, ends[-1:]]).mean(axis=0)


def random_motion(chain: KinematicChain, n_frames: int, step_fraction: float = 0.01, seed: int = 0):
    """Random walk starting from the default pose.

    Every frame perturbs each joint by ``U(-a, a)`` with
    ``a = step_fraction * (hi - lo)`` and clamps to the limits.
    """
    if n_frames < 1:
        raise DomainError("n_frames must be at least 1")
    if not 0 <= step_fraction <= 1:
        raise DomainError(f"step_fraction must lie in [0, 1], got {step_fraction!r}")
    rng = np.random.default_rng(seed)
    lim = chain.limits
    amp = step_fraction * (lim[:, 1] - lim[:, 0])
    traj = np.empty((n_frames, chain.n_joints))
    traj[0] = chain.default_pose()
    for f in range(1, n_frames):
        step = rng.uniform(-1.0, 1.0, chain.n_joints) * amp
        traj[f] = np.clip(traj[f - 1] + step, lim[:, 0], lim[:, 1])
    return traj
