"""Analytic ray casting of capsules and spheres over a textured background plane.

Rays for pixel ``u`` start at the camera centre with world direction
``R^T K^-1 [u, 1]``, so the ray parameter of a hit equals its camera-frame
depth. The background is the world plane ``z = depth``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from .kinematics import link_segments

LIGHT_DIR = np.array([-0.3, -0.6, -0.7]) / np.linalg.norm([-0.3, -0.6, -0.7])
AMBIENT = 0.35
_EPS = 1e-9


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float
    color: tuple


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple


@dataclass(frozen=True, eq=False)
class Background:
    """Plane ``z = depth`` in world coordinates.

    ``kind`` is ``"smooth"`` (sum of sinusoids), ``"checker"`` or
    ``"image"`` (billboard of ``image`` spanning ``extent`` world units
    horizontally, centred on the optical axis of the world frame).
    """

    depth: float = 6.0
    kind: str = "smooth"
    seed: int = 0
    image: np.ndarray = None
    extent: float = 8.0
    checker_size: float = 0.5
    name: str = None

    def __post_init__(self):
        if not self.depth > 0:
            raise DomainError("background depth must be positive")
        if self.kind not in ("smooth", "checker", "image"):
            raise DomainError(f"unknown background kind {self.kind!r}")
        if self.kind == "image" and self.image is None:
            raise DomainError("image background needs an image")

    @property
    def id(self):
        return self.name or f"{self.kind}-{self.seed}"

    def texture(self, xy):
        """RGB colour at world plane coordinates ``xy`` (N, 2)."""
        x, y = xy[:, 0], xy[:, 1]
        if self.kind == "checker":
            rng = np.random.default_rng(self.seed)
            c0, c1 = rng.uniform(0.2, 0.9, (2, 3))
            parity = (np.floor(x / self.checker_size) + np.floor(y / self.checker_size)) % 2
            return np.where(parity[:, None] > 0, c1, c0)
        if self.kind == "image":
            return _sample_billboard(self.image, self.extent, x, y)
        rng = np.random.default_rng(self.seed)
        base = rng.uniform(0.3, 0.7, 3)
        out = np.tile(base, (len(x), 1))
        for _ in range(4):
            freq = rng.uniform(0.4, 1.6, 2) * rng.choice([-1, 1], 2)
            phase = rng.uniform(0, 2 * np.pi, 3)
            amp = rng.uniform(0.03, 0.08, 3)
            out += amp * np.sin((x * freq[0] + y * freq[1])[:, None] + phase)
        return np.clip(out, 0.0, 1.0)


def _sample_billboard(image, extent, x, y):
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    scale = w / extent
    col = np.clip(x * scale + (w - 1) / 2, 0, w - 1)
    row = np.clip(y * scale + (h - 1) / 2, 0, h - 1)
    c0 = np.minimum(np.floor(col).astype(int), max(w - 2, 0))
    r0 = np.minimum(np.floor(row).astype(int), max(h - 2, 0))
    fc, fr = (col - c0)[:, None], (row - r0)[:, None]
    c1, r1 = np.minimum(c0 + 1, w - 1), np.minimum(r0 + 1, h - 1)
    img = img[..., :3] if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)
    top = (1 - fc) * img[r0, c0] + fc * img[r0, c1]
    bot = (1 - fc) * img[r1, c0] + fc * img[r1, c1]
    return (1 - fr) * top + fr * bot


def chain_primitives(chain, poses, gripper_scale=1.5):
    """Capsule per link plus a sphere at the end effector."""
    if not chain.links:
        return []
    starts, ends = link_segments(chain, poses)
    prims = [Capsule(tuple(a), tuple(b), l.radius, l.color)
             for a, b, l in zip(starts, ends, chain.links)]
    last = chain.links[-1]
    prims.append(Sphere(tuple(ends[-1]), gripper_scale * last.radius, last.color))
    return prims


def _sphere_hit(o, d, center, r):
    """Distance along unit directions ``d`` to the first hit, inf on miss."""
    oc = o - np.asarray(center)
    b = d @ oc
    c = oc @ oc - r * r
    h = b * b - c
    t = np.full(len(d), np.inf)
    ok = h >= 0
    sq = np.sqrt(np.where(ok, h, 0.0))
    t0, t1 = -b - sq, -b + sq
    near = ok & (t0 > _EPS)
    far = ok & ~near & (t1 > _EPS)
    t[near] = t0[near]
    t[far] = t1[far]
    return t


def _cylinder_hit(o, d, a, b, r):
    ba = np.asarray(b) - np.asarray(a)
    oa = o - np.asarray(a)
    baba = ba @ ba
    bard = d @ ba
    baoa = oa @ ba
    rdoa = d @ oa
    oaoa = oa @ oa
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    h = qb * qb - qa * qc
    t = np.full(len(d), np.inf)
    ok = (h >= 0) & (qa > _EPS * baba)
    safe_a = np.where(ok, qa, 1.0)
    sq = np.sqrt(np.where(ok, h, 0.0))
    for root in ((-qb - sq) / safe_a, (-qb + sq) / safe_a):
        y = baoa + root * bard
        hit = ok & (root > _EPS) & (y > 0) & (y < baba) & (root < t)
        t[hit] = root[hit]
    return t


def _capsule_hit(o, d, cap):
    t = _cylinder_hit(o, d, cap.a, cap.b, cap.radius)
    t = np.minimum(t, _sphere_hit(o, d, cap.a, cap.radius))
    return np.minimum(t, _sphere_hit(o, d, cap.b, cap.radius))


def _capsule_normal(p, cap):
    a, b = np.asarray(cap.a), np.asarray(cap.b)
    ba = b - a
    s = np.clip(((p - a) @ ba) / (ba @ ba), 0.0, 1.0)
    n = p - (a + s[:, None] * ba)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def cast_rays(origin, dirs, primitives, background):
    """Nearest hit for rays ``origin + s * dirs``.

    Returns ``(s, rgb, is_fg)``; ``s`` is in units of ``dirs`` (inf on miss).
    """
    o = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    norm = np.linalg.norm(dirs, axis=1)
    d = dirs / norm[:, None]
    n = len(d)

    best = np.full(n, np.inf)
    owner = np.full(n, -1)
    for k, prim in enumerate(primitives):
        if isinstance(prim, Sphere):
            t = _sphere_hit(o, d, prim.center, prim.radius)
        else:
            t = _capsule_hit(o, d, prim)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = k

    rgb = np.zeros((n, 3))
    is_fg = owner >= 0
    if is_fg.any():
        p = o + best[is_fg, None] * d[is_fg]
        own = owner[is_fg]
        normals = np.zeros_like(p)
        colors = np.zeros_like(p)
        for k, prim in enumerate(primitives):
            sel = own == k
            if not sel.any():
                continue
            if isinstance(prim, Sphere):
                nk = p[sel] - np.asarray(prim.center)
                normals[sel] = nk / np.linalg.norm(nk, axis=1, keepdims=True)
            else:
                normals[sel] = _capsule_normal(p[sel], prim)
            colors[sel] = prim.color
        lambert = np.maximum(normals @ LIGHT_DIR, 0.0)
        rgb[is_fg] = colors * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]

    bg = ~is_fg
    if bg.any():
        dz = d[bg, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (background.depth - o[2]) / dz
        hit = (dz != 0) & (t > _EPS)
        t = np.where(hit, t, np.inf)
        best[bg] = t
        p = o + np.where(hit, t, 0.0)[:, None] * d[bg]
        tex = background.texture(p[:, :2])
        rgb[bg] = np.where(hit[:, None], tex, 0.0)

    return best / norm, rgb, is_fg


def pixel_rays(cam, hw):
    H, W = hw
    rows, cols = np.mgrid[0:H, 0:W]
    uh = np.stack([cols, rows, np.ones_like(cols)], axis=-1).reshape(-1, 3).astype(np.float64)
    return (uh @ cam.K_inv.T) @ cam.R  # camera-frame rays rotated to world


def render(primitives, background: Background, cam, hw):
    """Render RGB, camera-frame depth, and foreground mask."""
    H, W = (int(v) for v in hw)
    if H <= 0 or W <= 0:
        raise DomainError(f"image size must be positive, got {hw!r}")
    s, rgb, fg = cast_rays(cam.center, pixel_rays(cam, (H, W)), primitives, background)
    return {
        "rgb": rgb.reshape(H, W, 3),
        "depth": s.reshape(H, W),
        "fg_mask": fg.reshape(H, W),
    }


def background_depth(background, cam, hw):
    """Depth of the background plane alone at every pixel."""
    return render([], background, cam, hw)["depth"]


def visible_from(cam, points, primitives, background, rel_tol=1e-6):
    """Whether each world point is the first surface seen from ``cam``.

    Only tests occlusion along the ray; the caller handles the image bounds.
    """
    pts = np.asarray(points, dtype=np.float64)
    dirs = pts - cam.center
    s, _, _ = cast_rays(cam.center, dirs, primitives, background)
    return s >= 1.0 - rel_tol
