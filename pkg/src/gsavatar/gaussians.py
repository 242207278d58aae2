"""Gaussian sets sampled on the body template, and pixel-aligned Gaussian maps.

A :class:`GaussianSet` is an immutable struct-of-arrays over N_H splats with
a stable ordering: index k always refers to the same template surface point
throughout the pipeline.  :class:`GaussianMap` pairs lay every Gaussian out
on a front/back pixel grid with a one-to-one pixel-to-Gaussian assignment so
image-space predictors can emit per-Gaussian properties.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import quats
from .bodies import Pose, Skeleton, lbs_points
from .cameras import Camera


class DegenerateMeshError(ValueError):
    """Template mesh has a zero-area face."""


class MapCapacityError(ValueError):
    """Gaussian map resolution cannot host all Gaussians."""


@dataclass(frozen=True)
class Gaussian:
    """Single-splat view; the pipeline operates on GaussianSet arrays."""

    mean: np.ndarray  # (3,) canonical-space meters
    rotation: np.ndarray  # (4,) unit quaternion
    log_scale: np.ndarray  # (3,) log-meters
    color: np.ndarray  # (3,) in [0, 1]
    opacity_raw: float  # pre-sigmoid
    skin_weights: np.ndarray  # (J,) simplex

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_raw)))


@dataclass(frozen=True)
class GaussianSet:
    means: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions
    log_scales: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]
    opacities_raw: np.ndarray  # (N,) pre-sigmoid
    skin_weights: np.ndarray  # (N, J)
    head_indices: np.ndarray  # sorted unique subset of range(N)
    # template provenance (fixed at sampling time)
    normals: np.ndarray = field(repr=False, default=None)  # (N, 3) outward
    uvs: np.ndarray = field(repr=False, default=None)  # (N, 2) atlas coords
    capsule_ids: np.ndarray = field(repr=False, default=None)  # (N,)

    def __post_init__(self):
        n = self.means.shape[0]
        qn = np.linalg.norm(self.rotations, axis=-1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions within 1e-6")
        if not np.all(np.isfinite(self.log_scales)):
            raise ValueError("log scales must be finite")
        w = self.skin_weights
        if np.any(w < -1e-9) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("skin weights must be a simplex row within 1e-6")
        h = np.asarray(self.head_indices)
        if h.size and (h.min() < 0 or h.max() >= n or np.unique(h).size != h.size):
            raise ValueError("head_indices must be a duplicate-free subset of range(N)")
        object.__setattr__(self, "head_indices", np.sort(h).astype(np.int64))

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, k: int) -> Gaussian:
        return Gaussian(
            self.means[k],
            self.rotations[k],
            self.log_scales[k],
            self.colors[k],
            float(self.opacities_raw[k]),
            self.skin_weights[k],
        )

    @property
    def num_joints(self) -> int:
        return self.skin_weights.shape[1]

    @property
    def body_indices(self) -> np.ndarray:
        mask = np.ones(len(self), bool)
        mask[self.head_indices] = False
        return np.flatnonzero(mask)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacities_raw))

    def with_(self, **kwargs) -> "GaussianSet":
        return replace(self, **kwargs)

    def subset(self, idx: np.ndarray) -> "GaussianSet":
        idx = np.asarray(idx)
        pos = {int(k): i for i, k in enumerate(idx)}
        head = np.array([pos[int(k)] for k in self.head_indices if int(k) in pos], np.int64)
        return GaussianSet(
            self.means[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.colors[idx],
            self.opacities_raw[idx],
            self.skin_weights[idx],
            head,
            normals=None if self.normals is None else self.normals[idx],
            uvs=None if self.uvs is None else self.uvs[idx],
            capsule_ids=None if self.capsule_ids is None else self.capsule_ids[idx],
        )


def concatenate_sets(a: GaussianSet, b: GaussianSet) -> GaussianSet:
    """Union of two splat sets (scene composition); head indices from `a`."""
    jb = max(a.num_joints, b.num_joints)

    def pad(w):
        out = np.zeros((w.shape[0], jb))
        out[:, : w.shape[1]] = w
        return out

    return GaussianSet(
        np.concatenate([a.means, b.means]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.log_scales, b.log_scales]),
        np.concatenate([a.colors, b.colors]),
        np.concatenate([a.opacities_raw, b.opacities_raw]),
        np.concatenate([pad(a.skin_weights), pad(b.skin_weights)]),
        a.head_indices.copy(),
    )


def make_template(
    skeleton: Skeleton,
    canonical_pose: Pose,
    density: float,
    seed: int = 0,
    base_color: float = 0.5,
    base_opacity: float = 0.9,
) -> GaussianSet:
    """Sample N_H Gaussians uniformly per surface area on the posed template.

    N_H = round(density * total surface area).  Skin weights are copied from
    the nearest vertex of the sampled face; Gaussians on head capsules form
    head_indices.  Deterministic per seed.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    mesh = skeleton.template_mesh
    verts = mesh.vertices
    identity_canonical = (
        np.allclose(canonical_pose.joint_rotations, skeleton.canonical_pose().joint_rotations)
        and np.allclose(canonical_pose.root_translation, 0.0)
    )
    if not identity_canonical:
        verts = lbs_points(verts, mesh.weights, skeleton, canonical_pose)
    a, b, c = verts[mesh.faces[:, 0]], verts[mesh.faces[:, 1]], verts[mesh.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if np.any(areas <= 1e-12):
        bad = int(np.argmin(areas))
        raise DegenerateMeshError(f"face {bad} has zero area; cannot area-sample template")
    total = areas.sum()

    n = max(1, int(round(density * total)))
    rng = np.random.default_rng(seed)
    fidx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    w0 = 1.0 - r1 - r2
    bary = np.stack([w0, r1, r2], axis=1)

    tri = mesh.faces[fidx]
    means = np.einsum("nk,nkd->nd", bary, verts[tri])
    normals = np.einsum("nk,nkd->nd", bary, mesh.normals[tri])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    uvs = np.einsum("nk,nkd->nd", bary, mesh.uvs[tri])
    nearest = tri[np.arange(n), np.argmax(bary, axis=1)]
    weights = mesh.weights[nearest]
    capsule_ids = mesh.vertex_capsule[nearest]

    head_caps = {i for i, capd in enumerate(mesh.capsules) if capd.is_head}
    head_idx = np.flatnonzero(np.isin(capsule_ids, list(head_caps)))

    spacing = np.sqrt(total / n)
    log_scales = np.full((n, 3), np.log(0.6 * spacing))
    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    colors = np.full((n, 3), base_color)
    opacity_raw = float(np.log(base_opacity / (1 - base_opacity)))

    return GaussianSet(
        means=means,
        rotations=rotations,
        log_scales=log_scales,
        colors=colors,
        opacities_raw=np.full(n, opacity_raw),
        skin_weights=weights,
        head_indices=head_idx,
        normals=normals,
        uvs=uvs,
        capsule_ids=capsule_ids,
    )


# ---------------------------------------------------------------------------
# Gaussian maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMap:
    width: int
    height: int
    pixel_to_gaussian: np.ndarray  # (H, W) int64, -1 = empty
    channels: np.ndarray  # (H, W, C) feature planes (posed positions)

    @property
    def occupied(self) -> np.ndarray:
        return self.pixel_to_gaussian >= 0

    def gaussian_pixels(self) -> dict[int, tuple[int, int]]:
        ys, xs = np.nonzero(self.occupied)
        return {int(self.pixel_to_gaussian[y, x]): (int(y), int(x)) for y, x in zip(ys, xs)}


def _nearest_free_pixel(occ: np.ndarray, y: int, x: int):
    """Closest unoccupied pixel by squared distance, ties broken by (y, x)."""
    H, W = occ.shape
    best = None
    best_d = None
    for r in range(0, max(H, W)):
        y0, y1 = max(0, y - r), min(H - 1, y + r)
        x0, x1 = max(0, x - r), min(W - 1, x + r)
        for yy in range(y0, y1 + 1):
            for xx in range(x0, x1 + 1):
                if max(abs(yy - y), abs(xx - x)) != r or occ[yy, xx]:
                    continue
                d = (yy - y) ** 2 + (xx - x) ** 2
                if best is None or d < best_d or (d == best_d and (yy, xx) < best):
                    best, best_d = (yy, xx), d
        if best is not None and best_d <= (r + 1) ** 2 - 1:
            return best
    return best


def _assign_to_map(uv: np.ndarray, depth: np.ndarray, order: np.ndarray, width: int, height: int):
    """Place Gaussians on a grid: nearest-depth-wins, losers relocate to the
    nearest free pixel (deterministic scan order)."""
    p2g = np.full((height, width), -1, np.int64)
    px = np.clip(np.round(uv[:, 0]).astype(int), 0, width - 1)
    py = np.clip(np.round(uv[:, 1]).astype(int), 0, height - 1)
    displaced = []
    for k in order:
        y, x = py[k], px[k]
        cur = p2g[y, x]
        if cur < 0:
            p2g[y, x] = k
        elif depth[k] < depth[cur]:
            p2g[y, x] = k
            displaced.append(cur)
        else:
            displaced.append(k)
    occ = p2g >= 0
    for k in displaced:
        spot = _nearest_free_pixel(occ, py[k], px[k])
        p2g[spot] = k
        occ[spot] = True
    return p2g


def build_gaussian_maps(
    gset: GaussianSet,
    pose: Pose,
    front_cam: Camera,
    back_cam: Camera,
    skeleton: Skeleton,
    map_size: int = 64,
):
    """Front/back Gaussian maps at `pose`; channels hold posed 3D positions.

    Each Gaussian lands in exactly one map, picked by the sign of the posed
    surface normal against the front camera's viewing direction.  Pixel
    collisions resolve nearest-depth-wins with displaced Gaussians moved to
    the nearest free pixel.
    """
    n = len(gset)
    if gset.normals is None:
        raise ValueError("gaussian set lacks template normals; cannot split front/back")
    posed = lbs_points(gset.means, gset.skin_weights, skeleton, pose)
    posed_normals = lbs_points(gset.means + 1e-4 * gset.normals, gset.skin_weights, skeleton, pose) - posed
    posed_normals /= np.linalg.norm(posed_normals, axis=1, keepdims=True)

    # front camera's viewing direction in world space (+z row of R)
    fwd = quats.to_matrix(front_cam.rotation)[2]
    front_mask = posed_normals @ (-fwd) >= 0.0  # normal faces the camera

    maps = []
    for cam, mask in ((front_cam, front_mask), (back_cam, ~front_mask)):
        idx = np.flatnonzero(mask)
        if idx.size > map_size * map_size:
            need = int(np.ceil(np.sqrt(idx.size)))
            raise MapCapacityError(
                f"{idx.size} Gaussians assigned to a {map_size}x{map_size} map; need at least {need}x{need}"
            )
        uv_full, depth_full = cam.project(posed)
        uv_scaled = uv_full * np.array([map_size / cam.width, map_size / cam.height])
        order = idx[np.argsort(depth_full[idx], kind="stable")]  # near-to-far, index tie-break
        p2g = _assign_to_map(uv_scaled, depth_full, order, map_size, map_size)
        channels = np.zeros((map_size, map_size, 3))
        occ = p2g >= 0
        channels[occ] = posed[p2g[occ]]
        maps.append(GaussianMap(map_size, map_size, p2g, channels))

    front_map, back_map = maps
    assigned = np.concatenate(
        [front_map.pixel_to_gaussian[front_map.occupied], back_map.pixel_to_gaussian[back_map.occupied]]
    )
    assert np.array_equal(np.sort(assigned), np.arange(n)), "every Gaussian must land in exactly one map"
    return front_map, back_map


def refill_map_channels(gmap: GaussianMap, positions: np.ndarray) -> GaussianMap:
    """New channels for a fixed pixel layout (pose-dependent position planes)."""
    channels = np.zeros((gmap.height, gmap.width, positions.shape[1]))
    occ = gmap.occupied
    channels[occ] = positions[gmap.pixel_to_gaussian[occ]]
    return GaussianMap(gmap.width, gmap.height, gmap.pixel_to_gaussian.copy(), channels)
