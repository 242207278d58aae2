"""Procedural capsule-based articulated body: skeleton, poses, template mesh.

The default rig has 16 joints (one of them the head) arranged in an A-pose;
the rest configuration doubles as the canonical pose (identity rotations,
zero root translation).  Each bone carries a capsule whose surface supplies
the template mesh: per-vertex skinning weights, UV coordinates in a global
chart-grid atlas, and outward normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quats


@dataclass(frozen=True)
class Pose:
    """Per-joint local rotations (unit quaternions) plus root translation."""

    joint_rotations: np.ndarray  # (J, 4)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        q = np.asarray(self.joint_rotations, np.float64)
        t = np.asarray(self.root_translation, np.float64)
        if q.ndim != 2 or q.shape[1] != 4:
            raise ValueError(f"joint_rotations must be (J, 4), got {q.shape}")
        norms = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("pose quaternions must be unit norm within 1e-6")
        object.__setattr__(self, "joint_rotations", q)
        object.__setattr__(self, "root_translation", t.reshape(3))

    @property
    def num_joints(self) -> int:
        return self.joint_rotations.shape[0]

    def with_root_yaw(self, yaw: float) -> "Pose":
        """Compose an extra world-frame yaw (about +y) onto the root joint."""
        q = self.joint_rotations.copy()
        yaw_q = quats.from_axis_angle(np.array([0.0, yaw, 0.0]))
        q[0] = quats.multiply(yaw_q, q[0])
        return Pose(q, self.root_translation)

    def perturbed(self, rng: np.random.Generator, sigma_joint: float, sigma_root: float = 0.0) -> "Pose":
        """Tangent-space Gaussian noise on every joint plus root translation."""
        deltas = rng.normal(0.0, sigma_joint, size=(self.num_joints, 3)) if sigma_joint > 0 else np.zeros((self.num_joints, 3))
        q = quats.multiply(self.joint_rotations, quats.from_axis_angle(deltas))
        t = self.root_translation + (rng.normal(0.0, sigma_root, size=3) if sigma_root > 0 else 0.0)
        return Pose(quats.normalize(q), t)


@dataclass(frozen=True)
class Capsule:
    name: str
    joint_a: int  # proximal joint (weights fade from here)
    joint_b: int  # distal joint
    radius: float
    is_head: bool = False
    mirror: str | None = None  # name of the left/right partner capsule


@dataclass(frozen=True)
class CapsuleMesh:
    vertices: np.ndarray  # (V, 3) rest-space positions
    faces: np.ndarray  # (F, 3) int32
    uvs: np.ndarray  # (V, 2) global atlas coordinates in [0, 1]
    normals: np.ndarray  # (V, 3) outward unit normals
    weights: np.ndarray  # (V, J) skinning weights, rows sum to 1
    vertex_capsule: np.ndarray  # (V,) capsule index per vertex
    capsules: tuple[Capsule, ...]
    uv_cells: np.ndarray  # (C, 4) [u0, v0, u1, v1] atlas cell per capsule

    def __post_init__(self):
        rows = self.weights.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-6):
            raise ValueError("template mesh skin weight rows must sum to 1")

    @property
    def face_capsule(self) -> np.ndarray:
        return self.vertex_capsule[self.faces[:, 0]]

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def mirror_capsule_index(self) -> np.ndarray:
        """For each capsule, the index of its left/right partner (self if central)."""
        names = {c.name: i for i, c in enumerate(self.capsules)}
        out = np.arange(len(self.capsules))
        for i, c in enumerate(self.capsules):
            if c.mirror is not None:
                out[i] = names[c.mirror]
        return out


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: np.ndarray  # (J,) int, root = -1
    rest_offsets: np.ndarray  # (J, 3) offset from parent (root: from world origin)
    template_mesh: CapsuleMesh = field(repr=False)

    def __post_init__(self):
        parents = np.asarray(self.parents, np.int64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", np.asarray(self.rest_offsets, np.float64))
        roots = np.flatnonzero(parents < 0)
        if roots.size != 1 or roots[0] != 0:
            raise ValueError("skeleton must have exactly one root at index 0")
        for j in range(1, parents.size):
            if not 0 <= parents[j] < j:
                raise ValueError("parents must reference earlier joints (single-rooted tree)")

    @property
    def num_joints(self) -> int:
        return self.parents.size

    def canonical_pose(self) -> Pose:
        J = self.num_joints
        q = np.tile(quats.IDENTITY, (J, 1))
        return Pose(q, np.zeros(3))

    def rest_joint_positions(self) -> np.ndarray:
        pos = np.zeros((self.num_joints, 3))
        for j in range(self.num_joints):
            p = self.parents[j]
            pos[j] = self.rest_offsets[j] if p < 0 else pos[p] + self.rest_offsets[j]
        return pos

    @property
    def head_joint(self) -> int:
        return self.joint_names.index("head")


def forward_kinematics(skeleton: Skeleton, pose: Pose):
    """World transforms per joint.

    Returns (R, t, q): rotations (J, 3, 3), translations (J, 3) and the
    world-frame quaternions (J, 4).  The root composes against an implicit
    parent of (identity, root_translation), so a pure root rotation rotates
    the body about the world origin.
    """
    if pose.num_joints != skeleton.num_joints:
        raise ValueError(f"pose has {pose.num_joints} joints, skeleton has {skeleton.num_joints}")
    J = skeleton.num_joints
    q = np.zeros((J, 4))
    t = np.zeros((J, 3))
    for j in range(J):
        p = skeleton.parents[j]
        if p < 0:
            q[j] = pose.joint_rotations[j]
            t[j] = pose.root_translation + quats.rotate(q[j], skeleton.rest_offsets[j])
        else:
            q[j] = quats.multiply(q[p], pose.joint_rotations[j])
            t[j] = t[p] + quats.rotate(q[p], skeleton.rest_offsets[j])
    return quats.to_matrix(q), t, q


def rigid_inverse(R: np.ndarray, t: np.ndarray):
    """Inverse of rigid transforms given as (..., 3, 3), (..., 3)."""
    Rinv = np.swapaxes(R, -1, -2)
    tinv = -np.einsum("...ij,...j->...i", Rinv, t)
    return Rinv, tinv


def lbs_points(points: np.ndarray, weights: np.ndarray, skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Value-level LBS of rest-space points (no tape); used by the simulator
    and the mesh renderer.  The differentiable path lives in skinning.py."""
    R, t, _ = forward_kinematics(skeleton, pose)
    R0, t0, _ = forward_kinematics(skeleton, skeleton.canonical_pose())
    R0i, t0i = rigid_inverse(R0, t0)
    # per-joint rest->posed transform
    Arot = np.einsum("jab,jbc->jac", R, R0i)
    Atr = t + np.einsum("jab,jb->ja", R, t0i)
    blended_R = np.einsum("nj,jab->nab", weights, Arot)
    blended_t = weights @ Atr
    return np.einsum("nab,nb->na", blended_R, points) + blended_t


# ---------------------------------------------------------------------------
# default 16-joint humanoid
# ---------------------------------------------------------------------------

_JOINTS = [
    # name, parent, offset (A-pose, meters, y up, facing +z)
    ("pelvis", -1, (0.0, 0.95, 0.0)),
    ("spine", 0, (0.0, 0.15, 0.0)),
    ("chest", 1, (0.0, 0.20, 0.0)),
    ("head", 2, (0.0, 0.25, 0.0)),
    ("l_shoulder", 2, (0.18, 0.10, 0.0)),
    ("l_elbow", 4, (0.20, -0.20, 0.0)),
    ("l_wrist", 5, (0.18, -0.18, 0.0)),
    ("r_shoulder", 2, (-0.18, 0.10, 0.0)),
    ("r_elbow", 7, (-0.20, -0.20, 0.0)),
    ("r_wrist", 8, (-0.18, -0.18, 0.0)),
    ("l_hip", 0, (0.10, -0.05, 0.0)),
    ("l_knee", 10, (0.0, -0.42, 0.0)),
    ("l_ankle", 11, (0.0, -0.40, 0.0)),
    ("r_hip", 0, (-0.10, -0.05, 0.0)),
    ("r_knee", 13, (0.0, -0.42, 0.0)),
    ("r_ankle", 14, (0.0, -0.40, 0.0)),
]

_CAPSULES = [
    # name, joint_a, joint_b, radius, is_head, mirror partner
    ("torso_lower", "pelvis", "spine", 0.13, False, None),
    ("torso_upper", "spine", "chest", 0.14, False, None),
    ("neck_head", "chest", "head", 0.10, True, None),
    ("l_clavicle", "chest", "l_shoulder", 0.055, False, "r_clavicle"),
    ("l_upper_arm", "l_shoulder", "l_elbow", 0.050, False, "r_upper_arm"),
    ("l_forearm", "l_elbow", "l_wrist", 0.042, False, "r_forearm"),
    ("r_clavicle", "chest", "r_shoulder", 0.055, False, "l_clavicle"),
    ("r_upper_arm", "r_shoulder", "r_elbow", 0.050, False, "l_upper_arm"),
    ("r_forearm", "r_elbow", "r_wrist", 0.042, False, "l_forearm"),
    ("l_hip_link", "pelvis", "l_hip", 0.085, False, "r_hip_link"),
    ("l_thigh", "l_hip", "l_knee", 0.080, False, "r_thigh"),
    ("l_shin", "l_knee", "l_ankle", 0.058, False, "r_shin"),
    ("r_hip_link", "pelvis", "r_hip", 0.085, False, "l_hip_link"),
    ("r_thigh", "r_hip", "r_knee", 0.080, False, "l_thigh"),
    ("r_shin", "r_knee", "r_ankle", 0.058, False, "l_shin"),
]

_FORWARD = np.array([0.0, 0.0, 1.0])  # subject faces +z


def _capsule_frame(axis: np.ndarray):
    """Orthonormal frame (xhat, yhat, zhat) with zhat the capsule axis and
    xhat the projection of the body's facing direction (mirror-consistent)."""
    zhat = axis / np.linalg.norm(axis)
    f = _FORWARD - np.dot(_FORWARD, zhat) * zhat
    if np.linalg.norm(f) < 1e-6:
        f = np.array([1.0, 0.0, 0.0]) - zhat[0] * zhat
    xhat = f / np.linalg.norm(f)
    yhat = np.cross(zhat, xhat)
    return xhat, yhat, zhat


def _blend_profile(t: np.ndarray) -> np.ndarray:
    """Distal-joint weight share along a capsule: 0 near the proximal joint,
    0.5 at the distal end (smoothstep ramp on the last 45%)."""
    s = np.clip((t - 0.55) / 0.45, 0.0, 1.0)
    return 0.5 * (3 * s**2 - 2 * s**3)


def build_capsule_mesh(
    joint_names: list[str],
    joint_positions: np.ndarray,
    capsules: list[Capsule],
    num_joints: int,
    segments: int = 16,
    cap_rings: int = 3,
    cyl_rings: int = 6,
    uv_grid: int = 4,
    uv_pad: float = 0.012,
) -> CapsuleMesh:
    """Triangulated capsule surfaces with per-vertex UV/weights/normals.

    Hemisphere caps are truncated slightly short of the poles so every face
    has nonzero area.  Each capsule owns one cell of a uv_grid x uv_grid
    atlas chart; u wraps the circumference (seam duplicated), v runs along
    the axis from the proximal to the distal cap.
    """
    verts, uvs, normals, weights, vcaps, faces = [], [], [], [], [], []
    uv_cells = np.zeros((len(capsules), 4))
    phi_max = np.pi / 2 - 0.15

    for ci, cap in enumerate(capsules):
        ja, jb = cap.joint_a, cap.joint_b
        a = joint_positions[ja]
        b = joint_positions[jb]
        xhat, yhat, zhat = _capsule_frame(b - a)
        L = np.linalg.norm(b - a)
        r = cap.radius

        cell_r, cell_c = divmod(ci, uv_grid)
        u0 = cell_c / uv_grid + uv_pad
        u1 = (cell_c + 1) / uv_grid - uv_pad
        v0 = cell_r / uv_grid + uv_pad
        v1 = (cell_r + 1) / uv_grid - uv_pad
        uv_cells[ci] = (u0, v0, u1, v1)

        # profile: (axial station s in [0,1] along a->b incl. caps, radial dir scale, axial offset)
        stations = []
        for k in range(cap_rings):
            phi = -phi_max + (phi_max) * k / cap_rings  # bottom cap: phi in [-phi_max, 0)
            stations.append(("a", phi))
        for k in range(cyl_rings + 1):
            stations.append(("cyl", k / cyl_rings))
        for k in range(1, cap_rings + 1):
            phi = phi_max * k / cap_rings  # top cap: phi in (0, phi_max]
            stations.append(("b", phi))

        n_rings = len(stations)
        base = len(verts)
        for ri, (kind, s) in enumerate(stations):
            vloc = ri / (n_rings - 1)
            for si in range(segments + 1):
                u = si / segments
                ang = 2 * np.pi * u
                radial = np.cos(ang) * xhat + np.sin(ang) * yhat
                if kind == "cyl":
                    center = a + s * (b - a)
                    p = center + r * radial
                    n = radial
                    t_axial = s
                elif kind == "a":
                    p = a + r * (np.cos(s) * radial + np.sin(s) * zhat)
                    n = np.cos(s) * radial + np.sin(s) * zhat
                    t_axial = 0.0
                else:
                    p = b + r * (np.cos(s) * radial + np.sin(s) * zhat)
                    n = np.cos(s) * radial + np.sin(s) * zhat
                    t_axial = 1.0
                verts.append(p)
                normals.append(n)
                uvs.append((u0 + u * (u1 - u0), v0 + vloc * (v1 - v0)))
                wrow = np.zeros(num_joints)
                wb = float(_blend_profile(np.array(t_axial)))
                wrow[jb] = wb
                wrow[ja] += 1.0 - wb
                weights.append(wrow)
                vcaps.append(ci)

        cols = segments + 1
        for ri in range(n_rings - 1):
            for si in range(segments):
                i0 = base + ri * cols + si
                i1 = i0 + 1
                i2 = i0 + cols
                i3 = i2 + 1
                faces.append((i0, i2, i1))
                faces.append((i1, i2, i3))

    return CapsuleMesh(
        vertices=np.asarray(verts),
        faces=np.asarray(faces, np.int32),
        uvs=np.asarray(uvs),
        normals=np.asarray(normals),
        weights=np.asarray(weights),
        vertex_capsule=np.asarray(vcaps, np.int32),
        capsules=tuple(capsules),
        uv_cells=uv_cells,
    )


def default_skeleton(segments: int = 16, cyl_rings: int = 6) -> Skeleton:
    """The stock 16-joint A-pose humanoid with 15 capsules (head flagged)."""
    names = tuple(j[0] for j in _JOINTS)
    parents = np.array([j[1] for j in _JOINTS])
    offsets = np.array([j[2] for j in _JOINTS])
    name_to_idx = {n: i for i, n in enumerate(names)}
    capsules = [
        Capsule(n, name_to_idx[ja], name_to_idx[jb], r, head, mirror)
        for (n, ja, jb, r, head, mirror) in _CAPSULES
    ]
    pos = np.zeros((len(names), 3))
    for j in range(len(names)):
        p = parents[j]
        pos[j] = offsets[j] if p < 0 else pos[p] + offsets[j]
    mesh = build_capsule_mesh(list(names), pos, capsules, len(names), segments=segments, cyl_rings=cyl_rings)
    return Skeleton(joint_names=names, parents=parents, rest_offsets=offsets, template_mesh=mesh)


def single_capsule_skeleton(radius: float, length: float) -> Skeleton:
    """Two-joint skeleton with one capsule; used by tests and docs."""
    names = ("pelvis", "head")
    parents = np.array([-1, 0])
    offsets = np.array([[0.0, 0.0, 0.0], [0.0, length, 0.0]])
    capsules = [Capsule("body", 0, 1, radius, is_head=True, mirror=None)]
    pos = np.array([[0.0, 0.0, 0.0], [0.0, length, 0.0]])
    mesh = build_capsule_mesh(list(names), pos, capsules, 2, uv_grid=1)
    return Skeleton(joint_names=names, parents=parents, rest_offsets=offsets, template_mesh=mesh)
