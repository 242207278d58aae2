"""Differentiable splat rendering: project, depth-sort, alpha-composite.

Gradients flow to Gaussian means, rotations, scales, colors, opacities and
(optionally) to a camera correction delta given as an so(3) tangent vector
plus a translation offset.  Output images are (H, W, 4): RGB over a
transparent background plus the accumulated alpha channel.

Compositing is exact per-pixel sorted blending (no tiles); the sort is a
stable argsort on depth so equal depths break by splat index and input
order never changes the image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quats, splatkernels
from .cameras import Camera
from .gaussians import GaussianSet

COV_FLOOR = 0.1  # px^2, added to both screen-covariance eigenvalues


@dataclass
class Splat2D:
    """Screen-space splats after projection (struct of arrays).

    means2d/covs are tape variables; depths/kept are plain arrays (depth
    ordering and culling are fixed decisions, not differentiated).
    """

    means2d: ad.Var  # (M, 2) pixels
    covs: ad.Var  # (M, 2, 2) symmetric positive-definite
    depths: np.ndarray  # (M,)
    kept: np.ndarray  # (M,) original splat indices surviving the near cull

    def __len__(self) -> int:
        return self.depths.shape[0]


def camera_vars(camera: Camera, tape: ad.Tape, rot_delta: ad.Var | None = None, trans_delta: ad.Var | None = None):
    """World-to-camera rotation matrix / translation as tape vars.

    A correction delta left-composes on the rotation and adds on the
    translation, matching Camera.with_delta.
    """
    if rot_delta is None and trans_delta is None:
        return tape.const(quats.to_matrix(camera.rotation)), tape.const(camera.translation)
    q0 = tape.const(camera.rotation[None, :])
    if rot_delta is not None:
        dq = ad.quat_exp(ad.reshape(rot_delta, (1, 3)))
        q_eff = ad.quat_multiply(dq, q0)
    else:
        q_eff = q0
    R = ad.reshape(ad.quaternion_to_matrix(ad.normalize_rows(q_eff)), (3, 3))
    t = tape.const(camera.translation)
    if trans_delta is not None:
        t = t + trans_delta
    return R, t


def project(
    means: ad.Var,
    rotations: ad.Var,
    scales: ad.Var,
    camera: Camera,
    tape: ad.Tape,
    rot_delta: ad.Var | None = None,
    trans_delta: ad.Var | None = None,
) -> Splat2D:
    """Perspective-project 3D Gaussians to screen splats.

    rotations must already be unit quaternions.  Splats behind the near
    plane are culled; the screen covariance is J Sigma J^T plus a fixed
    isotropic floor so its eigenvalues stay >= COV_FLOOR px^2.
    """
    R, t = camera_vars(camera, tape, rot_delta, trans_delta)
    n = means.shape[0]
    if n == 0:
        return Splat2D(tape.const(np.zeros((0, 2))), tape.const(np.zeros((0, 2, 2))), np.zeros(0), np.zeros(0, int))
    x_cam = ad.matmul(means, ad.transpose(R)) + t  # (N, 3)

    keep = np.flatnonzero(x_cam.value[:, 2] > camera.near)
    if keep.size == 0:
        return Splat2D(tape.const(np.zeros((0, 2))), tape.const(np.zeros((0, 2, 2))), np.zeros(0), keep)
    xk = ad.gather(x_cam, keep)
    rk = ad.gather(rotations, keep)
    sk = ad.gather(scales, keep)

    x = xk[:, 0:1]
    y = xk[:, 1:2]
    z = xk[:, 2:3]
    u = x / z * camera.fx + tape.const(camera.cx)
    v = y / z * camera.fy + tape.const(camera.cy)
    means2d = ad.concat([u, v], axis=1)

    R3 = ad.quaternion_to_matrix(rk)  # (M, 3, 3)
    R3c = ad.matmul(R, R3)  # rotate into the camera frame
    RS = ad.mul(R3c, ad.reshape(sk, (keep.size, 1, 3)))
    cov3 = ad.matmul(RS, ad.transpose(RS, (0, 2, 1)))

    zeros = tape.const(np.zeros((keep.size, 1)))
    fx_z = tape.const(camera.fx) / z
    fy_z = tape.const(camera.fy) / z
    z2 = z * z
    j_row0 = [fx_z, zeros, -(x * camera.fx) / z2]
    j_row1 = [zeros, fy_z, -(y * camera.fy) / z2]
    J = ad.reshape(ad.concat(j_row0 + j_row1, axis=1), (keep.size, 2, 3))
    cov2 = ad.matmul(ad.matmul(J, cov3), ad.transpose(J, (0, 2, 1)))
    cov2 = cov2 + tape.const(COV_FLOOR * np.eye(2))

    return Splat2D(means2d, cov2, np.asarray(z.value[:, 0], np.float64).copy(), keep)


def composite(splats: Splat2D, colors: ad.Var, alphas: ad.Var, width: int, height: int, tape: ad.Tape) -> ad.Var:
    """Front-to-back over-compositing into an (H, W, 4) RGBA image."""
    m = len(splats)
    if m == 0:
        return tape.const(np.zeros((height, width, 4)))
    order = np.argsort(splats.depths, kind="stable").astype(np.int64)
    dtype = tape.dtype
    means_v = np.ascontiguousarray(splats.means2d.value, dtype)
    covs_v = np.ascontiguousarray(splats.covs.value, dtype)
    colors_v = np.ascontiguousarray(colors.value, dtype)
    alphas_v = np.ascontiguousarray(alphas.value, dtype)

    out = np.zeros((height, width, 4), dtype)
    tbuf = np.ones((height, width), dtype)
    splatkernels.composite_forward(order, means_v, covs_v, colors_v, alphas_v, out, tbuf)
    out[:, :, 3] = 1.0 - tbuf

    memo: dict[int, tuple] = {}

    def run_backward(g):
        key = id(g)
        if key not in memo:
            g_means = np.zeros_like(means_v)
            g_covs = np.zeros_like(covs_v)
            g_colors = np.zeros_like(colors_v)
            g_alphas = np.zeros_like(alphas_v)
            tb = np.ones((height, width), dtype)
            prefix = np.zeros((height, width, 3), dtype)
            splatkernels.composite_backward(
                order,
                means_v,
                covs_v,
                colors_v,
                alphas_v,
                np.ascontiguousarray(out[:, :, :3]),
                tbuf,
                np.ascontiguousarray(g, dtype),
                g_means,
                g_covs,
                g_colors,
                g_alphas,
                tb,
                prefix,
            )
            memo.clear()
            memo[key] = (g_means, g_covs, g_colors, g_alphas)
        return memo[key]

    return ad.fused_primitive(
        tape,
        out,
        [splats.means2d, splats.covs, colors, alphas],
        [
            lambda g: run_backward(g)[0],
            lambda g: run_backward(g)[1],
            lambda g: run_backward(g)[2],
            lambda g: run_backward(g)[3],
        ],
    )


def render(
    posed_means: ad.Var,
    posed_rotations: ad.Var,
    scales: ad.Var,
    colors: ad.Var,
    opacities: ad.Var,
    camera: Camera,
    tape: ad.Tape,
    rot_delta: ad.Var | None = None,
    trans_delta: ad.Var | None = None,
) -> ad.Var:
    """Differentiable end-to-end render of decoded Gaussian attributes.

    opacities/colors are the decoded [0,1] quantities; rotations must be
    unit quaternions.  Returns an (H, W, 4) RGBA tape variable.
    """
    splats = project(posed_means, posed_rotations, scales, camera, tape, rot_delta, trans_delta)
    if len(splats) == 0:
        return tape.const(np.zeros((camera.height, camera.width, 4)))
    col_k = ad.gather(colors, splats.kept)
    alpha_k = ad.gather(opacities, splats.kept)
    return composite(splats, col_k, alpha_k, camera.width, camera.height, tape)


def render_set(gset: GaussianSet, camera: Camera, posed_means: np.ndarray | None = None, posed_rotations: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
    """Value-only render of a GaussianSet (no gradients); returns (H, W, 4)."""
    tape = ad.Tape(dtype=dtype)
    means = tape.const(gset.means if posed_means is None else posed_means)
    rots = tape.const(gset.rotations if posed_rotations is None else posed_rotations)
    img = render(
        means,
        ad.normalize_rows(rots),
        tape.const(gset.scales),
        tape.const(gset.colors),
        tape.const(gset.opacities),
        camera,
        tape,
    )
    return np.asarray(img.value, np.float64)


def composite_over_background(rgba: np.ndarray, background: float | np.ndarray = 0.0) -> np.ndarray:
    """Resolve an RGBA render against a constant background color."""
    rgb = rgba[..., :3]
    a = rgba[..., 3:4]
    return rgb + (1.0 - a) * background


def dump_splats_csv(path, splats: Splat2D, colors: ad.Var, alphas: ad.Var) -> None:
    """Write projected splat parameters for inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "u", "v", "depth", "cov_xx", "cov_xy", "cov_yy", "r", "g", "b", "alpha"])
        m2, cv = splats.means2d.value, splats.covs.value
        col, al = colors.value, alphas.value
        for i in range(len(splats)):
            writer.writerow(
                [
                    int(splats.kept[i]),
                    f"{m2[i, 0]:.6f}",
                    f"{m2[i, 1]:.6f}",
                    f"{splats.depths[i]:.6f}",
                    f"{cv[i, 0, 0]:.6f}",
                    f"{cv[i, 0, 1]:.6f}",
                    f"{cv[i, 1, 1]:.6f}",
                    f"{col[i, 0]:.6f}",
                    f"{col[i, 1]:.6f}",
                    f"{col[i, 2]:.6f}",
                    f"{al[i]:.6f}",
                ]
            )
