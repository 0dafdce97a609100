"""
Differentiable splat rendering on the CPU.

Forward model per pixel p over depth-sorted fragments i:

    alpha_i(p) = min(eta_i * exp(-0.5 * d^T Sigma2_i^-1 d), alpha_max),  d = p - mean_i
    T_i(p)     = prod_{j<i} (1 - alpha_j(p))
    out(p)     = sum_i [T_i(p) >= t_min] * alpha_i(p) * T_i(p) * v_i

with the EWA projection Sigma2 = J W Sigma3 W^T J^T + aa_floor * I, and
Sigma3 = R(q) S S^T R(q)^T. The Mahalanobis distance is the 2D projected one.
Evaluation is truncated at the cutoff ellipse when cutoff_sigma is set.

Gradients are analytic: ``backprop`` runs reverse mode through compositing,
the conic, the EWA projection and the quaternion/scale parameterization;
``per_gaussian_squared_jacobian`` runs forward mode per parameter so the full
Jacobian is never materialized.

Pixels are processed in row blocks sized by the pixel budget; block results
are reduced in row order so outputs do not depend on block size.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import PARAM_GROUPS, RasterSettings
from .errors import InvariantError, ShapeMismatchError
from .images import AttributeImage
from .scene import CameraView, GaussianScene, quat_to_rotmat

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = RasterSettings()


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class SplatFragment:
    index: int
    alpha: float
    depth: float
    mean2d: Tuple[float, float]
    cov2d: Tuple[Tuple[float, float], Tuple[float, float]]


@dataclass
class ParamGradients:
    """Per-Gaussian partials of a scalar objective."""

    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    eta: np.ndarray
    rgb: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def __len__(self) -> int:
        return self.eta.shape[0]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {g: getattr(self, g) for g in PARAM_GROUPS}

    def norms(self) -> Dict[str, float]:
        return {g: float(np.linalg.norm(a)) for g, a in self.as_dict().items()}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.as_dict().values())

    def __add__(self, other: "ParamGradients") -> "ParamGradients":
        return ParamGradients(**{g: getattr(self, g) + getattr(other, g) for g in PARAM_GROUPS})


@dataclass(frozen=True)
class Projection:
    """Depth-sorted per-fragment projection data (kept for the backward pass)."""

    view: CameraView
    index: np.ndarray      # (F,) primitive index
    p_cam: np.ndarray      # (F, 3)
    mean: np.ndarray       # (F, 2)
    cov2d: np.ndarray      # (F, 2, 2)
    conic: np.ndarray      # (F, 2, 2)
    radius: np.ndarray     # (F,)
    sigma3: np.ndarray     # (F, 3, 3)
    M: np.ndarray          # (F, 2, 3) = J W
    rot: np.ndarray        # (F, 3, 3) Gaussian rotation
    qn: np.ndarray         # (F, 4) normalized quaternion
    qnorm: np.ndarray      # (F,)
    scale: np.ndarray      # (F, 3)
    eta: np.ndarray        # (F,)

    def __len__(self) -> int:
        return self.index.shape[0]

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]


# ============================================================================
# PROJECTION
# ============================================================================

def _drot_dquat(q: np.ndarray) -> np.ndarray:
    """d R / d q for (F, 4) quaternions (w, x, y, z) -> (F, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    d = np.empty((q.shape[0], 4, 3, 3))
    d[:, 0] = np.stack([np.stack([zero, -2 * z, 2 * y], -1),
                        np.stack([2 * z, zero, -2 * x], -1),
                        np.stack([-2 * y, 2 * x, zero], -1)], -2)
    d[:, 1] = np.stack([np.stack([zero, 2 * y, 2 * z], -1),
                        np.stack([2 * y, -4 * x, -2 * w], -1),
                        np.stack([2 * z, 2 * w, -4 * x], -1)], -2)
    d[:, 2] = np.stack([np.stack([-4 * y, 2 * x, 2 * w], -1),
                        np.stack([2 * x, zero, 2 * z], -1),
                        np.stack([-2 * w, 2 * z, -4 * y], -1)], -2)
    d[:, 3] = np.stack([np.stack([-4 * z, -2 * w, 2 * x], -1),
                        np.stack([2 * w, -4 * z, 2 * y], -1),
                        np.stack([2 * x, 2 * y, zero], -1)], -2)
    return d


def _empty_projection(view: CameraView) -> Projection:
    z = np.zeros
    return Projection(view, z(0, dtype=int), z((0, 3)), z((0, 2)), z((0, 2, 2)), z((0, 2, 2)), z(0),
                      z((0, 3, 3)), z((0, 2, 3)), z((0, 3, 3)), z((0, 4)), z(0), z((0, 3)), z(0))


def project_arrays(view: CameraView, scene: GaussianScene,
                   settings: RasterSettings = DEFAULT_SETTINGS) -> Projection:
    if len(scene) == 0:
        return _empty_projection(view)

    W = view.R
    p_all = scene.mu @ W.T + view.t
    z_all = p_all[:, 2]
    keep = np.nonzero((z_all > view.near) & (z_all < view.far))[0]
    if keep.size == 0:
        return _empty_projection(view)

    p = p_all[keep]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    q = scene.q[keep]
    qnorm = np.linalg.norm(q, axis=1)
    qn = q / qnorm[:, None]
    rot = quat_to_rotmat(qn)
    scale = scene.s[keep]
    Mr = rot * scale[:, None, :]
    sigma3 = Mr @ np.transpose(Mr, (0, 2, 1))

    J = np.zeros((keep.size, 2, 3))
    J[:, 0, 0] = view.fx / z
    J[:, 0, 2] = -view.fx * x / z ** 2
    J[:, 1, 1] = view.fy / z
    J[:, 1, 2] = -view.fy * y / z ** 2
    M = J @ W
    cov2d = M @ sigma3 @ np.transpose(M, (0, 2, 1))
    cov2d[:, 0, 0] += settings.aa_floor
    cov2d[:, 1, 1] += settings.aa_floor

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det

    mean = np.stack([view.fx * x / z + view.cx, view.fy * y / z + view.cy], axis=1)

    if settings.cutoff_sigma is not None:
        mid = 0.5 * (a + c)
        lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = settings.cutoff_sigma * np.sqrt(lam)
        visible = ((mean[:, 0] + radius >= 0) & (mean[:, 0] - radius <= view.width - 1)
                   & (mean[:, 1] + radius >= 0) & (mean[:, 1] - radius <= view.height - 1))
    else:
        radius = np.full(keep.size, np.inf)
        visible = np.ones(keep.size, dtype=bool)

    # ascending depth, ties broken by primitive index
    local = np.nonzero(visible)[0]
    order = local[np.lexsort((keep[local], z[local]))]

    return Projection(
        view=view, index=keep[order], p_cam=p[order], mean=mean[order], cov2d=cov2d[order],
        conic=conic[order], radius=radius[order], sigma3=sigma3[order], M=M[order], rot=rot[order],
        qn=qn[order], qnorm=qnorm[order], scale=scale[order], eta=scene.eta[keep][order],
    )


def project(view: CameraView, scene: GaussianScene,
            settings: RasterSettings = DEFAULT_SETTINGS) -> List[SplatFragment]:
    """Depth-sorted fragments for the Gaussians inside the view frustum."""
    proj = project_arrays(view, scene, settings)
    alpha = np.minimum(proj.eta, settings.alpha_max)
    return [
        SplatFragment(
            index=int(proj.index[k]),
            alpha=float(alpha[k]),
            depth=float(proj.p_cam[k, 2]),
            mean2d=(float(proj.mean[k, 0]), float(proj.mean[k, 1])),
            cov2d=((float(proj.cov2d[k, 0, 0]), float(proj.cov2d[k, 0, 1])),
                   (float(proj.cov2d[k, 1, 0]), float(proj.cov2d[k, 1, 1]))),
        )
        for k in range(len(proj))
    ]


# ============================================================================
# COMPOSITING
# ============================================================================

@dataclass
class _Block:
    """Per-block compositing state; arrays are (fragments, pixels)."""

    rows: Tuple[int, int]
    sel: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    G: np.ndarray
    alpha: np.ndarray
    live: np.ndarray
    T: np.ndarray
    active: np.ndarray
    w: np.ndarray


def _blocks(proj: Projection, settings: RasterSettings) -> Iterator[_Block]:
    view = proj.view
    H, Wd = view.height, view.width
    n_frag = max(1, len(proj))
    rows_per = max(1, settings.pixel_budget // (n_frag * Wd))
    cutoff_sq = None if settings.cutoff_sigma is None else settings.cutoff_sigma ** 2
    finite_radius = bool(np.isfinite(proj.radius).all())

    for r0 in range(0, H, rows_per):
        r1 = min(H, r0 + rows_per)
        if finite_radius:
            sel = np.nonzero((proj.mean[:, 1] + proj.radius >= r0)
                             & (proj.mean[:, 1] - proj.radius <= r1 - 1))[0]
        else:
            sel = np.arange(len(proj))
        if sel.size == 0:
            continue

        u = np.tile(np.arange(Wd, dtype=np.float64), r1 - r0)
        v = np.repeat(np.arange(r0, r1, dtype=np.float64), Wd)
        dx = u[None, :] - proj.mean[sel, 0:1]
        dy = v[None, :] - proj.mean[sel, 1:2]
        ca = proj.conic[sel, 0, 0][:, None]
        cb = proj.conic[sel, 0, 1][:, None]
        cc = proj.conic[sel, 1, 1][:, None]
        maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        G = np.exp(-0.5 * maha)
        inside = np.ones_like(maha, dtype=bool) if cutoff_sq is None else maha <= cutoff_sq
        raw = proj.eta[sel][:, None] * G
        alpha = np.where(inside, np.minimum(raw, settings.alpha_max), 0.0)
        live = inside & (raw < settings.alpha_max)

        one_minus = 1.0 - alpha
        T = np.empty_like(alpha)
        T[0] = 1.0
        if alpha.shape[0] > 1:
            T[1:] = np.cumprod(one_minus[:-1], axis=0)
        active = T >= settings.t_min
        w = np.where(active, alpha * T, 0.0)
        yield _Block((r0, r1), sel, dx, dy, G, alpha, live, T, active, w)


def _suffix_exclusive(a: np.ndarray) -> np.ndarray:
    """S_i = sum_{k>i} a_k along axis 0."""
    total = np.cumsum(a[::-1], axis=0)[::-1]
    return total - a


def _as_values(values: np.ndarray, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] != n:
        raise ShapeMismatchError(f"attribute values shape {values.shape} does not match {n} primitives")
    return values


def render_attribute(view: CameraView, scene: GaussianScene, values: np.ndarray,
                     settings: RasterSettings = DEFAULT_SETTINGS,
                     proj: Optional[Projection] = None) -> AttributeImage:
    """Composite an arbitrary per-Gaussian attribute (N,) or (N, C) onto a black background."""
    values = _as_values(values, len(scene))
    proj = proj if proj is not None else project_arrays(view, scene, settings)
    H, Wd, C = view.height, view.width, values.shape[1]
    out = np.zeros((H * Wd, C))
    frag_values = values[proj.index]
    for blk in _blocks(proj, settings):
        r0, r1 = blk.rows
        out[r0 * Wd:r1 * Wd] = blk.w.T @ frag_values[blk.sel]
    return AttributeImage(out.reshape(H, Wd, C))


def render_color(view: CameraView, scene: GaussianScene,
                 settings: RasterSettings = DEFAULT_SETTINGS) -> AttributeImage:
    return render_attribute(view, scene, scene.rgb, settings)


def gaussian_depths(view: CameraView, scene: GaussianScene) -> np.ndarray:
    return (scene.mu @ view.R.T + view.t)[:, 2] if len(scene) else np.zeros(0)


def render_depth(view: CameraView, scene: GaussianScene,
                 settings: RasterSettings = DEFAULT_SETTINGS) -> AttributeImage:
    return render_attribute(view, scene, gaussian_depths(view, scene), settings)


def render_opacity(view: CameraView, scene: GaussianScene,
                   settings: RasterSettings = DEFAULT_SETTINGS) -> AttributeImage:
    return render_attribute(view, scene, np.ones(len(scene)), settings)


# ============================================================================
# REVERSE MODE
# ============================================================================

def _geometry_backward(proj: Projection, g_mean: np.ndarray, g_conic: np.ndarray):
    """Chain per-fragment d/d(mean2d) and d/d(conic) to mu, q, s."""
    view = proj.view
    A = proj.conic
    G2 = -A @ g_conic @ A
    Mt = np.transpose(proj.M, (0, 2, 1))
    gM = 2.0 * G2 @ proj.M @ proj.sigma3
    G3 = Mt @ G2 @ proj.M
    gJ = gM @ view.R.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = view.fx, view.fy
    gu, gv = g_mean[:, 0], g_mean[:, 1]
    gx = gu * fx / z - gJ[:, 0, 2] * fx / z ** 2
    gy = gv * fy / z - gJ[:, 1, 2] * fy / z ** 2
    gz = (-gu * fx * x / z ** 2 - gv * fy * y / z ** 2
          - gJ[:, 0, 0] * fx / z ** 2 + gJ[:, 0, 2] * 2.0 * fx * x / z ** 3
          - gJ[:, 1, 1] * fy / z ** 2 + gJ[:, 1, 2] * 2.0 * fy * y / z ** 3)
    g_mu = np.stack([gx, gy, gz], axis=1) @ view.R

    Mr = proj.rot * proj.scale[:, None, :]
    gMr = 2.0 * G3 @ Mr
    g_s = np.einsum("fik,fik->fk", gMr, proj.rot)
    g_rot = gMr * proj.scale[:, None, :]
    g_qn = np.einsum("fab,flab->fl", g_rot, _drot_dquat(proj.qn))
    radial = np.sum(g_qn * proj.qn, axis=1, keepdims=True)
    g_q = (g_qn - proj.qn * radial) / proj.qnorm[:, None]
    return g_mu, g_q, g_s


def backprop_attribute(view: CameraView, scene: GaussianScene, values: np.ndarray,
                       upstream: AttributeImage, settings: RasterSettings = DEFAULT_SETTINGS,
                       proj: Optional[Projection] = None) -> Tuple[ParamGradients, np.ndarray]:
    """
    Gradients of sum(upstream * render_attribute(values)).

    Returns the geometric/opacity gradients (rgb left zero) and the gradient
    with respect to the per-Gaussian values.
    """
    values = _as_values(values, len(scene))
    H, Wd, C = view.height, view.width, values.shape[1]
    if upstream.shape != (H, Wd, C):
        raise ShapeMismatchError(f"upstream shape {upstream.shape} does not match render {(H, Wd, C)}")

    proj = proj if proj is not None else project_arrays(view, scene, settings)
    grads = ParamGradients.zeros(len(scene))
    g_values = np.zeros_like(values)
    F = len(proj)
    if F == 0:
        return grads, g_values

    U = upstream.data.reshape(H * Wd, C)
    frag_values = values[proj.index]
    g_mean = np.zeros((F, 2))
    g_conic_a = np.zeros(F)
    g_conic_b = np.zeros(F)
    g_conic_c = np.zeros(F)
    g_eta = np.zeros(F)
    g_vals_frag = np.zeros((F, C))

    for blk in _blocks(proj, settings):
        r0, r1 = blk.rows
        Ub = U[r0 * Wd:r1 * Wd]
        vals = frag_values[blk.sel]
        g = vals @ Ub.T
        g_vals_frag[blk.sel] += blk.w @ Ub

        S = _suffix_exclusive(blk.w * g)
        d_alpha = np.where(blk.active, blk.T * g, 0.0) - S / (1.0 - blk.alpha)
        d_alpha = np.where(blk.live, d_alpha, 0.0)

        eta = proj.eta[blk.sel][:, None]
        g_eta[blk.sel] += np.sum(d_alpha * blk.G, axis=1)
        gm = d_alpha * eta * blk.G
        ca = proj.conic[blk.sel, 0, 0][:, None]
        cb = proj.conic[blk.sel, 0, 1][:, None]
        cc = proj.conic[blk.sel, 1, 1][:, None]
        g_mean[blk.sel, 0] += np.sum(gm * (ca * blk.dx + cb * blk.dy), axis=1)
        g_mean[blk.sel, 1] += np.sum(gm * (cb * blk.dx + cc * blk.dy), axis=1)
        g_conic_a[blk.sel] += np.sum(gm * (-0.5 * blk.dx * blk.dx), axis=1)
        g_conic_b[blk.sel] += np.sum(gm * (-blk.dx * blk.dy), axis=1)
        g_conic_c[blk.sel] += np.sum(gm * (-0.5 * blk.dy * blk.dy), axis=1)

    g_conic = np.empty((F, 2, 2))
    g_conic[:, 0, 0] = g_conic_a
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * g_conic_b
    g_conic[:, 1, 1] = g_conic_c
    g_mu, g_q, g_s = _geometry_backward(proj, g_mean, g_conic)

    grads.mu[proj.index] = g_mu
    grads.q[proj.index] = g_q
    grads.s[proj.index] = g_s
    grads.eta[proj.index] = g_eta
    g_values[proj.index] = g_vals_frag
    return grads, g_values


def backprop(view: CameraView, scene: GaussianScene, upstream: AttributeImage,
             settings: RasterSettings = DEFAULT_SETTINGS) -> ParamGradients:
    """Exact gradients of sum(upstream * render_color(view, scene)) for every parameter."""
    grads, g_rgb = backprop_attribute(view, scene, scene.rgb, upstream, settings)
    grads.rgb = g_rgb
    return grads


# ============================================================================
# FORWARD MODE: SQUARED JACOBIAN
# ============================================================================

def _geometry_tangents(proj: Projection, groups: Sequence[str]):
    """Yield (d mean2d, d conic) for every scalar geometric parameter in ``groups``."""
    view = proj.view
    F = len(proj)
    A = proj.conic
    Mt = np.transpose(proj.M, (0, 2, 1))
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = view.fx, view.fy
    Mr = proj.rot * proj.scale[:, None, :]

    def conic_from_sigma2(d_sigma2):
        return -A @ d_sigma2 @ A

    def from_sigma3(d_mr):
        d_sigma3 = d_mr @ np.transpose(Mr, (0, 2, 1))
        d_sigma3 = d_sigma3 + np.transpose(d_sigma3, (0, 2, 1))
        return conic_from_sigma2(proj.M @ d_sigma3 @ Mt)

    no_shift = np.zeros((F, 2))

    if "mu" in groups:
        for j in range(3):
            dp = np.broadcast_to(view.R[:, j], (F, 3))
            d_mean = np.stack([fx * (dp[:, 0] / z - x * dp[:, 2] / z ** 2),
                               fy * (dp[:, 1] / z - y * dp[:, 2] / z ** 2)], axis=1)
            dJ = np.zeros((F, 2, 3))
            dJ[:, 0, 0] = -fx * dp[:, 2] / z ** 2
            dJ[:, 0, 2] = -fx * dp[:, 0] / z ** 2 + 2.0 * fx * x * dp[:, 2] / z ** 3
            dJ[:, 1, 1] = -fy * dp[:, 2] / z ** 2
            dJ[:, 1, 2] = -fy * dp[:, 1] / z ** 2 + 2.0 * fy * y * dp[:, 2] / z ** 3
            dM = dJ @ view.R
            half = dM @ proj.sigma3 @ Mt
            yield d_mean, conic_from_sigma2(half + np.transpose(half, (0, 2, 1)))

    if "q" in groups:
        dR = _drot_dquat(proj.qn)
        for j in range(4):
            d_qn = -proj.qn * proj.qn[:, j:j + 1]
            d_qn[:, j] += 1.0
            d_qn /= proj.qnorm[:, None]
            d_rot = np.einsum("fl,flab->fab", d_qn, dR)
            yield no_shift, from_sigma3(d_rot * proj.scale[:, None, :])

    if "s" in groups:
        for j in range(3):
            d_mr = np.zeros((F, 3, 3))
            d_mr[:, :, j] = proj.rot[:, :, j]
            yield no_shift, from_sigma3(d_mr)


def per_gaussian_squared_jacobian(view: CameraView, scene: GaussianScene, param_mask: Sequence[str],
                                  settings: RasterSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """
    For each Gaussian, the sum over pixels, color channels and masked
    parameters of (d render_color / d theta)^2.
    """
    mask = tuple(param_mask)
    if not mask:
        raise InvariantError("param mask must not be empty", field="param_mask")
    unknown = [g for g in mask if g not in PARAM_GROUPS]
    if unknown:
        raise InvariantError(f"unknown parameter groups {unknown}", field="param_mask")

    out = np.zeros(len(scene))
    proj = project_arrays(view, scene, settings)
    if len(proj) == 0:
        return out

    geometric = [g for g in ("mu", "q", "s") if g in mask]
    tangents = list(_geometry_tangents(proj, geometric)) if geometric else []
    frag_rgb = scene.rgb[proj.index]
    C = frag_rgb.shape[1]
    acc = np.zeros(len(proj))

    for blk in _blocks(proj, settings):
        sel = blk.sel
        # d out_c / d alpha_i, squared and summed over channels
        asq = np.zeros_like(blk.alpha)
        for c in range(C):
            vc = frag_rgb[sel, c][:, None]
            S = _suffix_exclusive(blk.w * vc)
            a_c = np.where(blk.active, blk.T * vc, 0.0) - S / (1.0 - blk.alpha)
            asq += a_c * a_c
        live_G = np.where(blk.live, blk.G, 0.0)

        if "eta" in mask:
            acc[sel] += np.sum(asq * live_G * live_G, axis=1)
        if tangents:
            eta = proj.eta[sel][:, None]
            ca = proj.conic[sel, 0, 0][:, None]
            cb = proj.conic[sel, 0, 1][:, None]
            cc = proj.conic[sel, 1, 1][:, None]
            Ad_u = ca * blk.dx + cb * blk.dy
            Ad_v = cb * blk.dx + cc * blk.dy
            for d_mean, d_conic in tangents:
                bracket = (Ad_u * d_mean[sel, 0:1] + Ad_v * d_mean[sel, 1:2]
                           - 0.5 * (d_conic[sel, 0, 0][:, None] * blk.dx * blk.dx
                                    + 2.0 * d_conic[sel, 0, 1][:, None] * blk.dx * blk.dy
                                    + d_conic[sel, 1, 1][:, None] * blk.dy * blk.dy))
                d_alpha = eta * live_G * bracket
                acc[sel] += np.sum(asq * d_alpha * d_alpha, axis=1)
        if "rgb" in mask:
            acc[sel] += C * np.sum(blk.w * blk.w, axis=1)

    out[proj.index] = acc
    return out
