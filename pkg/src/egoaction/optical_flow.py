"""Dense optical flow: coarse-to-fine Horn-Schunck with iterative warping.

Flow fields are ``(H, W, 2)`` float arrays holding (u, v) displacements in
pixels; gray images are ``(H, W)`` float arrays with values in [0, 1].

The energy minimised at one pyramid level and warp is::

    E(u, v) = sum_p (Ix (u - u0) + Iy (v - v0) + It)^2
              + alpha^2 * sum_{p~q} (u_p - u_q)^2 + (v_p - v_q)^2

with intensities scaled to [0, 255] internally, so ``smoothness_weight``
has its customary magnitude.  It is minimised by red-black Gauss-Seidel:
each half sweep solves the 2x2 system of every pixel of one colour exactly,
so the energy never increases.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .imgops import bilinear_sample, resize_bilinear, to_gray

INTENSITY_SCALE = 255.0
FLO_MAGIC = b"PIEH"  # float32 202021.25, little-endian


class FlowFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    smoothness_weight: float = 15.0
    pyramid_factor: float = 0.5
    min_level_size: int = 16
    warp_iterations: int = 3
    solver_iterations: int = 50
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.pyramid_factor < 1.0:
            raise ValueError(f"pyramid_factor must be in (0, 1), got {self.pyramid_factor}")
        for name in ("smoothness_weight", "min_level_size", "warp_iterations",
                     "solver_iterations", "convergence_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def build_pyramid(img, params: FlowParams) -> list[np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    levels = [img]
    f = params.pyramid_factor
    sigma = 0.5 * np.sqrt(1.0 / f**2 - 1.0)
    while True:
        h, w = levels[-1].shape
        nh, nw = int(round(h * f)), int(round(w * f))
        if min(nh, nw) < params.min_level_size:
            break
        smooth = gaussian_filter(levels[-1], sigma, mode="nearest")
        levels.append(resize_bilinear(smooth, nw, nh))
    return levels


def _check_same_shape(a, b):
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"dimension mismatch: {a.shape[:2]} vs {b.shape[:2]}")


def warp_image(img, flow):
    """output(p) = img(p + flow(p)), bilinear, border-clamped."""
    img = np.asarray(img, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_same_shape(img, flow)
    H, W = img.shape[:2]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return bilinear_sample(img, xx + flow[..., 0], yy + flow[..., 1])


def _neighbour_sum(a):
    s = np.zeros_like(a)
    s[1:, :] += a[:-1, :]
    s[:-1, :] += a[1:, :]
    s[:, 1:] += a[:, :-1]
    s[:, :-1] += a[:, 1:]
    return s


def _neighbour_count(shape):
    return _neighbour_sum(np.ones(shape))


def hs_energy(u, v, Ix, Iy, c, lam):
    """Discrete energy with the data term written as (Ix u + Iy v + c)^2."""
    data = np.sum((Ix * u + Iy * v + c) ** 2)
    smooth = (np.sum(np.diff(u, axis=0) ** 2) + np.sum(np.diff(u, axis=1) ** 2)
              + np.sum(np.diff(v, axis=0) ** 2) + np.sum(np.diff(v, axis=1) ** 2))
    return data + lam * smooth


def _solve_warp(u, v, Ix, Iy, It, alpha, iterations, tol, energy_log=None, tag=()):
    lam = alpha * alpha
    c = It - Ix * u - Iy * v
    n = _neighbour_count(u.shape)
    a11 = Ix * Ix + lam * n
    a22 = Iy * Iy + lam * n
    a12 = Ix * Iy
    det = a11 * a22 - a12 * a12
    H, W = u.shape
    red = ((np.arange(H)[:, None] + np.arange(W)[None, :]) % 2) == 0
    u = u.copy()
    v = v.copy()
    if energy_log is not None:
        energy_log.append((*tag, 0, hs_energy(u, v, Ix, Iy, c, lam)))
    for it in range(1, iterations + 1):
        delta = 0.0
        for mask in (red, ~red):
            r1 = lam * _neighbour_sum(u) - Ix * c
            r2 = lam * _neighbour_sum(v) - Iy * c
            nu = (a22 * r1 - a12 * r2) / det
            nv = (a11 * r2 - a12 * r1) / det
            delta = max(delta, np.abs(nu - u)[mask].max(initial=0.0),
                        np.abs(nv - v)[mask].max(initial=0.0))
            u[mask] = nu[mask]
            v[mask] = nv[mask]
        if energy_log is not None:
            energy_log.append((*tag, it, hs_energy(u, v, Ix, Iy, c, lam)))
        if delta < tol:
            break
    return u, v


def _upsample_flow(flow, h, w):
    ch, cw = flow.shape[:2]
    up = resize_bilinear(flow, w, h)
    up[..., 0] *= w / cw
    up[..., 1] *= h / ch
    return up


def compute_flow(prev, next, params: FlowParams | None = None, energy_log=None):
    """Flow from ``prev`` to ``next``: prev(p) ~ next(p + flow(p)).

    If ``energy_log`` is a list, one ``(level, warp, iteration, energy)``
    tuple is appended per solver iteration.
    """
    params = params or FlowParams()
    prev = to_gray(prev) * INTENSITY_SCALE
    next = to_gray(next) * INTENSITY_SCALE
    _check_same_shape(prev, next)
    pyr1 = build_pyramid(prev, params)
    pyr2 = build_pyramid(next, params)
    flow = np.zeros(pyr1[-1].shape + (2,))
    for level in range(len(pyr1) - 1, -1, -1):
        I1, I2 = pyr1[level], pyr2[level]
        if flow.shape[:2] != I1.shape:
            flow = _upsample_flow(flow, *I1.shape)
        g1y, g1x = np.gradient(I1)
        for w in range(params.warp_iterations):
            I2w = warp_image(I2, flow)
            g2y, g2x = np.gradient(I2w)
            Ix = 0.5 * (g1x + g2x)
            Iy = 0.5 * (g1y + g2y)
            It = I2w - I1
            u, v = _solve_warp(
                flow[..., 0], flow[..., 1], Ix, Iy, It, params.smoothness_weight,
                params.solver_iterations, params.convergence_tol,
                energy_log=energy_log, tag=(level, w),
            )
            flow = np.stack([u, v], axis=-1)
    return flow


# -- Middlebury colour coding ------------------------------------------------

def make_colorwheel():
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col:col + RY, 0] = 255
    wheel[col:col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


_WHEEL = make_colorwheel()


def flow_to_color(flow, max_norm: float | None = None) -> np.ndarray:
    """Render flow as a uint8 RGB image on the Middlebury colour wheel."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.hypot(u, v)
    if max_norm is None:
        max_norm = rad.max(initial=0.0)
    max_norm = max(float(max_norm), 1e-5)
    rad = rad / max_norm
    ncols = len(_WHEEL)
    a = np.arctan2(-v, -u)
    a[a >= np.pi] = -np.pi  # +pi and -pi are the same hue; pick bin 0
    fk = (a / np.pi + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.intp)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    out = np.empty(flow.shape[:2] + (3,), dtype=np.uint8)
    inside = rad <= 1
    for i in range(3):
        col = ((1 - f) * _WHEEL[k0, i] + f * _WHEEL[k1, i]) / 255.0
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        out[..., i] = np.floor(255 * col)
    return out


# -- .flo interchange ----------------------------------------------------------

def write_flo(path, flow) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad .flo magic")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 0 or h < 0:
        raise FlowFormatError(f"{path}: negative size {w}x{h}")
    n = 8 * w * h
    if len(data) - 12 != n:
        raise FlowFormatError(f"{path}: expected {n} payload bytes, found {len(data) - 12}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).copy()
