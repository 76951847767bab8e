"""Head-motion (ego-motion) compensation of dense flow.

The frame-to-frame homography is fitted with RANSAC on correspondences read
off the flow field itself on a regular grid, then its induced displacement
is subtracted from the flow.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class HomographyError(ValueError):
    """Fit failure: too few pairs, degenerate inliers or too few inliers."""


class PointAtInfinity(ValueError):
    pass


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 500
    inlier_threshold: float = 1.0
    min_inlier_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")


@dataclass(frozen=True)
class CompensationParams:
    grid_step: int = 8
    ransac: RansacParams = RansacParams()


def sample_correspondences(flow, grid_step: int = 8):
    """Pairs (p, p + flow(p)) on the interior grid of stride ``grid_step``.

    Returns two (N, 2) arrays of (x, y) points.
    """
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    H, W = flow.shape[:2]
    ys = np.arange(grid_step, H, grid_step)
    xs = np.arange(grid_step, W, grid_step)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    src = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    dst = src + flow[gy.ravel(), gx.ravel()].astype(np.float64)
    return src, dst


def apply_homography(H, p):
    """Projective transform of points ``p`` (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(w) <= 1e-12):
        raise PointAtInfinity("homography maps a point to infinity")
    return np.stack([(H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w,
                     (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w], axis=-1)


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _transform(T, pts):
    return pts @ T[:2, :2].T + T[:2, 2]


def _dlt_rows(src, dst):
    # src, dst: (..., n, 2) -> (..., 2n, 9)
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=-1)
    A = np.stack([r1, r2], axis=-2)
    return A.reshape(A.shape[:-3] + (-1, 9))


def _normalize_h(H):
    return H / H[..., 2:3, 2:3]


def _transfer_errors(H, Hinv, src, dst):
    """Squared symmetric transfer error for a batch of models (M, N)."""
    def proj(Hm, pts):
        q = np.einsum("mij,nj->mni", Hm[:, :, :2], pts) + Hm[:, None, :, 2]
        w = q[..., 2]
        w = np.where(np.abs(w) < 1e-12, np.nan, w)
        return q[..., :2] / w[..., None]
    fwd = ((proj(H, src) - dst) ** 2).sum(-1)
    bwd = ((proj(Hinv, dst) - src) ** 2).sum(-1)
    e = fwd + bwd
    return np.where(np.isfinite(e), e, np.inf)


def _collinear(pts, tol=1e-6):
    if len(pts) < 3:
        return True
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[1] <= tol * max(s[0], 1e-300)


def _refit(src, dst):
    T0, T1 = _hartley(src), _hartley(dst)
    A = _dlt_rows(_transform(T0, src), _transform(T1, dst))
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    return np.linalg.inv(T1) @ Hn @ T0


def fit_homography(src, dst, params: RansacParams = RansacParams()):
    """RANSAC homography from point pairs; returns (H, inlier_mask).

    Minimal 4-point models come from the Hartley-normalised DLT, scored by
    inlier count (squared symmetric transfer error below threshold^2, ties
    broken by total error); the winner is refitted on all its inliers.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    N = len(src)
    if N < 4:
        raise HomographyError(f"need >= 4 correspondences, got {N}")
    t2 = params.inlier_threshold ** 2
    rng = np.random.default_rng(params.seed)
    idx = np.argsort(rng.random((params.iterations, N)), axis=1)[:, :4]

    T0, T1 = _hartley(src), _hartley(dst)
    ns, nd = _transform(T0, src), _transform(T1, dst)
    A = _dlt_rows(ns[idx], nd[idx])  # (M, 8, 9)
    _, sv, Vt = np.linalg.svd(A)
    ok = sv[:, 7] > 1e-9 * sv[:, 0]  # rank 8, i.e. no collinear triple
    Hn = Vt[:, -1].reshape(-1, 3, 3)
    Hs = np.linalg.inv(T1) @ Hn @ T0
    ok &= np.abs(np.linalg.det(Hs)) > 1e-12
    ok &= np.abs(Hs[:, 2, 2]) > 1e-12
    if not ok.any():
        raise HomographyError("every minimal sample was degenerate")
    Hs = _normalize_h(Hs[ok])
    err = _transfer_errors(Hs, np.linalg.inv(Hs), src, dst)
    inl = err < t2
    count = inl.sum(axis=1)
    cost = np.where(inl, err, 0.0).sum(axis=1)
    best = np.lexsort((cost, -count))[0]
    mask = inl[best]

    H = Hs[best]
    for _ in range(5):
        if mask.sum() < 4 or _collinear(src[mask]) or _collinear(dst[mask]):
            raise HomographyError("degenerate (collinear) inlier set")
        H = _normalize_h(_refit(src[mask], dst[mask]))
        e = _transfer_errors(H[None], np.linalg.inv(H)[None], src, dst)[0]
        new_mask = e < t2
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if mask.sum() < 4 or _collinear(src[mask]):
        raise HomographyError("degenerate (collinear) inlier set")
    if np.linalg.cond(H) > 1e12:
        raise HomographyError("fitted homography is ill-conditioned")
    frac = mask.mean()
    if frac < params.min_inlier_fraction:
        raise HomographyError(
            f"inlier fraction {frac:.3f} below {params.min_inlier_fraction}"
        )
    return H, mask


def induced_flow(H, shape):
    """Displacement field H(p) - p over an (H, W) pixel grid."""
    h, w = shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    p = np.stack([xx, yy], axis=-1)
    return apply_homography(H, p) - p


def compensate_flow(flow, H):
    flow = np.asarray(flow, dtype=np.float64)
    return flow - induced_flow(H, flow.shape)


def compensate_sequence(flows, params: CompensationParams = CompensationParams()):
    """Fit and cancel head motion frame by frame.

    Returns ``(compensated_flows, reports)``.  A frame whose fit fails keeps
    its flow unchanged (identity homography) and is flagged in its report.
    Frame ``i`` uses RANSAC seed ``params.ransac.seed + i``.
    """
    out, reports = [], []
    for i, flow in enumerate(flows):
        rp = RansacParams(params.ransac.iterations, params.ransac.inlier_threshold,
                          params.ransac.min_inlier_fraction, params.ransac.seed + i)
        src, dst = sample_correspondences(flow, params.grid_step)
        try:
            H, mask = fit_homography(src, dst, rp)
            comp = compensate_flow(flow, H)
            rep = {"frame": i, "inlier_fraction": float(mask.mean()), "fallback": False}
        except (HomographyError, PointAtInfinity) as e:
            log.warning("frame %d: homography fit failed (%s); using identity", i, e)
            H = np.eye(3)
            comp = np.asarray(flow, dtype=np.float64).copy()
            rep = {"frame": i, "inlier_fraction": 0.0, "fallback": True, "reason": str(e)}
        rep["homography"] = H.tolist()
        out.append(comp)
        reports.append(rep)
    return out, reports
