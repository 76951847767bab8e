"""Low-level image sampling shared by the flow solver and the frame pipeline."""
import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ LUMA


def bilinear_sample(img, x, y):
    """Sample ``img`` (H, W[, C]) at float coordinates, clamping to the border."""
    H, W = img.shape[:2]
    x = np.clip(x, 0.0, W - 1.0)
    y = np.clip(y, 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _axis_weights(n_in, n_out):
    # half-pixel centres, align_corners=False
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img, out_w: int, out_h: int):
    """Bilinear resize with half-pixel sampling (align_corners=False).

    Spatial axes are the first two for (H, W) and (H, W, C) input and the
    last two for channel-first batches of ndim >= 4.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    img = np.asarray(img)
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    if img.ndim <= 3:
        H, W = img.shape[:2]
        yi0, yi1, fy = _axis_weights(H, out_h)
        xi0, xi1, fx = _axis_weights(W, out_w)
        shape_y = (-1, 1) + (1,) * (img.ndim - 2)
        shape_x = (1, -1) + (1,) * (img.ndim - 2)
        rows = img[yi0] * (1 - fy.reshape(shape_y)) + img[yi1] * fy.reshape(shape_y)
        out = rows[:, xi0] * (1 - fx.reshape(shape_x)) + rows[:, xi1] * fx.reshape(shape_x)
    else:
        H, W = img.shape[-2:]
        yi0, yi1, fy = _axis_weights(H, out_h)
        xi0, xi1, fx = _axis_weights(W, out_w)
        fy = fy[:, None]
        rows = img[..., yi0, :] * (1 - fy) + img[..., yi1, :] * fy
        out = rows[..., xi0] * (1 - fx) + rows[..., xi1] * fx
    return out.astype(dtype, copy=False)
