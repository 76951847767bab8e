"""Slow, loop-based reference implementations used only by the tests.

Each one is written from the textbook definition, independently of the
vectorised code it checks.
"""
import math

import numpy as np


def conv2d(x, w, b, stride=1, pad=0):
    N, C, H, W = x.shape
    F, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[f]
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, c, y, xx] * w[f, c, di, dj]
                    out[n, f, i, j] = acc
    return out


def maxpool(x, k):
    N, C, H, W = x.shape
    out = np.zeros((N, C, H // k, W // k))
    for n in range(N):
        for c in range(C):
            for i in range(H // k):
                for j in range(W // k):
                    out[n, c, i, j] = max(x[n, c, i * k + a, j * k + bb]
                                          for a in range(k) for bb in range(k))
    return out


def bilinear_resize(img, out_w, out_h):
    """align_corners=False: source coordinate (i + 0.5) * in / out - 0.5, clamped."""
    H, W = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:])
    for i in range(out_h):
        sy = min(max((i + 0.5) * H / out_h - 0.5, 0.0), H - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, H - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * W / out_w - 0.5, 0.0), W - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, W - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def bilinear_at(img, x, y):
    H, W = img.shape
    x = min(max(x, 0.0), W - 1)
    y = min(max(y, 0.0), H - 1)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_cell(x, h, c, W, U, b):
    """Scalar-by-scalar LSTM step; gate blocks in the order i, f, o, g."""
    Hc = len(h)
    z = [sum(W[r, k] * x[k] for k in range(len(x))) + sum(U[r, k] * h[k] for k in range(Hc)) + b[r]
         for r in range(4 * Hc)]
    h2, c2 = np.zeros(Hc), np.zeros(Hc)
    for j in range(Hc):
        i = sig(z[j])
        f = sig(z[Hc + j])
        o = sig(z[2 * Hc + j])
        g = math.tanh(z[3 * Hc + j])
        c2[j] = f * c[j] + i * g
        h2[j] = o * math.tanh(c2[j])
    return h2, c2


def colorwheel():
    """Middlebury wheel built pixel-bin by pixel-bin as in the reference C code."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    cols = []
    for i in range(RY):
        cols.append((255, 255 * i // RY, 0))
    for i in range(YG):
        cols.append((255 - 255 * i // YG, 255, 0))
    for i in range(GC):
        cols.append((0, 255, 255 * i // GC))
    for i in range(CB):
        cols.append((0, 255 - 255 * i // CB, 255))
    for i in range(BM):
        cols.append((255 * i // BM, 0, 255))
    for i in range(MR):
        cols.append((255, 0, 255 - 255 * i // MR))
    return np.array(cols, dtype=float)


def flow_color_pixel(u, v, max_norm):
    wheel = colorwheel()
    n = len(wheel)
    rad = math.hypot(u, v) / max_norm
    a = math.atan2(-v, -u) / math.pi
    if a >= 1:
        a = -1.0
    fk = (a + 1) / 2 * (n - 1)
    k0 = int(math.floor(fk))
    k1 = (k0 + 1) % n
    f = fk - k0
    out = []
    for ch in range(3):
        col = ((1 - f) * wheel[k0, ch] + f * wheel[k1, ch]) / 255
        col = 1 - rad * (1 - col) if rad <= 1 else col * 0.75
        out.append(int(math.floor(255 * col)))
    return tuple(out)


def homography_from_4(src, dst):
    """Plain 8x8 linear solve with h33 = 1 (no normalisation, exact data only)."""
    A, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    h = np.linalg.lstsq(np.array(A, float), np.array(rhs, float), rcond=None)[0]
    return np.append(h, 1.0).reshape(3, 3)


def project(H, x, y):
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    return ((H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w, (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w)


def two_pass_stats(pixels):
    """Population mean and variance per channel, two passes over an (n, C) list."""
    n = len(pixels)
    C = len(pixels[0])
    mean = [sum(p[c] for p in pixels) / n for c in range(C)]
    var = [sum((p[c] - mean[c]) ** 2 for p in pixels) / n for c in range(C)]
    return np.array(mean), np.array(var)


def confusion(pred, gt, L):
    m = [[0] * L for _ in range(L)]
    for p, g in zip(pred, gt):
        m[g][p] += 1
    return np.array(m)


def random_homography(rng, size=64, strength=1.0):
    """A well-conditioned homography: small rotation, scale, shear, translation, perspective."""
    th = rng.uniform(-0.1, 0.1) * strength
    s = 1 + rng.uniform(-0.05, 0.05) * strength
    A = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    A = A @ np.array([[1, rng.uniform(-0.03, 0.03) * strength], [0, 1]])
    t = rng.uniform(-3, 3, 2) * strength
    p = rng.uniform(-2e-4, 2e-4, 2) * strength
    H = np.eye(3)
    H[:2, :2] = A
    H[:2, 2] = t
    H[2, :2] = p
    c = np.array([[1, 0, -size / 2], [0, 1, -size / 2], [0, 0, 1.0]])
    H = np.linalg.inv(c) @ H @ c
    return H / H[2, 2]


def smooth_texture(size, rng, k=6):
    """Band-limited sinusoid texture in [0, 1] with an analytic continuous form."""
    fx = rng.uniform(-0.5, 0.5, k)
    fy = rng.uniform(-0.5, 0.5, k)
    ph = rng.uniform(0, 2 * np.pi, k)
    amp = rng.uniform(0.5, 1.0, k)

    def f(x, y):
        s = sum(a * np.sin(u * x + v * y + p) for a, u, v, p in zip(amp, fx, fy, ph))
        return 0.5 + 0.4 * s / amp.sum()
    return f


def translated_pair(size, d, rng):
    """(prev, next) with next(p) = prev(p - d): the true flow is d everywhere."""
    f = smooth_texture(size, rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    return f(xx, yy), f(xx - d[0], yy - d[1])
