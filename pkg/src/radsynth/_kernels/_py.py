"""NumPy fallback implementations of the hot kernels.

Same contracts as the compiled versions in ``_cy.pyx``; used when the
extension is unavailable or ``RADSYNTH_PURE=1`` is set.
"""

import numpy as np


def im2col(x, kh, kw, sh, sw, ph, pw):
    """Extract sliding conv patches.

    x: (N, C, H, W) -> (N, C*kh*kw, OH*OW), row-major over (c, ki, kj)
    then (oh, ow). Zero padding of (ph, pw) on each side.
    """
    if x.dtype not in (np.float32, np.float64):
        x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw, :, :]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw):
    """Adjoint of im2col: scatter-add patches back onto an (N, C, H, W) grid."""
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    patches = cols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        he = ki + sh * oh
        for kj in range(kw):
            we = kj + sw * ow
            xp[:, :, ki:he:sh, kj:we:sw] += patches[:, :, ki, kj]
    return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])


def diffusion_step(img, kappa, dt, exponential):
    """One explicit Perona-Malik update with replicated (reflecting) borders.

    Flux through the border is zero because the replicated neighbor equals
    the edge pixel, so the image mean is conserved exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    padded = np.pad(img, 1, mode="edge")
    dn = padded[:-2, 1:-1] - img
    ds = padded[2:, 1:-1] - img
    de = padded[1:-1, 2:] - img
    dw = padded[1:-1, :-2] - img
    out = img.copy()
    for d in (dn, ds, de, dw):
        r = (d / kappa) ** 2
        g = np.exp(-r) if exponential else 1.0 / (1.0 + r)
        out += dt * g * d
    return out


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample with half-pixel-centered source coordinates."""
    h, w = img.shape
    src = img.astype(np.float64, copy=False)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy
