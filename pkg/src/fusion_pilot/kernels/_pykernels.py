"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and bit-identical results; the package picks one at import time.
"""

import numpy as np


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold a padded NHWC batch into (N, Ho, Wo, kh, kw, C) patches."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + hs:stride, j:j + ws:stride, :]
    return cols


def col2im(dcols, hp, wp, stride):
    """Scatter-add patch gradients back onto a padded NHWC batch."""
    n, ho, wo, kh, kw, c = dcols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def median_filter(img, k):
    """k x k median with replicated borders; ``img`` is 2-D float64."""
    if k * k > 225:
        raise ValueError(f"median window {k} too large")
    r = k // 2
    padded = np.pad(img, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    flat = win.reshape(img.shape[0], img.shape[1], k * k)
    return np.partition(flat, (k * k) // 2, axis=2)[:, :, (k * k) // 2].copy()


def inpaint_diffuse(values, missing, tol, max_iter):
    """Jacobi neighbour-mean diffusion over ``missing`` pixels.

    Returns ``(filled, iterations)``. Known pixels never change. Each sweep
    replaces every missing pixel with the mean of its in-image 4-neighbours,
    summed in the order up, down, left, right.
    """
    cur = np.array(values, dtype=np.float64, copy=True)
    h, w = cur.shape
    if not missing.any():
        return cur, 0
    cnt = np.zeros((h, w))
    cnt[1:, :] += 1
    cnt[:-1, :] += 1
    cnt[:, 1:] += 1
    cnt[:, :-1] += 1
    idx = np.nonzero(missing)
    for it in range(1, max_iter + 1):
        s = np.zeros((h, w))
        s[1:, :] += cur[:-1, :]
        s[:-1, :] += cur[1:, :]
        s[:, 1:] += cur[:, :-1]
        s[:, :-1] += cur[:, 1:]
        new = s[idx] / cnt[idx]
        delta = np.max(np.abs(new - cur[idx]))
        cur[idx] = new
        if delta < tol:
            return cur, it
    return cur, max_iter
