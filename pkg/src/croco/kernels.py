"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CROCO_DISABLE_NUMBA`` is unset (or "0").  Both paths produce
bit-identical results for the integer-indexed gather/scatter kernels and
agree to float rounding for the reductions.
"""

import os

import numpy as np

_DISABLED = os.environ.get("CROCO_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by CROCO_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# --------------------------------------------------------------------------
# pure numpy implementations
# --------------------------------------------------------------------------


def im2col_numpy(xp, k, stride, ho, wo):
    """Gather ``k x k`` windows from a padded NHWC array.

    Returns an array of shape (N, ho, wo, k*k, C).
    """
    n, _, _, c = xp.shape
    out = np.empty((n, ho, wo, k * k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, :, i * k + j, :] = xp[
                :, i : i + stride * ho : stride, j : j + stride * wo : stride, :
            ]
    return out


def col2im_numpy(cols, hp, wp, k, stride):
    """Scatter-add window gradients back into a padded NHWC array."""
    n, ho, wo, _, c = cols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[
                :, :, :, i * k + j, :
            ]
    return dxp


def block_mean_numpy(data, factor):
    """Area-mean downsample of a (C, H, W) grid by an integer factor."""
    c, h, w = data.shape
    ho, wo = h // factor, w // factor
    view = data[:, : ho * factor, : wo * factor].reshape(c, ho, factor, wo, factor)
    return view.mean(axis=(2, 4))


def count_rank_numpy(scores, targets):
    """1-based rank of each target cell under descending-score order.

    ``scores`` is (Q, M); ``targets`` holds one flat cell index per query.
    Ties resolve to the lower flat index, so a cell is outranked by every
    strictly higher score and by equal scores at smaller indices.
    """
    q, m = scores.shape
    t = scores[np.arange(q), targets][:, None]
    idx = np.arange(m)[None, :]
    above = (scores > t) | ((scores == t) & (idx < targets[:, None]))
    return above.sum(axis=1) + 1


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def im2col_numba(xp, k, stride, ho, wo):
        n, _, _, c = xp.shape
        out = np.empty((n, ho, wo, k * k, c), dtype=xp.dtype)
        for b in range(n):
            for r in range(ho):
                for q in range(wo):
                    for i in range(k):
                        for j in range(k):
                            src = xp[b, r * stride + i, q * stride + j]
                            dst = out[b, r, q, i * k + j]
                            for ch in range(c):
                                dst[ch] = src[ch]
        return out

    @njit(cache=True)
    def col2im_numba(cols, hp, wp, k, stride):
        n, ho, wo, _, c = cols.shape
        dxp = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        # kernel-major loop order matches the numpy path's summation order
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for r in range(ho):
                        for q in range(wo):
                            src = cols[b, r, q, i * k + j]
                            dst = dxp[b, r * stride + i, q * stride + j]
                            for ch in range(c):
                                dst[ch] += src[ch]
        return dxp

    @njit(cache=True)
    def block_mean_numba(data, factor):
        c, h, w = data.shape
        ho, wo = h // factor, w // factor
        out = np.empty((c, ho, wo), dtype=data.dtype)
        inv = 1.0 / (factor * factor)
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0
                    for i in range(factor):
                        for j in range(factor):
                            acc += data[ch, r * factor + i, q * factor + j]
                    out[ch, r, q] = acc * inv
        return out

    @njit(cache=True)
    def count_rank_numba(scores, targets):
        q, m = scores.shape
        ranks = np.empty(q, dtype=np.int64)
        for a in range(q):
            t_idx = targets[a]
            t = scores[a, t_idx]
            cnt = 1
            for b in range(m):
                s = scores[a, b]
                if s > t or (s == t and b < t_idx):
                    cnt += 1
            ranks[a] = cnt
        return ranks


def _dispatch(name):
    if HAS_NUMBA:
        return globals()[name + "_numba"]
    return globals()[name + "_numpy"]


def backend():
    """Name of the active kernel backend."""
    return "numba" if HAS_NUMBA else "numpy"


def im2col(xp, k, stride, ho, wo):
    return _dispatch("im2col")(np.ascontiguousarray(xp), k, stride, ho, wo)


def col2im(cols, hp, wp, k, stride):
    return _dispatch("col2im")(np.ascontiguousarray(cols), hp, wp, k, stride)


def block_mean(data, factor):
    return _dispatch("block_mean")(np.ascontiguousarray(data, dtype=np.float64), factor)


def count_rank(scores, targets):
    scores = np.ascontiguousarray(scores)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    return np.asarray(_dispatch("count_rank")(scores, targets), dtype=np.int64)
