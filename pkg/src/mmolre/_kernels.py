"""Hot conv1d kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, ``MOLRE_NUMBA`` is not
set to ``0`` and the weight is small (``NUMBA_MAX_WEIGHT`` scalars). The
loop kernels beat BLAS only at narrow widths; see benchmarks/bench_kernels.py. Both paths take batched arrays (``[B, T, C]``) and float64
weights laid out as ``[K, C_in, C_out]``.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAS_NUMBA = False


def _env_enabled() -> bool:
    return os.environ.get("MOLRE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _env_enabled()
NUMBA_MAX_WEIGHT = 2048


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def _pad_time(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (0, 0)))


def conv1d_forward_np(x, w, b, padding):
    xp = _pad_time(x, padding)
    K = w.shape[0]
    t_out = xp.shape[1] - K + 1
    out = np.empty((x.shape[0], t_out, w.shape[2]))
    out[...] = b
    for k in range(K):
        out += xp[:, k : k + t_out, :] @ w[k]
    return out


def conv1d_backward_np(x, w, g, padding):
    """Returns (grad_x, grad_w, grad_b) for upstream gradient ``g``."""
    xp = _pad_time(x, padding)
    K = w.shape[0]
    t_out = g.shape[1]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    g2 = g.reshape(-1, g.shape[2])
    for k in range(K):
        window = xp[:, k : k + t_out, :]
        gw[k] = window.reshape(-1, window.shape[2]).T @ g2
        gxp[:, k : k + t_out, :] += g @ w[k].T
    gb = g2.sum(axis=0)
    gx = gxp[:, padding : padding + x.shape[1], :] if padding else gxp
    return gx, gw, gb


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _conv1d_forward_nb(x, w, b, padding):
        B, T, C_in = x.shape
        K, _, C_out = w.shape
        t_out = T + 2 * padding - K + 1
        out = np.empty((B, t_out, C_out))
        for bi in range(B):
            for t in range(t_out):
                for o in range(C_out):
                    out[bi, t, o] = b[o]
                for k in range(K):
                    src = t + k - padding
                    if src < 0 or src >= T:
                        continue
                    for c in range(C_in):
                        xv = x[bi, src, c]
                        for o in range(C_out):
                            out[bi, t, o] += xv * w[k, c, o]
        return out

    @njit(cache=True)
    def _conv1d_backward_nb(x, w, g, padding):
        B, T, C_in = x.shape
        K, _, C_out = w.shape
        t_out = g.shape[1]
        gx = np.zeros((B, T, C_in))
        gw = np.zeros((K, C_in, C_out))
        gb = np.zeros(C_out)
        for bi in range(B):
            for t in range(t_out):
                for o in range(C_out):
                    gb[o] += g[bi, t, o]
                for k in range(K):
                    src = t + k - padding
                    if src < 0 or src >= T:
                        continue
                    for c in range(C_in):
                        xv = x[bi, src, c]
                        acc = 0.0
                        for o in range(C_out):
                            go = g[bi, t, o]
                            gw[k, c, o] += xv * go
                            acc += w[k, c, o] * go
                        gx[bi, src, c] += acc
        return gx, gw, gb


def _numba_for(w) -> bool:
    return USE_NUMBA and w.size <= NUMBA_MAX_WEIGHT


def conv1d_forward(x, w, b, padding):
    if _numba_for(w):
        return _conv1d_forward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b), padding
        )
    return conv1d_forward_np(x, w, b, padding)


def conv1d_backward(x, w, g, padding):
    if _numba_for(w):
        return _conv1d_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(g), padding
        )
    return conv1d_backward_np(x, w, g, padding)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
