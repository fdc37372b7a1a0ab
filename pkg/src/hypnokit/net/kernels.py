"""Hot inner loops of the network: 1-D convolution forward and backward.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics. The module-level names (``conv1d_forward``
...) are bound to the numba versions unless numba is missing or the
environment variable ``HYPNOKIT_DISABLE_NUMBA`` is set to a true value.

All convolutions are "same" length: output sample ``t`` reads input samples
``t - pad_left .. t - pad_left + K - 1`` with zeros outside ``[0, L)``.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("HYPNOKIT_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED


# --------------------------------------------------------------------------
# numpy reference path


def conv1d_forward_numpy(x, w, b, pad_left):
    n, c, length = x.shape
    o, _, k = w.shape
    xp = np.zeros((n, c, length + k - 1), dtype=x.dtype)
    xp[:, :, pad_left : pad_left + length] = x
    out = np.matmul(w[:, :, 0], xp[:, :, 0:length])
    for tap in range(1, k):
        out += np.matmul(w[:, :, tap], xp[:, :, tap : tap + length])
    if b is not None:
        out += b[None, :, None]
    return out


def conv1d_backward_numpy(x, w, gout, pad_left):
    n, c, length = x.shape
    o, _, k = w.shape
    xp = np.zeros((n, c, length + k - 1), dtype=x.dtype)
    xp[:, :, pad_left : pad_left + length] = x
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for tap in range(k):
        window = xp[:, :, tap : tap + length]
        gw[:, :, tap] = np.tensordot(gout, window, axes=([0, 2], [0, 2]))
        gxp[:, :, tap : tap + length] += np.matmul(w[:, :, tap].T, gout)
    gb = gout.sum(axis=(0, 2))
    return gxp[:, :, pad_left : pad_left + length], gw, gb


# --------------------------------------------------------------------------
# numba path

if NUMBA_AVAILABLE:

    @numba.njit(cache=True, fastmath=True, nogil=True)
    def _conv_fwd_nb(x, w, b, pad_left, out):
        n_batch, n_in, length = x.shape
        n_out, _, k = w.shape
        for nb in range(n_batch):
            for o in range(n_out):
                acc = out[nb, o]
                bias = b[o]
                for t in range(length):
                    acc[t] = bias
                for c in range(n_in):
                    xr = x[nb, c]
                    for tap in range(k):
                        wv = w[o, c, tap]
                        shift = tap - pad_left
                        t0 = max(0, -shift)
                        t1 = min(length, length - shift)
                        # sliced views keep indices nonnegative so the loop vectorises
                        dst = acc[t0:t1]
                        src = xr[t0 + shift : t1 + shift]
                        for i in range(t1 - t0):
                            dst[i] += wv * src[i]

    @numba.njit(cache=True, fastmath=True, nogil=True)
    def _conv_bwd_nb(x, w, gout, pad_left, gx, gw, gb):
        n_batch, n_in, length = x.shape
        n_out, _, k = w.shape
        gx[:] = 0
        gw[:] = 0
        gb[:] = 0
        for nb in range(n_batch):
            for o in range(n_out):
                g = gout[nb, o]
                s = 0.0
                for t in range(length):
                    s += g[t]
                gb[o] += s
                for c in range(n_in):
                    xr = x[nb, c]
                    gxr = gx[nb, c]
                    for tap in range(k):
                        shift = tap - pad_left
                        t0 = max(0, -shift)
                        t1 = min(length, length - shift)
                        wv = w[o, c, tap]
                        gs = g[t0:t1]
                        src = xr[t0 + shift : t1 + shift]
                        dst = gxr[t0 + shift : t1 + shift]
                        acc = 0.0
                        for i in range(t1 - t0):
                            acc += gs[i] * src[i]
                            dst[i] += wv * gs[i]
                        gw[o, c, tap] += acc

    def conv1d_forward_numba(x, w, b, pad_left):
        x = np.ascontiguousarray(x)
        w = np.ascontiguousarray(w, dtype=x.dtype)
        bias = np.zeros(w.shape[0], dtype=x.dtype) if b is None else np.ascontiguousarray(b, dtype=x.dtype)
        out = np.empty((x.shape[0], w.shape[0], x.shape[2]), dtype=x.dtype)
        _conv_fwd_nb(x, w, bias, int(pad_left), out)
        return out

    def conv1d_backward_numba(x, w, gout, pad_left):
        x = np.ascontiguousarray(x)
        w = np.ascontiguousarray(w, dtype=x.dtype)
        gout = np.ascontiguousarray(gout, dtype=x.dtype)
        gx = np.empty_like(x)
        gw = np.empty_like(w)
        gb = np.empty(w.shape[0], dtype=x.dtype)
        _conv_bwd_nb(x, w, gout, int(pad_left), gx, gw, gb)
        return gx, gw, gb

else:  # pragma: no cover
    conv1d_forward_numba = conv1d_forward_numpy
    conv1d_backward_numba = conv1d_backward_numpy


if USE_NUMBA:
    conv1d_forward = conv1d_forward_numba
    conv1d_backward = conv1d_backward_numba
else:
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward = conv1d_backward_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
