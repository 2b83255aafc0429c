"""Causal multi-head self-attention kernels, the hot inner loops of the LM.

Two interchangeable implementations live here: numba-jitted scalar loops
(the default whenever numba imports) and pure-numpy einsum versions. The
``EMBRANK_BACKEND`` environment variable selects the path at import time:

    EMBRANK_BACKEND=numpy   force the pure-numpy fallback
    EMBRANK_BACKEND=numba   require numba (error if unavailable)

Both paths compute identical math (modulo float summation order) and both
are exercised by the test suite; ``benchmarks/compare_backends.py`` times
them against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    _NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    _NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# Pure-numpy implementations
# ---------------------------------------------------------------------------


def _mha_forward_np(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int):
    """Causal attention over all positions. q,k,v (L, d) -> out (L, d), attw (H, L, L)."""
    length, d = q.shape
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)
    qh = q.reshape(length, n_heads, hd)
    kh = k.reshape(length, n_heads, hd)
    vh = v.reshape(length, n_heads, hd)
    scores = np.einsum("ihc,jhc->hij", qh, kh) * scale
    mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    scores = np.where(mask[None, :, :], -np.inf, scores)
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("hij,jhc->ihc", w, vh).reshape(length, d)
    return out, w


def _mha_backward_np(
    dout: np.ndarray,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    attw: np.ndarray,
    n_heads: int,
):
    """Backward of ``_mha_forward_np``. Returns (dq, dk, dv), each (L, d)."""
    length, d = q.shape
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)
    dh = dout.reshape(length, n_heads, hd)
    qh = q.reshape(length, n_heads, hd)
    kh = k.reshape(length, n_heads, hd)
    vh = v.reshape(length, n_heads, hd)
    dw = np.einsum("ihc,jhc->hij", dh, vh)
    dscores = attw * (dw - (attw * dw).sum(axis=2, keepdims=True))
    dq = scale * np.einsum("hij,jhc->ihc", dscores, kh).reshape(length, d)
    dk = scale * np.einsum("hij,ihc->jhc", dscores, qh).reshape(length, d)
    dv = np.einsum("hij,ihc->jhc", attw, dh).reshape(length, d)
    return dq, dk, dv


def _step_attention_np(q: np.ndarray, k_cache: np.ndarray, v_cache: np.ndarray, n_heads: int):
    """One decode step: q (d,) attends over the cached keys/values (T, d)."""
    d = q.shape[0]
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)
    out = np.empty(d)
    for h in range(n_heads):
        lo = h * hd
        hi = lo + hd
        s = (k_cache[:, lo:hi] @ q[lo:hi]) * scale
        w = np.exp(s - s.max())
        w /= w.sum()
        out[lo:hi] = w @ v_cache[:, lo:hi]
    return out


# ---------------------------------------------------------------------------
# Numba implementations (same math, explicit loops)
# ---------------------------------------------------------------------------


def _mha_forward_py(q, k, v, n_heads):  # pragma: no cover - compiled variant is tested
    length, d = q.shape
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)
    out = np.zeros((length, d))
    attw = np.zeros((n_heads, length, length))
    for h in range(n_heads):
        base = h * hd
        for i in range(length):
            m = -1.0e300
            for j in range(i + 1):
                s = 0.0
                for c in range(hd):
                    s += q[i, base + c] * k[j, base + c]
                s *= scale
                attw[h, i, j] = s
                if s > m:
                    m = s
            z = 0.0
            for j in range(i + 1):
                e = math.exp(attw[h, i, j] - m)
                attw[h, i, j] = e
                z += e
            for j in range(i + 1):
                attw[h, i, j] /= z
                for c in range(hd):
                    out[i, base + c] += attw[h, i, j] * v[j, base + c]
    return out, attw


def _mha_backward_py(dout, q, k, v, attw, n_heads):  # pragma: no cover
    length, d = q.shape
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)
    dq = np.zeros((length, d))
    dk = np.zeros((length, d))
    dv = np.zeros((length, d))
    for h in range(n_heads):
        base = h * hd
        for i in range(length):
            dot = 0.0
            for j in range(i + 1):
                dwj = 0.0
                for c in range(hd):
                    dwj += dout[i, base + c] * v[j, base + c]
                dot += attw[h, i, j] * dwj
            for j in range(i + 1):
                dwj = 0.0
                for c in range(hd):
                    dwj += dout[i, base + c] * v[j, base + c]
                ds = attw[h, i, j] * (dwj - dot) * scale
                for c in range(hd):
                    dq[i, base + c] += ds * k[j, base + c]
                    dk[j, base + c] += ds * q[i, base + c]
                for c in range(hd):
                    dv[j, base + c] += attw[h, i, j] * dout[i, base + c]
    return dq, dk, dv


def _step_attention_py(q, k_cache, v_cache, n_heads):  # pragma: no cover
    t_len, d = k_cache.shape
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)
    out = np.zeros(d)
    s = np.empty(t_len)
    for h in range(n_heads):
        base = h * hd
        m = -1.0e300
        for t in range(t_len):
            acc = 0.0
            for c in range(hd):
                acc += k_cache[t, base + c] * q[base + c]
            acc *= scale
            s[t] = acc
            if acc > m:
                m = acc
        z = 0.0
        for t in range(t_len):
            s[t] = math.exp(s[t] - m)
            z += s[t]
        for t in range(t_len):
            w = s[t] / z
            for c in range(hd):
                out[base + c] += w * v_cache[t, base + c]
    return out


if _NUMBA_AVAILABLE:
    _mha_forward_nb = njit(cache=True, nogil=True)(_mha_forward_py)
    _mha_backward_nb = njit(cache=True, nogil=True)(_mha_backward_py)
    _step_attention_nb = njit(cache=True, nogil=True)(_step_attention_py)


NUMPY_IMPLS = {
    "mha_forward": _mha_forward_np,
    "mha_backward": _mha_backward_np,
    "step_attention": _step_attention_np,
}

NUMBA_IMPLS = (
    {
        "mha_forward": _mha_forward_nb,
        "mha_backward": _mha_backward_nb,
        "step_attention": _step_attention_nb,
    }
    if _NUMBA_AVAILABLE
    else None
)


def _select_backend() -> str:
    requested = os.environ.get("EMBRANK_BACKEND", "").strip().lower()
    if requested not in ("", "numba", "numpy"):
        raise RuntimeError(f"EMBRANK_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not _NUMBA_AVAILABLE:
        raise RuntimeError("EMBRANK_BACKEND=numba but numba is not importable")
    if requested == "numpy" or not _NUMBA_AVAILABLE:
        return "numpy"
    return "numba"


_BACKEND = _select_backend()
_ACTIVE = NUMBA_IMPLS if _BACKEND == "numba" else NUMPY_IMPLS

causal_mha_forward = _ACTIVE["mha_forward"]
causal_mha_backward = _ACTIVE["mha_backward"]
step_attention = _ACTIVE["step_attention"]


def active_backend() -> str:
    """Which kernel set this process is using ('numba' or 'numpy')."""
    return _BACKEND
