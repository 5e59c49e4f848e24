"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a pure-numpy version and a numba ``@njit``
version with identical semantics. The active backend is chosen by the
``POCKFORMER_BACKEND`` env var (``auto`` | ``numba`` | ``numpy``, default
``auto`` = numba when importable) and can be switched at runtime with
:func:`set_backend`. ``benchmarks/kernel_bench.py`` compares the two.

All kernels operate on float64 arrays. The numba versions avoid fastmath
so that both backends agree to rounding error and results stay
deterministic for a fixed backend.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _resolve_backend(name: str) -> str:
    if name == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if name == "numba" and not HAS_NUMBA:
        import warnings

        warnings.warn("numba not importable, falling back to numpy kernels")
        return "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return name


_backend = _resolve_backend(os.environ.get("POCKFORMER_BACKEND", "auto"))


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch kernel backend at runtime; returns the backend now in effect."""
    global _backend
    _backend = _resolve_backend(name)
    return _backend


# ---------------------------------------------------------------- numpy ----


def _layer_norm_fwd_np(x, g, b, eps):
    mean = x.mean(axis=-1)
    var = ((x - mean[..., None]) ** 2).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[..., None]) * rstd[..., None]
    return xhat * g + b, mean, rstd


def _layer_norm_bwd_np(dy, x, g, mean, rstd):
    xhat = (x - mean[..., None]) * rstd[..., None]
    dg = (dy * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1)
    m2 = (dxhat * xhat).mean(axis=-1)
    dx = (dxhat - m1[..., None] - xhat * m2[..., None]) * rstd[..., None]
    return dx, dg, db


def _gelu_fwd_np(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * x * (1.0 + t)


def _gelu_bwd_np(dy, x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def _causal_softmax_np(scores):
    n, t, _ = scores.shape
    mask = np.tril(np.ones((t, t), dtype=bool))
    masked = np.where(mask, scores, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_softmax_bwd_np(dp, p):
    s = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - s)


def _adamw_update_np(p, grad, m, v, t, lr, beta1, beta2, eps, wd):
    if wd != 0.0:
        p *= 1.0 - lr * wd
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------- numba ----


@njit(cache=True)
def _layer_norm_fwd_nb(x, g, b, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            dv = x[i, j] - mu
            var += dv * dv
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * g[j] + b[j]
    return y, mean, rstd


@njit(cache=True)
def _layer_norm_bwd_nb(dy, x, g, mean, rstd):
    n, d = x.shape
    dx = np.empty_like(x)
    dg = np.zeros(d)
    db = np.zeros(d)
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dxh = dy[i, j] * g[j]
            dg[j] += dy[i, j] * xh
            db[j] += dy[i, j]
            m1 += dxh
            m2 += dxh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dxh = dy[i, j] * g[j]
            dx[i, j] = (dxh - m1 - xh * m2) * r
    return dx, dg, db


@njit(cache=True)
def _gelu_fwd_nb(x):
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        xi = flat_x[i]
        t = math.tanh(_GELU_C * (xi + _GELU_A * xi * xi * xi))
        flat_o[i] = 0.5 * xi * (1.0 + t)
    return out


@njit(cache=True)
def _gelu_bwd_nb(dy, x):
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_dy = dy.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        xi = flat_x[i]
        t = math.tanh(_GELU_C * (xi + _GELU_A * xi * xi * xi))
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xi * xi)
        flat_o[i] = flat_dy[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
    return out


@njit(cache=True)
def _causal_softmax_nb(scores):
    n, t, _ = scores.shape
    p = np.zeros_like(scores)
    for b in range(n):
        for i in range(t):
            m = scores[b, i, 0]
            for j in range(1, i + 1):
                if scores[b, i, j] > m:
                    m = scores[b, i, j]
            s = 0.0
            for j in range(i + 1):
                e = math.exp(scores[b, i, j] - m)
                p[b, i, j] = e
                s += e
            for j in range(i + 1):
                p[b, i, j] /= s
    return p


@njit(cache=True)
def _causal_softmax_bwd_nb(dp, p):
    n, t, _ = p.shape
    ds = np.zeros_like(p)
    for b in range(n):
        for i in range(t):
            s = 0.0
            for j in range(i + 1):
                s += dp[b, i, j] * p[b, i, j]
            for j in range(i + 1):
                ds[b, i, j] = p[b, i, j] * (dp[b, i, j] - s)
    return ds


@njit(cache=True)
def _adamw_update_nb(p, grad, m, v, t, lr, beta1, beta2, eps, wd):
    fp = p.ravel()
    fg = grad.ravel()
    fm = m.ravel()
    fv = v.ravel()
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    decay = 1.0 - lr * wd
    for i in range(fp.size):
        if wd != 0.0:
            fp[i] *= decay
        fm[i] = beta1 * fm[i] + (1.0 - beta1) * fg[i]
        fv[i] = beta2 * fv[i] + (1.0 - beta2) * fg[i] * fg[i]
        fp[i] -= lr * (fm[i] / c1) / (math.sqrt(fv[i] / c2) + eps)


# ------------------------------------------------------------- dispatch ----


def layer_norm_fwd(x, g, b, eps=1e-5):
    """Row-wise layer norm over the last axis of a 2-D array.

    Returns (y, mean, rstd); mean/rstd are cached for the backward pass.
    """
    if _backend == "numba":
        return _layer_norm_fwd_nb(x, g, b, eps)
    return _layer_norm_fwd_np(x, g, b, eps)


def layer_norm_bwd(dy, x, g, mean, rstd):
    if _backend == "numba":
        return _layer_norm_bwd_nb(dy, x, g, mean, rstd)
    return _layer_norm_bwd_np(dy, x, g, mean, rstd)


def gelu_fwd(x):
    """tanh-approximation GELU."""
    if _backend == "numba":
        return _gelu_fwd_nb(np.ascontiguousarray(x))
    return _gelu_fwd_np(x)


def gelu_bwd(dy, x):
    if _backend == "numba":
        return _gelu_bwd_nb(np.ascontiguousarray(dy), np.ascontiguousarray(x))
    return _gelu_bwd_np(dy, x)


def causal_softmax(scores):
    """Softmax over the last axis of (rows, T, T) scores with entries
    above the diagonal masked out exactly (probability 0)."""
    if _backend == "numba":
        return _causal_softmax_nb(np.ascontiguousarray(scores))
    return _causal_softmax_np(scores)


def causal_softmax_bwd(dp, p):
    if _backend == "numba":
        return _causal_softmax_bwd_nb(np.ascontiguousarray(dp), np.ascontiguousarray(p))
    return _causal_softmax_bwd_np(dp, p)


def adamw_update(p, grad, m, v, t, lr, beta1, beta2, eps, wd):
    """In-place decoupled-weight-decay Adam update of one parameter array."""
    if _backend == "numba":
        _adamw_update_nb(p, np.ascontiguousarray(grad), m, v, t, lr, beta1, beta2, eps, wd)
    else:
        _adamw_update_np(p, grad, m, v, t, lr, beta1, beta2, eps, wd)
