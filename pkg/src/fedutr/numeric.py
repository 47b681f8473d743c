"""Dense numeric primitives with hand-written backward passes.

Forward functions return ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Everything is float64.
Functions accept a single vector ``(d,)`` or a stack of row vectors
``(k, d)``; parameters are shared across rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MissingCacheError(RuntimeError):
    pass


def as_float(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_shape(arr, shape, name="array"):
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {tuple(arr.shape)}")


def check_same_shape(a, b, what="operands"):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _require(cache):
    if cache is None:
        raise MissingCacheError("backward called without a forward cache")
    return cache


def _last_dim(x, d, name):
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise ShapeError(f"{name}: expected (..., {d}), got {x.shape}")


# ---------------------------------------------------------------- affine

def affine_forward(W, b, x):
    """Rows of ``x`` mapped through ``W @ x + b``."""
    W = as_float(W, "W")
    b = as_float(b, "b")
    x = as_float(x, "x")
    if W.ndim != 2:
        raise ShapeError(f"W must be 2-D, got {W.shape}")
    check_shape(b, (W.shape[0],), "b")
    _last_dim(x, W.shape[1], "x")
    out = x @ W.T + b
    return out, (W, x)


def affine_backward(dout, cache):
    W, x = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    check_shape(dout, x.shape[:-1] + (W.shape[0],), "dout")
    dx = dout @ W
    if x.ndim == 1:
        dW = np.outer(dout, x)
        db = dout.copy()
    else:
        dW = dout.T @ x
        db = dout.sum(axis=0)
    return dx, dW, db


def affine(W, b, x):
    return affine_forward(W, b, x)[0]


# ------------------------------------------------------------ activations

def relu_forward(x):
    x = as_float(x)
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    x = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    check_same_shape(dout, x, "relu_backward")
    # subgradient at exactly 0 is 0
    return dout * (x > 0.0)


def relu(x):
    return relu_forward(x)[0]


def sigmoid_forward(x):
    x = as_float(x)
    s = expit(x)
    return s, s


def sigmoid_backward(dout, cache):
    s = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    check_same_shape(dout, s, "sigmoid_backward")
    return dout * s * (1.0 - s)


def sigmoid(x):
    return sigmoid_forward(x)[0]


def log_sigmoid(x):
    """``log(sigmoid(x))`` without cancellation for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


# ------------------------------------------------------------- layer norm

def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    """Normalise each row over its last axis (population variance)."""
    x = as_float(x)
    gamma = as_float(gamma, "gamma")
    beta = as_float(beta, "beta")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    _last_dim(x, d, "x")
    check_shape(gamma, (d,), "gamma")
    check_shape(beta, (d,), "beta")
    out, xhat, inv_std = ln_kernel(x, gamma, beta, eps)
    return out, (xhat, inv_std, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv_std, gamma = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    check_same_shape(dout, xhat, "layer_norm_backward")
    return ln_backward_kernel(dout, xhat, inv_std, gamma)


# Unchecked kernels: callers guarantee shapes and finiteness.

def ln_kernel(x, gamma, beta, eps=LN_EPS):
    d = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / d
    var = np.einsum("...d,...d->...", xc, xc)[..., None] / d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return gamma * xhat + beta, xhat, inv_std


def ln_backward_kernel(dout, xhat, inv_std, gamma):
    d = xhat.shape[-1]
    if xhat.ndim == 1:
        dgamma = dout * xhat
        dbeta = dout.copy()
    else:
        dgamma = np.einsum("kd,kd->d", dout, xhat)
        dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = (inv_std / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * np.einsum("...d,...d->...", dxhat, xhat)[..., None]
    )
    return dx, dgamma, dbeta


def layer_norm(x, gamma, beta, eps=LN_EPS):
    return layer_norm_forward(x, gamma, beta, eps)[0]


# ------------------------------------------------------ elementwise & dot

def add_forward(a, b):
    a, b = as_float(a, "a"), as_float(b, "b")
    check_same_shape(a, b, "add")
    return a + b, a.shape


def add_backward(dout, cache):
    shape = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    check_shape(dout, shape, "dout")
    return dout.copy(), dout.copy()


def mul_forward(a, b):
    a, b = as_float(a, "a"), as_float(b, "b")
    check_same_shape(a, b, "mul")
    return a * b, (a, b)


def mul_backward(dout, cache):
    a, b = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    check_same_shape(dout, a, "mul_backward")
    return dout * b, dout * a


def dot_forward(u, v):
    """Row-wise inner product; ``u`` may be one vector scored against rows ``v``."""
    u, v = as_float(u, "u"), as_float(v, "v")
    if u.ndim != 1:
        raise ShapeError(f"u must be a vector, got {u.shape}")
    _last_dim(v, u.shape[0], "v")
    return v @ u, (u, v)


def dot_backward(dout, cache):
    u, v = _require(cache)
    dout = np.asarray(dout, dtype=np.float64)
    if v.ndim == 1:
        return float(dout) * v, float(dout) * u
    check_shape(dout, (v.shape[0],), "dout")
    return dout @ v, np.outer(dout, u)


# --------------------------------------------------------------- sampling

def make_rng(seed, *keys):
    """PCG64 stream keyed by ``(seed, *keys)``.

    Keys are hashed through ``SeedSequence`` so that the stream for, say,
    ``(seed, client, round)`` does not depend on the order in which
    other streams were drawn.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sample_uniform(rng, low, high, shape):
    return rng.uniform(low, high, size=shape)


def sample_gaussian(rng, std, shape):
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def sample_laplace(rng, scale, shape):
    """I.i.d. zero-mean Laplace noise; ``scale == 0`` gives exact zeros."""
    if scale < 0:
        raise ValueError(f"Laplace scale must be >= 0, got {scale}")
    if scale == 0:
        return np.zeros(shape)
    return rng.laplace(0.0, scale, size=shape)


# ----------------------------------------------------- finite differences

@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: np.ndarray = field(repr=False)
    tol: float
    passed: bool

    def __bool__(self):
        return self.passed


def numeric_grad(f, x, step=1e-6):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x)
        flat[j] = orig - step
        fm = f(x)
        flat[j] = orig
        g[j] = (fp - fm) / (2.0 * step)
    return grad


def finite_diff_check(f, x, analytic_grad, step=1e-6, tol=1e-4, floor=1e-8):
    """Compare ``analytic_grad`` with central differences of scalar ``f`` at ``x``.

    Relative error per coordinate is ``|a - n| / max(|a| + |n|, floor)``, so
    coordinates where both gradients vanish do not blow up the ratio.
    """
    num = numeric_grad(f, x, step)
    ana = np.asarray(analytic_grad, dtype=np.float64)
    check_same_shape(num, ana, "finite_diff_check")
    rel = np.abs(ana - num) / np.maximum(np.abs(ana) + np.abs(num), floor)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, rel, tol, worst <= tol)
