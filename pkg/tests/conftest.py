"""Shared oracles: finite-difference gradients and a naive DFT."""

import numpy as np

from audiotrim import tensor as T


def naive_dft(x):
    """O(n^2) reference DFT in float64, independent of the fft module."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ w.T


def directional_gradcheck(build, x0, rng, eps=1e-2, rtol=2e-2, atol=3e-3):
    """Compare backward() against a central finite difference.

    build(tensor) must return a scalar Tensor. The check is directional:
    one random unit direction per call, which keeps float32 FD noise in
    check while still exercising every gradient entry.
    """
    x = T.Tensor(x0, requires_grad=True)
    loss = build(x)
    loss.backward()
    g = x.grad.astype(np.float64)

    v = rng.standard_normal(x0.shape)
    v /= np.linalg.norm(v) + 1e-12
    analytic = float((g * v).sum())

    def f(arr):
        return float(build(T.Tensor(arr)).data)

    fd = (f(x0 + eps * v.astype(np.float32)) - f(x0 - eps * v.astype(np.float32))) / (2 * eps)
    err = abs(fd - analytic)
    tol = atol + rtol * max(abs(fd), abs(analytic))
    assert err <= tol, f"grad mismatch: analytic {analytic}, fd {fd}, err {err}"


def adjoint_dot_check(op, x0, rng, rtol=1e-4):
    """For a linear op L, verify <L x, y> == <x, L^T y> via backward()."""
    x = T.Tensor(x0, requires_grad=True)
    out = op(x)
    y = rng.standard_normal(out.shape).astype(np.float32)
    lhs = float((out.data.astype(np.float64) * y).sum())
    T.tsum(T.mul(out, T.Tensor(y))).backward()
    rhs = float((x.grad.astype(np.float64) * x0).sum())
    assert abs(lhs - rhs) <= rtol * (abs(lhs) + abs(rhs) + 1.0), (lhs, rhs)
