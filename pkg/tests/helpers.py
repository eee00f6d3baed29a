"""Shared test utilities: finite-difference checking and a naive DFT oracle."""

import numpy as np

from nutriscope.tensor import Tensor


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def naive_dft2(x):
    """Direct O(N^4) two-dimensional DFT, the oracle for fft2."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    out = np.zeros(x.shape, dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            phase = np.exp(
                -2j * np.pi * (
                    u * np.arange(h)[:, None] / h + v * np.arange(w)[None, :] / w
                )
            )
            out[..., u, v] = (x * phase).sum(axis=(-2, -1))
    return out


def directional_grad_check(loss_fn, params, n_directions=20, step=1e-5,
                           tol=1e-4, seed=0):
    """Compare analytic directional derivatives against central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter data.
    Returns the worst relative error over all random directions.
    """
    gen = rng(seed)
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.copy() for p in params]
    worst = 0.0
    for _ in range(n_directions):
        direction = [gen.normal(size=p.data.shape) for p in params]
        norm = np.sqrt(sum((d * d).sum() for d in direction))
        direction = [d / norm for d in direction]
        analytic = sum((d * g).sum() for d, g in zip(direction, grads))
        saved = [p.data.copy() for p in params]
        for p, d, s in zip(params, direction, saved):
            p.data = s + step * d
        up = loss_fn().item()
        for p, d, s in zip(params, direction, saved):
            p.data = s - step * d
        down = loss_fn().item()
        for p, s in zip(params, saved):
            p.data = s
        numeric = (up - down) / (2.0 * step)
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    assert worst < tol, f"directional derivative off by rel. err {worst:.3e}"
    return worst


def leaf(data, seed=None):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
