"""Shared test helpers: numerical oracles kept independent of the library code."""

from __future__ import annotations

import numpy as np

from uni3dseg.tensor import Tensor


def finite_difference_grads(f, arrays, h=1e-5):
    """Central finite differences of a scalar function of numpy arrays."""
    grads = []
    work = [a.copy() for a in arrays]
    for k in range(len(work)):
        g = np.zeros_like(work[k])
        flat = work[k].reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*work)
            flat[i] = orig - h
            f_minus = f(*work)
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def assert_gradients_match(build_loss, arrays, h=1e-5, rtol=1e-4, atol=1e-7):
    """Check autodiff gradients of ``build_loss`` against central differences.

    ``build_loss`` maps Tensors to a scalar Tensor; ``arrays`` are the leaf
    values it differentiates with respect to.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*leaves)
    loss.backward()

    def f(*arrs):
        return build_loss(*[Tensor(a) for a in arrs]).item()

    numeric = finite_difference_grads(f, arrays, h=h)
    for leaf, num in zip(leaves, numeric):
        assert leaf.grad is not None, "missing gradient on a leaf"
        np.testing.assert_allclose(leaf.grad, num, rtol=rtol, atol=atol)


def dense_attention_reference(x, w_q, w_k, w_v):
    """Full O(M^2) single-head attention, written directly from its definition."""
    q = x @ w_q
    k = x @ w_k
    v = x @ w_v
    d = x.shape[1]
    scores = q @ k.T / np.sqrt(d)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    alpha = e / e.sum(axis=1, keepdims=True)
    return alpha @ v
