"""Per-superpoint feature extraction and sparse-subset attention enhancement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .scenes import SuperpointScene
from .tensor import ShapeError, Tensor


class ScoreCounter:
    """Counts attention score evaluations, for cost-scaling assertions."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


score_evals = ScoreCounter()


@dataclass
class EncoderParams:
    """Perceptron stack mapping 6 input attributes to d features (two hidden layers)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def out_width(self) -> int:
        return self.w3.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


@dataclass
class SpatialEnhanceParams:
    w_q: Tensor          # (d, d)
    w_k: Tensor          # (d, d)
    w_v: Tensor          # (d, d)
    subset_size: int = 128
    rng_seed: int = 0

    def __post_init__(self):
        if self.subset_size < 1:
            raise ShapeError("subset_size must be >= 1")

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


def encode(scene: SuperpointScene, params: EncoderParams) -> Tensor:
    """Row-wise features for each superpoint; row i sees only input row i."""
    feats = Tensor(scene.features_in)
    if feats.shape[1] != params.w1.shape[0]:
        raise ShapeError(
            f"encoder expects {params.w1.shape[0]} input attributes, scene has {feats.shape[1]}"
        )
    h = T.relu(T.add(T.matmul(feats, params.w1), params.b1))
    h = T.relu(T.add(T.matmul(h, params.w2), params.b2))
    return T.add(T.matmul(h, params.w3), params.b3)


def sample_subsets(m: int, s: int, seed: int) -> np.ndarray:
    """Index matrix (m, min(s, m)); row i always contains i, drawn without replacement.

    Row i's subset comes from row i of a seed-keyed random block, so it is a
    pure function of (seed, i, m) regardless of evaluation order.
    """
    s_eff = min(s, m)
    if s_eff == m:
        idx = np.tile(np.arange(m, dtype=np.int64), (m, 1))
        # rotate self to the front; subset contents are what matters
        idx[np.diag_indices(m)] = idx[:, 0]
        idx[:, 0] = np.arange(m)
        return idx
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFF, m]))
    keys = rng.random((m, m))
    np.fill_diagonal(keys, -1.0)  # self sorts first
    part = np.argpartition(keys, s_eff - 1, axis=1)[:, :s_eff].astype(np.int64)
    # put self at column 0 for readability
    self_col = np.argmax(part == np.arange(m)[:, None], axis=1)
    rows = np.arange(m)
    part[rows, self_col] = part[:, 0]
    part[:, 0] = rows
    return part


def subset_attention(q: Tensor, k: Tensor, v: Tensor, idx: np.ndarray) -> Tensor:
    """Scaled-dot-product attention of row i over rows ``idx[i]``; fused op.

    Exactly one score per (row, subset slot) is evaluated. The backward pass
    scatters through a shared (rows_out, rows_in) coefficient matrix so no
    (m, s, d) temporaries are materialized.
    """
    m, d = q.shape
    k_sel = k.data[idx]  # (m, s, d)
    v_sel = v.data[idx]
    inv_sqrt_d = 1.0 / math.sqrt(d)
    scores = np.einsum("md,msd->ms", q.data, k_sel) * inv_sqrt_d
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    alpha = e / e.sum(axis=1, keepdims=True)
    out = np.einsum("ms,msd->md", alpha, v_sel)

    def bwd(g):
        d_alpha = np.einsum("md,msd->ms", g, v_sel)
        ds = alpha * (d_alpha - (d_alpha * alpha).sum(axis=1, keepdims=True)) * inv_sqrt_d
        dq = np.einsum("ms,msd->md", ds, k_sel)
        n_in = k.shape[0]
        lin = (idx * m + np.arange(m)[:, None]).ravel()
        coeff_k = np.bincount(lin, weights=ds.ravel(), minlength=n_in * m).reshape(n_in, m)
        coeff_v = np.bincount(lin, weights=alpha.ravel(), minlength=n_in * m).reshape(n_in, m)
        return dq, coeff_k @ q.data, coeff_v @ g

    return T.make_op(out, (q, k, v), bwd, "subset_attention")


def spatial_enhance(x: Tensor, params: SpatialEnhanceParams, seed: int | None = None) -> Tensor:
    """Attend each superpoint over a random subset of the scene.

    For each row i, a subset S_i of size min(s, M) containing i is drawn from
    a per-(seed, i) stream; attention weights are a scaled-dot-product softmax
    over S_i and the output is the weighted sum of value rows. Exactly
    M * min(s, M) score evaluations are performed.
    """
    m, _ = x.shape
    if m < 1:
        raise ShapeError("spatial_enhance requires at least one row")
    s_eff = min(params.subset_size, m)
    idx = sample_subsets(m, params.subset_size, params.rng_seed if seed is None else seed)
    score_evals.add(m * s_eff)
    q = T.matmul(x, params.w_q)
    k = T.matmul(x, params.w_k)
    v = T.matmul(x, params.w_v)
    return subset_attention(q, k, v, idx)
