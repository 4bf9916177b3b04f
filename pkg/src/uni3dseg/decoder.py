"""Fusion layers, mask prediction, and the multimodal semantic ensemble.

Queries (instance, description, image) are refined against the spatially
enhanced features through pre-norm residual fusion blocks, so zeroed output
projections make every block an exact identity. Mask logits are plain
query-feature dot products; the semantic ensemble max-pools each modality
over its per-class slots and sums the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import encode, spatial_enhance
from .model import FusionLayer, FusionParams, Model
from .queries import QueryBank, project_queries
from .scenes import SuperpointScene, unpool
from .tensor import ShapeError, Tensor


@dataclass
class InstanceQuerySet:
    vectors: Tensor      # (S, d)
    origin: str          # "sampled-superpoint" or "learnable"


@dataclass
class MaskBundle:
    m_ins: Tensor    # (M, S) instance mask logits
    m_t: Tensor      # (M, C, K) description mask logits
    m_o: Tensor      # (M, C, L) image mask logits
    cls_ins: Tensor  # (S, C + 1) class logits, last column = no-object


@dataclass
class DecodeResult:
    scene: SuperpointScene
    x_enh: Tensor            # (M, d)
    q_t_proj: Tensor         # (C, K, d) projected description queries, pre-fusion
    q_o_proj: Tensor         # (C, L, d) projected image queries, pre-fusion
    instance_queries: InstanceQuerySet
    bundle: MaskBundle
    m_sem: Tensor            # (M, C)

    def point_semantic_logits(self) -> np.ndarray:
        """Per-point semantic logits, broadcast from superpoints."""
        return unpool(self.m_sem.data, self.scene.assignment)

    def point_instance_logits(self) -> np.ndarray:
        """Per-point instance mask logits (N, S)."""
        return unpool(self.bundle.m_ins.data, self.scene.assignment)


def _attend(q_rows: Tensor, kv_rows: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
            wo: Tensor, bo: Tensor) -> Tensor:
    d = wq.shape[1]
    q = T.matmul(q_rows, wq)
    k = T.matmul(kv_rows, wk)
    v = T.matmul(kv_rows, wv)
    alpha = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d)))
    return T.add(T.matmul(T.matmul(alpha, v), wo), bo)


def _fusion_block(q: Tensor, x_enh: Tensor, layer: FusionLayer) -> Tensor:
    a = _attend(T.layer_norm(q, layer.ln1_g, layer.ln1_b), x_enh,
                layer.ca_wq, layer.ca_wk, layer.ca_wv, layer.ca_wo, layer.ca_bo)
    q = T.add(q, a)
    normed = T.layer_norm(q, layer.ln2_g, layer.ln2_b)
    s = _attend(normed, normed,
                layer.sa_wq, layer.sa_wk, layer.sa_wv, layer.sa_wo, layer.sa_bo)
    q = T.add(q, s)
    h = T.relu(T.add(T.matmul(T.layer_norm(q, layer.ln3_g, layer.ln3_b), layer.ff_w1),
                     layer.ff_b1))
    return T.add(q, T.add(T.matmul(h, layer.ff_w2), layer.ff_b2))


def fuse(queries: Tensor, x_enh: Tensor, params: FusionParams) -> Tensor:
    """Refine queries against read-only scene features through B residual blocks."""
    if queries.shape[1] != x_enh.shape[1]:
        raise ShapeError(
            f"fuse: query width {queries.shape[1]} != feature width {x_enh.shape[1]}"
        )
    q = queries
    for layer in params.layers:
        q = _fusion_block(q, x_enh, layer)
    return q


def predict_masks(q_ins: Tensor, q_t: Tensor, q_o: Tensor, x_enh: Tensor,
                  cls_w: Tensor, cls_b: Tensor) -> MaskBundle:
    """Mask logits as query-feature inner products plus the instance class head."""
    d = x_enh.shape[1]
    for name, q in (("instance", q_ins), ("description", q_t), ("image", q_o)):
        if q.shape[-1] != d:
            raise ShapeError(f"predict_masks: {name} query width {q.shape[-1]} != {d}")
    m = x_enh.shape[0]
    c, k, _ = q_t.shape
    l = q_o.shape[1]
    m_ins = T.matmul(x_enh, T.transpose(q_ins))
    m_t = T.reshape(T.matmul(x_enh, T.transpose(T.reshape(q_t, (c * k, d)))), (m, c, k))
    m_o = T.reshape(T.matmul(x_enh, T.transpose(T.reshape(q_o, (c * l, d)))), (m, c, l))
    cls_ins = T.add(T.matmul(q_ins, cls_w), cls_b)
    return MaskBundle(m_ins=m_ins, m_t=m_t, m_o=m_o, cls_ins=cls_ins)


def ensemble_semantic(m_t: Tensor, m_o: Tensor) -> Tensor:
    """Per-class max over description and image slots, summed across modalities."""
    if m_t.shape[:2] != m_o.shape[:2]:
        raise ShapeError(
            f"ensemble_semantic: incompatible shapes {m_t.shape} and {m_o.shape}"
        )
    return T.add(T.reduce_max_axis(m_t, axis=2), T.reduce_max_axis(m_o, axis=2))


def instance_queries(x_enh: Tensor, model: Model, seed: int) -> InstanceQuerySet:
    """Instance queries from S uniformly sampled superpoint features.

    Each slot adds its learnable embedding to the sampled-feature projection,
    giving queries a persistent identity across the per-scene resampling.
    Scenes with fewer superpoints than queries use the learnable bank alone.
    """
    m = x_enh.shape[0]
    s = model.hp.num_queries
    if m < s:
        return InstanceQuerySet(vectors=model.query_learnable, origin="learnable")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x51]))
    picks = np.sort(rng.choice(m, size=s, replace=False))
    sampled = T.index_select(x_enh, picks)
    vectors = T.add(T.add(T.matmul(sampled, model.query_init_w), model.query_init_b),
                    model.query_learnable)
    return InstanceQuerySet(vectors=vectors, origin="sampled-superpoint")


def decode(scene: SuperpointScene, bank: QueryBank, model: Model, seed: int = 0) -> DecodeResult:
    """Run the full pipeline on one superpoint scene.

    encode -> spatial_enhance -> project_queries -> fuse -> predict_masks ->
    ensemble_semantic. Deterministic for a fixed (scene, parameters, seed).
    """
    if bank.catalog.num_classes != model.hp.num_classes:
        raise ShapeError(
            f"decode: bank has {bank.catalog.num_classes} classes, "
            f"model expects {model.hp.num_classes}"
        )
    x = encode(scene, model.encoder)
    x_enh = spatial_enhance(x, model.spatial, seed=seed)
    q_t, q_o = project_queries(bank, model.projector)
    iq = instance_queries(x_enh, model, seed)

    c, k, d = q_t.shape
    l = q_o.shape[1]
    s = iq.vectors.shape[0]
    stacked = T.concat([iq.vectors, T.reshape(q_t, (c * k, d)), T.reshape(q_o, (c * l, d))],
                       axis=0)
    refined = fuse(stacked, x_enh, model.fusion)
    r_ins = T.index_select(refined, np.arange(s))
    r_t = T.reshape(T.index_select(refined, s + np.arange(c * k)), (c, k, d))
    r_o = T.reshape(T.index_select(refined, s + c * k + np.arange(c * l)), (c, l, d))

    bundle = predict_masks(r_ins, r_t, r_o, x_enh, model.cls_w, model.cls_b)
    m_sem = ensemble_semantic(bundle.m_t, bundle.m_o)
    return DecodeResult(scene=scene, x_enh=x_enh, q_t_proj=q_t, q_o_proj=q_o,
                        instance_queries=iq, bundle=bundle, m_sem=m_sem)
