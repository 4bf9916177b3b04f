"""Full segmentation model: parameter containers, initialization, checkpoints.

A checkpoint is a single file: one JSON header line carrying the
hyperparameters (d, S, B, s, C, K, L, d_e, voxel_size), followed by a U3DT
container holding every parameter tensor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import ContainerError, container_bytes, parse_container
from .encoder import EncoderParams, SpatialEnhanceParams
from .queries import QueryProjector
from .tensor import Tensor


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class HyperParams:
    d: int = 32                   # decoder feature width
    num_queries: int = 16         # instance query count S
    fusion_layers: int = 2        # fusion depth B
    subset_size: int = 64         # attention subset size s
    num_classes: int = 6          # C
    descriptions_per_class: int = 4   # K
    images_per_class: int = 3         # L
    d_e: int = 32                 # offline embedding width
    voxel_size: float = 0.3
    ffn_multiplier: int = 2
    encoder_hidden: int = 32

    def to_json(self) -> dict:
        return {
            "d": self.d, "S": self.num_queries, "B": self.fusion_layers,
            "s": self.subset_size, "C": self.num_classes,
            "K": self.descriptions_per_class, "L": self.images_per_class,
            "d_e": self.d_e, "voxel_size": self.voxel_size,
            "ffn_multiplier": self.ffn_multiplier,
            "encoder_hidden": self.encoder_hidden,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HyperParams":
        return cls(
            d=int(doc["d"]), num_queries=int(doc["S"]), fusion_layers=int(doc["B"]),
            subset_size=int(doc["s"]), num_classes=int(doc["C"]),
            descriptions_per_class=int(doc["K"]), images_per_class=int(doc["L"]),
            d_e=int(doc["d_e"]), voxel_size=float(doc["voxel_size"]),
            ffn_multiplier=int(doc.get("ffn_multiplier", 2)),
            encoder_hidden=int(doc.get("encoder_hidden", 32)),
        )


@dataclass
class FusionLayer:
    """One pre-norm fusion block: cross-attention, self-attention, feed-forward."""

    ln1_g: Tensor
    ln1_b: Tensor
    ca_wq: Tensor
    ca_wk: Tensor
    ca_wv: Tensor
    ca_wo: Tensor
    ca_bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    sa_wq: Tensor
    sa_wk: Tensor
    sa_wv: Tensor
    sa_wo: Tensor
    sa_bo: Tensor
    ln3_g: Tensor
    ln3_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class FusionParams:
    layers: list[FusionLayer] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass
class Model:
    hp: HyperParams
    encoder: EncoderParams
    spatial: SpatialEnhanceParams
    projector: QueryProjector
    fusion: FusionParams
    query_init_w: Tensor       # (d, d) linear on sampled superpoint features
    query_init_b: Tensor       # (d,)
    query_learnable: Tensor    # (S, d) fallback when a scene has M < S
    cls_w: Tensor              # (d, C + 1)
    cls_b: Tensor              # (C + 1,)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, t in self.encoder.parameters().items():
            params[f"encoder/{name}"] = t
        for name, t in self.spatial.parameters().items():
            params[f"spatial/{name}"] = t
        for name, t in self.projector.parameters().items():
            params[f"projector/{name}"] = t
        for i, layer in enumerate(self.fusion.layers):
            for name, t in layer.parameters().items():
                params[f"fusion/{i}/{name}"] = t
        params["query_init/w"] = self.query_init_w
        params["query_init/b"] = self.query_init_b
        params["query_learnable"] = self.query_learnable
        params["cls/w"] = self.cls_w
        params["cls/b"] = self.cls_b
        return params


def _linear(rng, fan_in, fan_out, gain=1.0):
    std = gain * np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)


def _identity_dominant(rng, d, scale, noise=0.02):
    # attention projections start near scale*I so row i initially attends to
    # itself and feature-similar rows instead of averaging the whole subset
    return Tensor(scale * np.eye(d) + rng.normal(0.0, noise, size=(d, d)),
                  requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _fusion_layer(rng, d, ffn_mult) -> FusionLayer:
    h = d * ffn_mult
    return FusionLayer(
        ln1_g=_ones(d), ln1_b=_zeros(d),
        ca_wq=_linear(rng, d, d), ca_wk=_linear(rng, d, d), ca_wv=_linear(rng, d, d),
        ca_wo=_zeros(d, d), ca_bo=_zeros(d),
        ln2_g=_ones(d), ln2_b=_zeros(d),
        sa_wq=_linear(rng, d, d), sa_wk=_linear(rng, d, d), sa_wv=_linear(rng, d, d),
        sa_wo=_zeros(d, d), sa_bo=_zeros(d),
        ln3_g=_ones(d), ln3_b=_zeros(d),
        ff_w1=_linear(rng, d, h), ff_b1=_zeros(h),
        ff_w2=_zeros(h, d), ff_b2=_zeros(d),
    )


def init_model(hp: HyperParams, seed: int = 0) -> Model:
    """Build a model with seeded initialization.

    Attention output projections and feed-forward output layers start at
    zero, so every fusion layer begins as the identity map.
    """
    rng = np.random.default_rng(seed)
    d, d_e = hp.d, hp.d_e
    h_enc = hp.encoder_hidden
    encoder = EncoderParams(
        w1=_linear(rng, 6, h_enc), b1=_zeros(h_enc),
        w2=_linear(rng, h_enc, h_enc), b2=_zeros(h_enc),
        w3=_linear(rng, h_enc, d), b3=_zeros(d),
    )
    spatial = SpatialEnhanceParams(
        w_q=_identity_dominant(rng, d, scale=2.0),
        w_k=_identity_dominant(rng, d, scale=2.0),
        w_v=_identity_dominant(rng, d, scale=1.0),
        subset_size=hp.subset_size, rng_seed=seed,
    )
    projector = QueryProjector(
        w1=_linear(rng, d_e, d), b1=_zeros(d),
        w2=_linear(rng, d, d), b2=_zeros(d),
    )
    fusion = FusionParams(layers=[_fusion_layer(rng, d, hp.ffn_multiplier)
                                  for _ in range(hp.fusion_layers)])
    return Model(
        hp=hp,
        encoder=encoder,
        spatial=spatial,
        projector=projector,
        fusion=fusion,
        query_init_w=_linear(rng, d, d),
        query_init_b=_zeros(d),
        query_learnable=Tensor(rng.normal(0, 0.1, size=(hp.num_queries, d)), requires_grad=True),
        cls_w=_zeros(d, hp.num_classes + 1),
        cls_b=_zeros(hp.num_classes + 1),
    )


def save_checkpoint(path, model: Model, extra_arrays: dict | None = None,
                    extra_header: dict | None = None) -> None:
    doc = {"format": "u3dseg-checkpoint", "version": 1, "hyperparams": model.hp.to_json()}
    if extra_header:
        doc.update(extra_header)
    header = json.dumps(doc, sort_keys=True)
    arrays = {name: t.data for name, t in model.parameters().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    Path(path).write_bytes(header.encode("utf-8") + b"\n" + container_bytes(arrays))


def load_checkpoint_full(path) -> tuple[Model, dict, dict]:
    """Load a checkpoint; returns (model, non-parameter arrays, header)."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {exc}") from None
    if header.get("format") != "u3dseg-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    hp = HyperParams.from_json(header["hyperparams"])
    try:
        arrays = parse_container(blob[newline + 1:], source=str(path))
    except ContainerError as exc:
        raise CheckpointError(f"{path}: bad parameter container: {exc}") from None

    model = init_model(hp, seed=0)
    params = model.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    extras = {}
    for name, value in arrays.items():
        if name not in params:
            extras[name] = value
            continue
        tensor = params[name]
        if value.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {value.shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data = value.astype(np.float64)
    return model, extras, header


def load_checkpoint(path) -> Model:
    return load_checkpoint_full(path)[0]
