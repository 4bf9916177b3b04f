"""Offline multimodal reference queries: loading, synthesis, projection.

A query bank holds per-class description embeddings (C x K x d_e) and image
embeddings (C x L x d_e) produced offline. Banks load from a manifest JSON:

    {
      "catalog": "catalog.json",
      "descriptions": "descriptions.u3dt",   # entry "desc_embeddings"
      "images": "images.u3dt",               # entry "image_embeddings"
      "d_e": 512,
      "provenance": "free-text source notes"
    }

Paths are resolved relative to the manifest location. Extra manifest keys
(e.g. content digests added by exporters) are ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .containers import read_container, write_container
from .scenes import ClassCatalog
from .tensor import Tensor


class QueryBankError(ValueError):
    """Malformed or inconsistent query-bank assets."""


@dataclass
class QueryBank:
    desc_embeddings: np.ndarray   # (C, K, d_e)
    image_embeddings: np.ndarray  # (C, L, d_e)
    catalog: ClassCatalog
    provenance: str = ""

    @property
    def d_e(self) -> int:
        return self.desc_embeddings.shape[2]

    @property
    def num_descriptions(self) -> int:
        return self.desc_embeddings.shape[1]

    @property
    def num_images(self) -> int:
        return self.image_embeddings.shape[1]

    def validate(self) -> None:
        c = self.catalog.num_classes
        d = self.desc_embeddings
        o = self.image_embeddings
        if d.ndim != 3 or o.ndim != 3:
            raise QueryBankError("embedding arrays must be 3-d (class, slot, width)")
        if d.shape[0] != c or o.shape[0] != c:
            raise QueryBankError(
                f"class-count mismatch: catalog has {c} classes, "
                f"descriptions {d.shape[0]}, images {o.shape[0]}"
            )
        if d.shape[1] < 1 or o.shape[1] < 1:
            raise QueryBankError("need at least one description and one image per class")
        if d.shape[2] != o.shape[2]:
            raise QueryBankError(
                f"embedding width mismatch: descriptions {d.shape[2]}, images {o.shape[2]}"
            )
        for label, arr in (("description", d), ("image", o)):
            bad = ~np.isfinite(arr)
            if bad.any():
                cls, slot = np.argwhere(bad.any(axis=2))[0]
                raise QueryBankError(
                    f"non-finite {label} embedding for class "
                    f"{self.catalog.names[cls]!r}, slot {slot}"
                )

    def normalized(self) -> "QueryBank":
        """Copy with every embedding row scaled to unit L2 norm."""
        def unit(arr):
            norms = np.linalg.norm(arr, axis=2, keepdims=True)
            return arr / np.maximum(norms, 1e-12)

        return QueryBank(
            desc_embeddings=unit(self.desc_embeddings),
            image_embeddings=unit(self.image_embeddings),
            catalog=self.catalog,
            provenance=self.provenance,
        )


def load_query_bank(manifest_path) -> QueryBank:
    """Load and validate a query bank from its manifest JSON."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise QueryBankError(f"manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    for key in ("catalog", "descriptions", "images"):
        if key not in doc:
            raise QueryBankError(f"manifest missing required key {key!r}")
        if not (base / doc[key]).exists():
            raise QueryBankError(f"manifest references missing file: {doc[key]}")

    catalog = ClassCatalog.load(base / doc["catalog"])
    desc = read_container(base / doc["descriptions"])
    imgs = read_container(base / doc["images"])
    if "desc_embeddings" not in desc:
        raise QueryBankError("descriptions container missing entry 'desc_embeddings'")
    if "image_embeddings" not in imgs:
        raise QueryBankError("images container missing entry 'image_embeddings'")

    bank = QueryBank(
        desc_embeddings=desc["desc_embeddings"].astype(np.float64),
        image_embeddings=imgs["image_embeddings"].astype(np.float64),
        catalog=catalog,
        provenance=str(doc.get("provenance", "")),
    )
    bank.validate()
    declared = doc.get("d_e")
    if declared is not None and int(declared) != bank.d_e:
        raise QueryBankError(f"manifest declares d_e={declared} but arrays have width {bank.d_e}")
    return bank


def save_query_bank(out_dir, bank: QueryBank) -> Path:
    """Write catalog, containers, and manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bank.catalog.save(out_dir / "catalog.json")
    write_container(out_dir / "descriptions.u3dt", {"desc_embeddings": bank.desc_embeddings})
    write_container(out_dir / "images.u3dt", {"image_embeddings": bank.image_embeddings})
    manifest = {
        "catalog": "catalog.json",
        "descriptions": "descriptions.u3dt",
        "images": "images.u3dt",
        "d_e": bank.d_e,
        "provenance": bank.provenance,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def synth_query_bank(
    catalog: ClassCatalog,
    k: int,
    l: int,
    d_e: int,
    sep: float = 4.0,
    noise: float = 0.1,
    seed: int = 0,
    orthogonal: bool = True,
) -> QueryBank:
    """Synthesize a bank around per-class anchor directions.

    Each class gets a unit anchor (orthogonal across classes when requested);
    its K description and L image embeddings are ``anchor * sep`` plus
    Gaussian noise. Deterministic for a fixed seed.
    """
    if k < 1 or l < 1:
        raise QueryBankError("k and l must be >= 1")
    if noise < 0:
        raise QueryBankError("noise must be nonnegative")
    c = catalog.num_classes
    rng = np.random.default_rng(seed)
    if orthogonal:
        if d_e < c:
            raise QueryBankError(f"orthogonal anchors need d_e >= C, got d_e={d_e}, C={c}")
        q, _ = np.linalg.qr(rng.normal(size=(d_e, c)))
        anchors = q.T  # (C, d_e), orthonormal rows
    else:
        anchors = rng.normal(size=(c, d_e))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)

    desc = anchors[:, None, :] * sep + noise * rng.normal(size=(c, k, d_e))
    imgs = anchors[:, None, :] * sep + noise * rng.normal(size=(c, l, d_e))
    bank = QueryBank(desc_embeddings=desc, image_embeddings=imgs, catalog=catalog,
                     provenance=f"synthetic(seed={seed}, sep={sep}, noise={noise})")
    bank.validate()
    return bank


@dataclass
class QueryProjector:
    """Two-layer perceptron mapping embedding width d_e to decoder width d."""

    w1: Tensor  # (d_e, hidden)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (hidden, d)
    b2: Tensor  # (d,)

    @property
    def in_width(self) -> int:
        return self.w1.shape[0]

    @property
    def out_width(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def _project_rows(rows: Tensor, proj: QueryProjector) -> Tensor:
    hidden = T.relu(T.add(T.matmul(rows, proj.w1), proj.b1))
    return T.add(T.matmul(hidden, proj.w2), proj.b2)


def project_queries(bank: QueryBank, proj: QueryProjector) -> tuple[Tensor, Tensor]:
    """Project both embedding stacks row-wise into decoder space.

    Returns tensors of shape (C, K, d) and (C, L, d) wired into the autodiff
    graph through the projector parameters.
    """
    if bank.d_e != proj.in_width:
        raise QueryBankError(
            f"projector expects input width {proj.in_width}, bank has d_e={bank.d_e}"
        )
    c, k, d_e = bank.desc_embeddings.shape
    l = bank.image_embeddings.shape[1]
    d = proj.out_width
    desc_rows = Tensor(bank.desc_embeddings.reshape(c * k, d_e))
    img_rows = Tensor(bank.image_embeddings.reshape(c * l, d_e))
    q_t = T.reshape(_project_rows(desc_rows, proj), (c, k, d))
    q_o = T.reshape(_project_rows(img_rows, proj), (c, l, d))
    return q_t, q_o
