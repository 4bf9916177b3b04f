"""Export pipeline: description sheets and image pools into query-bank assets.

Outputs exactly the manifest schema the segmentation pipeline loads:

    { "catalog": ..., "descriptions": ..., "images": ..., "d_e": ...,
      "provenance": ..., "digests": {filename: "sha256:..."} }

plus two U3DT containers (entries ``desc_embeddings`` C x K x d_e and
``image_embeddings`` C x L x d_e) and a ``selection.json`` recording which
images were chosen per class. Re-running on unchanged inputs is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .u3dt import write_container

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class ExportError(ValueError):
    pass


@dataclass
class DescriptionSheet:
    classes: list[str]
    texts: dict[str, list[str]]  # class -> K descriptions

    @property
    def k(self) -> int:
        return len(next(iter(self.texts.values())))


@dataclass
class ImagePool:
    classes: list[str]
    files: dict[str, list[Path]]       # class -> candidate image paths
    sources: dict[str, str]            # "<class>/<name>" -> provenance URL


def load_description_sheet(directory, classes, k: int) -> DescriptionSheet:
    """One ``<class>.txt`` per class, one description per line, K lines used."""
    directory = Path(directory)
    texts = {}
    for cls in classes:
        path = directory / f"{cls}.txt"
        if not path.exists():
            raise ExportError(f"missing description file for class {cls!r}: {path}")
        lines = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        if len(lines) < k:
            raise ExportError(
                f"class {cls!r} has {len(lines)} descriptions, need {k}"
            )
        texts[cls] = lines[:k]
    return DescriptionSheet(classes=list(classes), texts=texts)


def load_image_pool(directory, classes) -> ImagePool:
    """Per-class subdirectories of candidate images; optional sources.json."""
    directory = Path(directory)
    sources = {}
    sources_path = directory / "sources.json"
    if sources_path.exists():
        sources = json.loads(sources_path.read_text())
    files = {}
    for cls in classes:
        class_dir = directory / cls
        if not class_dir.is_dir():
            raise ExportError(f"missing image directory for class {cls!r}: {class_dir}")
        candidates = sorted(
            p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not candidates:
            raise ExportError(f"no candidate images for class {cls!r}")
        files[cls] = candidates
    return ImagePool(classes=list(classes), files=files, sources=sources)


def embed_descriptions(sheet: DescriptionSheet, text_encoder) -> np.ndarray:
    """(C, K, d_e) embeddings in catalog order x description order."""
    rows = []
    for cls in sheet.classes:
        rows.append(text_encoder.encode_many(sheet.texts[cls]))
    return np.stack(rows)


def select_top_images(pool: ImagePool, class_name: str, k: int,
                      text_encoder, image_encoder):
    """Top-k candidates by inner-product similarity with the class name.

    Ties break toward the lexicographically smaller filename. Returns
    (chosen paths, their embeddings).
    """
    candidates = pool.files[class_name]
    if len(candidates) < k:
        raise ExportError(
            f"class {class_name!r} has {len(candidates)} candidate images, need {k}"
        )
    anchor = text_encoder.encode(class_name)
    scored = []
    for path in candidates:
        emb = image_encoder.encode(path)
        scored.append((-float(anchor @ emb), path.name, path, emb))
    scored.sort(key=lambda t: (t[0], t[1]))
    chosen = scored[:k]
    return [c[2] for c in chosen], np.stack([c[3] for c in chosen])


def _sha256_of(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, catalog_doc: dict, d_e: int, provenance: str) -> Path:
    """Manifest in the loader's schema plus content digests of the assets."""
    out_dir = Path(out_dir)
    for name in ("descriptions.u3dt", "images.u3dt"):
        if not (out_dir / name).exists():
            raise ExportError(f"container missing before manifest write: {name}")
    (out_dir / "catalog.json").write_text(json.dumps(catalog_doc, indent=2,
                                                     sort_keys=True) + "\n")
    manifest = {
        "catalog": "catalog.json",
        "descriptions": "descriptions.u3dt",
        "images": "images.u3dt",
        "d_e": d_e,
        "provenance": provenance,
        "digests": {
            name: _sha256_of(out_dir / name)
            for name in ("catalog.json", "descriptions.u3dt", "images.u3dt")
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(manifest_path) -> None:
    """Re-hash the referenced assets; digest mismatches are errors."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    for name, digest in doc.get("digests", {}).items():
        target = base / name
        if not target.exists():
            raise ExportError(f"manifest references missing file {name}")
        actual = _sha256_of(target)
        if actual != digest:
            raise ExportError(
                f"digest mismatch for {name}: manifest {digest}, file {actual}"
            )


def run_export(catalog_path, descriptions_dir, images_dir, k: int, l: int,
               out_dir, text_encoder, image_encoder, provenance: str = "") -> Path:
    """Full export; returns the manifest path."""
    catalog_doc = json.loads(Path(catalog_path).read_text())
    classes = list(catalog_doc["names"])
    if k < 1 or l < 1:
        raise ExportError("k and l must be >= 1")

    sheet = load_description_sheet(descriptions_dir, classes, k)
    pool = load_image_pool(images_dir, classes)

    desc = embed_descriptions(sheet, text_encoder)

    image_rows = []
    selection = {}
    for cls in classes:
        chosen, embeddings = select_top_images(pool, cls, l, text_encoder, image_encoder)
        image_rows.append(embeddings)
        selection[cls] = [
            {"file": f"{cls}/{p.name}",
             "source": pool.sources.get(f"{cls}/{p.name}", "")}
            for p in chosen
        ]
    images = np.stack(image_rows)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_container(out_dir / "descriptions.u3dt", {"desc_embeddings": desc})
    write_container(out_dir / "images.u3dt", {"image_embeddings": images})
    (out_dir / "selection.json").write_text(json.dumps(selection, indent=2,
                                                       sort_keys=True) + "\n")
    manifest = write_manifest(out_dir, catalog_doc, d_e=desc.shape[2],
                              provenance=provenance)
    verify_manifest(manifest)
    return manifest
