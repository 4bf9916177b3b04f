"""Exporter acceptance: produced assets load through the segmentation pipeline.

Exercises the cross-package contract end to end: a 5-class catalog with 10
descriptions per class and the top 5 of 20 candidate images per class must
load through the core loader with zero validation errors, and re-export must
be byte-identical.
"""

import json

import numpy as np

from query_exporter.encoders import HashedImageEncoder, HashedTextEncoder
from query_exporter.export import run_export

from uni3dseg.queries import load_query_bank


def report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    assert ok, f"{name}: {detail}"


def export_bank(asset_dirs, out):
    return run_export(asset_dirs["catalog"], asset_dirs["descriptions"],
                      asset_dirs["images"], k=10, l=5, out_dir=out,
                      text_encoder=HashedTextEncoder(512),
                      image_encoder=HashedImageEncoder(512),
                      provenance="acceptance fixture assets")


def test_criterion_exporter_round_trip(asset_dirs, tmp_path):
    manifest = export_bank(asset_dirs, tmp_path / "bank1")
    bank = load_query_bank(manifest)

    ok = bank.desc_embeddings.shape == (5, 10, 512)
    ok &= bank.image_embeddings.shape == (5, 5, 512)
    ok &= bank.catalog.names == asset_dirs["classes"]
    ok &= bank.provenance == "acceptance fixture assets"
    ok &= bool(np.all(np.isfinite(bank.desc_embeddings)))
    ok &= bool(np.all(np.isfinite(bank.image_embeddings)))

    export_bank(asset_dirs, tmp_path / "bank2")
    files = ("manifest.json", "catalog.json", "descriptions.u3dt", "images.u3dt",
             "selection.json")
    identical = all((tmp_path / "bank1" / f).read_bytes() ==
                    (tmp_path / "bank2" / f).read_bytes() for f in files)

    report("exporter-round-trip", ok and identical,
           f"(shapes {bank.desc_embeddings.shape}/{bank.image_embeddings.shape} "
           f"load cleanly; re-export byte-identical={identical})")


def test_loader_rejects_corrupted_export(asset_dirs, tmp_path):
    manifest = export_bank(asset_dirs, tmp_path / "bank")
    doc = json.loads(manifest.read_text())
    doc["d_e"] = 7
    manifest.write_text(json.dumps(doc))
    import pytest
    from uni3dseg.queries import QueryBankError
    with pytest.raises(QueryBankError):
        load_query_bank(manifest)
