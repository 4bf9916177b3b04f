"""Exporter behavior: embeddings, selection, manifest integrity."""

import json
from pathlib import Path

import numpy as np
import pytest

from query_exporter.cli import main
from query_exporter.encoders import EncoderError, HashedImageEncoder, HashedTextEncoder
from query_exporter.export import (
    ExportError,
    embed_descriptions,
    load_description_sheet,
    load_image_pool,
    run_export,
    select_top_images,
    verify_manifest,
)
from query_exporter.u3dt import read_entry_shapes

from conftest import make_image


class TestTextEncoder:
    def test_identical_strings_identical_rows(self):
        enc = HashedTextEncoder(d_e=64)
        a = enc.encode("a plain wooden crate")
        b = enc.encode("a plain wooden crate")
        np.testing.assert_array_equal(a, b)

    def test_distinct_strings_differ(self):
        enc = HashedTextEncoder(d_e=64)
        assert not np.array_equal(enc.encode("red ball"), enc.encode("blue barrel"))

    def test_empty_text_rejected(self):
        with pytest.raises(EncoderError, match="empty"):
            HashedTextEncoder().encode("   ")

    def test_unit_norm(self):
        enc = HashedTextEncoder(d_e=128)
        assert np.linalg.norm(enc.encode("tall beam")) == pytest.approx(1.0)


class TestImageEncoder:
    def test_deterministic(self, tmp_path):
        make_image(tmp_path / "x.png", (0.5, 0.2, 0.7), seed=3)
        enc = HashedImageEncoder(d_e=64)
        np.testing.assert_array_equal(enc.encode(tmp_path / "x.png"),
                                      enc.encode(tmp_path / "x.png"))

    def test_unreadable_image(self, tmp_path):
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with pytest.raises(EncoderError, match="cannot read"):
            HashedImageEncoder().encode(tmp_path / "broken.png")


class TestDescriptions:
    def test_k_dimension_matches_request(self, asset_dirs):
        sheet = load_description_sheet(asset_dirs["descriptions"],
                                       asset_dirs["classes"], k=10)
        emb = embed_descriptions(sheet, HashedTextEncoder(d_e=64))
        assert emb.shape == (5, 10, 64)

    def test_too_few_descriptions(self, asset_dirs):
        with pytest.raises(ExportError, match="need 99"):
            load_description_sheet(asset_dirs["descriptions"], asset_dirs["classes"], k=99)

    def test_missing_class_file(self, asset_dirs):
        with pytest.raises(ExportError, match="missing description"):
            load_description_sheet(asset_dirs["descriptions"],
                                   asset_dirs["classes"] + ["ghost"], k=2)


class TestImageSelection:
    def test_top_five_of_twenty(self, asset_dirs):
        pool = load_image_pool(asset_dirs["images"], asset_dirs["classes"])
        chosen, emb = select_top_images(pool, "crate", 5,
                                        HashedTextEncoder(64), HashedImageEncoder(64))
        assert len(chosen) == 5
        assert emb.shape == (5, 64)
        assert len(pool.files["crate"]) == 20

    def test_select_all_when_k_equals_pool(self, asset_dirs):
        pool = load_image_pool(asset_dirs["images"], asset_dirs["classes"])
        chosen, _ = select_top_images(pool, "ball", 20,
                                      HashedTextEncoder(64), HashedImageEncoder(64))
        assert sorted(p.name for p in chosen) == sorted(p.name for p in pool.files["ball"])

    def test_tie_breaks_to_smaller_filename(self, tmp_path, asset_dirs):
        img_dir = tmp_path / "pool" / "crate"
        img_dir.mkdir(parents=True)
        make_image(img_dir / "bbb.png", (0.5, 0.5, 0.5), seed=1)
        (img_dir / "aaa.png").write_bytes((img_dir / "bbb.png").read_bytes())
        pool = load_image_pool(tmp_path / "pool", ["crate"])
        chosen, _ = select_top_images(pool, "crate", 1,
                                      HashedTextEncoder(64), HashedImageEncoder(64))
        assert chosen[0].name == "aaa.png"

    def test_too_few_candidates(self, asset_dirs):
        pool = load_image_pool(asset_dirs["images"], asset_dirs["classes"])
        with pytest.raises(ExportError, match="need 21"):
            select_top_images(pool, "wall", 21, HashedTextEncoder(64),
                              HashedImageEncoder(64))


class TestExportRun:
    def run(self, asset_dirs, out=None, d_e=64):
        return run_export(asset_dirs["catalog"], asset_dirs["descriptions"],
                          asset_dirs["images"], k=10, l=5,
                          out_dir=out or asset_dirs["out"],
                          text_encoder=HashedTextEncoder(d_e),
                          image_encoder=HashedImageEncoder(d_e),
                          provenance="unit-test assets")

    def test_containers_have_declared_shapes(self, asset_dirs):
        self.run(asset_dirs)
        desc = read_entry_shapes(asset_dirs["out"] / "descriptions.u3dt")
        imgs = read_entry_shapes(asset_dirs["out"] / "images.u3dt")
        assert desc == {"desc_embeddings": (5, 10, 64)}
        assert imgs == {"image_embeddings": (5, 5, 64)}

    def test_manifest_schema_and_digests(self, asset_dirs):
        manifest = self.run(asset_dirs)
        doc = json.loads(manifest.read_text())
        assert set(doc) == {"catalog", "descriptions", "images", "d_e",
                            "provenance", "digests"}
        assert doc["d_e"] == 64
        assert doc["provenance"] == "unit-test assets"
        verify_manifest(manifest)

    def test_digest_mismatch_detected(self, asset_dirs):
        manifest = self.run(asset_dirs)
        container = asset_dirs["out"] / "images.u3dt"
        container.write_bytes(container.read_bytes() + b"\x00")
        with pytest.raises(ExportError, match="digest mismatch"):
            verify_manifest(manifest)

    def test_reexport_is_byte_identical(self, asset_dirs, tmp_path):
        self.run(asset_dirs, out=tmp_path / "bank1")
        self.run(asset_dirs, out=tmp_path / "bank2")
        for name in ("manifest.json", "descriptions.u3dt", "images.u3dt",
                     "catalog.json", "selection.json"):
            assert (tmp_path / "bank1" / name).read_bytes() == \
                (tmp_path / "bank2" / name).read_bytes(), name

    def test_selection_records_provenance_urls(self, asset_dirs):
        self.run(asset_dirs)
        selection = json.loads((asset_dirs["out"] / "selection.json").read_text())
        assert set(selection) == set(asset_dirs["classes"])
        for entries in selection.values():
            assert len(entries) == 5
            assert all(e["source"].startswith("https://example.invalid/") for e in entries)


class TestCli:
    def test_export_and_verify(self, asset_dirs, capsys):
        rc = main(["export", "--catalog", str(asset_dirs["catalog"]),
                   "--descriptions-dir", str(asset_dirs["descriptions"]),
                   "--images-dir", str(asset_dirs["images"]),
                   "--k", "10", "--l", "5", "--out", str(asset_dirs["out"]),
                   "--d-e", "64", "--provenance", "cli test"])
        assert rc == 0
        rc = main(["verify", "--manifest", str(asset_dirs["out"] / "manifest.json")])
        assert rc == 0

    def test_missing_images_dir_fails(self, asset_dirs, capsys):
        rc = main(["export", "--catalog", str(asset_dirs["catalog"]),
                   "--descriptions-dir", str(asset_dirs["descriptions"]),
                   "--images-dir", str(asset_dirs["images"] / "nope"),
                   "--k", "10", "--l", "5", "--out", str(asset_dirs["out"])])
        assert rc == 1
        assert "ERROR[EXPORT]" in capsys.readouterr().err
