"""Fixtures: synthetic catalogs, description sheets, and candidate image pools."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

CLASSES = ["floor", "wall", "crate", "barrel", "ball"]

ADJECTIVES = ["flat", "matte", "wide", "narrow", "wooden", "metallic", "smooth",
              "rough", "painted", "plain", "tall", "short", "curved", "boxy"]


def make_descriptions(directory: Path, classes, k: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for c, cls in enumerate(classes):
        lines = [f"a {ADJECTIVES[(c + i) % len(ADJECTIVES)]} {cls} with "
                 f"{ADJECTIVES[(c + i + 3) % len(ADJECTIVES)]} surfaces variant {i}"
                 for i in range(k)]
        (directory / f"{cls}.txt").write_text("\n".join(lines) + "\n")


def make_image(path: Path, base_color, seed: int) -> None:
    rng = np.random.default_rng(seed)
    pixels = np.clip(
        np.asarray(base_color, dtype=np.float64) * 255
        + rng.normal(0, 18, size=(24, 24, 3)),
        0, 255,
    ).astype(np.uint8)
    Image.fromarray(pixels, "RGB").save(path)


def make_image_pool(directory: Path, classes, candidates: int) -> None:
    palette = [(0.4, 0.4, 0.4), (0.8, 0.8, 0.7), (0.7, 0.3, 0.2),
               (0.2, 0.3, 0.7), (0.2, 0.6, 0.3), (0.7, 0.6, 0.2)]
    sources = {}
    for c, cls in enumerate(classes):
        class_dir = directory / cls
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(candidates):
            name = f"{cls}_{i:03d}.png"
            make_image(class_dir / name, palette[c % len(palette)], seed=1000 * c + i)
            sources[f"{cls}/{name}"] = f"https://example.invalid/{cls}/{i}"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "sources.json").write_text(json.dumps(sources, indent=2, sort_keys=True))


@pytest.fixture()
def asset_dirs(tmp_path):
    classes = CLASSES
    catalog = tmp_path / "catalog.json"
    catalog.write_text(json.dumps(
        {"names": classes, "is_thing": [False, False, True, True, True]}, indent=2))
    desc_dir = tmp_path / "descriptions"
    img_dir = tmp_path / "images"
    make_descriptions(desc_dir, classes, k=10)
    make_image_pool(img_dir, classes, candidates=20)
    return {"catalog": catalog, "descriptions": desc_dir, "images": img_dir,
            "out": tmp_path / "bank", "classes": classes}
