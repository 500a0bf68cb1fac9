"""Synthetic 'fracture' scenes: bright bands on a noisy background, some of them broken."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core.rng import make_rng

FRACTURE_PROB = 0.8
NOISE_SIGMA = 0.05
BORDER = 14


@dataclass
class SyntheticScene:
    image: np.ndarray  # 1 x H x W, values in [0, 1]
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    seed: int | None = None

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


def _band_geometry(rng: np.random.Generator, h: int, w: int):
    angle = rng.uniform(0.0, math.pi)
    cy = rng.uniform(0.3 * h, 0.7 * h)
    cx = rng.uniform(0.3 * w, 0.7 * w)
    width = rng.uniform(6.0, 10.0)
    level = rng.uniform(0.6, 0.9)
    return angle, cy, cx, width, level


def generate_scene(seed: int, h: int = 64, w: int = 64) -> SyntheticScene:
    """Render one scene deterministically from ``seed``.

    One or two straight bands cross the whole image. With probability 0.8
    one band gets a gap with a sideways shift of the far part, and the box
    around the break is recorded.
    """
    if h < 32 or w < 32:
        raise ValueError("scene must be at least 32 x 32")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.full((h, w), 0.1)
    n_bands = int(rng.integers(1, 3))
    bands = [_band_geometry(rng, h, w) for _ in range(n_bands)]
    broken = int(rng.integers(0, n_bands)) if rng.random() < FRACTURE_PROB else None

    boxes: list[tuple[float, float, float, float]] = []
    for idx, (angle, cy, cx, width, level) in enumerate(bands):
        uy, ux = math.sin(angle), math.cos(angle)
        along = (yy - cy) * uy + (xx - cx) * ux
        across = -(yy - cy) * ux + (xx - cx) * uy
        if idx == broken:
            gap = rng.uniform(2.5, 4.5)
            shift = rng.uniform(1.5, 3.5) * (1 if rng.random() < 0.5 else -1)
            # break point anywhere along the band that stays clear of the border
            half_span = math.hypot(h, w)
            for _ in range(64):
                t = rng.uniform(-half_span / 2, half_span / 2)
                py, px = cy + t * uy, cx + t * ux
                if BORDER <= py <= h - 1 - BORDER and BORDER <= px <= w - 1 - BORDER:
                    break
            else:
                t, py, px = 0.0, cy, cx
            shifted = np.where(along > t, across - shift, across)
            inside = (np.abs(shifted) < width / 2) & (np.abs(along - t) >= gap / 2)
            image = np.where(inside, np.maximum(image, level), image)
            half_len = gap / 2 + 4.0
            half_wid = width / 2 + abs(shift) / 2 + 3.0
            ext_y = abs(uy) * half_len + abs(ux) * half_wid
            ext_x = abs(ux) * half_len + abs(uy) * half_wid
            box = (
                max(px - ext_x, 0.0), max(py - ext_y, 0.0),
                min(px + ext_x, w - 1.0), min(py + ext_y, h - 1.0),
            )
            boxes.append(tuple(round(v, 3) for v in box))
        else:
            inside = np.abs(across) < width / 2
            image = np.where(inside, np.maximum(image, level), image)

    image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, size=(h, w)), 0.0, 1.0)
    return SyntheticScene(image[None], boxes, [0] * len(boxes), seed)


def generate_dataset(seeds, h: int = 64, w: int = 64) -> list[SyntheticScene]:
    return [generate_scene(int(s), h, w) for s in seeds]


# ---------------------------------------------------------------------------
# export / import: binary PGM plus a JSON sidecar


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a 2-D array in [0, 1] as P5 with maxval 255."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / maxval


def export_scene(scene: SyntheticScene, directory: str | Path, stem: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_path, meta_path = directory / f"{stem}.pgm", directory / f"{stem}.json"
    write_pgm(img_path, scene.image)
    meta = {
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "boxes": [list(b) for b in scene.boxes],
        "labels": list(scene.labels),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return img_path, meta_path


def import_scene(directory: str | Path, stem: str) -> SyntheticScene:
    directory = Path(directory)
    image = read_pgm(directory / f"{stem}.pgm")
    meta = json.loads((directory / f"{stem}.json").read_text())
    return SyntheticScene(
        image[None],
        [tuple(b) for b in meta["boxes"]],
        list(meta["labels"]),
        meta.get("seed"),
    )
