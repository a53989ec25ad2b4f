"""Synthetic grid scenes of coloured blocks with templated captions.

Each cell carries an 8-dim feature: a 6-way one-hot colour block (all zero
for background) followed by the cell's row and column scaled to [0, 1].
Captions list blobs in (top, left) order as
``a <small|big> <colour> block at <top|middle|bottom> <left|center|right>``
joined by ``and``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS, PAD
from .rng import SplitMix64, derive_seed

COLORS = ("red", "green", "blue", "yellow", "white", "black")
ROW_BANDS = ("top", "middle", "bottom")
COL_BANDS = ("left", "center", "right")
VOCAB = (
    "<bos>", "<eos>", "<pad>",
    "a", "small", "big", *COLORS, "block", "at", *ROW_BANDS, *COL_BANDS, "and",
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
D_IN = len(COLORS) + 2
SCHEMA_VERSION = 1
MAX_BLOBS = 3
PLACEMENT_ATTEMPTS = 100

assert VOCAB[BOS] == "<bos>" and VOCAB[EOS] == "<eos>" and VOCAB[PAD] == "<pad>"


@dataclass(frozen=True)
class Blob:
    color: str
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def cells(self) -> Iterable[tuple[int, int]]:
        for r in range(self.top, self.top + self.height):
            for c in range(self.left, self.left + self.width):
                yield r, c

    def touches(self, other: "Blob", gap: int = 0) -> bool:
        """True if the rectangles overlap after growing this one by ``gap`` cells."""
        return not (
            self.top + self.height + gap <= other.top
            or other.top + other.height + gap <= self.top
            or self.left + self.width + gap <= other.left
            or other.left + other.width + gap <= self.left
        )


@dataclass(frozen=True)
class Scene:
    grid_h: int
    grid_w: int
    blobs: tuple[Blob, ...]

    def features(self) -> np.ndarray:
        """``[grid_h, grid_w, 8]`` cell features."""
        feats = np.zeros((self.grid_h, self.grid_w, D_IN))
        rows = np.arange(self.grid_h) / max(self.grid_h - 1, 1)
        cols = np.arange(self.grid_w) / max(self.grid_w - 1, 1)
        feats[:, :, -2] = rows[:, None]
        feats[:, :, -1] = cols[None, :]
        for blob in self.blobs:
            ch = COLORS.index(blob.color)
            feats[blob.top: blob.top + blob.height, blob.left: blob.left + blob.width, ch] = 1.0
        return feats

    def label_map(self) -> np.ndarray:
        """``[grid_h, grid_w]`` ints: blob index + 1, or 0 for background."""
        labels = np.zeros((self.grid_h, self.grid_w), dtype=int)
        for i, blob in enumerate(self.blobs):
            labels[blob.top: blob.top + blob.height, blob.left: blob.left + blob.width] = i + 1
        return labels


@dataclass(frozen=True)
class ToySample:
    scene: Scene
    caption: tuple[int, ...]  # BOS ... EOS
    seed: int


def generate_scene(seed: int, grid_h: int, grid_w: int) -> Scene:
    if grid_h < 4 or grid_w < 4:
        raise ValueError(f"grid must be at least 4x4, got {grid_h}x{grid_w}")
    rng = SplitMix64(seed)
    count = rng.randint(1, MAX_BLOBS)
    blobs: list[Blob] = []
    for _ in range(count):
        color = COLORS[rng.randint(0, len(COLORS) - 1)]
        height = rng.randint(1, grid_h // 2)
        width = rng.randint(1, grid_w // 2)
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cand = Blob(color, rng.randint(0, grid_h - height), rng.randint(0, grid_w - width), height, width)
            # same-coloured blobs must not touch, or they would read as one blob
            if not any(cand.touches(b, gap=1 if b.color == color else 0) for b in blobs):
                blobs.append(cand)
                break
    return Scene(grid_h, grid_w, tuple(blobs))


def _band(start: int, extent: int, size: int) -> int:
    center2 = 2 * start + extent  # twice the geometric centre, in cell units
    return min(3 * center2 // (2 * size), 2)


def caption_words(scene: Scene) -> list[str]:
    words: list[str] = []
    for blob in sorted(scene.blobs, key=lambda b: (b.top, b.left)):
        if words:
            words.append("and")
        words += [
            "a",
            "small" if blob.area <= 2 else "big",
            blob.color,
            "block",
            "at",
            ROW_BANDS[_band(blob.top, blob.height, scene.grid_h)],
            COL_BANDS[_band(blob.left, blob.width, scene.grid_w)],
        ]
    return words


def tokenize(words: Sequence[str]) -> list[int]:
    return [BOS] + [WORD_TO_ID[w] for w in words] + [EOS]


def detokenize(ids: Sequence[int]) -> list[str]:
    return [VOCAB[i] for i in ids if i not in (BOS, EOS, PAD)]


def generate_caption(scene: Scene) -> list[int]:
    return tokenize(caption_words(scene))


def sample_seed(seed: int, index: int) -> int:
    return derive_seed(seed, index)


def make_sample(seed: int, grid_h: int, grid_w: int) -> ToySample:
    scene = generate_scene(seed, grid_h, grid_w)
    return ToySample(scene, tuple(generate_caption(scene)), seed)


def make_samples(seed: int, count: int, grid_h: int = 8, grid_w: int = 8, start: int = 0) -> list[ToySample]:
    return [make_sample(sample_seed(seed, i), grid_h, grid_w) for i in range(start, start + count)]


# -- JSONL files ---------------------------------------------------------------

def sample_to_json(sample: ToySample) -> dict:
    scene = sample.scene
    return {
        "schema": SCHEMA_VERSION,
        "seed": sample.seed,
        "grid": [scene.grid_h, scene.grid_w],
        "blobs": [
            {"color": b.color, "top": b.top, "left": b.left, "height": b.height, "width": b.width}
            for b in scene.blobs
        ],
        "caption": detokenize(sample.caption),
    }


def sample_from_json(obj: dict) -> ToySample:
    if obj.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {obj.get('schema')!r}")
    h, w = obj["grid"]
    scene = Scene(h, w, tuple(Blob(**b) for b in obj["blobs"]))
    caption = tuple(tokenize(obj["caption"]))
    return ToySample(scene, caption, int(obj["seed"]))


def read_dataset(path) -> list[ToySample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_json(json.loads(line)) for line in fh if line.strip()]


def write_dataset(path, samples: Iterable[ToySample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), sort_keys=True) + "\n")


SPLITS = ("train", "val", "test")


def split_counts(count: int, ratios: Sequence[float]) -> list[int]:
    if len(ratios) != len(SPLITS) or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    sizes = [int(round(r * count)) for r in ratios[:-1]]
    sizes.append(count - sum(sizes))
    return sizes


def _hash_key(seed: int, index: int) -> bytes:
    return hashlib.sha256(f"{seed}:{index}".encode()).digest()


def build_dataset(
    seed: int,
    count: int,
    split_ratios: Sequence[float],
    out_dir,
    grid_h: int = 8,
    grid_w: int = 8,
) -> dict[str, Path]:
    """Write ``train/val/test.jsonl`` under ``out_dir``; returns the paths.

    Samples are ranked by a hash of ``(seed, index)`` and the ranking is cut
    into consecutive blocks per split, so splits are disjoint and sized to
    the ratios.
    """
    sizes = split_counts(count, split_ratios)
    order = sorted(range(count), key=lambda i: _hash_key(seed, i))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        members = sorted(order[start: start + size])
        start += size
        samples = [make_sample(sample_seed(seed, i), grid_h, grid_w) for i in members]
        paths[name] = out / f"{name}.jsonl"
        write_dataset(paths[name], samples)
    return paths


def batch_arrays(samples: Sequence[ToySample], max_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack features, decoder inputs and targets (PAD-filled) for a batch."""
    feats = np.stack([s.scene.features() for s in samples])
    t = max(len(s.caption) - 1 for s in samples)
    if t > max_len:
        raise ValueError(f"caption of {t} steps exceeds max_caption_len={max_len}")
    inputs = np.full((len(samples), t), PAD, dtype=np.intp)
    targets = np.full((len(samples), t), PAD, dtype=np.intp)
    for i, s in enumerate(samples):
        cap = np.asarray(s.caption)
        inputs[i, : len(cap) - 1] = cap[:-1]
        targets[i, : len(cap) - 1] = cap[1:]
    return feats, inputs, targets
