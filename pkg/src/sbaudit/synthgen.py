"""Seeded procedural PAD dataset with two demographic groups and bias knobs.

Every image starts as a flat 0.5 field.  A sinusoidal grating (period 8 px)
over rows 0-15 marks the group: it varies down the rows for group A and
across the columns for group B.  Attack images additionally carry a 2x2
checkerboard artifact on a random 12x12 patch whose amplitude depends on the
group.  Gaussian noise is added last and the result is clamped to [0, 1].

Each (group, label) cell draws from its own substream and each image within
a cell from its own xoshiro256** stream, so cells are independent of each
other and of their sizes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .rng import GOLDEN_GAMMA, MASK64, Xoshiro256Batch, mix64

IMAGE_SIDE = 32
PATCH = 12
GRATING_PERIOD = 8
CUE_ROWS = 16

DATASET_MAGIC = b"SBAD"
DATASET_VERSION = 1


class Label(IntEnum):
    BONA_FIDE = 0
    ATTACK = 1

    @property
    def tag(self) -> str:
        return "bonafide" if self is Label.BONA_FIDE else "attack"

    @classmethod
    def parse(cls, text: str) -> "Label":
        return {"bonafide": cls.BONA_FIDE, "attack": cls.ATTACK}[text]


class Group(IntEnum):
    A = 0
    B = 1

    @property
    def tag(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "Group":
        return cls[text]


CELLS = [(g, l) for g in Group for l in Label]


def cell_key(group: Group, label: Label) -> str:
    return f"{group.tag}_{label.tag}"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {cell_key(g, l): 500 for g, l in CELLS})
    noise_sigma: float = 0.3
    attack_amp_A: float = 0.3
    attack_amp_B: float = 0.3
    group_cue_amp: float = 0.1

    def __post_init__(self):
        for g, l in CELLS:
            n = self.counts.get(cell_key(g, l))
            if not isinstance(n, int) or n <= 0:
                raise ValueError(f"counts.{cell_key(g, l)} must be a positive integer")
        extra = set(self.counts) - {cell_key(g, l) for g, l in CELLS}
        if extra:
            raise ValueError(f"unknown count cells: {sorted(extra)}")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        for name in ("attack_amp_A", "attack_amp_B", "group_cue_amp"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def count(self, group: Group, label: Label) -> int:
        return self.counts[cell_key(group, label)]

    def attack_amp(self, group: Group) -> float:
        return self.attack_amp_A if group is Group.A else self.attack_amp_B

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {cell_key(g, l): self.counts[cell_key(g, l)] for g, l in CELLS}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def balanced_counts(per_cell: int) -> dict:
    return {cell_key(g, l): per_cell for g, l in CELLS}


def imbalanced_counts(per_cell_b: int = 180, ratio: float = 53827 / 19042) -> dict:
    """Group A outnumbers group B by ``ratio`` (default: the 53,827 / 19,042 test split)."""
    per_cell_a = int(round(per_cell_b * ratio))
    return {cell_key(Group.A, l): per_cell_a for l in Label} | {
        cell_key(Group.B, l): per_cell_b for l in Label
    }


@dataclass(frozen=True)
class Sample:
    id: int
    image: np.ndarray
    label: Label
    group: Group


@dataclass
class Dataset:
    """Column-oriented sample store: images (N, 1, 32, 32) plus per-sample ids, labels, groups."""

    images: np.ndarray
    ids: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    fingerprint: str
    config: Optional[GenConfig] = None

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.ids[i]), self.images[i], Label(int(self.labels[i])),
                      Group(int(self.groups[i])))

    def subset(self, mask: np.ndarray, tag: str) -> "Dataset":
        return Dataset(self.images[mask], self.ids[mask], self.labels[mask], self.groups[mask],
                       f"{self.fingerprint}|{tag}", self.config)

    def equals(self, other: "Dataset") -> bool:
        return (self.fingerprint == other.fingerprint
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.groups, other.groups))


def cell_seed(seed: int, group: Group, label: Label) -> int:
    return (seed ^ mix64(0x5BA0 + 2 * int(group) + int(label))) & MASK64


def group_cue(group: Group, amp: float) -> np.ndarray:
    cue = np.zeros((IMAGE_SIDE, IMAGE_SIDE))
    wave = amp * np.sin(2.0 * np.pi * np.arange(IMAGE_SIDE) / GRATING_PERIOD)
    if group is Group.A:
        cue[:CUE_ROWS, :] = wave[:CUE_ROWS, None]
    else:
        cue[:CUE_ROWS, :] = wave[None, :]
    return cue


def checkerboard(amp: float) -> np.ndarray:
    r = np.arange(PATCH)
    return amp * np.where(((r[:, None] // 2) + (r[None, :] // 2)) % 2 == 0, 1.0, -1.0)


def generate_cell(cfg: GenConfig, group: Group, label: Label,
                  stream_seed: Optional[int] = None) -> np.ndarray:
    """Images of one (group, label) cell, shape (count, 1, 32, 32).

    ``stream_seed`` replaces the cell's derived substream seed.
    """
    n = cfg.count(group, label)
    base = cell_seed(cfg.seed, group, label) if stream_seed is None else stream_seed & MASK64
    seeds = [(base + 4 * i * GOLDEN_GAMMA) & MASK64 for i in range(n)]
    rng = Xoshiro256Batch(seeds)
    rows = rng.below(IMAGE_SIDE - PATCH + 1)
    cols = rng.below(IMAGE_SIDE - PATCH + 1)
    noise = rng.normals(IMAGE_SIDE * IMAGE_SIDE).reshape(n, IMAGE_SIDE, IMAGE_SIDE)

    images = np.full((n, IMAGE_SIDE, IMAGE_SIDE), 0.5)
    images += group_cue(group, cfg.group_cue_amp)
    if label is Label.ATTACK:
        patch = checkerboard(cfg.attack_amp(group))
        for i in range(n):
            images[i, rows[i]:rows[i] + PATCH, cols[i]:cols[i] + PATCH] += patch
    images += cfg.noise_sigma * noise
    np.clip(images, 0.0, 1.0, out=images)
    return images[:, None]


def generate(cfg: GenConfig) -> Dataset:
    parts, labels, groups = [], [], []
    for g, l in CELLS:
        imgs = generate_cell(cfg, g, l)
        parts.append(imgs)
        labels.append(np.full(len(imgs), int(l), dtype=np.int8))
        groups.append(np.full(len(imgs), int(g), dtype=np.int8))
    images = np.concatenate(parts)
    return Dataset(images, np.arange(len(images), dtype=np.int64), np.concatenate(labels),
                   np.concatenate(groups), cfg.fingerprint(), cfg)


def split_by(data: Dataset, group: Optional[Group] = None, label: Optional[Label] = None) -> Dataset:
    """Filter by group and/or label, keeping order and ids.

    With no predicate the dataset is returned unchanged.  The predicate is
    appended to the fingerprint, e.g. ``<fp>|group=A``.
    """
    if group is None and label is None:
        return data
    mask = np.ones(len(data), dtype=bool)
    tags = []
    if group is not None:
        mask &= data.groups == int(group)
        tags.append(f"group={group.tag}")
    if label is not None:
        mask &= data.labels == int(label)
        tags.append(f"label={label.tag}")
    return data.subset(mask, ",".join(tags))


# ---------------------------------------------------------------------------
# persistence


def _header(data: Dataset) -> dict:
    return {
        "version": DATASET_VERSION,
        "config": data.config.to_dict() if data.config else None,
        "fingerprint": data.fingerprint,
        "samples": [
            {"id": int(i), "label": Label(int(l)).tag, "group": Group(int(g)).tag}
            for i, l, g in zip(data.ids, data.labels, data.groups)
        ],
    }


def _from_header(header: dict, images: np.ndarray) -> Dataset:
    samples = header["samples"]
    cfg = GenConfig.from_dict(header["config"]) if header.get("config") else None
    return Dataset(
        images,
        np.array([s["id"] for s in samples], dtype=np.int64),
        np.array([Label.parse(s["label"]) for s in samples], dtype=np.int8),
        np.array([Group.parse(s["group"]) for s in samples], dtype=np.int8),
        header["fingerprint"],
        cfg,
    )


def save_dir(data: Dataset, path) -> None:
    """Directory layout: ``manifest.json`` plus ``images/<id>.f64`` raw little-endian doubles."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    header = _header(data)
    for entry, img in zip(header["samples"], data.images):
        entry["file"] = f"images/{entry['id']:06d}.f64"
        (path / entry["file"]).write_bytes(np.ascontiguousarray(img, dtype="<f8").tobytes())
    (path / "manifest.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")


def load_dir(path) -> Dataset:
    path = Path(path)
    manifest = path / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    header = json.loads(manifest.read_text())
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')}")
    n_px = IMAGE_SIDE * IMAGE_SIDE
    images = np.empty((len(header["samples"]), 1, IMAGE_SIDE, IMAGE_SIDE))
    for k, entry in enumerate(header["samples"]):
        raw = (path / entry["file"]).read_bytes()
        if len(raw) != 8 * n_px:
            raise DatasetFormatError(f"{entry['file']}: expected {8 * n_px} bytes, got {len(raw)}")
        images[k, 0] = np.frombuffer(raw, dtype="<f8").reshape(IMAGE_SIDE, IMAGE_SIDE)
    return _from_header(header, images)


def dump_sbad(data: Dataset) -> bytes:
    header = json.dumps(_header(data), sort_keys=True, separators=(",", ":")).encode()
    return b"".join([
        DATASET_MAGIC,
        struct.pack("<HI", DATASET_VERSION, len(header)),
        header,
        np.ascontiguousarray(data.images, dtype="<f8").tobytes(),
    ])


def parse_sbad(blob: bytes) -> Dataset:
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError("unrecognized format: bad magic bytes")
    if len(blob) < 10:
        raise DatasetFormatError("dataset container is truncated")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if len(blob) < 10 + hlen:
        raise DatasetFormatError("dataset container is truncated")
    header = json.loads(blob[10:10 + hlen])
    n = len(header["samples"])
    body = blob[10 + hlen:]
    if len(body) != 8 * n * IMAGE_SIDE * IMAGE_SIDE:
        raise DatasetFormatError("dataset container is truncated or has trailing bytes")
    images = np.frombuffer(body, dtype="<f8").reshape(n, 1, IMAGE_SIDE, IMAGE_SIDE).copy()
    return _from_header(header, images)


def save_sbad(data: Dataset, path) -> None:
    Path(path).write_bytes(dump_sbad(data))


def load_sbad(path) -> Dataset:
    return parse_sbad(Path(path).read_bytes())
