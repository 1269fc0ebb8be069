"""Corpus generation and on-disk layout.

Layout:
    corpus/{split}/{id}/image.png
    corpus/{split}/{id}/{transform}.png
    corpus/manifest.jsonl     one {"id", "split", "caption", "seed"} per record

PNGs are 8-bit with v -> round((v + 1) / 2 * 255). The manifest file's sha256
is the corpus fingerprint recorded in checkpoints and reports.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .scenes import caption, render_scene, sample_scene
from .transforms import HELD_OUT_KINDS, TransformKind, apply_transform

MANIFEST_NAME = "manifest.jsonl"


class CorpusError(RuntimeError):
    pass


class HeldOutAccessError(RuntimeError):
    """A training-mode corpus was asked for a held-out condition map."""


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(image) + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0) * 2.0 - 1.0


def save_png(image: np.ndarray, path: str) -> None:
    arr = to_uint8(image).transpose(1, 2, 0)  # (H, W, 3)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.uint8)
    return from_uint8(arr.transpose(2, 0, 1))


@dataclass(frozen=True)
class CorpusRecord:
    id: int
    split: str
    caption: str
    seed: int


@dataclass(frozen=True)
class CorpusConfig:
    train_size: int = 4096
    test_size: int = 512
    resolution: int = 32
    seed: int = 7


def build_corpus(config: CorpusConfig, out_dir: str, force: bool = False) -> str:
    """Generate and persist the full corpus; returns the manifest path.

    Every record carries all six condition maps. Refuses to overwrite an
    existing corpus unless `force` is set. Reproducible: record seeds are
    seed XOR id, so the same config yields byte-identical output.
    """
    if config.train_size < 1 or config.test_size < 1:
        raise CorpusError("train and test sizes must be positive")
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not force:
        raise CorpusError(f"corpus already exists at {out_dir} (use force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)

    records = []
    splits = [("train", range(config.train_size)), ("test", range(config.train_size, config.train_size + config.test_size))]
    for split, ids in splits:
        for rec_id in ids:
            rec_seed = int(np.uint64(config.seed) ^ np.uint64(rec_id))
            spec = sample_scene(rec_seed, resolution=config.resolution)
            image = render_scene(spec)
            rec_dir = os.path.join(out_dir, split, str(rec_id))
            os.makedirs(rec_dir, exist_ok=True)
            save_png(image, os.path.join(rec_dir, "image.png"))
            for kind in TransformKind:
                cond = apply_transform(image, kind)
                save_png(cond, os.path.join(rec_dir, f"{kind.value}.png"))
            records.append(CorpusRecord(id=rec_id, split=split, caption=caption(spec), seed=rec_seed))

    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "split": rec.split, "caption": rec.caption, "seed": rec.seed}) + "\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def manifest_fingerprint(corpus_dir: str) -> str:
    path = os.path.join(corpus_dir, MANIFEST_NAME)
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class Corpus:
    """In-memory view of a persisted corpus with held-out access auditing.

    Pixel data is cached as uint8 and converted on access. In training mode
    any read of a held-out condition kind raises; in all modes every kind
    ever read is recorded in `accessed_kinds` so runs can be audited.
    """

    def __init__(self, root: str, training_mode: bool = False):
        manifest_path = os.path.join(root, MANIFEST_NAME)
        if not os.path.exists(manifest_path):
            raise CorpusError(f"no corpus manifest at {manifest_path}")
        self.root = root
        self.training_mode = training_mode
        self.accessed_kinds: set[TransformKind] = set()
        self.records: dict[int, CorpusRecord] = {}
        with open(manifest_path) as fh:
            for line in fh:
                obj = json.loads(line)
                rec = CorpusRecord(id=obj["id"], split=obj["split"], caption=obj["caption"], seed=obj["seed"])
                self.records[rec.id] = rec
        self.train_ids = sorted(r.id for r in self.records.values() if r.split == "train")
        self.test_ids = sorted(r.id for r in self.records.values() if r.split == "test")
        self.fingerprint = manifest_fingerprint(root)
        self._cache: dict[tuple[int, str], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec_id: int) -> CorpusRecord:
        return self.records[rec_id]

    def _load(self, rec_id: int, name: str) -> np.ndarray:
        key = (rec_id, name)
        if key not in self._cache:
            rec = self.records[rec_id]
            path = os.path.join(self.root, rec.split, str(rec_id), f"{name}.png")
            arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
            self._cache[key] = arr
        return from_uint8(self._cache[key])

    def image(self, rec_id: int) -> np.ndarray:
        return self._load(rec_id, "image")

    def condition(self, rec_id: int, kind: TransformKind) -> np.ndarray:
        if self.training_mode and kind in HELD_OUT_KINDS:
            raise HeldOutAccessError(f"training-mode corpus refused to serve held-out condition {kind.value}")
        self.accessed_kinds.add(kind)
        return self._load(rec_id, kind.value)
