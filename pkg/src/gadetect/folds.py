"""Participant-level k-fold assignment, run rotation and augmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import cv2

from .errors import ConfigError, DataError


@dataclass
class FoldAssignment:
    k: int
    seed: int
    map: dict = field(default_factory=dict)  # participant_id -> fold

    def fold_of(self, participant_id: str) -> int:
        try:
            return self.map[participant_id]
        except KeyError:
            raise DataError(f"participant {participant_id!r} has no fold assignment") from None

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.map.values():
            sizes[f] += 1
        return sizes

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["participant_id", "fold"])
            for pid in sorted(self.map):
                w.writerow([pid, self.map[pid]])
        return path

    @classmethod
    def load(cls, path, k=None, seed=-1) -> "FoldAssignment":
        mapping = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["participant_id", "fold"]:
                raise DataError(f"{path}: expected header participant_id,fold")
            for row in reader:
                mapping[row["participant_id"]] = int(row["fold"])
        if k is None:
            k = max(mapping.values()) + 1 if mapping else 0
        return cls(k=k, seed=seed, map=mapping)


@dataclass(frozen=True)
class RunSplit:
    run_index: int
    test_fold: int
    dev_fold: int
    train_folds: tuple

    def as_dict(self) -> dict:
        return {
            "run_index": self.run_index,
            "test_fold": self.test_fold,
            "dev_fold": self.dev_fold,
            "train_folds": list(self.train_folds),
        }


def assign_folds(participant_ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Shuffle unique participants and cut them into k near-equal chunks.

    Ids are sorted before shuffling so the result does not depend on input
    order. There is no stratification by disease status.
    """
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    ids = sorted(set(participant_ids))
    if len(ids) < k:
        raise ConfigError(f"{len(ids)} participants cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    mapping = {}
    for fold, chunk in enumerate(np.array_split(order, k)):
        for i in chunk:
            mapping[ids[i]] = fold
    return FoldAssignment(k=k, seed=seed, map=mapping)


def rotation_schedule(k: int = 5) -> list[RunSplit]:
    if k < 3:
        raise ConfigError(f"a train/dev/test rotation needs k >= 3, got {k}")
    runs = []
    for r in range(k):
        dev = (r + 1) % k
        train = tuple(f for f in range(k) if f not in (r, dev))
        runs.append(RunSplit(run_index=r, test_fold=r, dev_fold=dev, train_folds=train))
    return runs


def split_items(items: Sequence, assignment: FoldAssignment, split: RunSplit, participant=None):
    """Partition ``items`` into (train, dev, test) lists for one run.

    ``participant`` extracts the participant id from an item; by default the
    item is expected to be an ImageRecord or a (record, label) pair.
    """
    if participant is None:

        def participant(item):
            rec = item[0] if isinstance(item, tuple) else item
            return rec.participant_id

    train, dev, test = [], [], []
    train_folds = set(split.train_folds)
    for item in items:
        f = assignment.fold_of(participant(item))
        if f == split.test_fold:
            test.append(item)
        elif f == split.dev_fold:
            dev.append(item)
        elif f in train_folds:
            train.append(item)
    return train, dev, test


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: float = 360.0
    width_shift_frac: float = 0.1
    height_shift_frac: float = 0.1
    horizontal_flip: bool = True
    vertical_flip: bool = True

    def __post_init__(self):
        if not 0 <= self.rotation_degrees <= 360:
            raise ConfigError(f"rotation_degrees must be in [0, 360], got {self.rotation_degrees}")
        for name in ("width_shift_frac", "height_shift_frac"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, False, False)


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Random rotation, then width/height shift, then coin-flip mirrors.

    All five random draws are taken on every call, whatever the config, so the
    rng stream stays aligned across configs. Rotation and shift are composed
    into a single bilinear resampling with reflect fill.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    dx = rng.uniform(-1.0, 1.0) * cfg.width_shift_frac * w
    dy = rng.uniform(-1.0, 1.0) * cfg.height_shift_frac * h
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    if cfg.rotation_degrees == 0:
        angle = 0.0

    out = image
    if angle != 0.0 or dx != 0.0 or dy != 0.0:
        theta = np.deg2rad(angle)
        c, s = np.cos(theta), np.sin(theta)
        # maps output (x, y) to input (x, y): inverse of rotate-then-shift
        rot_inv = np.array([[c, s], [-s, c]])
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        shift = np.array([dx, dy])
        matrix = np.empty((2, 3))
        matrix[:, :2] = rot_inv
        matrix[:, 2] = center - rot_inv @ (center + shift)
        src = image if image.dtype in (np.uint8, np.float32) else image.astype(np.float32)
        out = cv2.warpAffine(
            np.ascontiguousarray(src),
            matrix,
            (w, h),
            flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
            borderMode=cv2.BORDER_REFLECT,
        )
        if out.ndim == 2:
            out = out[:, :, None]
        out = out.astype(image.dtype, copy=False)
    if cfg.horizontal_flip and flip_h:
        out = out[:, ::-1]
    if cfg.vertical_flip and flip_v:
        out = out[::-1]
    return np.ascontiguousarray(out)
