"""Deterministic synthetic activity dataset.

Three users, five activity classes. Samples are Gaussian clusters around
per-class centers shifted by a per-user offset, with sample counts matching
the reference per-user/per-activity matrix (6920 train, 2028 test). An
eight-class source task with the same structure but disjoint centers feeds
pretraining.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import LabeledBatch

USERS = ("A", "B", "C")


class ActivityLabel(IntEnum):
    READING = 0
    DRINKING_WATER = 1
    USING_LAPTOP = 2
    USING_MOBILE_PHONE = 3
    WASHING_DISHES = 4


# Per-user training sample counts, indexed by class (reading, drinking water,
# using laptop, using mobile phone, washing dishes). Totals: 2605/2043/2272.
DEFAULT_TRAIN_COUNTS: dict[str, tuple[int, ...]] = {
    "A": (518, 517, 504, 564, 502),
    "B": (433, 371, 529, 288, 422),
    "C": (478, 372, 527, 433, 462),
}
DEFAULT_TEST_TOTAL = 2028


@dataclass
class SynthSpec:
    feature_dim: int = 32
    train_counts: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_TRAIN_COUNTS)
    )
    test_total: int = DEFAULT_TEST_TOTAL
    center_radius: float = 3.0
    offset_radius: float = 0.5
    noise_std: float = 1.0
    seed: int = 0
    class_centers: np.ndarray | None = None  # (classes, d); derived when None
    user_offsets: dict[str, np.ndarray] | None = None  # user -> (d,)
    source_classes: int = 8
    source_per_class: int = 400

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be > 0")
        if self.test_total < 0:
            raise ConfigError("test_total must be >= 0")
        if not self.train_counts:
            raise ConfigError("train_counts must not be empty")
        n_classes = len(ActivityLabel)
        for user, counts in self.train_counts.items():
            if len(counts) != n_classes:
                raise ConfigError(f"user {user}: expected {n_classes} class counts")
            if any(c < 0 for c in counts):
                raise ConfigError(f"user {user}: counts must be >= 0")
        if self.source_classes < 2 or self.source_per_class < 1:
            raise ConfigError("source task needs >= 2 classes and >= 1 sample each")

    @property
    def users(self) -> tuple[str, ...]:
        return tuple(self.train_counts.keys())


@dataclass
class Partition:
    train: LabeledBatch
    test: LabeledBatch


def _streams(spec: SynthSpec):
    ss = np.random.SeedSequence(spec.seed)
    names = ("centers", "offsets", "train", "test", "source")
    return dict(zip(names, ss.spawn(len(names))))


def _on_sphere(rng: np.random.Generator, radius: float, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v * (radius / np.linalg.norm(v))


def class_centers(spec: SynthSpec) -> np.ndarray:
    if spec.class_centers is not None:
        centers = np.asarray(spec.class_centers, dtype=np.float64)
        if centers.shape != (len(ActivityLabel), spec.feature_dim):
            raise ConfigError("class_centers shape mismatch")
        return centers
    rng = np.random.default_rng(_streams(spec)["centers"])
    return np.stack(
        [_on_sphere(rng, spec.center_radius, spec.feature_dim) for _ in ActivityLabel]
    )


def user_offsets(spec: SynthSpec) -> dict[str, np.ndarray]:
    if spec.user_offsets is not None:
        out = {u: np.asarray(v, dtype=np.float64) for u, v in spec.user_offsets.items()}
        for u in spec.users:
            if u not in out or out[u].shape != (spec.feature_dim,):
                raise ConfigError(f"user_offsets missing or misshaped for {u}")
        return out
    rng = np.random.default_rng(_streams(spec)["offsets"])
    return {u: _on_sphere(rng, spec.offset_radius, spec.feature_dim) for u in spec.users}


def _apportion(total: int, weights) -> list[int]:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise ConfigError("weights must have a positive sum")
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    short = total - int(counts.sum())
    # Stable largest-remainder: ties go to the lower index.
    order = np.lexsort((np.arange(len(weights)), -(quotas - counts)))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


def test_counts(spec: SynthSpec) -> dict[str, tuple[int, ...]]:
    """Per-user per-class test counts: the train matrix scaled to test_total."""
    users = spec.users
    flat = [c for u in users for c in spec.train_counts[u]]
    split = _apportion(spec.test_total, flat)
    out = {}
    k = len(ActivityLabel)
    for i, u in enumerate(users):
        out[u] = tuple(split[i * k : (i + 1) * k])
    return out


def _draw_user(rng, counts, centers, offset, noise_std, dim) -> LabeledBatch:
    rows = []
    labels = []
    for c, count in enumerate(counts):
        if count == 0:
            continue
        base = centers[c] + offset
        rows.append(base + rng.normal(0.0, noise_std, size=(count, dim)))
        labels.append(np.full(count, c, dtype=np.int64))
    return LabeledBatch(np.concatenate(rows), np.concatenate(labels))


def generate(spec: SynthSpec) -> dict[str, Partition]:
    """Per-user train/test splits; bitwise identical for identical specs."""
    spec.validate()
    centers = class_centers(spec)
    offsets = user_offsets(spec)
    streams = _streams(spec)
    tests = test_counts(spec)

    train_rng = np.random.default_rng(streams["train"])
    test_rng = np.random.default_rng(streams["test"])
    out = {}
    for u in spec.users:
        train = _draw_user(
            train_rng, spec.train_counts[u], centers, offsets[u],
            spec.noise_std, spec.feature_dim,
        )
        test = _draw_user(
            test_rng, tests[u], centers, offsets[u], spec.noise_std, spec.feature_dim
        )
        out[u] = Partition(train, test)
    return out


def pooled_test(partitions: dict[str, Partition]) -> LabeledBatch:
    feats = np.concatenate([p.test.features for p in partitions.values()])
    labels = np.concatenate([p.test.labels for p in partitions.values()])
    return LabeledBatch(feats, labels)


def source_centers(spec: SynthSpec) -> np.ndarray:
    """Source-task centers kept > 4 * noise_std away from every target center
    (and from each other), so the tasks do not overlap."""
    target = class_centers(spec)
    rng = np.random.default_rng(_streams(spec)["source"])
    min_dist = 4.0 * spec.noise_std
    picked: list[np.ndarray] = []
    attempts = 0
    while len(picked) < spec.source_classes:
        cand = _on_sphere(rng, spec.center_radius, spec.feature_dim)
        others = np.concatenate([target, np.asarray(picked).reshape(-1, spec.feature_dim)])
        if np.min(np.linalg.norm(others - cand, axis=1)) > min_dist:
            picked.append(cand)
        attempts += 1
        if attempts > 200_000:
            raise ConfigError(
                "cannot place source centers; lower noise_std or raise center_radius"
            )
    return np.stack(picked)


def source_task(spec: SynthSpec) -> LabeledBatch:
    """Pretraining corpus: disjoint centers, same offset/noise structure."""
    spec.validate()
    centers = source_centers(spec)
    rng = np.random.default_rng(_streams(spec)["source"].spawn(1)[0])
    n_users = len(spec.users)
    offsets = [_on_sphere(rng, spec.offset_radius, spec.feature_dim) for _ in range(n_users)]
    rows = []
    labels = []
    for c in range(spec.source_classes):
        per_user = _apportion(spec.source_per_class, [1] * n_users)
        for off, count in zip(offsets, per_user):
            if count == 0:
                continue
            rows.append(centers[c] + off + rng.normal(0.0, spec.noise_std, (count, spec.feature_dim)))
            labels.append(np.full(count, c, dtype=np.int64))
    return LabeledBatch(np.concatenate(rows), np.concatenate(labels))


def save_csv(path, per_user: dict[str, LabeledBatch]) -> None:
    """Rows of f0..f{d-1},label,user with round-trip float formatting."""
    users = list(per_user.keys())
    d = per_user[users[0]].features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)] + ["label", "user"])
        for u in users:
            batch = per_user[u]
            for row, label in zip(batch.features, batch.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label), u])


def load_csv(path) -> dict[str, LabeledBatch]:
    per_user_rows: dict[str, list] = {}
    per_user_labels: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-2:] != ["label", "user"]:
            raise ConfigError(f"unexpected dataset header in {path}")
        d = len(header) - 2
        for row in reader:
            if len(row) != d + 2:
                raise ConfigError(f"malformed dataset row in {path}")
            user = row[-1]
            per_user_rows.setdefault(user, []).append([float(v) for v in row[:d]])
            per_user_labels.setdefault(user, []).append(int(row[-2]))
    return {
        u: LabeledBatch(np.array(per_user_rows[u]), np.array(per_user_labels[u]))
        for u in per_user_rows
    }
