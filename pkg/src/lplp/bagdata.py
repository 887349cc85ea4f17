"""Instances, bags with partial label proportions, and a synthetic generator.

Label convention: ``0`` is the negative class, ``1..C`` are the positive
classes.  A partial proportion vector ``p`` has length ``C`` and covers the
positive classes only.

Dataset file layout (tab separated, one record per line)::

    lplp-dataset	1
    header	C	d	seed	n_train	n_validation	n_test
    inst	split	bag_id	id	true_label	x_1 ... x_d
    ...
    bag	split	bag_id	Y	p_1,...,p_C | none
    ...
    end	n_instances	n_bags

Instance records appear in bag order, and within a bag in instance order.
Features are written with 17 significant digits so the round trip is exact.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

SPLITS = ("train", "validation", "test")
SeedLike = Union[int, np.random.Generator]


class ConfigurationError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class Instance:
    features: np.ndarray
    true_label: int
    id: int

    def __eq__(self, other):
        return (isinstance(other, Instance) and self.id == other.id
                and self.true_label == other.true_label
                and np.array_equal(self.features, other.features))


@dataclass(frozen=True, eq=False)
class Bag:
    instances: tuple
    bag_label: int
    partial_proportions: Optional[np.ndarray] = None
    bag_id: int = 0

    def __post_init__(self):
        if len(self.instances) == 0:
            raise ValueError(f"bag {self.bag_id}: empty bag")
        if self.bag_label not in (0, 1):
            raise ValueError(f"bag {self.bag_id}: label must be 0 or 1")
        p = self.partial_proportions
        if (p is None) != (self.bag_label == 0):
            raise ValueError(f"bag {self.bag_id}: proportions present iff bag label is 1")
        if p is not None:
            if np.any(p < 0) or abs(float(np.sum(p)) - 1.0) > 1e-9:
                raise ValueError(f"bag {self.bag_id}: proportions {p.tolist()} are not on the simplex")

    def __len__(self):
        return len(self.instances)

    @property
    def features(self) -> np.ndarray:
        return np.stack([x.features for x in self.instances])

    @property
    def true_labels(self) -> np.ndarray:
        return np.array([x.true_label for x in self.instances], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        same_p = (self.partial_proportions is None and other.partial_proportions is None) or (
            self.partial_proportions is not None and other.partial_proportions is not None
            and np.array_equal(self.partial_proportions, other.partial_proportions))
        return (self.bag_id == other.bag_id and self.bag_label == other.bag_label and same_p
                and tuple(self.instances) == tuple(other.instances))


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list
    num_positive_classes: int
    feature_dim: int
    seed: int

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


# -- proportions ----------------------------------------------------------

def sample_partial_proportions(C: int, rng_seed: SeedLike) -> np.ndarray:
    """Uniform draw from the C-simplex (Dirichlet with unit concentration)."""
    if C < 2:
        raise ConfigurationError("need at least two positive classes")
    return _rng(rng_seed).dirichlet(np.ones(C))


def largest_remainder(total: int, proportions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``total * proportions``.

    Leftover units go to the largest fractional parts; ties go to the lower index.
    """
    quotas = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(quotas).astype(np.int64)
    left = total - int(counts.sum())
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:left]] += 1
    return counts


def full_proportion_from_partial(p, p_neg: float) -> np.ndarray:
    """((1 - p_neg) p_1, ..., (1 - p_neg) p_C, p_neg)."""
    p = np.asarray(p, dtype=np.float64)
    return np.append((1.0 - p_neg) * p, p_neg)


# -- composition ----------------------------------------------------------

class InstancePool:
    """Per-class instance lists drawn from without replacement."""

    def __init__(self, by_class: Mapping[int, Iterable[Instance]]):
        self.by_class = {int(c): list(v) for c, v in by_class.items()}

    def remaining(self, cls: int) -> int:
        return len(self.by_class.get(cls, ()))

    def draw(self, cls: int, k: int, rng: np.random.Generator) -> list:
        items = self.by_class.get(cls, [])
        if k > len(items):
            raise GenerationError(f"pool exhausted for class {cls}: need {k}, have {len(items)}")
        if k == 0:
            return []
        picks = set(rng.choice(len(items), size=k, replace=False).tolist())
        out = [items[i] for i in sorted(picks)]
        self.by_class[cls] = [x for i, x in enumerate(items) if i not in picks]
        return out


def _as_pool(pool) -> InstancePool:
    return pool if isinstance(pool, InstancePool) else InstancePool(pool)


def bag_counts(size: int, proportions, negative_fraction: float) -> tuple[int, np.ndarray]:
    n_neg = int(math.floor(negative_fraction * size + 0.5))
    n_pos = size - n_neg
    return n_neg, largest_remainder(n_pos, proportions)


def compose_bag(pool, size: int, proportions, negative_fraction: float,
                rng_seed: SeedLike, bag_id: int = 0) -> Bag:
    """Positive bag of ``size`` instances following the requested proportions.

    The stored partial proportions are the realized positive-class counts
    divided by the number of positive instances.
    """
    if size < 1:
        raise ConfigurationError("bag size must be at least 1")
    if not 0.0 <= negative_fraction < 1.0:
        raise ConfigurationError("negative_fraction must lie in [0, 1)")
    pool = _as_pool(pool)
    rng = _rng(rng_seed)
    n_neg, counts = bag_counts(size, proportions, negative_fraction)
    n_pos = int(counts.sum())
    if n_pos == 0:
        raise GenerationError(f"bag {bag_id}: no positive slots left after negatives")
    instances = pool.draw(0, n_neg, rng)
    for c, k in enumerate(counts, start=1):
        instances += pool.draw(c, int(k), rng)
    order = rng.permutation(len(instances))
    instances = tuple(instances[i] for i in order)
    return Bag(instances, 1, counts / n_pos, bag_id)


def compose_negative_bag(pool, size: int, rng_seed: SeedLike, bag_id: int = 0) -> Bag:
    if size < 1:
        raise ConfigurationError("bag size must be at least 1")
    pool = _as_pool(pool)
    return Bag(tuple(pool.draw(0, size, _rng(rng_seed))), 0, None, bag_id)


# -- synthetic data -------------------------------------------------------

def simplex_means(n_classes: int, d: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex in R^d with pairwise distance ``separation``."""
    if d < n_classes - 1:
        raise ConfigurationError(f"feature dim {d} too small for {n_classes} simplex vertices")
    centered = np.eye(n_classes) - 1.0 / n_classes
    # rows span an (n-1)-dim subspace; express them in an orthonormal basis of it
    _, _, vt = np.linalg.svd(centered)
    coords = centered @ vt[: n_classes - 1].T
    means = np.zeros((n_classes, d))
    means[:, : n_classes - 1] = coords * (separation / math.sqrt(2.0))
    return means


@dataclass
class _Counter:
    instance: int = 0
    bag: int = 0


def _make_split(rng, means, n_pos, n_neg, bag_size, C, counter: _Counter) -> list:
    plans = []
    need = np.zeros(C + 1, dtype=np.int64)
    for _ in range(n_pos):
        p = sample_partial_proportions(C, rng)
        frac = rng.uniform(0.2, 0.7)
        n_neg_inst, counts = bag_counts(bag_size, p, frac)
        need[0] += n_neg_inst
        need[1:] += counts
        plans.append((p, frac))
    need[0] += n_neg * bag_size

    pool = {}
    d = means.shape[1]
    for c in range(C + 1):
        feats = means[c] + rng.standard_normal((int(need[c]), d))
        pool[c] = []
        for row in feats:
            pool[c].append(Instance(row, c, counter.instance))
            counter.instance += 1
    pool = InstancePool(pool)

    bags = []
    for p, frac in plans:
        bags.append(compose_bag(pool, bag_size, p, frac, rng, counter.bag))
        counter.bag += 1
    for _ in range(n_neg):
        bags.append(compose_negative_bag(pool, bag_size, rng, counter.bag))
        counter.bag += 1
    return bags


def synth_gaussian_dataset(C: int = 2, d: int = 8, class_separation: float = 6.0,
                           n_train_pos: int = 400, n_train_neg: int = 400,
                           n_val_pos: int = 100, n_val_neg: int = 100,
                           n_test_pos: int = 100, n_test_neg: int = 10,
                           bag_size: int = 32, seed: int = 0) -> DatasetSplit:
    """Bags of unit-variance Gaussian instances, one Gaussian per class.

    Class means sit on a regular simplex so every pair of classes is
    ``class_separation`` apart.  Each positive bag draws its partial
    proportions uniformly from the simplex and its negative fraction
    uniformly from [0.2, 0.7].
    """
    counts = (n_train_pos, n_train_neg, n_val_pos, n_val_neg, n_test_pos, n_test_neg)
    if min(counts) < 1 or bag_size < 1:
        raise ConfigurationError("bag counts and bag size must be at least 1")
    if C < 2:
        raise ConfigurationError("need at least two positive classes")
    rng = np.random.default_rng(seed)
    means = simplex_means(C + 1, d, class_separation)
    counter = _Counter()
    splits = [_make_split(rng, means, counts[2 * k], counts[2 * k + 1], bag_size, C, counter)
              for k in range(3)]
    return DatasetSplit(*splits, num_positive_classes=C, feature_dim=d, seed=seed)


# -- persistence ----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dataset_to_text(split: DatasetSplit) -> str:
    lines = ["lplp-dataset\t1",
             "\t".join(["header", str(split.num_positive_classes), str(split.feature_dim),
                        str(split.seed)] + [str(len(split.split(s))) for s in SPLITS])]
    n_inst = 0
    for s in SPLITS:
        for bag in split.split(s):
            for x in bag.instances:
                lines.append("\t".join(["inst", s, str(bag.bag_id), str(x.id), str(x.true_label)]
                                       + [_fmt(v) for v in x.features]))
                n_inst += 1
    n_bags = 0
    for s in SPLITS:
        for bag in split.split(s):
            p = "none" if bag.partial_proportions is None else ",".join(
                _fmt(v) for v in bag.partial_proportions)
            lines.append("\t".join(["bag", s, str(bag.bag_id), str(bag.bag_label), p]))
            n_bags += 1
    lines.append(f"end\t{n_inst}\t{n_bags}")
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(split: DatasetSplit, path):
    atomic_write_text(path, dataset_to_text(split))


def load_dataset(path) -> DatasetSplit:
    with open(path) as fh:
        return parse_dataset(fh.read().splitlines())


def parse_dataset(lines: Sequence[str]) -> DatasetSplit:
    def fail(i, msg):
        raise DatasetFormatError(f"line {i + 1}: {msg}")

    if not lines or lines[0].split("\t") != ["lplp-dataset", "1"]:
        raise DatasetFormatError("line 1: missing 'lplp-dataset 1' magic record")
    if len(lines) < 2:
        raise DatasetFormatError("line 2: missing header record")
    head = lines[1].split("\t")
    if len(head) != 7 or head[0] != "header":
        fail(1, "malformed header record")
    try:
        C, d, seed, *sizes = (int(v) for v in head[1:])
    except ValueError:
        fail(1, "non-integer header field")

    insts: dict = {}
    bag_meta: list = []
    end = None
    for i in range(2, len(lines)):
        rec = lines[i].split("\t")
        kind = rec[0]
        if end is not None:
            fail(i, "record after end marker")
        try:
            if kind == "inst":
                if len(rec) != 5 + d:
                    fail(i, f"instance record has {len(rec)} fields, expected {5 + d}")
                if rec[1] not in SPLITS:
                    fail(i, f"unknown split {rec[1]!r}")
                label = int(rec[4])
                if not 0 <= label <= C:
                    fail(i, f"label {label} outside 0..{C}")
                x = Instance(np.array([float(v) for v in rec[5:]]), label, int(rec[3]))
                insts.setdefault((rec[1], int(rec[2])), []).append(x)
            elif kind == "bag":
                if len(rec) != 5:
                    fail(i, "malformed bag record")
                p = None if rec[4] == "none" else np.array([float(v) for v in rec[4].split(",")])
                if p is not None and p.size != C:
                    fail(i, f"bag {rec[2]}: expected {C} proportions")
                bag_meta.append((i, rec[1], int(rec[2]), int(rec[3]), p))
            elif kind == "end":
                if len(rec) != 3:
                    fail(i, "malformed end record")
                end = (int(rec[1]), int(rec[2]))
            else:
                fail(i, f"unknown record type {kind!r}")
        except ValueError as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            fail(i, str(exc))
    if end is None:
        raise DatasetFormatError(f"line {len(lines)}: truncated file (no end record)")

    out = {s: [] for s in SPLITS}
    seen_ids: dict = {}
    for i, s, bag_id, y, p in bag_meta:
        members = insts.pop((s, bag_id), None)
        if not members:
            fail(i, f"bag {bag_id} has no instances")
        try:
            bag = Bag(tuple(members), y, p, bag_id)
        except ValueError as exc:
            fail(i, f"validation error: {exc}")
        for x in members:
            if seen_ids.setdefault(x.id, s) != s:
                fail(i, f"instance {x.id} appears in two splits")
        out[s].append(bag)
    if insts:
        raise DatasetFormatError(f"instances reference unknown bags: {sorted(insts)[:3]}")
    n_inst = sum(len(b) for bags in out.values() for b in bags)
    if end != (n_inst, len(bag_meta)):
        raise DatasetFormatError(f"line {len(lines)}: end record {end} does not match content")
    if [len(out[s]) for s in SPLITS] != sizes:
        raise DatasetFormatError("line 2: split sizes do not match content")
    return DatasetSplit(out["train"], out["validation"], out["test"], C, d, seed)
