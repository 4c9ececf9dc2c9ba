"""Labeled feature datasets: CSV I/O, pairing rules and a synthetic generator.

A record is one image: an id, the product (item) it shows, the high-level
class of that product, the domain it comes from (a user-taken query photo,
a catalog photo, or none) and a feature vector.

CSV layout::

    image_id,item_id,class_id,domain,f0,...,f{d-1}
"""

import csv
import enum
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, DatasetFormatError, DuplicateIdError

FIXED_COLUMNS = ("image_id", "item_id", "class_id", "domain")


class Domain(str, enum.Enum):
    QUERY = "query"
    CATALOG = "catalog"
    NONE = "none"


class PairMode(str, enum.Enum):
    ALL_PAIRS = "all"
    CROSS_DOMAIN = "cross"


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    image_id: str
    item_id: str
    class_id: str
    domain: Domain
    features: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.item_id == other.item_id
            and self.class_id == other.class_id
            and self.domain == other.domain
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


class Dataset:
    """An immutable collection of records with item and class indices.

    ``features`` is the ``(n_records, input_dim)`` matrix; record ``i``'s
    ``features`` attribute is a read-only view of row ``i``.
    """

    def __init__(self, records):
        records = list(records)
        if not records:
            raise DatasetFormatError("dataset has no records")
        dim = len(records[0].features)
        if dim < 1:
            raise DatasetFormatError("feature dimension must be positive")
        matrix = np.empty((len(records), dim))
        seen = set()
        for i, rec in enumerate(records):
            if rec.image_id in seen:
                raise DuplicateIdError(rec.image_id)
            seen.add(rec.image_id)
            if len(rec.features) != dim:
                raise DatasetFormatError(
                    f"record {rec.image_id!r} has {len(rec.features)} features, expected {dim}"
                )
            matrix[i] = rec.features
        if not np.all(np.isfinite(matrix)):
            raise DatasetFormatError("dataset contains non-finite feature values")
        matrix.setflags(write=False)

        self.features = matrix
        self.input_dim = dim
        self.records = [
            replace(rec, domain=Domain(rec.domain), features=matrix[i])
            for i, rec in enumerate(records)
        ]
        self.item_ids = [r.item_id for r in self.records]
        self.class_ids = [r.class_id for r in self.records]
        self.domains = [r.domain for r in self.records]

        self.index_by_item = {}
        self.index_by_class = {}
        self.class_of_item = {}
        for i, rec in enumerate(self.records):
            self.index_by_item.setdefault(rec.item_id, []).append(i)
            prev = self.class_of_item.setdefault(rec.item_id, rec.class_id)
            if prev != rec.class_id:
                raise DatasetFormatError(
                    f"item {rec.item_id!r} appears under classes {prev!r} and {rec.class_id!r}"
                )
            if len(self.index_by_item[rec.item_id]) == 1:
                self.index_by_class.setdefault(rec.class_id, []).append(rec.item_id)
        self._pairable = {}

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self.records, other.records))

    __hash__ = None

    def __repr__(self):
        return (
            f"Dataset({len(self)} records, {len(self.index_by_item)} items, "
            f"{len(self.index_by_class)} classes, dim={self.input_dim})"
        )

    @property
    def classes(self):
        return sorted(self.index_by_class)

    def has_domain(self, domain):
        return Domain(domain) in set(self.domains)

    def has_both_domains(self):
        present = set(self.domains)
        return Domain.QUERY in present and Domain.CATALOG in present

    def subset(self, indices):
        return Dataset(
            replace(self.records[i], features=np.array(self.records[i].features)) for i in indices
        )

    def pairable_records(self, mode):
        """Sorted indices of records that have at least one positive under ``mode``."""
        mode = PairMode(mode)
        if mode not in self._pairable:
            check_pair_mode(self, mode)
            self._pairable[mode] = [
                i for i in range(len(self)) if positive_candidates(self, i, mode)
            ]
        return self._pairable[mode]

    def pairable_items(self, mode, class_id=None):
        """``item_id -> pairable record indices`` restricted to ``class_id`` if given."""
        out = {}
        for i in self.pairable_records(mode):
            if class_id is not None and self.class_ids[i] != class_id:
                continue
            out.setdefault(self.item_ids[i], []).append(i)
        return out


def check_pair_mode(ds, mode):
    if PairMode(mode) is PairMode.CROSS_DOMAIN and not ds.has_both_domains():
        raise ConfigError(
            "cross-domain pairing needs both query and catalog records in the dataset"
        )


def positive_candidates(ds, anchor_idx, mode=PairMode.ALL_PAIRS):
    """Records showing the anchor's item, excluding the anchor, ascending.

    Under cross-domain pairing the candidate must also come from the other
    domain (query <-> catalog).
    """
    mode = PairMode(mode)
    anchor = ds.records[anchor_idx]
    out = []
    for j in ds.index_by_item[anchor.item_id]:
        if j == anchor_idx:
            continue
        if mode is PairMode.CROSS_DOMAIN:
            d = ds.domains[j]
            if d is Domain.NONE or anchor.domain is Domain.NONE or d is anchor.domain:
                continue
        out.append(j)
    return out


# -- CSV I/O -----------------------------------------------------------------


def write_dataset(ds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(FIXED_COLUMNS) + [f"f{k}" for k in range(ds.input_dim)])
        for rec in ds.records:
            writer.writerow(
                [rec.image_id, rec.item_id, rec.class_id, rec.domain.value]
                + [repr(float(v)) for v in rec.features]
            )


def load_dataset(path):
    """Parse and validate a dataset CSV.

    Raises DatasetFormatError (with the 1-based line number) on malformed
    rows, and DuplicateIdError when an image_id repeats.
    """
    records = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file", line=1) from None
        if tuple(header[:4]) != FIXED_COLUMNS:
            raise DatasetFormatError(
                f"header must start with {','.join(FIXED_COLUMNS)}", line=1
            )
        dim = len(header) - 4
        if dim < 1 or header[4:] != [f"f{k}" for k in range(dim)]:
            raise DatasetFormatError("feature columns must be named f0..f{d-1}", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4 + dim:
                raise DatasetFormatError(
                    f"expected {dim} features, found {len(row) - 4}", line=line
                )
            image_id, item_id, class_id, domain = row[:4]
            if image_id in seen:
                raise DuplicateIdError(image_id, line=line)
            seen[image_id] = line
            try:
                dom = Domain(domain.strip().lower())
            except ValueError:
                raise DatasetFormatError(f"unknown domain {domain!r}", line=line) from None
            try:
                feats = np.array([float(v) for v in row[4:]])
            except ValueError as exc:
                raise DatasetFormatError(str(exc), line=line) from None
            if not np.all(np.isfinite(feats)):
                raise DatasetFormatError("non-finite feature value", line=line)
            records.append(FeatureRecord(image_id, item_id, class_id, dom, feats))
    if not records:
        raise DatasetFormatError("no data rows", line=2)
    return Dataset(records)


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Hierarchical Gaussian dataset description.

    Class centers ~ N(0, class_spread^2 I), item centers ~ N(class center,
    item_spread^2 I), images ~ N(item center, image_noise^2 I) over the first
    ``dim - nuisance_dims`` coordinates. The remaining ``nuisance_dims``
    coordinates are per-image draws from N(0, nuisance_spread^2) carrying no
    label information; they stand in for generic-feature variation that a
    trained embedding has to learn to ignore.
    """

    n_classes: int = 12
    items_per_class: int = 40
    images_per_item: int = 4
    dim: int = 32
    class_spread: float = 10.0
    item_spread: float = 3.0
    image_noise: float = 1.0
    two_domain: bool = False
    seed: int = 0
    nuisance_dims: int = 0
    nuisance_spread: float = 0.0

    def validate(self, for_training=False):
        for name in ("n_classes", "items_per_class", "images_per_item", "dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("class_spread", "item_spread", "image_noise"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0 <= self.nuisance_dims < self.dim:
            raise ConfigError("nuisance_dims must be in [0, dim)")
        if self.nuisance_dims and not self.nuisance_spread > 0:
            raise ConfigError("nuisance_spread must be positive when nuisance_dims > 0")
        if for_training and self.images_per_item < 2:
            raise ConfigError("images_per_item must be at least 2 to form training pairs")
        return self

    def to_dict(self):
        return asdict(self)


# Two regimes: well-separated classes ("sop-like") and overlapping ones
# ("df-like", two domains for query-to-catalog evaluation). Only 8 of the 24
# coordinates carry labels; the other 16 are nuisance.
PRESETS = {
    "sop-like": SynthConfig(
        n_classes=24,
        items_per_class=64,
        images_per_item=4,
        dim=24,
        class_spread=10.0,
        item_spread=3.0,
        image_noise=1.0,
        two_domain=False,
        nuisance_dims=16,
        nuisance_spread=6.0,
    ),
    "df-like": SynthConfig(
        n_classes=12,
        items_per_class=100,
        images_per_item=4,
        dim=24,
        class_spread=1.5,
        item_spread=3.0,
        image_noise=1.0,
        two_domain=True,
        nuisance_dims=16,
        nuisance_spread=6.0,
    ),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


def generate_synthetic(cfg):
    """Sample a dataset from ``cfg``; identical seeds give identical datasets."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d_info = cfg.dim - cfg.nuisance_dims
    class_centers = rng.normal(0.0, cfg.class_spread, size=(cfg.n_classes, d_info))
    item_centers = class_centers[:, None, :] + rng.normal(
        0.0, cfg.item_spread, size=(cfg.n_classes, cfg.items_per_class, d_info)
    )
    shape = (cfg.n_classes, cfg.items_per_class, cfg.images_per_item)
    images = item_centers[:, :, None, :] + rng.normal(0.0, cfg.image_noise, size=shape + (d_info,))
    if cfg.nuisance_dims:
        nuisance = rng.normal(0.0, cfg.nuisance_spread, size=shape + (cfg.nuisance_dims,))
        images = np.concatenate([images, nuisance], axis=-1)

    c_width = len(str(cfg.n_classes - 1))
    i_width = len(str(cfg.n_classes * cfg.items_per_class - 1))
    records = []
    for c in range(cfg.n_classes):
        class_id = f"class{c:0{c_width}d}"
        for i in range(cfg.items_per_class):
            item_id = f"item{c * cfg.items_per_class + i:0{i_width}d}"
            for m in range(cfg.images_per_item):
                if cfg.two_domain:
                    domain = Domain.CATALOG if m % 2 == 0 else Domain.QUERY
                else:
                    domain = Domain.NONE
                image_id = f"{item_id}-{m}"
                records.append(FeatureRecord(image_id, item_id, class_id, domain, images[c, i, m]))
    return Dataset(records)


def split_by_item(ds, test_fraction, seed=0):
    """Partition into (train, test) datasets with disjoint items.

    Items are split per class so both halves cover every class.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_items = set()
    for class_id in ds.classes:
        items = list(ds.index_by_class[class_id])
        n_test = int(round(test_fraction * len(items)))
        n_test = min(max(n_test, 1), len(items) - 1) if len(items) > 1 else 0
        for k in rng.permutation(len(items))[:n_test]:
            test_items.add(items[k])
    train_idx = [i for i, it in enumerate(ds.item_ids) if it not in test_items]
    test_idx = [i for i, it in enumerate(ds.item_ids) if it in test_items]
    if not train_idx or not test_idx:
        raise ConfigError("split produced an empty side; use more items per class")
    return ds.subset(train_idx), ds.subset(test_idx)
