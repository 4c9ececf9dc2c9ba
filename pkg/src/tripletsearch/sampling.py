"""Minibatch construction and online negative selection.

A minibatch is a list of B (anchor, positive) record pairs with distinct
anchor items. Each pair then gets one negative chosen among the other
pairs' embeddings: the one most similar to the anchor ("batch-hard"), or a
uniformly random one for the ablation baseline.

All randomness flows through an explicit ``numpy.random.Generator`` so the
whole sampling stream is a function of (dataset, config, seed).
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import PairMode, positive_candidates
from .embedding import cosine_similarity_matrix
from .errors import ConfigError

log = logging.getLogger(__name__)

NEGATIVE_STRATEGIES = ("batch-hard", "random")


@dataclass(frozen=True)
class SamplerConfig:
    batch_pairs: int = 48
    within_class_fraction: float = 0.0
    negatives_from_anchors: bool = False
    negative_strategy: str = "batch-hard"
    # None: derived from the training seed
    seed: int | None = None

    def validate(self):
        if not isinstance(self.batch_pairs, (int, np.integer)) or self.batch_pairs < 2:
            raise ConfigError(f"batch_pairs must be an integer >= 2, got {self.batch_pairs!r}")
        if not 0.0 <= self.within_class_fraction <= 1.0:
            raise ConfigError("within_class_fraction must lie in [0, 1]")
        if self.negative_strategy not in NEGATIVE_STRATEGIES:
            raise ConfigError(
                f"negative_strategy must be one of {NEGATIVE_STRATEGIES}, got {self.negative_strategy!r}"
            )
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class Minibatch:
    pairs: list
    in_class: str | None = None
    # anchors had to repeat items because the class was too small
    fallback: bool = False

    @property
    def anchors(self):
        return [a for a, _ in self.pairs]

    @property
    def positives(self):
        return [p for _, p in self.pairs]


@dataclass
class TripletSet:
    """Selected triplets, indexed by position within the minibatch.

    Triplet t uses anchor ``A[anchor_pos[t]]``, positive ``P[anchor_pos[t]]``
    and negative ``P[neg_pos[t]]`` (or ``A[neg_pos[t]]`` when
    ``neg_is_anchor[t]``). ``triplets`` holds the same as record indices when
    the minibatch is known.
    """

    anchor_pos: np.ndarray
    neg_pos: np.ndarray
    neg_is_anchor: np.ndarray
    triplets: list = field(default_factory=list)
    s_ap: np.ndarray | None = None
    s_an: np.ndarray | None = None
    losses: np.ndarray | None = None

    def __len__(self):
        return len(self.anchor_pos)

    def attach_records(self, batch):
        self.triplets = []
        for i, j, from_anchor in zip(self.anchor_pos, self.neg_pos, self.neg_is_anchor):
            a, p = batch.pairs[i]
            n = batch.pairs[j][0] if from_anchor else batch.pairs[j][1]
            self.triplets.append((a, p, n))
        return self


def _pick_positive(ds, anchor, mode, rng):
    cands = positive_candidates(ds, anchor, mode)
    return cands[int(rng.integers(len(cands)))]


def _distinct_item_anchors(ds, pool, n, rng):
    """Walk a random permutation of ``pool`` keeping the first record of each new item."""
    anchors = []
    used = set()
    for k in rng.permutation(len(pool)):
        idx = pool[k]
        item = ds.item_ids[idx]
        if item in used:
            continue
        used.add(item)
        anchors.append(idx)
        if len(anchors) == n:
            break
    return anchors


def class_for_batch(ds, rng, mode=PairMode.ALL_PAIRS):
    """Draw a class with probability proportional to its pairable-item count."""
    counts = {}
    for i in ds.pairable_records(mode):
        counts.setdefault(ds.class_ids[i], set()).add(ds.item_ids[i])
    classes = sorted(counts)
    if not classes:
        raise ConfigError("dataset has no pairable records")
    weights = np.array([len(counts[c]) for c in classes], dtype=np.float64)
    return classes[int(rng.choice(len(classes), p=weights / weights.sum()))]


def within_class_minibatch(ds, class_id, cfg, mode, rng):
    """Minibatch whose anchors and positives all come from ``class_id``.

    When the class has fewer than B pairable items every item is used once
    and the rest are drawn with replacement at the item level; the returned
    batch then has ``fallback=True``.
    """
    by_item = ds.pairable_items(mode, class_id)
    if not by_item:
        raise ConfigError(f"class {class_id!r} has no pairable records")
    pool = [i for recs in by_item.values() for i in recs]
    pool.sort()
    B = cfg.batch_pairs
    anchors = _distinct_item_anchors(ds, pool, B, rng)
    fallback = len(anchors) < B
    if fallback:
        items = sorted(by_item)
        while len(anchors) < B:
            recs = by_item[items[int(rng.integers(len(items)))]]
            anchors.append(recs[int(rng.integers(len(recs)))])
    pairs = [(a, _pick_positive(ds, a, mode, rng)) for a in anchors]
    return Minibatch(pairs, in_class=class_id, fallback=fallback)


def sample_minibatch(ds, cfg, mode, rng):
    """Draw one minibatch: within-class with probability p, else ordinary."""
    pool = ds.pairable_records(mode)
    if not pool:
        raise ConfigError("no pairable anchors under the chosen pair mode")
    if cfg.within_class_fraction > 0.0 and rng.random() < cfg.within_class_fraction:
        return within_class_minibatch(ds, class_for_batch(ds, rng, mode), cfg, mode, rng)
    anchors = _distinct_item_anchors(ds, pool, cfg.batch_pairs, rng)
    if len(anchors) < cfg.batch_pairs:
        raise ConfigError(
            f"batch_pairs={cfg.batch_pairs} exceeds the {len(anchors)} pairable items available"
        )
    return Minibatch([(a, _pick_positive(ds, a, mode, rng)) for a in anchors])


def _candidate_mask(item_ids, negatives_from_anchors):
    """Legal-candidate mask with columns interleaved as P0, A0, P1, A1, ...

    Interleaving makes a first-index argmax implement the tie rule
    (lowest pair index first, positive before anchor).
    """
    items = np.asarray(item_ids)
    different = items[:, None] != items[None, :]
    B = len(items)
    mask = np.zeros((B, 2 * B), dtype=bool)
    mask[:, 0::2] = different
    if negatives_from_anchors:
        mask[:, 1::2] = different
    return mask


def _finish(rows, cols):
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    return TripletSet(anchor_pos=rows, neg_pos=cols // 2, neg_is_anchor=(cols % 2) == 1)


def batch_hard_select(A, P, item_ids, cfg):
    """For each pair, the legal in-batch candidate most similar to its anchor.

    Candidates for pair i are P[j] (and A[j] if ``cfg.negatives_from_anchors``)
    for pairs j whose item differs from pair i's. Pairs with no candidate are
    dropped.
    """
    A = np.asarray(A, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    B = len(A)
    if B < 2 or len(P) != B or len(item_ids) != B:
        raise ConfigError("batch_hard_select needs B >= 2 aligned anchors, positives and items")
    mask = _candidate_mask(item_ids, cfg.negatives_from_anchors)
    S = np.full((B, 2 * B), -np.inf)
    S[:, 0::2] = cosine_similarity_matrix(A, P)
    if cfg.negatives_from_anchors:
        S[:, 1::2] = cosine_similarity_matrix(A, A)
    S[~mask] = -np.inf
    keep = mask.any(axis=1)
    if not keep.any():
        log.warning("batch_hard_select: every pair shares one item; no triplets formed")
    rows = np.flatnonzero(keep)
    return _finish(rows, np.argmax(S[rows], axis=1))


def random_negative_select(item_ids, cfg, rng):
    """Ablation baseline: a uniformly random legal candidate per pair."""
    B = len(item_ids)
    if B < 2:
        raise ConfigError("random_negative_select needs B >= 2")
    mask = _candidate_mask(item_ids, cfg.negatives_from_anchors)
    rows, cols = [], []
    for i in range(B):
        legal = np.flatnonzero(mask[i])
        if legal.size:
            rows.append(i)
            cols.append(legal[int(rng.integers(legal.size))])
    if not rows:
        log.warning("random_negative_select: every pair shares one item; no triplets formed")
    return _finish(rows, cols)


class Sampler:
    """Stateful minibatch stream for one training run."""

    def __init__(self, ds, cfg, mode=PairMode.ALL_PAIRS, seed=0):
        self.ds = ds
        self.cfg = cfg.validate()
        self.mode = PairMode(mode)
        self.rng = np.random.default_rng(seed)
        self.small_class_fallbacks = 0
        n_items = len(ds.pairable_items(self.mode))
        if cfg.within_class_fraction < 1.0 and n_items < cfg.batch_pairs:
            raise ConfigError(
                f"batch_pairs={cfg.batch_pairs} exceeds the {n_items} pairable items available"
            )

    def next_batch(self):
        batch = sample_minibatch(self.ds, self.cfg, self.mode, self.rng)
        if batch.fallback:
            self.small_class_fallbacks += 1
        return batch

    def select(self, A, P, batch):
        return select_negatives(A, P, batch, self.ds, self.cfg, self.rng)


def select_negatives(A, P, batch, ds, cfg, rng=None):
    """Apply the configured negative strategy to embedded anchors/positives."""
    items = [ds.item_ids[a] for a in batch.anchors]
    if cfg.negative_strategy == "random":
        if rng is None:
            raise ConfigError("random negative selection needs an rng")
        ts = random_negative_select(items, cfg, rng)
    else:
        ts = batch_hard_select(A, P, items, cfg)
    return ts.attach_records(batch)
