"""Brute-force cosine retrieval and the evaluation protocols built on it.

Two protocols:

* cross-domain: query-domain records search the catalog-domain records.
* single-pool: every record searches all records, itself excluded.

Ranking is by descending cosine similarity with ties broken by ascending
record index, everywhere.
"""

import csv
import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Domain
from .embedding import EPS, as_vector, forward
from .errors import ConfigError, DegenerateInputError, UsageError

DEFAULT_K_LIST = (1, 5, 10, 20, 30, 40, 50)


class EvalProtocol(str, enum.Enum):
    CROSS_DOMAIN = "cross-domain"
    SINGLE_POOL = "single-pool"


def default_protocol(ds):
    return EvalProtocol.CROSS_DOMAIN if ds.has_both_domains() else EvalProtocol.SINGLE_POOL


def _sides(ds, protocol):
    protocol = EvalProtocol(protocol)
    if protocol is EvalProtocol.SINGLE_POOL:
        everything = np.arange(len(ds))
        return everything, everything
    if not ds.has_both_domains():
        raise ConfigError("cross-domain evaluation needs both query and catalog records")
    domains = np.array([d.value for d in ds.domains])
    return (
        np.flatnonzero(domains == Domain.QUERY.value),
        np.flatnonzero(domains == Domain.CATALOG.value),
    )


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray
    refs: np.ndarray
    norms: np.ndarray

    def __len__(self):
        return len(self.refs)


def _embed_checked(model, ds, indices):
    E = forward(model, ds.features[indices])
    norms = np.sqrt(np.einsum("ij,ij->i", E, E))
    bad = np.flatnonzero(~(norms > EPS))
    if bad.size:
        rec = ds.records[indices[bad[0]]]
        raise DegenerateInputError(f"embedding of record {rec.image_id!r} has near-zero norm")
    return E, norms


def build_index(model, ds, protocol):
    """Embed the catalog side of ``protocol`` and cache row norms."""
    _, catalog = _sides(ds, protocol)
    E, norms = _embed_checked(model, ds, catalog)
    return RetrievalIndex(embeddings=E, refs=catalog.copy(), norms=norms)


def retrieve_topk(index, query, k, exclude=None):
    """Top-``k`` ``(record index, similarity)`` pairs for one query embedding."""
    if k < 1:
        raise UsageError("k must be >= 1")
    q = as_vector(query, "query")
    if q.shape[0] != index.embeddings.shape[1]:
        raise UsageError("query dimension does not match the index")
    qn = float(np.sqrt(q @ q))
    if qn <= EPS:
        raise DegenerateInputError("query embedding has near-zero norm")
    sims = np.clip((index.embeddings @ q) / (index.norms * qn), -1.0, 1.0)
    refs = index.refs
    if exclude is not None:
        keep = refs != exclude
        sims, refs = sims[keep], refs[keep]
    order = np.lexsort((refs, -sims))[:k]
    return [(int(refs[i]), float(sims[i])) for i in order]


@dataclass
class EvalReport:
    protocol: str
    recall_at_k: dict
    classes: list
    confusion: list
    overall_first_retrieval_accuracy: float
    per_class_accuracy: dict
    n_queries: int
    excluded_queries: int = 0
    # queries whose rank-1 tie mixed a same-item and a different-item record
    rank1_ties: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        doc = {
            "protocol": self.protocol,
            "recall_at_k": {str(k): v for k, v in self.recall_at_k.items()},
            "classes": list(self.classes),
            "confusion": [list(row) for row in self.confusion],
            "overall_first_retrieval_accuracy": self.overall_first_retrieval_accuracy,
            "per_class_accuracy": dict(self.per_class_accuracy),
            "n_queries": self.n_queries,
            "excluded_queries": self.excluded_queries,
            "rank1_ties": self.rank1_ties,
        }
        doc.update(self.extra)
        return doc

    @classmethod
    def from_dict(cls, doc):
        known = {
            "protocol", "recall_at_k", "classes", "confusion", "overall_first_retrieval_accuracy",
            "per_class_accuracy", "n_queries", "excluded_queries", "rank1_ties",
        }
        return cls(
            protocol=doc["protocol"],
            recall_at_k={int(k): v for k, v in doc["recall_at_k"].items()},
            classes=list(doc["classes"]),
            confusion=[list(r) for r in doc["confusion"]],
            overall_first_retrieval_accuracy=doc["overall_first_retrieval_accuracy"],
            per_class_accuracy=dict(doc["per_class_accuracy"]),
            n_queries=doc["n_queries"],
            excluded_queries=doc.get("excluded_queries", 0),
            rank1_ties=doc.get("rank1_ties", 0),
            extra={k: v for k, v in doc.items() if k not in known},
        )


def _codes(values):
    uniq = {v: n for n, v in enumerate(sorted(set(values)))}
    return np.array([uniq[v] for v in values])


def evaluate(model, ds, protocol=None, k_list=DEFAULT_K_LIST):
    """Recall@k and first-retrieval confusion in one pass over the queries.

    Queries with no same-item record on the catalog side are left out and
    counted in ``excluded_queries``.
    """
    protocol = EvalProtocol(protocol or default_protocol(ds))
    k_list = sorted({int(k) for k in k_list})
    if not k_list or k_list[0] < 1:
        raise UsageError("k_list must contain positive integers")
    queries, catalog = _sides(ds, protocol)
    index = build_index(model, ds, protocol)
    Q, qnorms = _embed_checked(model, ds, queries)

    S = np.clip((Q @ index.embeddings.T) / np.outer(qnorms, index.norms), -1.0, 1.0)
    if protocol is EvalProtocol.SINGLE_POOL:
        # queries and catalog are the same index list, so self is the diagonal
        np.fill_diagonal(S, -np.inf)

    item_code = _codes(ds.item_ids)
    same = item_code[queries][:, None] == item_code[catalog][None, :]
    if protocol is EvalProtocol.SINGLE_POOL:
        np.fill_diagonal(same, False)
    eligible = same.any(axis=1)
    if not eligible.any():
        raise UsageError("no query has a same-item record on the catalog side")

    S, same = S[eligible], same[eligible]
    q_idx = queries[eligible]
    n = len(q_idx)

    # Catalog columns are in ascending record order, so among equal scores
    # the lower column wins; argmax returns the first maximum.
    best_correct = np.where(same, S, -np.inf)
    bc_col = np.argmax(best_correct, axis=1)
    bc_sim = best_correct[np.arange(n), bc_col]
    cols = np.arange(S.shape[1])[None, :]
    ahead = (S > bc_sim[:, None]) | ((S == bc_sim[:, None]) & (cols < bc_col[:, None]))
    first_rank = ahead.sum(axis=1) + 1

    recall = {k: float(np.mean(first_rank <= k)) for k in k_list}

    top_col = np.argmax(S, axis=1)
    top_sim = S[np.arange(n), top_col]
    at_top = S == top_sim[:, None]
    rank1_ties = int(np.sum((at_top & same).any(axis=1) & (at_top & ~same).any(axis=1)))

    classes = ds.classes
    class_code = {c: i for i, c in enumerate(classes)}
    true_c = np.array([class_code[ds.class_ids[i]] for i in q_idx])
    pred_c = np.array([class_code[ds.class_ids[catalog[c]]] for c in top_col])
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(confusion, (true_c, pred_c), 1)
    row_sums = confusion.sum(axis=1)
    per_class = {
        c: (float(confusion[i, i] / row_sums[i]) if row_sums[i] else None)
        for i, c in enumerate(classes)
    }
    return EvalReport(
        protocol=protocol.value,
        recall_at_k=recall,
        classes=list(classes),
        confusion=confusion.tolist(),
        overall_first_retrieval_accuracy=float(np.trace(confusion) / n),
        per_class_accuracy=per_class,
        n_queries=int(n),
        excluded_queries=int(len(queries) - n),
        rank1_ties=rank1_ties,
    )


def recall_at_k(model, ds, protocol=None, k_list=DEFAULT_K_LIST):
    return evaluate(model, ds, protocol, k_list)


def confusion_matrix(model, ds, protocol=None):
    return evaluate(model, ds, protocol, k_list=(1,))


def write_report_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")


def write_recall_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "recall"])
        for k in sorted(report.recall_at_k):
            w.writerow([k, repr(report.recall_at_k[k])])


def write_confusion_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true_class", "pred_class", "count"])
        for i, true_c in enumerate(report.classes):
            for j, pred_c in enumerate(report.classes):
                w.writerow([true_c, pred_c, report.confusion[i][j]])
