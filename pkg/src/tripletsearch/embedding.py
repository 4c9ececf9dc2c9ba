"""Vector math, the trainable embedding function and its analytic gradients.

Embeddings are stored unnormalized; normalization happens inside the
cosine similarity. Everything is float64.

Two architectures are supported:

    Linear:  f(x) = W x + b
    MLP1:    f(x) = W2 relu(W1 x + b1) + b2

``forward`` and ``backward`` accept a single vector of shape ``(d,)`` or a
batch of row vectors of shape ``(n, d)``.
"""

import json
import math

import numpy as np

from .errors import ConfigError, DatasetFormatError, DegenerateInputError, UsageError

EPS = 1e-12
ARCHES = ("linear", "mlp1")
CHECKPOINT_FORMAT_VERSION = 1


def as_vector(x, name="x"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise UsageError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise UsageError(f"{name} contains non-finite values")
    return v


def _checked_norms(u, v):
    if u.shape != v.shape:
        raise UsageError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    nu = float(np.sqrt(u @ u))
    nv = float(np.sqrt(v @ v))
    if nu <= EPS or nv <= EPS:
        raise DegenerateInputError(
            f"near-zero norm in cosine similarity (|u|={nu:.3g}, |v|={nv:.3g})"
        )
    return nu, nv


def cosine_similarity(u, v):
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    nu, nv = _checked_norms(u, v)
    s = float(u @ v) / (nu * nv)
    return min(1.0, max(-1.0, s))


def row_norms(X, what="embedding"):
    """Euclidean norm of every row; raises if any row is degenerate."""
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    bad = np.flatnonzero(~(norms > EPS))
    if bad.size:
        raise DegenerateInputError(f"{what} row {int(bad[0])} has near-zero norm")
    return norms


def cosine_similarity_matrix(U, V, u_norms=None, v_norms=None):
    """All-pairs cosine similarity between the rows of ``U`` and ``V``.

    Computed as dot / (|u| |v|) so that each entry matches
    ``cosine_similarity`` on the same pair up to summation order.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.shape[1] != V.shape[1]:
        raise UsageError(f"dimension mismatch: {U.shape[1]} vs {V.shape[1]}")
    if u_norms is None:
        u_norms = row_norms(U)
    if v_norms is None:
        v_norms = row_norms(V)
    S = (U @ V.T) / np.outer(u_norms, v_norms)
    return np.clip(S, -1.0, 1.0, out=S)


def grad_cosine(u, v):
    """Gradient of cosine_similarity(u, v) with respect to ``u`` and ``v``.

    dS/du = v / (|u||v|) - s u / |u|^2, and symmetrically for v.
    """
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    nu, nv = _checked_norms(u, v)
    s = float(u @ v) / (nu * nv)
    du = v / (nu * nv) - s * u / (nu * nu)
    dv = u / (nu * nv) - s * v / (nv * nv)
    return du, dv


def grad_cosine_rows(U, V):
    """Row-wise version of ``grad_cosine`` for aligned pairs (U[i], V[i]).

    Returns ``(s, dS_dU, dS_dV)``; ``s`` is unclamped.
    """
    nu = row_norms(U)
    nv = row_norms(V)
    s = np.einsum("ij,ij->i", U, V) / (nu * nv)
    inv = (1.0 / (nu * nv))[:, None]
    dU = V * inv - (s / (nu * nu))[:, None] * U
    dV = U * inv - (s / (nv * nv))[:, None] * V
    return s, dU, dV


def _param_shapes(arch, input_dim, hidden_dim, output_dim):
    if arch == "linear":
        return {"W": (output_dim, input_dim), "b": (output_dim,)}
    return {
        "W1": (hidden_dim, input_dim),
        "b1": (hidden_dim,),
        "W2": (output_dim, hidden_dim),
        "b2": (output_dim,),
    }


class EmbeddingModel:
    """Parametric map from input features to the embedding space.

    Parameters live in ``self.params`` as float64 arrays keyed by layer name
    (``W``/``b`` for linear, ``W1``/``b1``/``W2``/``b2`` for mlp1).
    """

    def __init__(self, arch, input_dim, output_dim, hidden_dim=None, params=None, seed=None):
        if arch not in ARCHES:
            raise ConfigError(f"unknown arch {arch!r}; expected one of {ARCHES}")
        if arch == "mlp1":
            if hidden_dim is None or int(hidden_dim) < 1:
                raise ConfigError("mlp1 requires a positive hidden_dim")
            hidden_dim = int(hidden_dim)
        else:
            hidden_dim = None
        if int(input_dim) < 1 or int(output_dim) < 1:
            raise ConfigError("input_dim and output_dim must be positive")
        self.arch = arch
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden_dim = hidden_dim
        self.seed = seed
        shapes = _param_shapes(arch, self.input_dim, hidden_dim, self.output_dim)
        if params is None:
            params = {name: np.zeros(shape) for name, shape in shapes.items()}
        if set(params) != set(shapes):
            raise UsageError(f"parameter names {sorted(params)} do not match {sorted(shapes)}")
        self.params = {}
        for name, shape in shapes.items():
            p = np.array(params[name], dtype=np.float64)
            if p.shape != shape:
                raise UsageError(f"parameter {name} has shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise UsageError(f"parameter {name} has non-finite values")
            self.params[name] = p

    @classmethod
    def initialized(cls, arch, input_dim, output_dim, hidden_dim=None, seed=0):
        """Glorot-uniform weights, zero biases."""
        model = cls(arch, input_dim, output_dim, hidden_dim=hidden_dim, seed=seed)
        rng = np.random.default_rng(seed)
        for name in sorted(model.params):
            p = model.params[name]
            if p.ndim == 2:
                fan_out, fan_in = p.shape
                a = math.sqrt(6.0 / (fan_in + fan_out))
                p[...] = rng.uniform(-a, a, size=p.shape)
        return model

    @classmethod
    def identity(cls, dim):
        """Linear model that returns its input unchanged."""
        return cls("linear", dim, dim, params={"W": np.eye(dim), "b": np.zeros(dim)})

    def copy(self):
        return EmbeddingModel(
            self.arch,
            self.input_dim,
            self.output_dim,
            hidden_dim=self.hidden_dim,
            params={k: v.copy() for k, v in self.params.items()},
            seed=self.seed,
        )

    def __call__(self, x):
        return forward(self, x)

    def __repr__(self):
        hidden = f", hidden_dim={self.hidden_dim}" if self.hidden_dim else ""
        return (
            f"EmbeddingModel({self.arch!r}, input_dim={self.input_dim}"
            f"{hidden}, output_dim={self.output_dim})"
        )


class GradientBuffer:
    """Per-parameter gradient accumulators shaped like a model's parameters."""

    def __init__(self, model):
        self.grads = {name: np.zeros_like(p) for name, p in model.params.items()}

    def zero(self):
        for g in self.grads.values():
            g.fill(0.0)

    def __getitem__(self, name):
        return self.grads[name]

    def flat(self):
        return np.concatenate([self.grads[k].ravel() for k in sorted(self.grads)])

    def is_zero(self):
        return all(not np.any(g) for g in self.grads.values())


def _as_input(model, x):
    X = np.asarray(x, dtype=np.float64)
    if X.ndim not in (1, 2) or X.shape[-1] != model.input_dim:
        raise UsageError(
            f"input has shape {X.shape}; expected last dimension {model.input_dim}"
        )
    return X


def forward(model, x):
    """Embed one vector ``(input_dim,)`` or a batch ``(n, input_dim)``."""
    X = _as_input(model, x)
    p = model.params
    if model.arch == "linear":
        return X @ p["W"].T + p["b"]
    H = np.maximum(X @ p["W1"].T + p["b1"], 0.0)
    return H @ p["W2"].T + p["b2"]


def backward(model, x, upstream, grads):
    """Accumulate d(upstream . f(x))/d(theta) into ``grads``.

    Activations are recomputed from ``x``. For a batch, the contributions of
    all rows are summed.
    """
    X = _as_input(model, x)
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != X.shape[:-1] + (model.output_dim,):
        raise UsageError(f"upstream has shape {G.shape}; expected {X.shape[:-1] + (model.output_dim,)}")
    for name, g in grads.grads.items():
        if g.shape != model.params[name].shape:
            raise UsageError(f"gradient buffer {name} does not match the model")
    X2 = np.atleast_2d(X)
    G2 = np.atleast_2d(G)
    p = model.params
    if model.arch == "linear":
        grads.grads["W"] += G2.T @ X2
        grads.grads["b"] += G2.sum(axis=0)
        return
    pre = X2 @ p["W1"].T + p["b1"]
    H = np.maximum(pre, 0.0)
    grads.grads["W2"] += G2.T @ H
    grads.grads["b2"] += G2.sum(axis=0)
    dpre = (G2 @ p["W2"]) * (pre > 0.0)
    grads.grads["W1"] += dpre.T @ X2
    grads.grads["b1"] += dpre.sum(axis=0)


# -- checkpoints ------------------------------------------------------------


def checkpoint_dict(model, metadata=None):
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.arch,
        "input_dim": model.input_dim,
    }
    if model.hidden_dim is not None:
        doc["hidden_dim"] = model.hidden_dim
    doc["output_dim"] = model.output_dim
    doc["seed"] = model.seed
    # json writes floats with repr(), the shortest round-tripping decimal
    doc["params"] = {
        name: {"shape": list(p.shape), "data": [float(v) for v in p.ravel()]}
        for name, p in sorted(model.params.items())
    }
    if metadata:
        doc["metadata"] = metadata
    return doc


def model_from_checkpoint(doc):
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    try:
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        return EmbeddingModel(
            doc["arch"],
            doc["input_dim"],
            doc["output_dim"],
            hidden_dim=doc.get("hidden_dim"),
            params=params,
            seed=doc.get("seed"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise DatasetFormatError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(model, path, metadata=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model, metadata), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Return ``(model, metadata)`` from a checkpoint JSON file."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return model_from_checkpoint(doc), doc.get("metadata", {})
