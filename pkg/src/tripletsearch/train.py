"""Triplet loss, its gradient, SGD with momentum and the training loop.

Per step: sample a minibatch of (anchor, positive) pairs, embed them, pick a
negative for every pair from within the batch, average the hinge

    max(0, s(a, n) - s(a, p) + margin)

over the selected triplets, backpropagate and update. The selection is held
fixed while differentiating.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import PairMode, check_pair_mode
from .embedding import EmbeddingModel, GradientBuffer, backward, forward, grad_cosine_rows
from .errors import ConfigError, TrainingDivergedError
from .evaluation import DEFAULT_K_LIST, default_protocol, evaluate
from .sampling import Sampler, SamplerConfig, select_negatives

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd-momentum"
    lr: float = 1e-2
    momentum: float = 0.9

    def validate(self):
        if self.kind != "sgd-momentum":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pair_mode: PairMode = PairMode.ALL_PAIRS
    steps: int = 2000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval_every: int = 500
    seed: int = 0
    arch: str = "linear"
    hidden_dim: int | None = None
    # None: same as the input dimension
    output_dim: int | None = None

    def validate(self):
        if not self.margin >= 0:
            raise ConfigError("margin must be >= 0")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps!r}")
        if not isinstance(self.eval_every, (int, np.integer)) or self.eval_every < 1:
            raise ConfigError("eval_every must be a positive integer")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.sampler.validate()
        self.optimizer.validate()
        PairMode(self.pair_mode)
        return self

    def to_dict(self):
        d = asdict(self)
        d["pair_mode"] = PairMode(self.pair_mode).value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "sampler" in d:
            d["sampler"] = SamplerConfig(**d["sampler"])
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "pair_mode" in d:
            d["pair_mode"] = PairMode(d["pair_mode"])
        return cls(**d)


@dataclass
class StepMetrics:
    step: int
    mean_loss: float
    nonzero_fraction: float
    triplet_count: int
    in_class: bool

    def to_dict(self):
        return asdict(self)


def triplet_loss(s_ap, s_an, m):
    return max(0.0, s_an - s_ap + m)


def _select(model, batch, cfg, ds, sampler, rng):
    XA = ds.features[batch.anchors]
    XP = ds.features[batch.positives]
    EA = forward(model, XA)
    EP = forward(model, XP)
    if sampler is not None:
        rng = sampler.rng
    ts = select_negatives(EA, EP, batch, ds, cfg.sampler, rng)
    return XA, XP, EA, EP, ts


def _negatives(EA, EP, ts):
    return np.where(ts.neg_is_anchor[:, None], EA[ts.neg_pos], EP[ts.neg_pos])


def _score(EA, EP, ts, margin):
    """Fill similarities and hinge values on ``ts``; return the mean loss."""
    i = ts.anchor_pos
    a = EA[i]
    s_ap, _, _ = grad_cosine_rows(a, EP[i])
    s_an, _, _ = grad_cosine_rows(a, _negatives(EA, EP, ts))
    ts.s_ap = np.clip(s_ap, -1.0, 1.0)
    ts.s_an = np.clip(s_an, -1.0, 1.0)
    ts.losses = np.maximum(0.0, ts.s_an - ts.s_ap + margin)
    return float(ts.losses.mean()) if len(ts) else 0.0


def step_metrics(ts, batch, step):
    n = len(ts)
    nonzero = int(np.count_nonzero(ts.losses > 0.0)) if n else 0
    return StepMetrics(
        step=step,
        mean_loss=float(ts.losses.mean()) if n else 0.0,
        nonzero_fraction=nonzero / n if n else 0.0,
        triplet_count=n,
        in_class=batch.in_class is not None,
    )


def batch_loss(model, batch, cfg, ds, step=0, rng=None, sampler=None):
    """Mean hinge over the batch's selected triplets.

    Returns ``(mean_loss, triplets, metrics)``. A batch where no triplet
    can be formed has loss 0 and ``metrics.triplet_count == 0``.
    """
    _, _, EA, EP, ts = _select(model, batch, cfg, ds, sampler, rng)
    loss = _score(EA, EP, ts, cfg.margin)
    return loss, ts, step_metrics(ts, batch, step)


def loss_and_gradients(model, batch, cfg, ds, grads=None, step=0, rng=None, sampler=None):
    """One forward/backward pass; returns ``(grads, triplets, metrics)``."""
    if grads is None:
        grads = GradientBuffer(model)
    else:
        grads.zero()
    XA, XP, EA, EP, ts = _select(model, batch, cfg, ds, sampler, rng)
    _score(EA, EP, ts, cfg.margin)
    metrics = step_metrics(ts, batch, step)
    active = ts.losses > 0.0
    if not active.any():
        return grads, ts, metrics

    w = 1.0 / len(ts)
    i = ts.anchor_pos[active]
    j = ts.neg_pos[active]
    from_anchor = ts.neg_is_anchor[active]
    a = EA[i]
    _, dap_da, dap_dp = grad_cosine_rows(a, EP[i])
    n = np.where(from_anchor[:, None], EA[j], EP[j])
    _, dan_da, dan_dn = grad_cosine_rows(a, n)

    GA = np.zeros_like(EA)
    GP = np.zeros_like(EP)
    np.add.at(GA, i, w * (dan_da - dap_da))
    np.add.at(GP, i, -w * dap_dp)
    np.add.at(GA, j[from_anchor], w * dan_dn[from_anchor])
    np.add.at(GP, j[~from_anchor], w * dan_dn[~from_anchor])
    backward(model, XA, GA, grads)
    backward(model, XP, GP, grads)
    return grads, ts, metrics


def batch_gradients(model, batch, cfg, ds, rng=None, sampler=None):
    grads, _, _ = loss_and_gradients(model, batch, cfg, ds, rng=rng, sampler=sampler)
    return grads


class SGDMomentum:
    """v <- momentum * v + g;  theta <- theta - lr * v."""

    def __init__(self, model, lr=1e-2, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p) for name, p in model.params.items()}

    def step(self, model, grads):
        new_v = {}
        new_p = {}
        for name, p in model.params.items():
            g = grads.grads[name]
            if g.shape != p.shape:
                raise ConfigError(f"gradient {name} has shape {g.shape}, expected {p.shape}")
            v = self.momentum * self.velocity[name] + g
            updated = p - self.lr * v
            if not np.all(np.isfinite(updated)):
                raise TrainingDivergedError(
                    f"non-finite value in parameter {name!r} after update "
                    f"(max |grad| = {np.max(np.abs(g)):.3g}, lr = {self.lr})"
                )
            new_v[name] = v
            new_p[name] = updated
        for name in model.params:
            self.velocity[name] = new_v[name]
            model.params[name][...] = new_p[name]


def apply_update(model, grads, optimizer_state):
    optimizer_state.step(model, grads)


def _seeds(seed):
    init_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return init_ss, sample_ss


def init_model(input_dim, cfg):
    init_ss, _ = _seeds(cfg.seed)
    model = EmbeddingModel.initialized(
        cfg.arch,
        input_dim,
        cfg.output_dim or input_dim,
        hidden_dim=cfg.hidden_dim,
        seed=init_ss,
    )
    model.seed = cfg.seed
    return model


def train(ds, cfg, eval_ds=None, protocol=None, k_list=DEFAULT_K_LIST, model=None, on_record=None):
    """Run ``cfg.steps`` optimization steps.

    Returns ``(model, log)`` where ``log`` is a list of JSON-ready dicts: one
    StepMetrics dict per step and ``{"step": s, "eval": report}`` snapshots
    at step 0, every ``eval_every`` steps and at the end (only when
    ``eval_ds`` is given). ``on_record`` is called with each entry as it is
    produced.
    """
    cfg.validate()
    check_pair_mode(ds, cfg.pair_mode)
    if model is None:
        model = init_model(ds.input_dim, cfg)
    _, sample_ss = _seeds(cfg.seed)
    sample_seed = cfg.sampler.seed if cfg.sampler.seed is not None else sample_ss
    sampler = Sampler(ds, cfg.sampler, cfg.pair_mode, seed=sample_seed)
    opt = SGDMomentum(model, lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum)
    grads = GradientBuffer(model)
    protocol = protocol or (default_protocol(eval_ds) if eval_ds is not None else None)

    records = []

    def emit(entry):
        records.append(entry)
        if on_record is not None:
            on_record(entry)

    def snapshot(step):
        if eval_ds is not None:
            emit({"step": step, "eval": evaluate(model, eval_ds, protocol, k_list).to_dict()})

    snapshot(0)
    for step in range(1, cfg.steps + 1):
        batch = sampler.next_batch()
        _, _, metrics = loss_and_gradients(model, batch, cfg, ds, grads=grads, step=step, sampler=sampler)
        apply_update(model, grads, opt)
        emit(metrics.to_dict())
        if step % cfg.eval_every == 0 and step != cfg.steps:
            snapshot(step)
    snapshot(cfg.steps)
    if sampler.small_class_fallbacks:
        log.warning("%d within-class batches needed the small-class fallback", sampler.small_class_fallbacks)
    return model, records

