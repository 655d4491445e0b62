"""Adam and the seeded mini-batch loop shared by every decomposition model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, EmptyTensor, NonFiniteLoss
from .tensor_core import NONNEG_MAPS, SparseTensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    rank: int
    learning_rate: float = 0.01
    epochs: int = 500
    batch_size: int = 1024
    seed: int = 0
    coupling_weight: float = 1.0
    early_stop_patience: int = 10
    early_stop_delta: float = 1e-6
    nonneg_map: str = "softplus"
    # NeAT only: hidden widths of each component head; () is a single affine layer
    head_hidden: tuple[int, ...] = ()
    # NeAT only: activation on each head's scalar output ("identity" or "softplus")
    head_output: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if int(self.rank) < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.seed) < 0:
            raise ConfigError("seed must be non-negative")
        if not self.coupling_weight >= 0:
            raise ConfigError(f"coupling_weight must be >= 0, got {self.coupling_weight}")
        if self.nonneg_map.lower() not in NONNEG_MAPS:
            raise ConfigError(f"nonneg_map must be one of {NONNEG_MAPS}")
        if self.head_output not in ("identity", "softplus"):
            raise ConfigError(f"head_output must be 'identity' or 'softplus', got {self.head_output!r}")
        if any(h < 1 for h in self.head_hidden):
            raise ConfigError("hidden widths must be >= 1")


@dataclass
class FitReport:
    final_train_rmse: float
    epoch_history: list[tuple[int, float]]
    stopped_early: bool
    seed: int
    # per-tensor train RMSE of the returned parameters, keyed by tensor role
    train_rmse_by_tensor: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "final_train_rmse": self.final_train_rmse,
            "epoch_history": [list(p) for p in self.epoch_history],
            "stopped_early": self.stopped_early,
            "seed": self.seed,
            "train_rmse_by_tensor": dict(self.train_rmse_by_tensor),
        }


class Adam:
    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads.get(k)
            if g is None:
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# (params, indices, values) -> (sse, grads of sse w.r.t. raw params)
TermFn = Callable[[dict, np.ndarray, np.ndarray], tuple[float, dict]]


@dataclass(frozen=True)
class Term:
    """One squared-error term of an objective: a tensor, its weight and its model."""

    role: str
    tensor: SparseTensor
    weight: float
    fn: TermFn


def seeded_streams(seed: int, n_terms: int) -> tuple[np.random.Generator, list[np.random.Generator]]:
    """Independent generators: one for initialisation, one per term for shuffling.

    Keeping the streams separate means adding a second tensor never perturbs
    the initial values or batch order of the first.
    """
    children = np.random.SeedSequence(int(seed)).spawn(1 + n_terms)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def objective(params: dict, terms: Sequence[Term]) -> tuple[float, dict[str, float]]:
    """Full-pass weighted SSE and per-term SSE."""
    total = 0.0
    per = {}
    for term in terms:
        sse, _ = term.fn(params, term.tensor.indices, term.tensor.values, need_grad=False)
        per[term.role] = sse
        total += term.weight * sse
    return total, per


def _monitor(per: dict[str, float], terms: Sequence[Term]) -> float:
    num = 0.0
    den = 0.0
    for term in terms:
        num += term.weight * per[term.role]
        den += term.weight * term.tensor.nnz
    return math.sqrt(num / den)


def run_adam(params: dict[str, np.ndarray], terms: Sequence[Term], config: TrainConfig,
             shuffle_rngs: Sequence[np.random.Generator]) -> tuple[dict[str, np.ndarray], FitReport]:
    """Minimise ``sum_t weight_t * SSE_t`` by mini-batch Adam.

    Every epoch each term's entries are shuffled by its own generator and split
    into the same number of batches, set by the first term.  The monitored
    quantity is the weighted train RMSE over all entries, evaluated after each
    epoch (epoch 0 is the initial state).
    """
    for term in terms:
        if term.tensor.nnz == 0:
            raise EmptyTensor(f"{term.role} tensor has no entries")
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    n_first = terms[0].tensor.nnz
    n_batches = max(1, math.ceil(n_first / config.batch_size))
    scale = n_batches / n_first
    coefs = [term.weight * scale for term in terms]
    opt = Adam(lr=config.learning_rate)

    _, per = objective(params, terms)
    current = _monitor(per, terms)
    if not math.isfinite(current):
        raise NonFiniteLoss("initial loss is not finite", epoch=0, last_state=None)
    history = [(0, current)]
    best = current
    stale = 0
    stopped_early = False
    last_good = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, config.epochs + 1):
        splits = [np.array_split(rng.permutation(term.tensor.nnz), n_batches)
                  for term, rng in zip(terms, shuffle_rngs)]
        for b in range(n_batches):
            grads: dict[str, np.ndarray] = {}
            for term, coef, parts in zip(terms, coefs, splits):
                sel = parts[b]
                if sel.size == 0:
                    continue
                _, g = term.fn(params, term.tensor.indices[sel], term.tensor.values[sel])
                for k, gk in g.items():
                    if k in grads:
                        grads[k] = grads[k] + coef * gk
                    else:
                        grads[k] = coef * gk
            opt.step(params, grads)
        _, per = objective(params, terms)
        current = _monitor(per, terms)
        if not math.isfinite(current):
            raise NonFiniteLoss(f"loss diverged at epoch {epoch}", epoch=epoch,
                                last_state=last_good)
        last_good = {k: v.copy() for k, v in params.items()}
        history.append((epoch, current))
        if best - current < config.early_stop_delta:
            stale += 1
        else:
            stale = 0
        best = min(best, current)
        if config.early_stop_patience > 0 and stale >= config.early_stop_patience:
            stopped_early = True
            logger.debug("early stop at epoch %d (rmse %.6g)", epoch, current)
            break

    by_tensor = {term.role: math.sqrt(per[term.role] / term.tensor.nnz) for term in terms}
    report = FitReport(final_train_rmse=history[-1][1], epoch_history=history,
                       stopped_early=stopped_early, seed=int(config.seed),
                       train_rmse_by_tensor=by_tensor)
    return params, report
