"""Neural additive tensor decomposition.

Each component r owns a small network (a "head") that maps the mapped factor
values ``phi([a_ir, b_jr, c_kr])`` to a scalar; the reconstruction is the sum
of the R head outputs.  Heads of all components are stored stacked, layer by
layer, as ``W_l: (R, fan_in, fan_out)`` and ``b_l: (R, fan_out)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decomposition import _require_entries, check_coupled_shapes, scatter_rows
from .errors import ConfigError, DeepHeadUnsupported, DegenerateScores, EmptyTensor, ShapeMismatch
from .optim import FitReport, Term, TrainConfig, run_adam, seeded_streams
from .tensor_core import _check_indices, _frozen, nonneg, softplus, softplus_grad

FACTOR_INIT_STD = 0.5

# head output activation: name -> (f, f')
OUTPUTS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "softplus": (softplus, softplus_grad),
}


@dataclass(frozen=True)
class ComponentHead:
    """One component's network; ``weights[l]`` is ``(fan_in, fan_out)``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    output: str = "identity"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def __call__(self, features) -> np.ndarray:
        h = np.asarray(features, dtype=np.float64)
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return OUTPUTS[self.output][0](h[..., 0])


@dataclass(frozen=True)
class HeadStack:
    """The R heads of one tensor, stacked along a leading component axis."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    output: str = "identity"

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ConfigError(f"unknown head output {self.output!r}; expected one of {sorted(OUTPUTS)}")
        object.__setattr__(self, "weights", tuple(_frozen(w, np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b, np.float64) for b in self.biases))
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeMismatch("heads need matching, non-empty weight and bias lists")
        R = self.weights[0].shape[0]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 3 or w.shape[0] != R or b.shape != (R, w.shape[2]):
                raise ShapeMismatch(f"layer {l}: weight {w.shape} / bias {b.shape} inconsistent")
            if l and w.shape[1] != self.weights[l - 1].shape[2]:
                raise ShapeMismatch(f"layer {l} fan-in does not match previous fan-out")
        if self.weights[-1].shape[2] != 1:
            raise ShapeMismatch("heads must end in a single output")

    @property
    def rank(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def in_width(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def head(self, r: int) -> ComponentHead:
        return ComponentHead(tuple(w[r] for w in self.weights), tuple(b[r] for b in self.biases),
                             self.output)

    def only(self, r: int) -> "HeadStack":
        """Copy with every head except ``r`` zeroed."""
        mask = np.zeros(self.rank)
        mask[r] = 1.0
        return HeadStack(tuple(w * mask[:, None, None] for w in self.weights),
                         tuple(b * mask[:, None] for b in self.biases), self.output)

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{l}"] = w
            out[f"{prefix}b{l}"] = b
        return out

    @classmethod
    def from_params(cls, params, prefix: str, output: str = "identity") -> "HeadStack":
        n = sum(1 for k in params if k.startswith(f"{prefix}W"))
        return cls(tuple(params[f"{prefix}W{l}"] for l in range(n)),
                   tuple(params[f"{prefix}b{l}"] for l in range(n)), output)

    @classmethod
    def init(cls, rng: np.random.Generator, rank: int, in_width: int,
             hidden: Sequence[int] = (), output: str = "identity") -> "HeadStack":
        widths = [in_width, *hidden, 1]
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(rank, fan_in, fan_out)))
            bs.append(np.zeros((rank, fan_out)))
        return cls(tuple(ws), tuple(bs), output)


def _forward(params, factor_keys, prefix, n_layers, phi, indices):
    raw_rows = [params[k][indices[:, m]] for m, k in enumerate(factor_keys)]
    # (R, N, modes)
    h = np.stack([phi(r) for r in raw_rows], axis=-1).transpose(1, 0, 2)
    acts, pre = [h], []
    for l in range(n_layers):
        z = h @ params[f"{prefix}W{l}"] + params[f"{prefix}b{l}"][:, None, :]
        pre.append(z)
        h = np.maximum(z, 0.0) if l < n_layers - 1 else z
        acts.append(h)
    return raw_rows, acts, pre


def neat_term(factor_keys: Sequence[str], prefix: str, n_layers: int, nonneg_map: str,
              output: str = "identity"):
    """SSE and raw-parameter gradients for ``sum_r head_r(phi([factor rows]))``."""
    phi, dphi = nonneg(nonneg_map)
    out_f, out_df = OUTPUTS[output]
    factor_keys = tuple(factor_keys)

    def fn(params, indices, values, need_grad=True):
        raw_rows, acts, pre = _forward(params, factor_keys, prefix, n_layers, phi, indices)
        z_out = acts[-1][:, :, 0]
        resid = out_f(z_out).sum(axis=0) - values
        sse = float(resid @ resid)
        if not need_grad:
            return sse, {}
        dz = ((2.0 * resid)[None, :] * out_df(z_out))[:, :, None]
        grads = {}
        for l in range(n_layers - 1, -1, -1):
            w = params[f"{prefix}W{l}"]
            grads[f"{prefix}W{l}"] = acts[l].transpose(0, 2, 1) @ dz
            grads[f"{prefix}b{l}"] = dz.sum(axis=1)
            dh = dz @ w.transpose(0, 2, 1)
            if l > 0:
                dz = dh * (pre[l - 1] > 0)
        for m, k in enumerate(factor_keys):
            rows = dh[:, :, m].T * dphi(raw_rows[m])
            grads[k] = scatter_rows(indices[:, m], rows, params[k].shape[0])
        return sse, grads

    return fn


def _predict(params, factor_keys, prefix, heads: "HeadStack", nonneg_map, indices):
    phi, _ = nonneg(nonneg_map)
    _, acts, _ = _forward(params, factor_keys, prefix, heads.n_layers, phi, indices)
    return OUTPUTS[heads.output][0](acts[-1][:, :, 0]).sum(axis=0)


@dataclass(frozen=True)
class NeatModel:
    raw_factors: tuple[np.ndarray, ...]
    heads: HeadStack
    nonneg_map: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "raw_factors",
                           tuple(_frozen(f, np.float64) for f in self.raw_factors))
        nonneg(self.nonneg_map)
        if self.heads.in_width != len(self.raw_factors):
            raise ShapeMismatch(f"head input width {self.heads.in_width} != "
                                f"{len(self.raw_factors)} modes")
        for f in self.raw_factors:
            if f.shape[1] != self.heads.rank:
                raise ShapeMismatch("factor columns do not match head count")

    @property
    def rank(self) -> int:
        return self.heads.rank

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.raw_factors)

    @property
    def factors(self) -> list[np.ndarray]:
        phi, _ = nonneg(self.nonneg_map)
        return [phi(f) for f in self.raw_factors]

    def _keys(self):
        return tuple(f"F{m}" for m in range(len(self.raw_factors)))

    def params(self) -> dict[str, np.ndarray]:
        out = {k: f for k, f in zip(self._keys(), self.raw_factors)}
        out.update(self.heads.params("f"))
        return out

    @classmethod
    def from_params(cls, params, nonneg_map="softplus", head_output="identity") -> "NeatModel":
        n = sum(1 for k in params if k.startswith("F"))
        return cls(tuple(params[f"F{m}"] for m in range(n)),
                   HeadStack.from_params(params, "f", head_output), nonneg_map)

    def predict(self, indices) -> np.ndarray:
        idx = _check_indices(indices, self.shape)
        return _predict(self.params(), self._keys(), "f", self.heads, self.nonneg_map, idx)

    def with_heads(self, heads: HeadStack) -> "NeatModel":
        return NeatModel(self.raw_factors, heads, self.nonneg_map)


@dataclass(frozen=True)
class CoupledNeatModel:
    """Shared A, B; neuron factor C, optional behavior factor D; separate heads."""

    shared_trial_factor: np.ndarray
    shared_time_factor: np.ndarray
    neuron_factor: np.ndarray
    behavior_factor: np.ndarray | None
    heads_x: HeadStack
    heads_y: HeadStack
    nonneg_map: str = "softplus"

    def __post_init__(self):
        for name in ("shared_trial_factor", "shared_time_factor", "neuron_factor"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        if self.behavior_factor is not None:
            object.__setattr__(self, "behavior_factor", _frozen(self.behavior_factor, np.float64))
        nonneg(self.nonneg_map)
        if self.heads_x.rank != self.heads_y.rank:
            raise ShapeMismatch("heads_x and heads_y differ in count")
        if self.heads_x.in_width != 3:
            raise ShapeMismatch("X heads must take 3 inputs")
        y_modes = 2 if self.behavior_factor is None else 3
        if self.heads_y.in_width != y_modes:
            raise ShapeMismatch(f"Y heads must take {y_modes} inputs")

    @property
    def rank(self) -> int:
        return self.heads_x.rank

    @property
    def shape_x(self):
        return (self.shared_trial_factor.shape[0], self.shared_time_factor.shape[0],
                self.neuron_factor.shape[0])

    @property
    def shape_y(self):
        base = (self.shared_trial_factor.shape[0], self.shared_time_factor.shape[0])
        return base if self.behavior_factor is None else base + (self.behavior_factor.shape[0],)

    def y_keys(self):
        return ("A", "B") if self.behavior_factor is None else ("A", "B", "D")

    def params(self) -> dict[str, np.ndarray]:
        out = {"A": self.shared_trial_factor, "B": self.shared_time_factor,
               "C": self.neuron_factor}
        if self.behavior_factor is not None:
            out["D"] = self.behavior_factor
        out.update(self.heads_x.params("f"))
        out.update(self.heads_y.params("g"))
        return out

    @classmethod
    def from_params(cls, params, nonneg_map="softplus", head_output="identity"
                    ) -> "CoupledNeatModel":
        return cls(params["A"], params["B"], params["C"], params.get("D"),
                   HeadStack.from_params(params, "f", head_output),
                   HeadStack.from_params(params, "g", head_output), nonneg_map)

    def view_x(self) -> NeatModel:
        return NeatModel((self.shared_trial_factor, self.shared_time_factor, self.neuron_factor),
                         self.heads_x, self.nonneg_map)

    def view_y(self) -> NeatModel:
        mats = [self.shared_trial_factor, self.shared_time_factor]
        if self.behavior_factor is not None:
            mats.append(self.behavior_factor)
        return NeatModel(tuple(mats), self.heads_y, self.nonneg_map)

    def predict_x(self, indices) -> np.ndarray:
        return self.view_x().predict(indices)

    def predict_y(self, indices) -> np.ndarray:
        return self.view_y().predict(indices)


def _view(model, which_tensor: str) -> NeatModel:
    which = which_tensor.upper()
    if isinstance(model, NeatModel):
        if which != "X":
            raise ConfigError("a single-tensor NeAT model only has an X path")
        return model
    if which == "X":
        return model.view_x()
    if which == "Y":
        return model.view_y()
    raise ConfigError(f"which_tensor must be 'X' or 'Y', got {which_tensor!r}")


def neat_predict(model, index: Sequence[int], which_tensor: str = "X") -> float:
    view = _view(model, which_tensor)
    return float(view.predict(np.asarray(index, dtype=np.int64).reshape(1, -1))[0])


def coupled_neat_terms(X, Y, coupling_weight, heads_x: HeadStack, heads_y: HeadStack,
                       nonneg_map) -> list[Term]:
    y_keys = ("A", "B", "D") if Y.ndim == 3 else ("A", "B")
    return [
        Term("X", X, 1.0, neat_term(("A", "B", "C"), "f", heads_x.n_layers, nonneg_map,
                                    heads_x.output)),
        Term("Y", Y, float(coupling_weight), neat_term(y_keys, "g", heads_y.n_layers,
                                                       nonneg_map, heads_y.output)),
    ]


def coupled_neat_loss(model: CoupledNeatModel, X, Y, coupling_weight: float = 1.0) -> float:
    check_coupled_shapes(X, Y)
    params = model.params()
    total = 0.0
    for term in coupled_neat_terms(X, Y, coupling_weight, model.heads_x, model.heads_y,
                                   model.nonneg_map):
        sse, _ = term.fn(params, term.tensor.indices, term.tensor.values, need_grad=False)
        total += term.weight * sse
    return total


def coupled_neat_grad(model: CoupledNeatModel, X, Y, coupling_weight: float = 1.0):
    params = model.params()
    grads: dict[str, np.ndarray] = {}
    for term in coupled_neat_terms(X, Y, coupling_weight, model.heads_x, model.heads_y,
                                   model.nonneg_map):
        _, g = term.fn(params, term.tensor.indices, term.tensor.values)
        for k, v in g.items():
            grads[k] = grads[k] + term.weight * v if k in grads else term.weight * v
    return grads


def fit_neat(tensor, config: TrainConfig, init: NeatModel | None = None
             ) -> tuple[NeatModel, FitReport]:
    """Fit a NeAT model to one tensor; same optimiser and seed contract as ``fit_cp``."""
    _require_entries(tensor, "input")
    init_rng, shuffle_rngs = seeded_streams(config.seed, 1)
    if init is None:
        params = {f"F{m}": init_rng.normal(0.0, FACTOR_INIT_STD, size=(s, config.rank))
                  for m, s in enumerate(tensor.shape)}
        heads = HeadStack.init(init_rng, config.rank, tensor.ndim, config.head_hidden,
                               config.head_output)
        params.update(heads.params("f"))
    else:
        if init.shape != tensor.shape or init.rank != config.rank:
            raise ConfigError("init model does not match tensor shape or rank")
        params, heads = init.params(), init.heads
    keys = tuple(f"F{m}" for m in range(tensor.ndim))
    terms = [Term("X", tensor, 1.0, neat_term(keys, "f", heads.n_layers, config.nonneg_map,
                                              heads.output))]
    params, report = run_adam(params, terms, config, shuffle_rngs)
    return NeatModel.from_params(params, config.nonneg_map, heads.output), report


def fit_coupled_neat(X, Y, config: TrainConfig, init: CoupledNeatModel | None = None
                     ) -> tuple[CoupledNeatModel, FitReport]:
    """Fit shared A, B with tensor-specific heads to X and Y jointly."""
    if Y.nnz == 0:
        raise EmptyTensor("Y tensor has no entries")
    _require_entries(X, "X")
    _require_entries(Y, "Y")
    check_coupled_shapes(X, Y)
    init_rng, shuffle_rngs = seeded_streams(config.seed, 2)
    R = config.rank
    if init is None:
        params = {k: init_rng.normal(0.0, FACTOR_INIT_STD, size=(s, R))
                  for k, s in zip("ABC", X.shape)}
        heads_x = HeadStack.init(init_rng, R, 3, config.head_hidden, config.head_output)
        params.update(heads_x.params("f"))
        if Y.ndim == 3:
            params["D"] = init_rng.normal(0.0, FACTOR_INIT_STD, size=(Y.shape[2], R))
        heads_y = HeadStack.init(init_rng, R, Y.ndim, config.head_hidden, config.head_output)
        params.update(heads_y.params("g"))
    else:
        if init.shape_x != X.shape or init.shape_y != Y.shape or init.rank != R:
            raise ConfigError("init model does not match data shapes or rank")
        params, heads_x, heads_y = init.params(), init.heads_x, init.heads_y
    terms = coupled_neat_terms(X, Y, config.coupling_weight, heads_x, heads_y, config.nonneg_map)
    params, report = run_adam(params, terms, config, shuffle_rngs)
    model = CoupledNeatModel(params["A"], params["B"], params["C"], params.get("D"),
                             HeadStack.from_params(params, "f", heads_x.output),
                             HeadStack.from_params(params, "g", heads_y.output),
                             config.nonneg_map)
    return model, report


# -- contribution scores -------------------------------------------------------

class ComponentTag(str, enum.Enum):
    SHARED = "Shared"
    X_SPECIFIC = "XSpecific"
    Y_SPECIFIC = "YSpecific"
    INACTIVE = "Inactive"

    def __str__(self):
        return self.value


def _heads(model, which_tensor: str) -> HeadStack:
    return _view(model, which_tensor).heads


def component_contribution(model, which_tensor: str, r: int) -> float:
    """Sum of a one-layer head's weights plus its bias."""
    heads = _heads(model, which_tensor)
    if heads.n_layers != 1:
        raise DeepHeadUnsupported(f"head has {heads.n_layers} layers; scoring needs exactly one")
    if not 0 <= r < heads.rank:
        raise ConfigError(f"component {r} out of range for rank {heads.rank}")
    return float(heads.weights[0][r].sum() + heads.biases[0][r].sum())


def contribution_scores(model, which_tensor: str) -> np.ndarray:
    heads = _heads(model, which_tensor)
    return np.array([component_contribution(model, which_tensor, r) for r in range(heads.rank)])


def _active(scores, threshold, which):
    scores = np.asarray(scores, dtype=np.float64)
    top = scores.max()
    if not top > 0:
        raise DegenerateScores(f"all {which} scores are <= 0; cannot normalise")
    return scores / top >= threshold


def tag_components(scores_x, scores_y, threshold: float = 0.5) -> list[ComponentTag]:
    """Tags from raw per-tensor scores, each normalised by its own maximum."""
    if len(scores_x) != len(scores_y):
        raise ShapeMismatch("score vectors differ in length")
    ax = _active(scores_x, threshold, "X")
    ay = _active(scores_y, threshold, "Y")
    tags = []
    for x_on, y_on in zip(ax, ay):
        if x_on and y_on:
            tags.append(ComponentTag.SHARED)
        elif x_on:
            tags.append(ComponentTag.X_SPECIFIC)
        elif y_on:
            tags.append(ComponentTag.Y_SPECIFIC)
        else:
            tags.append(ComponentTag.INACTIVE)
    return tags


def identify_components(model: CoupledNeatModel, activity_threshold: float = 0.5
                        ) -> list[ComponentTag]:
    """Label each component shared, tensor-specific or inactive from head scores."""
    return tag_components(contribution_scores(model, "X"), contribution_scores(model, "Y"),
                          activity_threshold)
