"""Non-negative CP fitting on single tensors and coupled tensor pairs.

Losses are sums of squared residuals over *observed* entries only.  Gradients
are written out by hand (no autodiff); ``tests/test_gradients.py`` holds them
to central finite differences.
"""
from __future__ import annotations

import io
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyTensor, ShapeMismatch
from .optim import FitReport, Term, TrainConfig, run_adam, seeded_streams
from .tensor_core import CoupledCpModel, CpModel, SparseTensor, ensure_valid, nonneg

INIT_STD = 0.5


def scatter_rows(index: np.ndarray, rows: np.ndarray, size: int) -> np.ndarray:
    """Sum ``rows`` into a ``(size, R)`` array by row index, in a fixed order."""
    out = np.empty((size, rows.shape[1]), dtype=np.float64)
    for r in range(rows.shape[1]):
        out[:, r] = np.bincount(index, weights=rows[:, r], minlength=size)
    return out


def cp_term(factor_keys: Sequence[str], weight_key: str, nonneg_map: str):
    """SSE and raw-parameter gradients of one CP reconstruction.

    The returned callable computes ``sum (x - sum_r phi(w_r) prod_m phi(F_m[i_m, r]))^2``
    for a batch of entries, with factors ``params[k]`` for ``k`` in ``factor_keys``.
    """
    phi, dphi = nonneg(nonneg_map)
    factor_keys = tuple(factor_keys)

    def fn(params, indices, values, need_grad=True):
        raw_rows = [params[k][indices[:, m]] for m, k in enumerate(factor_keys)]
        rows = [phi(r) for r in raw_rows]
        raw_w = params[weight_key]
        w = phi(raw_w)
        prod = rows[0].copy()
        for g in rows[1:]:
            prod *= g
        resid = prod @ w - values
        sse = float(resid @ resid)
        if not need_grad:
            return sse, {}
        d = 2.0 * resid
        grads = {weight_key: (prod.T @ d) * dphi(raw_w)}
        dw = d[:, None] * w[None, :]
        for m, k in enumerate(factor_keys):
            others = dw.copy()
            for m2, g in enumerate(rows):
                if m2 != m:
                    others *= g
            grads[k] = scatter_rows(indices[:, m], others * dphi(raw_rows[m]), params[k].shape[0])
        return sse, grads

    return fn


def _require_entries(t: SparseTensor, role: str):
    ensure_valid(t)
    if t.nnz == 0:
        raise EmptyTensor(f"{role} tensor has no entries")


def check_coupled_shapes(X: SparseTensor, Y: SparseTensor) -> None:
    if X.ndim != 3:
        raise ShapeMismatch(f"X must have 3 modes (trial, time, neuron), got {X.ndim}")
    if Y.ndim not in (2, 3):
        raise ShapeMismatch(f"Y must have 2 or 3 modes, got {Y.ndim}")
    if X.shape[:2] != Y.shape[:2]:
        raise ShapeMismatch(f"trial/time modes differ: X {X.shape[:2]} vs Y {Y.shape[:2]}")


def coupled_terms(params: dict, X: SparseTensor, Y: SparseTensor, coupling_weight: float,
                  nonneg_map: str) -> list[Term]:
    y_keys = ("A", "B", "D") if Y.ndim == 3 else ("A", "B")
    return [
        Term("X", X, 1.0, cp_term(("A", "B", "C"), "lambda", nonneg_map)),
        Term("Y", Y, float(coupling_weight), cp_term(y_keys, "gamma", nonneg_map)),
    ]


def coupled_cp_loss(model: CoupledCpModel, X: SparseTensor, Y: SparseTensor,
                    coupling_weight: float = 1.0) -> float:
    """``SSE_X + coupling_weight * SSE_Y`` over observed entries."""
    check_coupled_shapes(X, Y)
    if X.shape != model.shape_x or Y.shape != model.shape_y:
        raise ShapeMismatch(f"model shapes {model.shape_x}/{model.shape_y} do not match "
                            f"data {X.shape}/{Y.shape}")
    params = model.params()
    sse_x, _ = cp_term(("A", "B", "C"), "lambda", model.nonneg_map)(
        params, X.indices, X.values, need_grad=False)
    y_keys = ("A", "B", "D") if Y.ndim == 3 else ("A", "B")
    sse_y, _ = cp_term(y_keys, "gamma", model.nonneg_map)(
        params, Y.indices, Y.values, need_grad=False)
    return sse_x + coupling_weight * sse_y


def coupled_cp_grad(model: CoupledCpModel, X: SparseTensor, Y: SparseTensor,
                    coupling_weight: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient of :func:`coupled_cp_loss` w.r.t. the raw parameters."""
    params = model.params()
    grads: dict[str, np.ndarray] = {}
    for term in coupled_terms(params, X, Y, coupling_weight, model.nonneg_map):
        _, g = term.fn(params, term.tensor.indices, term.tensor.values)
        for k, v in g.items():
            grads[k] = grads[k] + term.weight * v if k in grads else term.weight * v
    return grads


def _init_matrix(rng, rows, rank):
    return rng.normal(0.0, INIT_STD, size=(rows, rank))


def fit_cp(tensor: SparseTensor, config: TrainConfig, init: CpModel | None = None
           ) -> tuple[CpModel, FitReport]:
    """Fit a rank-``config.rank`` non-negative CP model by seeded mini-batch Adam.

    ``init`` overrides the random initial parameters (its rank must match).
    """
    _require_entries(tensor, "input")
    init_rng, shuffle_rngs = seeded_streams(config.seed, 1)
    R = config.rank
    if init is None:
        params = {f"F{m}": _init_matrix(init_rng, size, R) for m, size in enumerate(tensor.shape)}
        params["weights"] = init_rng.normal(0.0, INIT_STD, size=R)
    else:
        if init.rank != R or init.shape != tensor.shape:
            raise ConfigError(f"init model rank/shape {init.rank}/{init.shape} does not match "
                              f"config rank {R} / tensor shape {tensor.shape}")
        params = init.params()
    keys = tuple(f"F{m}" for m in range(tensor.ndim))
    terms = [Term("X", tensor, 1.0, cp_term(keys, "weights", config.nonneg_map))]
    params, report = run_adam(params, terms, config, shuffle_rngs)
    return CpModel.from_params(params, config.nonneg_map), report


def fit_coupled_cp(X: SparseTensor, Y: SparseTensor, config: TrainConfig,
                   init: CoupledCpModel | None = None) -> tuple[CoupledCpModel, FitReport]:
    """Jointly fit X (trial x time x neuron) and Y (trial x time [x behavior]).

    A and B are shared, so their gradients collect both residual terms.  The
    random draws for A, B, C and lambda come first and in the same order as
    :func:`fit_cp`, so ``coupling_weight=0`` reproduces ``fit_cp(X)`` exactly.
    """
    _require_entries(X, "X")
    _require_entries(Y, "Y")
    check_coupled_shapes(X, Y)
    init_rng, shuffle_rngs = seeded_streams(config.seed, 2)
    R = config.rank
    if init is None:
        params = {
            "A": _init_matrix(init_rng, X.shape[0], R),
            "B": _init_matrix(init_rng, X.shape[1], R),
            "C": _init_matrix(init_rng, X.shape[2], R),
            "lambda": init_rng.normal(0.0, INIT_STD, size=R),
        }
        if Y.ndim == 3:
            params["D"] = _init_matrix(init_rng, Y.shape[2], R)
        params["gamma"] = init_rng.normal(0.0, INIT_STD, size=R)
    else:
        if init.rank != R or init.shape_x != X.shape or init.shape_y != Y.shape:
            raise ConfigError("init model does not match data shapes or rank")
        params = init.params()
    terms = coupled_terms(params, X, Y, config.coupling_weight, config.nonneg_map)
    params, report = run_adam(params, terms, config, shuffle_rngs)
    return CoupledCpModel.from_params(params, config.nonneg_map), report


def rank_components(model: CoupledCpModel) -> list[tuple[int, float, float]]:
    """Components ordered by ``phi(lambda_r) + phi(gamma_r)``, largest first.

    Ties go to the lower component index.
    """
    lam = nonneg(model.nonneg_map)[0](model.weights_x)
    gam = nonneg(model.nonneg_map)[0](model.weights_y)
    rows = [(r, float(lam[r]), float(gam[r])) for r in range(model.rank)]
    return sorted(rows, key=lambda row: (-(row[1] + row[2]), row[0]))


MODE_NAMES_COUPLED = {"A": "trial", "B": "time", "C": "neuron", "D": "behavior"}


def factors_csv(model) -> str:
    """Effective (post-map) factor values as ``mode,row,component,value`` CSV."""
    phi = nonneg(model.nonneg_map)[0]
    if isinstance(model, CpModel):
        mats = [(str(m), f) for m, f in enumerate(model.raw_factors)]
    else:
        params = model.params()
        mats = [(MODE_NAMES_COUPLED[k], params[k]) for k in ("A", "B", "C", "D") if k in params]
    buf = io.StringIO()
    buf.write("mode,row,component,value\n")
    for name, raw in mats:
        eff = phi(raw)
        for i in range(eff.shape[0]):
            for r in range(eff.shape[1]):
                buf.write(f"{name},{i},{r},{float(eff[i, r])!r}\n")
    return buf.getvalue()
