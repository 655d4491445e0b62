"""Coordinate-format tensors, CP reconstruction and RMSE.

A :class:`SparseTensor` stores only observed entries as an ``(N, modes)``
integer index array plus an ``(N,)`` float64 value array, kept sorted by
index tuple.  CP models keep *raw* (unconstrained) parameters and map them
through a non-negative activation on use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateIndex,
    EmptyTensor,
    IndexOutOfBounds,
    NonFiniteValue,
    ParseError,
    ShapeMismatch,
)

NONNEG_MAPS = ("softplus", "relu")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    # d/dx log(1 + e^x) = sigmoid(x), written to avoid overflow for large |x|
    return np.exp(-np.logaddexp(0.0, -x))


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (np.asarray(x) > 0).astype(np.float64)


def nonneg(name: str) -> tuple[Callable, Callable]:
    """Return ``(phi, dphi)`` for a named non-negativity map."""
    key = name.lower()
    if key == "softplus":
        return softplus, softplus_grad
    if key == "relu":
        return relu, relu_grad
    raise ValueError(f"unknown non-negativity map {name!r}; expected one of {NONNEG_MAPS}")


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SparseTensor:
    """Observed entries of a 2- or 3-mode tensor.

    Construction sorts entries by index tuple but does not reject invalid
    data; call :func:`validate` or :func:`ensure_valid` for that.
    """

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if idx.size == 0:
            idx = idx.reshape(0, len(shape))
        if idx.ndim != 2:
            raise ShapeMismatch(f"indices must be 2-D, got shape {idx.shape}")
        if idx.shape[0] != vals.shape[0]:
            raise ShapeMismatch(f"{idx.shape[0]} index rows but {vals.shape[0]} values")
        if len(idx):
            # lexsort sorts by the last key first
            order = np.lexsort(idx.T[::-1], axis=0)
            idx, vals = idx[order], vals[order]
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", _frozen(idx, np.int64))
        object.__setattr__(self, "values", _frozen(vals, np.float64))

    @classmethod
    def from_entries(cls, shape: Sequence[int], entries: Iterable, name: str = "") -> "SparseTensor":
        """Build from ``[(index_tuple, value), ...]``."""
        entries = list(entries)
        if entries:
            idx = np.array([tuple(e[0]) for e in entries], dtype=np.int64).reshape(len(entries), -1)
        else:
            idx = np.empty((0, len(shape)), dtype=np.int64)
        vals = np.array([e[1] for e in entries], dtype=np.float64)
        return cls(tuple(shape), idx, vals, name)

    @classmethod
    def from_dense(cls, array, name: str = "") -> "SparseTensor":
        """Every cell of a dense array becomes an observed entry."""
        array = np.asarray(array, dtype=np.float64)
        idx = np.indices(array.shape).reshape(array.ndim, -1).T
        return cls(array.shape, idx, array.reshape(-1), name)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def __len__(self):
        return self.nnz

    @property
    def entries(self) -> list[tuple[tuple[int, ...], float]]:
        return [(tuple(int(i) for i in row), float(v)) for row, v in zip(self.indices, self.values)]

    def subset(self, positions, name: str | None = None) -> "SparseTensor":
        positions = np.asarray(positions, dtype=np.int64)
        return SparseTensor(self.shape, self.indices[positions], self.values[positions],
                            self.name if name is None else name)

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.float64)
        out[tuple(self.indices.T)] = self.values
        return out


@dataclass(frozen=True)
class Violation:
    kind: str  # "DuplicateIndex" | "IndexOutOfBounds" | "NonFiniteValue"
    entry: int
    index: tuple[int, ...]
    detail: str = ""

    def __str__(self):
        return f"{self.kind} at entry {self.entry} {self.index}: {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def validate(tensor: SparseTensor) -> ValidationReport:
    """Check the three structural invariants; report every violation found."""
    found = []
    idx, vals = tensor.indices, tensor.values
    if idx.shape[1] != tensor.ndim:
        return ValidationReport((Violation("IndexOutOfBounds", -1, (),
                                           f"index width {idx.shape[1]} != {tensor.ndim} modes"),))
    bounds = np.asarray(tensor.shape, dtype=np.int64)
    bad_bounds = np.flatnonzero(((idx < 0) | (idx >= bounds)).any(axis=1))
    for e in bad_bounds:
        found.append(Violation("IndexOutOfBounds", int(e), tuple(int(i) for i in idx[e]),
                               f"shape {tensor.shape}"))
    if len(idx) > 1:
        dup = np.flatnonzero((idx[1:] == idx[:-1]).all(axis=1)) + 1
        for e in dup:
            found.append(Violation("DuplicateIndex", int(e), tuple(int(i) for i in idx[e])))
    for e in np.flatnonzero(~np.isfinite(vals)):
        found.append(Violation("NonFiniteValue", int(e), tuple(int(i) for i in idx[e]),
                               repr(float(vals[e]))))
    found.sort(key=lambda v: (v.entry, v.kind))
    return ValidationReport(tuple(found))


_ERRORS = {"DuplicateIndex": DuplicateIndex, "IndexOutOfBounds": IndexOutOfBounds,
           "NonFiniteValue": NonFiniteValue}


def ensure_valid(tensor: SparseTensor, allow_empty: bool = True) -> SparseTensor:
    report = validate(tensor)
    if not report.ok:
        first = report.violations[0]
        more = len(report.violations) - 1
        msg = str(first) + (f" (+{more} more)" if more else "")
        raise _ERRORS[first.kind](msg)
    if not allow_empty and tensor.nnz == 0:
        raise EmptyTensor(f"tensor {tensor.name!r} has no entries")
    return tensor


# -- CP models ---------------------------------------------------------------

def _check_rank(mats, rank):
    for m in mats:
        if m.ndim != 2 or m.shape[1] != rank:
            raise ShapeMismatch(f"factor of shape {m.shape} does not have {rank} columns")


@dataclass(frozen=True)
class CpModel:
    """Rank-R CP model ``x = sum_r phi(w_r) prod_m phi(F_m[i_m, r])``."""

    raw_factors: tuple[np.ndarray, ...]
    raw_weights: np.ndarray
    nonneg_map: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "raw_factors",
                           tuple(_frozen(f, np.float64) for f in self.raw_factors))
        object.__setattr__(self, "raw_weights", _frozen(self.raw_weights, np.float64).reshape(-1))
        nonneg(self.nonneg_map)
        _check_rank(self.raw_factors, self.rank)

    @property
    def rank(self) -> int:
        return int(self.raw_weights.shape[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.raw_factors)

    @property
    def factors(self) -> list[np.ndarray]:
        phi, _ = nonneg(self.nonneg_map)
        return [phi(f) for f in self.raw_factors]

    @property
    def weights(self) -> np.ndarray:
        phi, _ = nonneg(self.nonneg_map)
        return phi(self.raw_weights)

    def predict(self, indices) -> np.ndarray:
        """Vectorised reconstruction at an ``(N, modes)`` index array."""
        return cp_predict(self.factors, self.weights, _check_indices(indices, self.shape))

    def params(self) -> dict[str, np.ndarray]:
        out = {f"F{m}": f for m, f in enumerate(self.raw_factors)}
        out["weights"] = self.raw_weights
        return out

    @classmethod
    def from_params(cls, params, nonneg_map="softplus") -> "CpModel":
        n = sum(1 for k in params if k.startswith("F"))
        return cls(tuple(params[f"F{m}"] for m in range(n)), params["weights"], nonneg_map)


@dataclass(frozen=True)
class CoupledCpModel:
    """Two CP models sharing the trial (A) and time (B) factors.

    ``behavior_factor`` is ``None`` when the behavior tensor has two modes.
    """

    shared_trial_factor: np.ndarray
    shared_time_factor: np.ndarray
    neuron_factor: np.ndarray
    behavior_factor: np.ndarray | None
    weights_x: np.ndarray
    weights_y: np.ndarray
    nonneg_map: str = "softplus"

    def __post_init__(self):
        for name in ("shared_trial_factor", "shared_time_factor", "neuron_factor"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        if self.behavior_factor is not None:
            object.__setattr__(self, "behavior_factor", _frozen(self.behavior_factor, np.float64))
        object.__setattr__(self, "weights_x", _frozen(self.weights_x, np.float64).reshape(-1))
        object.__setattr__(self, "weights_y", _frozen(self.weights_y, np.float64).reshape(-1))
        nonneg(self.nonneg_map)
        if self.weights_y.shape != self.weights_x.shape:
            raise ShapeMismatch("weights_x and weights_y differ in length")
        mats = [self.shared_trial_factor, self.shared_time_factor, self.neuron_factor]
        if self.behavior_factor is not None:
            mats.append(self.behavior_factor)
        _check_rank(mats, self.rank)

    @property
    def rank(self) -> int:
        return int(self.weights_x.shape[0])

    @property
    def shape_x(self) -> tuple[int, ...]:
        return (self.shared_trial_factor.shape[0], self.shared_time_factor.shape[0],
                self.neuron_factor.shape[0])

    @property
    def shape_y(self) -> tuple[int, ...]:
        base = (self.shared_trial_factor.shape[0], self.shared_time_factor.shape[0])
        return base if self.behavior_factor is None else base + (self.behavior_factor.shape[0],)

    def _phi(self, a):
        return nonneg(self.nonneg_map)[0](a)

    def view_x(self) -> CpModel:
        return CpModel((self.shared_trial_factor, self.shared_time_factor, self.neuron_factor),
                       self.weights_x, self.nonneg_map)

    def view_y(self) -> CpModel:
        mats = [self.shared_trial_factor, self.shared_time_factor]
        if self.behavior_factor is not None:
            mats.append(self.behavior_factor)
        return CpModel(tuple(mats), self.weights_y, self.nonneg_map)

    def predict_x(self, indices) -> np.ndarray:
        return self.view_x().predict(indices)

    def predict_y(self, indices) -> np.ndarray:
        return self.view_y().predict(indices)

    def params(self) -> dict[str, np.ndarray]:
        out = {"A": self.shared_trial_factor, "B": self.shared_time_factor,
               "C": self.neuron_factor}
        if self.behavior_factor is not None:
            out["D"] = self.behavior_factor
        out["lambda"] = self.weights_x
        out["gamma"] = self.weights_y
        return out

    @classmethod
    def from_params(cls, params, nonneg_map="softplus") -> "CoupledCpModel":
        return cls(params["A"], params["B"], params["C"], params.get("D"),
                   params["lambda"], params["gamma"], nonneg_map)


def _check_indices(indices, shape) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx.reshape(1, -1)
    if idx.shape[1] != len(shape):
        raise IndexOutOfBounds(f"index width {idx.shape[1]} does not match {len(shape)} modes")
    if ((idx < 0) | (idx >= np.asarray(shape))).any():
        raise IndexOutOfBounds(f"index outside shape {tuple(shape)}")
    return idx


def cp_predict(factors: Sequence[np.ndarray], weights: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """``sum_r w_r prod_m factors[m][indices[:, m], r]`` on already-mapped factors."""
    prod = factors[0][indices[:, 0]].copy()
    for m in range(1, len(factors)):
        prod *= factors[m][indices[:, m]]
    return prod @ weights


def reconstruct_cp(model: CpModel, index: Sequence[int]) -> float:
    """Value of a CP model at a single index tuple."""
    return float(model.predict(np.asarray(index, dtype=np.int64).reshape(1, -1))[0])


def rmse(tensor: SparseTensor, predict) -> float:
    """Root mean squared error over the tensor's observed entries.

    ``predict`` is either a callable taking one index tuple, or any object with a
    vectorised ``predict(indices)`` method (all model classes qualify).
    """
    if tensor.nnz == 0:
        raise EmptyTensor("cannot compute RMSE of an empty tensor")
    if hasattr(predict, "predict"):
        pred = np.asarray(predict.predict(tensor.indices), dtype=np.float64)
    else:
        pred = np.array([predict(tuple(int(i) for i in row)) for row in tensor.indices],
                        dtype=np.float64)
    resid = tensor.values - pred
    scale = float(np.abs(resid).max())
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    # scaling first keeps tiny residuals from squaring to zero
    r = resid / scale
    return scale * math.sqrt(float(np.dot(r, r)) / tensor.nnz)


# -- COO text format ---------------------------------------------------------

def format_coo(tensor: SparseTensor) -> str:
    lines = ["dims " + " ".join(str(d) for d in tensor.shape)]
    for row, v in zip(tensor.indices, tensor.values):
        lines.append(" ".join(str(int(i)) for i in row) + " " + repr(float(v)))
    return "\n".join(lines) + "\n"


def save_coo(tensor: SparseTensor, path) -> None:
    Path(path).write_text(format_coo(tensor), encoding="ascii")


def parse_coo(text: str, name: str = "", path=None) -> SparseTensor:
    """Parse the COO text format; malformed lines raise :class:`ParseError`."""
    shape = None
    idx, vals = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if shape is None:
            if parts[0] != "dims" or len(parts) not in (3, 4):
                raise ParseError("expected 'dims d1 d2 [d3]'", lineno, path)
            try:
                shape = tuple(int(p) for p in parts[1:])
            except ValueError:
                raise ParseError(f"non-integer dimension in {line!r}", lineno, path) from None
            if any(d <= 0 for d in shape):
                raise ParseError("dimensions must be positive", lineno, path)
            continue
        if len(parts) != len(shape) + 1:
            raise ParseError(f"expected {len(shape)} indices and a value, got {line!r}", lineno, path)
        try:
            row = tuple(int(p) for p in parts[:-1])
            value = float(parts[-1])
        except ValueError:
            raise ParseError(f"malformed entry {line!r}", lineno, path) from None
        if any(i < 0 for i in row):
            raise ParseError(f"negative index in {line!r}", lineno, path)
        idx.append(row)
        vals.append(value)
    if shape is None:
        raise ParseError("missing 'dims' header", 1, path)
    tensor = SparseTensor(shape, np.array(idx, dtype=np.int64).reshape(len(idx), len(shape)),
                          np.array(vals, dtype=np.float64), name)
    return ensure_valid(tensor)


def load_coo(path, name: str | None = None) -> SparseTensor:
    path = Path(path)
    return parse_coo(path.read_text(encoding="ascii"), name or path.name, path)
