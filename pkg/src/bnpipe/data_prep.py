"""Behavior labels, zero sampling, train/test splits and grid binarisation."""
from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    CoordinateOutOfRange,
    DuplicateTrialId,
    EmptyCorpus,
    NonBinaryTensor,
    ParseError,
    RaggedSequences,
    TooFewEntries,
)
from .tensor_core import SparseTensor


class BehaviorLabel(str, enum.Enum):
    FREEZING = "freezing"
    FLEEING = "fleeing"
    EXPLORING = "exploring"

    def __str__(self):
        return self.value

    @property
    def is_fear(self) -> bool:
        return self is not BehaviorLabel.EXPLORING


LABELS = tuple(BehaviorLabel)

_ALIASES = {
    "freezing": BehaviorLabel.FREEZING,
    "fleeing": BehaviorLabel.FLEEING,
    "exploring": BehaviorLabel.EXPLORING,
    "grooming/exploring": BehaviorLabel.EXPLORING,
}


def parse_label(text) -> BehaviorLabel:
    if isinstance(text, BehaviorLabel):
        return text
    key = str(text).strip().lower()
    try:
        return _ALIASES[key]
    except KeyError:
        raise ValueError(f"unknown behavior label {text!r}") from None


@dataclass(frozen=True)
class LabelSequence:
    """Per-second labels of one trial, second 0 first."""

    labels: tuple[BehaviorLabel, ...]
    trial_id: str = "0"
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(parse_label(l) for l in self.labels))
        if not self.labels:
            raise EmptyCorpus(f"trial {self.trial_id!r} has no labels")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class GridActivity:
    n: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.uint8, copy=True)
        if m.shape != (self.n, self.n):
            raise ValueError(f"matrix shape {m.shape} is not {self.n}x{self.n}")
        if (m > 1).any():
            raise ValueError("grid entries must be 0 or 1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def behavior_to_matrix(sequences: Sequence[LabelSequence]) -> SparseTensor:
    """Trial x second binary matrix: 1 for freezing/fleeing, 0 for exploring.

    Row order follows the input order; every cell is an observed entry.
    """
    if not sequences:
        raise EmptyCorpus("no label sequences given")
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise RaggedSequences(f"sequences have differing lengths {sorted(lengths)}")
    ids = [s.trial_id for s in sequences]
    dup = [t for t, c in Counter(ids).items() if c > 1]
    if dup:
        raise DuplicateTrialId(f"repeated trial ids {dup}")
    dense = np.array([[1.0 if l.is_fear else 0.0 for l in s.labels] for s in sequences])
    return SparseTensor.from_dense(dense, name="behavior")


def behavior_to_onehot(sequences: Sequence[LabelSequence]) -> SparseTensor:
    """Trial x second x behavior-type one-hot tensor (types in ``LABELS`` order)."""
    mat = behavior_to_matrix(sequences)  # same validation
    T = mat.shape[1]
    dense = np.zeros((len(sequences), T, len(LABELS)))
    for i, s in enumerate(sequences):
        for t, l in enumerate(s.labels):
            dense[i, t, LABELS.index(l)] = 1.0
    return SparseTensor.from_dense(dense, name="behavior_onehot")


def sample_zeros(tensor: SparseTensor, ratio: float = 1.0, seed: int = 0) -> SparseTensor:
    """Keep every one-valued entry plus ``ceil(ratio * n_ones)`` random zeros."""
    if ratio < 0:
        raise ConfigError(f"ratio must be >= 0, got {ratio}")
    vals = tensor.values
    if not np.isin(vals, (0.0, 1.0)).all():
        raise NonBinaryTensor("sample_zeros needs a 0/1-valued tensor")
    ones = np.flatnonzero(vals == 1.0)
    zeros = np.flatnonzero(vals == 0.0)
    # round first so that e.g. 0.1 * 30 does not ceil to 4
    wanted = math.ceil(round(ratio * len(ones), 9))
    k = min(wanted, len(zeros))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(zeros, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    keep = np.sort(np.concatenate([ones, chosen]))
    return tensor.subset(keep)


def split(tensor: SparseTensor, spec: SplitSpec = SplitSpec()) -> tuple[SparseTensor, SparseTensor]:
    """Random partition of observed entries into train and test.

    The train size is ``round(train_fraction * N)`` with ties to even.
    """
    n = tensor.nnz
    if n < 10:
        raise TooFewEntries(f"need at least 10 entries to split, got {n}")
    n_train = round(spec.train_fraction * n)
    perm = np.random.default_rng(spec.seed).permutation(n)
    base = tensor.name or "tensor"
    train = tensor.subset(np.sort(perm[:n_train]), name=f"{base}.train")
    test = tensor.subset(np.sort(perm[n_train:]), name=f"{base}.test")
    return train, test


def grid_binarize(events: Iterable[tuple[float, float]], n: int) -> GridActivity:
    """Mark the cell of each normalised ``(x, y)`` event as active.

    Rows index y and columns index x; coordinates equal to 1 fall in the last cell.
    """
    if n < 1:
        raise ConfigError(f"grid side must be >= 1, got {n}")
    grid = np.zeros((n, n), dtype=np.uint8)
    for x, y in events:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise CoordinateOutOfRange(f"event ({x}, {y}) outside [0, 1] x [0, 1]")
        row = min(int(math.floor(y * n)), n - 1)
        col = min(int(math.floor(x * n)), n - 1)
        grid[row, col] = 1
    return GridActivity(n, grid)


def class_distribution(sequences: Sequence[LabelSequence]) -> dict[BehaviorLabel, tuple[int, float]]:
    counts = Counter()
    for s in sequences:
        counts.update(s.labels)
    total = sum(counts.values())
    if total == 0:
        raise EmptyCorpus("no labels to count")
    return {label: (counts[label], counts[label] / total) for label in LABELS}


def format_distribution(dist: dict[BehaviorLabel, tuple[int, float]]) -> str:
    total = sum(c for c, _ in dist.values())
    lines = [f"total {total}"]
    for label, (count, prop) in dist.items():
        lines.append(f"{label.value} {count} {100.0 * prop:.3f}%")
    return "\n".join(lines) + "\n"


# -- CSV ingestion -------------------------------------------------------------

def read_label_csv(path, subject_id: str = "") -> list[LabelSequence]:
    """Read ``second,label`` (one trial, id = file stem) or ``trial,second,label``.

    Seconds must run 0..T-1 without gaps within each trial.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty label file", 1, path)
    header = [h.strip().lower() for h in rows[0]]
    if header == ["second", "label"]:
        has_trial = False
    elif header == ["trial", "second", "label"]:
        has_trial = True
    else:
        raise ParseError(f"expected header 'second,label' or 'trial,second,label', got {rows[0]}",
                         1, path)
    trials: dict[str, dict[int, BehaviorLabel]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno, path)
        trial = row[0].strip() if has_trial else path.stem
        sec_text, label_text = row[-2].strip(), row[-1]
        try:
            second = int(sec_text)
        except ValueError:
            raise ParseError(f"bad second {sec_text!r}", lineno, path) from None
        try:
            label = parse_label(label_text)
        except ValueError as exc:
            raise ParseError(str(exc), lineno, path) from None
        seconds = trials.setdefault(trial, {})
        if second in seconds:
            raise ParseError(f"second {second} repeated for trial {trial!r}", lineno, path)
        seconds[second] = label
    out = []
    for trial, seconds in trials.items():
        if sorted(seconds) != list(range(len(seconds))):
            raise ParseError(f"trial {trial!r} seconds are not contiguous from 0", None, path)
        out.append(LabelSequence(tuple(seconds[t] for t in range(len(seconds))), trial, subject_id))
    if not out:
        raise EmptyCorpus(f"{path} has no labels")
    return out


def read_events_csv(path) -> dict[int, list[tuple[float, float]]]:
    """``second,x,y`` rows grouped by second."""
    path = Path(path)
    out: dict[int, list[tuple[float, float]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["second", "x", "y"]:
            raise ParseError("expected header 'second,x,y'", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sec, x, y = int(row[0]), float(row[1]), float(row[2])
            except (ValueError, IndexError):
                raise ParseError(f"malformed row {row}", lineno, path) from None
            out.setdefault(sec, []).append((x, y))
    return out
