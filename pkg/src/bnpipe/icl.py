"""Sequential in-context labeling of 1-second chunks.

A labeler is any callable taking a :class:`PromptContext` and returning a
:class:`Decision`.  :func:`run_sequence` walks a trial in order and, in
``ArIcl`` mode, feeds each decision into the next step's context.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import metrics
from .data_prep import LABELS, BehaviorLabel, LabelSequence, parse_label
from .errors import (
    LabelerFailure,
    LengthMismatch,
    ManifestError,
    MissingPrediction,
    NonConsecutiveChunks,
)


class Mode(str, enum.Enum):
    NO_ICL = "no-icl"
    ICL = "icl"
    TEMPORAL_ICL = "temporal-icl"
    AR_ICL = "ar-icl"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Chunk:
    trial: str
    t: int
    media_ref: str


@dataclass(frozen=True)
class ExampleSet:
    examples: tuple[tuple[Chunk, BehaviorLabel], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "examples",
                           tuple((c, parse_label(l)) for c, l in self.examples))

    def __len__(self):
        return len(self.examples)


@dataclass(frozen=True)
class Previous:
    chunk: Chunk
    label: BehaviorLabel | None = None


@dataclass(frozen=True)
class PromptContext:
    mode: Mode
    fixed_examples: ExampleSet
    target: Chunk
    prev: Previous | None = None
    next: Chunk | None = None

    def __post_init__(self):
        m = self.mode
        if m is Mode.NO_ICL and (len(self.fixed_examples) or self.prev or self.next):
            raise ValueError("no-icl context carries only the target")
        if m is Mode.ICL and (self.prev or self.next):
            raise ValueError("icl context has no temporal neighbours")
        if m is Mode.TEMPORAL_ICL and self.prev is not None and self.prev.label is not None:
            raise ValueError("temporal-icl previous chunk must be unlabeled")
        if m is Mode.AR_ICL and self.prev is not None and self.prev.label is None:
            raise ValueError("ar-icl previous chunk must carry its prediction")

    def to_json(self) -> dict:
        """The object written to an external labeler's standard input."""
        out = {
            "mode": self.mode.value,
            "examples": [{"media": c.media_ref, "label": l.value}
                         for c, l in self.fixed_examples.examples],
        }
        if self.prev is not None:
            out["prev"] = {"media": self.prev.chunk.media_ref}
            if self.prev.label is not None:
                out["prev"]["label"] = self.prev.label.value
        if self.next is not None:
            out["next"] = {"media": self.next.media_ref}
        out["target"] = {"media": self.target.media_ref}
        return out


@dataclass(frozen=True)
class Decision:
    label: BehaviorLabel
    confidence: float | None = None


def assemble_context(mode: Mode, examples: ExampleSet, chunks: Sequence[Chunk], t: int,
                     prev_prediction: BehaviorLabel | None = None,
                     include_next: bool = True) -> PromptContext:
    """Context for chunk ``t``.

    The previous chunk is left out at ``t = 0`` and the next chunk at the last
    position.  ``include_next`` drops the unlabeled next chunk in the temporal modes.
    """
    mode = Mode(mode)
    T = len(chunks)
    if not 0 <= t < T:
        raise IndexError(f"t={t} outside 0..{T - 1}")
    target = chunks[t]
    if mode is Mode.NO_ICL:
        return PromptContext(mode, ExampleSet(), target)
    if mode is Mode.ICL:
        return PromptContext(mode, examples, target)
    prev = None
    if t > 0:
        if mode is Mode.AR_ICL:
            if prev_prediction is None:
                raise MissingPrediction(f"ar-icl at t={t} needs the prediction for t={t - 1}")
            prev = Previous(chunks[t - 1], parse_label(prev_prediction))
        else:
            prev = Previous(chunks[t - 1])
    nxt = chunks[t + 1] if include_next and t + 1 < T else None
    return PromptContext(mode, examples, target, prev, nxt)


@dataclass(frozen=True)
class TraceStep:
    t: int
    context: PromptContext
    decision: Decision

    def to_json(self) -> dict:
        return {"t": self.t, "context": self.context.to_json(),
                "label": self.decision.label.value, "confidence": self.decision.confidence}


def check_consecutive(chunks: Sequence[Chunk]) -> None:
    if not chunks:
        raise ManifestError("no chunks to label")
    trial = chunks[0].trial
    for i, c in enumerate(chunks):
        if c.trial != trial:
            raise NonConsecutiveChunks(f"chunk {i} belongs to trial {c.trial!r}, not {trial!r}")
        if c.t != i:
            raise NonConsecutiveChunks(f"chunk {i} has second {c.t}; expected {i}")


def run_sequence(chunks: Sequence[Chunk], examples: ExampleSet, labeler: Callable,
                 mode: Mode, include_next: bool = True) -> tuple[LabelSequence, list[TraceStep]]:
    """Label every chunk in order; returns the labels and one trace step per chunk."""
    check_consecutive(chunks)
    mode = Mode(mode)
    trace: list[TraceStep] = []
    prev_label = None
    for t in range(len(chunks)):
        ctx = assemble_context(mode, examples, chunks, t, prev_label, include_next)
        try:
            out = labeler(ctx)
        except LabelerFailure as exc:
            if exc.t == t:
                raise
            raise LabelerFailure(str(exc), t=t) from exc
        except Exception as exc:
            raise LabelerFailure(f"labeler raised {exc!r}", t=t) from exc
        decision = _as_decision(out, t)
        trace.append(TraceStep(t, ctx, decision))
        prev_label = decision.label
    labels = tuple(s.decision.label for s in trace)
    return LabelSequence(labels, chunks[0].trial), trace


def _as_decision(out, t) -> Decision:
    if isinstance(out, Decision):
        return out
    label, conf = (out if isinstance(out, tuple) else (out, None))
    try:
        return Decision(parse_label(label), None if conf is None else float(conf))
    except (ValueError, TypeError) as exc:
        raise LabelerFailure(f"labeler returned {out!r}: {exc}", t=t) from None


def audit_trace(trace: Sequence[TraceStep], examples: ExampleSet | None = None) -> list[str]:
    """Causality and threading problems in a trace; an empty list means none."""
    problems = []
    for s, step in enumerate(trace):
        ctx = step.context
        t = ctx.target.t
        if t != step.t:
            problems.append(f"step {s}: target second {t} != step second {step.t}")
        if examples is not None and ctx.mode is not Mode.NO_ICL and ctx.fixed_examples != examples:
            problems.append(f"step {s}: fixed examples changed")
        if ctx.mode is Mode.NO_ICL and (len(ctx.fixed_examples) or ctx.prev or ctx.next):
            problems.append(f"step {s}: no-icl context is not bare")
        if ctx.prev is not None and ctx.prev.chunk.t != t - 1:
            problems.append(f"step {s}: previous chunk is second {ctx.prev.chunk.t}")
        if ctx.next is not None and ctx.next.t != t + 1:
            problems.append(f"step {s}: next chunk is second {ctx.next.t}")
        if t > 0 and ctx.mode in (Mode.AR_ICL, Mode.TEMPORAL_ICL) and ctx.prev is None:
            problems.append(f"step {s}: previous chunk missing")
        if ctx.mode is Mode.AR_ICL and t > 0:
            expected = trace[s - 1].decision.label if s > 0 else None
            got = ctx.prev.label if ctx.prev else None
            if got != expected:
                problems.append(f"step {s}: previous label {got} != output {expected} at t-1")
        elif ctx.prev is not None and ctx.prev.label is not None:
            problems.append(f"step {s}: {ctx.mode} context carries a predicted label")
        if t == 0 and ctx.prev is not None:
            problems.append("step 0: previous chunk present")
    return problems


def evaluate_run(pred: LabelSequence, gold: LabelSequence) -> dict:
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(gold)} gold labels")
    cm = metrics.confusion(gold.labels, pred.labels, classes=LABELS)
    return metrics.report(cm)


# -- labelers -------------------------------------------------------------------

class ScriptedLabeler:
    """Returns ``script[t]`` for target second ``t``."""

    def __init__(self, script, confidence=None):
        self.script = tuple(parse_label(l) for l in script)
        self.confidence = confidence

    def __call__(self, ctx: PromptContext) -> Decision:
        t = ctx.target.t
        if t >= len(self.script):
            raise LabelerFailure(f"script has no label for second {t}", t=t)
        return Decision(self.script[t], self.confidence)


class HashRuleLabeler:
    """Label fixed by a hash of (seed, trial, second); ignores the rest of the context."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def __call__(self, ctx: PromptContext) -> Decision:
        key = f"{self.seed}:{ctx.target.trial}:{ctx.target.t}".encode()
        h = int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
        return Decision(LABELS[h % len(LABELS)], (h >> 8) % 1000 / 1000.0)


class ExternalCommandLabeler:
    """Runs ``command`` once per chunk with the context as JSON on stdin.

    The process must print one JSON line ``{"label": ..., "confidence": ...}``.
    """

    def __init__(self, command, timeout: float = 60.0):
        self.command = [command] if isinstance(command, str) else list(command)
        self.timeout = timeout

    def __call__(self, ctx: PromptContext) -> Decision:
        t = ctx.target.t
        try:
            proc = subprocess.run(self.command, input=json.dumps(ctx.to_json()),
                                  capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise LabelerFailure(f"could not run labeler: {exc}", t=t) from None
        if proc.returncode != 0:
            raise LabelerFailure(f"labeler exited with {proc.returncode}: "
                                 f"{proc.stderr.strip()[:200]}", t=t)
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise LabelerFailure(f"expected one output line, got {len(lines)}", t=t)
        try:
            obj = json.loads(lines[0])
            label = parse_label(obj["label"])
            conf = obj.get("confidence")
            conf = None if conf is None else float(conf)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise LabelerFailure(f"malformed labeler output {lines[0][:200]!r}: {exc}", t=t) from None
        return Decision(label, conf)


def make_labeler(spec: str):
    """``scripted:<csv path>``, ``hash[:seed]`` or ``cmd:<shell-split command>``."""
    import shlex

    kind, _, arg = spec.partition(":")
    if kind == "hash":
        return HashRuleLabeler(int(arg) if arg else 0)
    if kind == "scripted":
        seqs = _read_labels(arg)
        return ScriptedLabeler(seqs)
    if kind == "cmd":
        if not arg.strip():
            raise ValueError("cmd labeler needs a command")
        return ExternalCommandLabeler(shlex.split(arg))
    raise ValueError(f"unknown labeler spec {spec!r}")


def _read_labels(path):
    from .data_prep import read_label_csv

    seqs = read_label_csv(path)
    if len(seqs) != 1:
        raise ManifestError(f"{path}: scripted labeler needs exactly one trial")
    return seqs[0].labels


# -- manifests and traces -------------------------------------------------------------

def read_chunk_manifest(path) -> list[Chunk]:
    """CSV ``second,media``; the trial id is the file stem."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from None
    if not rows or [h.strip().lower() for h in rows[0]] != ["second", "media"]:
        raise ManifestError(f"{path}: expected header 'second,media'")
    if len(rows) == 1:
        raise ManifestError(f"{path}: manifest lists no chunks")
    chunks = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 2 fields")
        try:
            t = int(row[0])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad second {row[0]!r}") from None
        chunks.append(Chunk(path.stem, t, row[1].strip()))
    chunks.sort(key=lambda c: c.t)
    return chunks


def read_example_manifest(path) -> ExampleSet:
    """CSV ``media,label``; may be empty of rows."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from None
    if not rows or [h.strip().lower() for h in rows[0]] != ["media", "label"]:
        raise ManifestError(f"{path}: expected header 'media,label'")
    out = []
    for i, row in enumerate(rows[1:]):
        if len(row) != 2:
            raise ManifestError(f"{path}:{i + 2}: expected 2 fields")
        try:
            out.append((Chunk("examples", i, row[0].strip()), parse_label(row[1])))
        except ValueError as exc:
            raise ManifestError(f"{path}:{i + 2}: {exc}") from None
    return ExampleSet(tuple(out))


def write_trace(trace: Sequence[TraceStep], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for step in trace:
            fh.write(json.dumps(step.to_json(), sort_keys=True) + "\n")


def write_predictions(seq: LabelSequence, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("second,label\n")
        for t, l in enumerate(seq.labels):
            fh.write(f"{t},{l.value}\n")
