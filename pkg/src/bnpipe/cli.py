"""Command-line entry point: ``bnpipe <subcommand> [options]``.

Settings come from built-in defaults, then the ``[<subcommand>]`` section of
an optional INI file (``--config``), then command-line flags.  The resolved
settings are written next to the outputs as ``<out>.config.resolved``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime or labeler failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import data_prep, icl, metrics
from .decomposition import factors_csv, fit_coupled_cp, fit_cp
from .errors import BnpipeError, ConfigError, DataError, DegenerateScores, ParseError
from .model_io import load_model, save_model
from .neat import (CoupledNeatModel, NeatModel, contribution_scores, fit_coupled_neat,
                   fit_neat, tag_components)
from .optim import TrainConfig
from .tensor_core import CoupledCpModel, CpModel, load_coo, rmse, save_coo

log = logging.getLogger("bnpipe")


@dataclass(frozen=True)
class Setting:
    name: str
    type: Callable
    default: Any
    help: str
    choices: tuple | None = None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _widths(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    text = str(text).strip()
    return tuple(int(w) for w in text.split(",") if w.strip()) if text else ()


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


TRAIN_SETTINGS = [
    Setting("rank", int, 3, "number of components R"),
    Setting("learning_rate", float, 0.01, "Adam step size"),
    Setting("epochs", int, 500, "maximum passes over the training entries"),
    Setting("batch_size", int, 1024, "entries of X per mini-batch"),
    Setting("seed", int, 0, "seed for initialisation and shuffling"),
    Setting("coupling_weight", float, 1.0, "weight of the Y loss in coupled models"),
    Setting("early_stop_patience", int, 10, "epochs without improvement before stopping (0 disables)"),
    Setting("early_stop_delta", float, 1e-6, "smallest RMSE decrease counted as improvement"),
    Setting("nonneg_map", str, "softplus", "map keeping factors and weights non-negative",
            ("softplus", "relu")),
    Setting("head_hidden", _widths, (), "comma-separated hidden widths of NeAT heads; empty for affine heads"),
    Setting("head_output", str, "identity", "activation on NeAT head outputs", ("identity", "softplus")),
]

SETTINGS: dict[str, list[Setting]] = {
    "prepare": [
        Setting("labels", str, None, "label CSV (second,label or trial,second,label)"),
        Setting("ratio", float, 1.0, "zeros kept per one-valued entry"),
        Setting("train_fraction", float, 0.9, "share of entries in the train split"),
        Setting("seed", int, 0, "seed for zero sampling and splitting"),
    ],
    "fit": [
        Setting("model", str, "cpd", "model family", ("cpd", "coupled-cpd", "neat", "coupled-neat")),
        Setting("x", str, None, "train tensor X in COO text format"),
        Setting("y", str, None, "train tensor Y in COO text format (coupled models)"),
        *TRAIN_SETTINGS,
    ],
    "eval": [
        Setting("model_file", str, None, "model JSON written by fit"),
        Setting("x", str, None, "test tensor X in COO text format"),
        Setting("y", str, None, "test tensor Y in COO text format (coupled models)"),
    ],
    "components": [
        Setting("model_file", str, None, "NeAT model JSON with one-layer heads"),
        Setting("threshold", float, 0.5, "share of the top score needed to count as active"),
    ],
    "label": [
        Setting("chunks", str, None, "chunk manifest CSV (second,media)"),
        Setting("examples", str, None, "example manifest CSV (media,label)"),
        Setting("mode", str, "ar-icl", "context mode", tuple(m.value for m in icl.Mode)),
        Setting("labeler", str, "hash:0", "labeler: hash[:seed], scripted:<csv>, or cmd:<command>"),
        Setting("include_next", _bool, True, "show the unlabeled next chunk in temporal modes"),
    ],
    "metrics": [
        Setting("gold", str, None, "gold label CSV (second,label)"),
        Setting("pred", str, None, "predicted label CSV (second,label)"),
    ],
    "kappa": [
        Setting("pairs", str, None, "score CSV with header expert,model"),
    ],
}

# subcommands whose outputs go under --out
NEEDS_OUT = {"prepare", "fit", "components", "label"}

DESCRIPTIONS = {
    "prepare": "Map labels to a binary trial x second tensor, sample zeros and split 9:1.",
    "fit": "Fit a CP or NeAT model (single or coupled) and save it with its training report.",
    "eval": "Recompute RMSE of a saved model on held-out tensors.",
    "components": "Score NeAT components and tag them shared, X-specific, Y-specific or inactive.",
    "label": "Label a trial chunk by chunk with a labeler and write predictions plus a trace.",
    "metrics": "Score predicted labels against gold labels.",
    "kappa": "Quadratic-weighted Cohen's kappa between expert and model scores.",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bnpipe", description="Tensor decomposition and behavior labeling pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, settings in SETTINGS.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        p.add_argument("--config", default=None,
                       help=f"INI file; keys are read from its [{name}] section (default: none)")
        if name in NEEDS_OUT:
            p.add_argument("--out", required=True, help="output path prefix (required)")
        else:
            p.add_argument("--out", default=None,
                           help="optional output path prefix for a copy of the report (default: none)")
        for s in settings:
            flag = "--" + s.name.replace("_", "-")
            default = "required" if s.default is None and s.name not in ("y", "examples") \
                else f"default: {_fmt(s.default) or 'none'}"
            kw = dict(dest=s.name, default=None, help=f"{s.help} ({default})")
            if s.choices:
                kw["choices"] = s.choices
            if s.type is _bool:
                kw["metavar"] = "BOOL"
            p.add_argument(flag, **kw)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file section < flags, each value converted to its type."""
    values = {s.name: s.default for s in SETTINGS[command]}
    if args.config:
        cp = configparser.ConfigParser()
        try:
            read = cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {args.config}: {exc}") from None
        if not read:
            raise ConfigError(f"cannot read config file {args.config}")
        if cp.has_section(command):
            known = {s.name for s in SETTINGS[command]}
            for key, raw in cp.items(command):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{command}] of {args.config}")
                values[key] = raw
    for s in SETTINGS[command]:
        v = getattr(args, s.name)
        if v is not None:
            values[s.name] = v
    out = {}
    for s in SETTINGS[command]:
        v = values[s.name]
        if v is None or (isinstance(v, str) and v == "" and s.type is str):
            out[s.name] = None
            continue
        try:
            out[s.name] = s.type(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{s.name}: {exc}") from None
        if s.choices and out[s.name] not in s.choices:
            raise ConfigError(f"{s.name} must be one of {s.choices}, got {out[s.name]!r}")
    return out


def _require(cfg: dict, *names):
    for n in names:
        if cfg.get(n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def write_resolved(command: str, cfg: dict, prefix) -> Path:
    cp = configparser.ConfigParser()
    cp[command] = {k: _fmt(v) for k, v in cfg.items()}
    path = Path(f"{prefix}.config.resolved")
    with path.open("w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def _prefix(out):
    p = Path(out)
    p.parent.mkdir(parents=True, exist_ok=True)
    return str(p)


# -- subcommands ---------------------------------------------------------------------

def cmd_prepare(cfg, out):
    _require(cfg, "labels")
    seqs = data_prep.read_label_csv(cfg["labels"])
    full = data_prep.behavior_to_matrix(seqs)
    sampled = data_prep.sample_zeros(full, cfg["ratio"], cfg["seed"])
    train, test = data_prep.split(sampled, data_prep.SplitSpec(cfg["train_fraction"], cfg["seed"]))
    save_coo(train, f"{out}.train.coo")
    save_coo(test, f"{out}.test.coo")
    dist = data_prep.format_distribution(data_prep.class_distribution(seqs))
    Path(f"{out}.dist.txt").write_text(dist, encoding="utf-8")
    print(f"train={train.nnz} test={test.nnz} ones={int(sampled.values.sum())}")
    sys.stdout.write(dist)


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(**{s.name: cfg[s.name] for s in TRAIN_SETTINGS})


def cmd_fit(cfg, out):
    _require(cfg, "x")
    config = _train_config(cfg)
    X = load_coo(cfg["x"], "X")
    kind = cfg["model"]
    if kind.startswith("coupled"):
        _require(cfg, "y")
        Y = load_coo(cfg["y"], "Y")
        fit = fit_coupled_cp if kind == "coupled-cpd" else fit_coupled_neat
        model, rep = fit(X, Y, config)
    else:
        fit = fit_cp if kind == "cpd" else fit_neat
        model, rep = fit(X, config)
    save_model(model, f"{out}.model.json")
    Path(f"{out}.report.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n",
                                         encoding="utf-8")
    if isinstance(model, (CpModel, CoupledCpModel)):
        Path(f"{out}.factors.csv").write_text(factors_csv(model), encoding="utf-8")
    print(f"final_train_rmse={rep.final_train_rmse!r}")
    for role, v in rep.train_rmse_by_tensor.items():
        print(f"train_rmse_{role.lower()}={v!r}")
    print(f"epochs_run={rep.epoch_history[-1][0]} stopped_early={rep.stopped_early}")


def cmd_eval(cfg, out):
    _require(cfg, "model_file", "x")
    model = load_model(cfg["model_file"])
    X = load_coo(cfg["x"], "X")
    lines = []
    if isinstance(model, (CoupledCpModel, CoupledNeatModel)):
        lines.append(f"rmse_x={rmse(X, model.view_x())!r}")
        if cfg["y"]:
            Y = load_coo(cfg["y"], "Y")
            lines.append(f"rmse_y={rmse(Y, model.view_y())!r}")
    else:
        if cfg["y"]:
            raise ConfigError("--y only applies to coupled models")
        lines.append(f"rmse_x={rmse(X, model)!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        Path(f"{out}.eval.txt").write_text(text, encoding="utf-8")


def components_rows(model, threshold):
    """(component, score_x, score_y, tag) rows; single-tensor models have no Y score."""
    sx = contribution_scores(model, "X")
    if isinstance(model, CoupledNeatModel):
        sy = contribution_scores(model, "Y")
        tags = [str(t) for t in tag_components(sx, sy, threshold)]
        return [(r, float(sx[r]), float(sy[r]), tags[r]) for r in range(len(sx))]
    if not isinstance(model, NeatModel):
        raise ConfigError("components needs a NeAT model")
    top = sx.max()
    if not top > 0:
        raise DegenerateScores("all X scores are <= 0; cannot normalise")
    return [(r, float(sx[r]), None, "XSpecific" if sx[r] / top >= threshold else "Inactive")
            for r in range(len(sx))]


def cmd_components(cfg, out):
    _require(cfg, "model_file")
    model = load_model(cfg["model_file"])
    rows = components_rows(model, cfg["threshold"])
    lines = ["component,score_x,score_y,tag"]
    for r, sx, sy, tag in rows:
        lines.append(f"{r},{sx!r},{'' if sy is None else repr(sy)},{tag}")
    text = "\n".join(lines) + "\n"
    Path(f"{out}.components.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_label(cfg, out):
    _require(cfg, "chunks")
    mode = icl.Mode(cfg["mode"])
    chunks = icl.read_chunk_manifest(cfg["chunks"])
    examples = icl.read_example_manifest(cfg["examples"]) if cfg["examples"] else icl.ExampleSet()
    try:
        labeler = icl.make_labeler(cfg["labeler"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seq, trace = icl.run_sequence(chunks, examples, labeler, mode, cfg["include_next"])
    problems = icl.audit_trace(trace, examples)
    if problems:
        raise BnpipeError("trace audit failed: " + "; ".join(problems[:5]))
    icl.write_predictions(seq, f"{out}.predictions.csv")
    icl.write_trace(trace, f"{out}.trace.jsonl")
    print(f"labeled={len(seq)} mode={mode.value}")


def _single_trial(path):
    seqs = data_prep.read_label_csv(path)
    labels = []
    for s in seqs:
        labels.extend(s.labels)
    return labels


def cmd_metrics(cfg, out):
    _require(cfg, "gold", "pred")
    gold = _single_trial(cfg["gold"])
    pred = _single_trial(cfg["pred"])
    cm = metrics.confusion(gold, pred, classes=data_prep.LABELS)
    text = metrics.format_report(metrics.report(cm))
    sys.stdout.write(text)
    if out:
        Path(f"{out}.metrics.txt").write_text(text, encoding="utf-8")


def read_pairs(path) -> list[metrics.ScorePair]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip().lower() for h in rows[0]] != ["expert", "model"]:
        raise ParseError("expected header 'expert,model'", 1, path)
    pairs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            pairs.append(metrics.ScorePair(int(row[0]), int(row[1])))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad score row {row}: {exc}", lineno, path) from None
    return pairs


def cmd_kappa(cfg, out):
    _require(cfg, "pairs")
    k = metrics.quadratic_weighted_kappa(read_pairs(cfg["pairs"]))
    text = f"kappa={k!r}\n"
    sys.stdout.write(text)
    if out:
        Path(f"{out}.kappa.txt").write_text(text, encoding="utf-8")


COMMANDS = {"prepare": cmd_prepare, "fit": cmd_fit, "eval": cmd_eval,
            "components": cmd_components, "label": cmd_label, "metrics": cmd_metrics,
            "kappa": cmd_kappa}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = _prefix(args.out) if args.out else None
        if out:
            write_resolved(args.command, cfg, out)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"bnpipe {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"bnpipe {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"bnpipe {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except BnpipeError as exc:
        print(f"bnpipe {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
