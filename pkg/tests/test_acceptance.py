"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from bnpipe.data_prep import (LABELS, BehaviorLabel, LabelSequence, SplitSpec, class_distribution,
                              grid_binarize, sample_zeros, split)
from bnpipe.decomposition import fit_coupled_cp, fit_cp
from bnpipe.icl import (Chunk, Decision, ExampleSet, HashRuleLabeler, Mode, ScriptedLabeler,
                        audit_trace, evaluate_run, run_sequence)
from bnpipe.metrics import (ConfusionMatrix, balanced_accuracy, confusion, fbeta, macro_f1, mcc,
                            quadratic_weighted_kappa)
from bnpipe.neat import fit_coupled_neat, identify_components
from bnpipe.optim import TrainConfig
from bnpipe.tensor_core import SparseTensor, rmse

import oracles
from gradcheck import coupled_cp_point, coupled_neat_point
from synth import PLANT_TAGS, coupled_sigmoid, cp_dense, planted_components, split_pair

F, L, E = BehaviorLabel.FREEZING, BehaviorLabel.FLEEING, BehaviorLabel.EXPLORING
SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    """Call with (number, name, ok, detail, elapsed, limit); prints the line and asserts."""

    def report(number, name, ok, detail, elapsed, limit):
        fast = elapsed < limit
        status = "PASS" if ok and fast else "FAIL"
        with capsys.disabled():
            print(f"\n[{status}] criterion {number}: {name}: {detail} "
                  f"({elapsed:.2f}s, limit {limit:g}s)")
        assert ok, detail
        assert fast, f"took {elapsed:.1f}s, limit {limit}s"

    return report


def test_1_kappa_reproduction(verdict):
    t0 = time.perf_counter()
    pairs = [(5, 4), (5, 4), (3, 3), (1, 4), (1, 1), (1, 2), (2, 3), (4, 3), (4, 4), (3, 3),
             (3, 3), (1, 2)]
    k = quadratic_weighted_kappa(pairs)
    ref = float(oracles.kappa_exact(pairs))
    ok = abs(k - 0.59) <= 0.05 and abs(k - ref) <= 1e-9
    verdict(1, "kappa", ok, f"kappa={k:.6f} oracle={ref:.6f} target 0.59+-0.05",
            time.perf_counter() - t0, 1)


def test_2_class_distribution(verdict):
    t0 = time.perf_counter()
    labels = [F] * 410 + [L] * 21 + [E] * 2809
    seqs = [LabelSequence(tuple(labels[i:i + 180]), f"trial{i // 180}")
            for i in range(0, len(labels), 180)]
    dist = class_distribution(seqs)
    pct = [round(100 * dist[c][1], 3) for c in LABELS]
    counts = [dist[c][0] for c in LABELS]
    ok = pct == [12.654, 0.648, 86.698] and counts == [410, 21, 2809]
    verdict(2, "class distribution", ok, f"counts={counts} pct={pct}",
            time.perf_counter() - t0, 1)


def test_3_cpd_recovery(verdict):
    t0 = time.perf_counter()
    train, test = [], []
    for seed in SEEDS:
        dense, _ = cp_dense((20, 30, 10), 3, seed=seed)
        tr, te = split(SparseTensor.from_dense(dense), SplitSpec(0.9, seed))
        model, _ = fit_cp(tr, TrainConfig(rank=3, seed=seed))
        train.append(rmse(tr, model))
        test.append(rmse(te, model))
    mtr, mte = float(np.median(train)), float(np.median(test))
    verdict(3, "CPD recovery", mtr < 0.01 and mte < 0.05,
            f"median train RMSE {mtr:.2e} (<0.01), median test RMSE {mte:.2e} (<0.05)",
            time.perf_counter() - t0, 120)


def test_4_neat_beats_cpd_on_nonlinear_data(verdict):
    t0 = time.perf_counter()
    wins = 0
    rows = []
    for seed in SEEDS:
        X, Y = coupled_sigmoid(seed)
        (Xtr, Xte), (Ytr, _) = split_pair(X, Y, seed)
        cpd, _ = fit_coupled_cp(Xtr, Ytr, TrainConfig(rank=3, seed=seed, epochs=1500))
        neat, _ = fit_coupled_neat(Xtr, Ytr, TrainConfig(rank=3, seed=seed, epochs=1500,
                                                         head_hidden=(16,)))
        a, b = rmse(Xte, cpd.view_x()), rmse(Xte, neat.view_x())
        wins += b < a
        rows.append(f"{b:.3f}<{a:.3f}" if b < a else f"{b:.3f}>={a:.3f}")
    verdict(4, "NeAT vs CPD", wins >= 4, f"NeAT wins {wins}/5 on X test RMSE [{' '.join(rows)}]",
            time.perf_counter() - t0, 300)


def test_5_shared_specific_identification(verdict):
    t0 = time.perf_counter()
    hits = 0
    found = []
    for seed in SEEDS:
        _, X, Y = planted_components(seed)
        model, _ = fit_coupled_neat(X, Y, TrainConfig(rank=3, seed=seed, epochs=2000))
        tags = sorted(str(t) for t in identify_components(model))
        hits += tags == sorted(PLANT_TAGS)
        found.append("/".join(tags))
    verdict(5, "shared/specific tags", hits >= 4,
            f"{hits}/5 seeds tag one shared, one X-specific, one Y-specific [{'; '.join(found)}]",
            time.perf_counter() - t0, 300)


def test_6_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cp_err = max(coupled_cp_point(rng, rank=int(rng.integers(1, 4)),
                                  y_modes=int(rng.choice([2, 3])), cw=float(rng.uniform(0, 2)))
                 for _ in range(100))
    hiddens = [(), (3,), (4, 2)]
    neat_err = max(coupled_neat_point(rng, rank=int(rng.integers(1, 4)),
                                      y_modes=int(rng.choice([2, 3])), hidden=hiddens[i % 3],
                                      output=("identity", "softplus")[i % 2],
                                      cw=float(rng.uniform(0, 2)))
                   for i in range(100))
    verdict(6, "gradients", cp_err < 1e-4 and neat_err < 1e-4,
            f"max relative error CPD {cp_err:.1e}, NeAT {neat_err:.1e} (<1e-4)",
            time.perf_counter() - t0, 60)


def test_7_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    classes = ("a", "b", "c")
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(50, 501))
        p = rng.dirichlet(np.ones(3))
        truth = list(rng.choice(classes, n, p=p))
        pred = [t if rng.uniform() < 0.6 else str(rng.choice(classes)) for t in truth]
        cm = confusion(truth, pred, classes)
        for c in classes:
            for beta in (1.0, 2.0):
                got, want = fbeta(cm, c, beta), oracles.prf(truth, pred, c, beta)
                worst = max(worst, *(abs(g - w) for g, w in zip(got, want)))
        worst = max(worst, abs(macro_f1(cm) - oracles.macro_f1(truth, pred, classes)),
                    abs(balanced_accuracy(cm) - oracles.balanced_accuracy(truth, pred, classes)),
                    abs(mcc(cm) - oracles.mcc(truth, pred, classes)))
    degenerate = [
        ConfusionMatrix(classes, np.array([[5, 0, 0], [0, 0, 0], [0, 0, 0]])),
        ConfusionMatrix(classes, np.array([[3, 0, 0], [4, 0, 0], [1, 0, 0]])),
        ConfusionMatrix(classes, np.array([[0, 2, 0], [0, 7, 0], [0, 1, 0]])),
        ConfusionMatrix(classes, np.array([[0, 0, 0], [1, 2, 3], [0, 0, 0]])),
    ]
    zeros = all(mcc(cm) == 0.0 for cm in degenerate)
    verdict(7, "metric oracles", worst <= 1e-12 and zeros,
            f"max deviation {worst:.1e} over 1000 vectors (<=1e-12); degenerate MCC=0: {zeros}",
            time.perf_counter() - t0, 60)


class NoisyLabeler:
    """Random labels, deterministic per (seed, second)."""

    def __init__(self, seed):
        self.seed = seed

    def __call__(self, ctx):
        r = np.random.default_rng([self.seed, ctx.target.t])
        return Decision(LABELS[int(r.integers(3))], float(r.uniform()))


def test_8_ar_icl_causality(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    examples = ExampleSet(((Chunk("ex", 0, "ex0.mp4"), F), (Chunk("ex", 1, "ex1.mp4"), E)))
    problems = []
    n_traces = 0
    for i in range(48):
        T = int(rng.integers(1, 501)) if i % 4 else 500
        chunks = [Chunk(f"trial{i}", t, f"c{t}.mp4") for t in range(T)]
        labelers = [HashRuleLabeler(i), NoisyLabeler(i),
                    ScriptedLabeler(list(rng.choice(LABELS, T)))]
        for mode in Mode:
            lab = labelers[n_traces % 3]
            seq, trace = run_sequence(chunks, examples, lab, mode, bool(rng.integers(2)))
            n_traces += 1
            problems += audit_trace(trace, examples)
            if mode is not Mode.AR_ICL and any(s.context.prev is not None
                                               and s.context.prev.label is not None
                                               for s in trace):
                problems.append(f"{mode} trace carries a predicted label")
            if mode is Mode.AR_ICL:
                threaded = all(trace[t].context.prev.label == seq.labels[t - 1]
                               for t in range(1, T))
                if not threaded:
                    problems.append("ar-icl prediction not threaded")
    verdict(8, "AR-ICL causality", not problems,
            f"{n_traces} traces, {len(problems)} violations", time.perf_counter() - t0, 30)


class NeedsPreviousLabeler:
    """Knows the gold label but answers exploring unless it sees the previous prediction."""

    def __init__(self, gold):
        self.gold = gold

    def __call__(self, ctx):
        t = ctx.target.t
        if t == 0 or (ctx.prev is not None and ctx.prev.label is not None):
            return Decision(self.gold[t], 1.0)
        return Decision(E, 0.3)


def test_9_harness_discrimination(verdict):
    t0 = time.perf_counter()
    gold = tuple([F] * 5 + [E] * 10 + [L] * 3 + [E] * 7 + [F] * 8 + [E] * 12 + [L, L] + [E] * 3)
    chunks = [Chunk("designed", t, f"d{t}.mp4") for t in range(len(gold))]
    examples = ExampleSet(((Chunk("ex", 0, "ex0.mp4"), F),))
    ref = LabelSequence(gold, "designed")
    scores = {}
    for mode in (Mode.ICL, Mode.AR_ICL):
        seq, _ = run_sequence(chunks, examples, NeedsPreviousLabeler(gold), mode)
        scores[mode] = evaluate_run(seq, ref)["macro_f1"]
    ok = scores[Mode.AR_ICL] > scores[Mode.ICL]
    verdict(9, "harness discrimination", ok,
            f"macro F1 ar-icl {scores[Mode.AR_ICL]:.3f} > icl {scores[Mode.ICL]:.3f}",
            time.perf_counter() - t0, 10)


def grid_oracle(events, n):
    cells = set()
    for x, y in events:
        cells.add((min(math.floor(y * n), n - 1), min(math.floor(x * n), n - 1)))
    return cells


def test_10_data_prep_invariants(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    bad = 0
    for case in range(10_000):
        shape = tuple(int(s) for s in rng.integers(1, 7, size=int(rng.integers(2, 4))))
        dense = (rng.uniform(size=shape) < rng.uniform(0.05, 0.6)).astype(float)
        full = SparseTensor.from_dense(dense)
        ratio = float(rng.choice([0.0, 0.5, 1.0, 2.0, rng.uniform(0, 4)]))
        sampled = sample_zeros(full, ratio, seed=case)
        ones_in = {e for e, v in full.entries if v == 1.0}
        kept = {e: v for e, v in sampled.entries}
        n_zero_avail = full.nnz - len(ones_in)
        want_zeros = min(math.ceil(round(ratio * len(ones_in), 9)), n_zero_avail)
        if not ones_in <= set(kept) or sum(v == 0.0 for v in kept.values()) != want_zeros:
            bad += 1
            continue
        if sampled.nnz >= 10:
            frac = float(rng.uniform(0.05, 0.95))
            tr, te = split(sampled, SplitSpec(frac, case))
            a = [e for e, _ in tr.entries]
            b = [e for e, _ in te.entries]
            if (set(a) & set(b) or set(a) | set(b) != set(kept) or len(a) + len(b) != sampled.nnz
                    or len(a) != round(frac * sampled.nnz)):
                bad += 1
    grid_bad = 0
    for case in range(1000):
        n = int(rng.integers(1, 12))
        k = int(rng.integers(0, 40))
        pts = rng.uniform(size=(k, 2))
        edge = rng.uniform(size=k) < 0.1
        pts[edge] = rng.choice([0.0, 1.0], size=(int(edge.sum()), 2))
        events = [(float(x), float(y)) for x, y in pts]
        got = {tuple(int(v) for v in p) for p in np.argwhere(grid_binarize(events, n).matrix)}
        grid_bad += got != grid_oracle(events, n)
    verdict(10, "data-prep invariants", bad == 0 and grid_bad == 0,
            f"{bad} bad sample/split cases of 10000, {grid_bad} grid mismatches of 1000",
            time.perf_counter() - t0, 60)
