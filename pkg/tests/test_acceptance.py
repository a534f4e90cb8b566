"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import time
from fractions import Fraction

import numpy as np
import pytest

from clbench.autodiff import (Tensor, conv2d, dense_affine, flatten, grad_check, maxpool2, mean, mul, no_grad,
                              relu, reshape, soft_distill_loss, softmax_xent, square, sub, take_columns, tsum)
from clbench.autodiff import add as t_add
from clbench.config import parse_config_text
from clbench.data import SynthConfig, gen_synthetic_tasks, read_container, write_container
from clbench.errors import ProtocolViolation
from clbench.metrics import AccuracyMatrix, average_accuracy, average_forgetting
from clbench.model import Model, ModelConfig, build_model, grow_head
from clbench.runner import run_experiment, run_seed
from clbench.scenario import (CLASS_IL, MEDMNIST_SUBSETS, TASK_IL, DomainSequence, build_cross_domain,
                              build_incremental_scenario, split_classes)
from clbench.strategies import StrategyConfig, TrainSettings, quadratic_penalty

SEEDS = (0, 1, 2, 3, 4)
CL_STRATEGIES = ("lb", "ewc", "mas", "lwf", "icarl", "eeil")
DESK_MODEL = ModelConfig(input_shape=(1, 8, 8), conv_filters=(8, 16), feature_dim=32, head_hidden=32)
DESK_TRAIN = TrainSettings(epochs=10, batch_size=32, patience=3)


def stream_data(seed=2024, classes=8, name="synth"):
    return gen_synthetic_tasks(SynthConfig(classes=classes, train_per_class=200, val_per_class=20,
                                           test_per_class=50, image_shape=(1, 8, 8), sigma=12.0, seed=seed,
                                           name=name))


@pytest.fixture(scope="module")
def streams():
    data = stream_data()
    return {kind: build_incremental_scenario(data, (2, 2, 2, 2), kind) for kind in (CLASS_IL, TASK_IL)}


@pytest.fixture(scope="module")
def runs(streams):
    """Every (strategy, protocol, seed) run on the synthetic stream, with wall time."""
    out, start = {}, time.perf_counter()
    for kind, scn in streams.items():
        for name in CL_STRATEGIES:
            for seed in SEEDS:
                out[name, kind, seed] = run_seed(scn, StrategyConfig(name), DESK_MODEL, DESK_TRAIN, seed)
    out["elapsed"] = time.perf_counter() - start
    return out


# --- 1 ------------------------------------------------------------------------------

def _point(rng, *shapes):
    return [rng.normal(size=s) for s in shapes]


def _kink_free(values, margin):
    return all(np.abs(v).min() > margin for v in values)


def _pool_gap(h):
    n, c, hh, ww = h.shape
    win = h.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // 2, ww // 2, 4)
    top = np.sort(win, axis=-1)
    return float((top[..., -1] - top[..., -2]).min())


def _tiny_model_point(rng, eps):
    """Random tiny CNN parameters and batch, resampled until no relu input or
    maxpool window sits within a margin of a kink or tie."""
    cfg = ModelConfig(input_shape=(1, 4, 4), conv_filters=(2,), feature_dim=4, head_hidden=4, seed=0)
    margin = 50 * eps
    while True:
        m = build_model(ModelConfig(cfg.input_shape, cfg.conv_filters, cfg.feature_dim, cfg.head_hidden,
                                    seed=int(rng.integers(1 << 30))))
        grow_head(m, [0, 1, 2], 0)
        params = {k: v.data + 0.1 * rng.normal(size=v.shape) for k, v in m.params.items()}
        x = rng.normal(size=(3, 1, 4, 4))
        with no_grad():
            c = conv2d(Tensor(x), Tensor(params["conv0.w"]), Tensor(params["conv0.b"]), pad=1).data
            p = maxpool2(Tensor(np.maximum(c, 0))).data
            f = p.reshape(3, -1) @ params["feat.w"] + params["feat.b"]
            h = np.maximum(f, 0) @ params["hidden.w"] + params["hidden.b"]
        if _kink_free([c, f, h], margin) and _pool_gap(np.maximum(c, 0)) > margin:
            return cfg, params, x


def test_criterion_1_gradient_correctness(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = {}

    def check(name, f, point, tol=1e-4, eps=1e-6):
        rep = grad_check(f, point, eps=eps, tol=tol)
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        return rep.passed

    ok = True
    for _ in range(10):
        x, w, b = _point(rng, (3, 4), (4, 2), 2)
        ok &= check("dense_affine", lambda p: tsum(square(dense_affine(p["x"], p["w"], p["b"]))),
                    {"x": x, "w": w, "b": b})
        x, k, kb = _point(rng, (2, 2, 5, 5), (3, 2, 3, 3), 3)
        ok &= check("conv2d", lambda p: tsum(square(conv2d(p["x"], p["k"], p["b"], stride=2, pad=1))),
                    {"x": x, "k": k, "b": kb}, tol=1e-3)
        v = rng.normal(size=(4, 5))
        v = np.where(np.abs(v) < 0.01, 0.5, v)
        ok &= check("relu", lambda t: tsum(square(relu(t))), v)
        v = rng.permutation(64).reshape(1, 1, 8, 8) / 8.0
        ok &= check("maxpool2", lambda t: tsum(square(maxpool2(t))), v)
        z = rng.normal(size=(3, 4))
        ok &= check("softmax_xent", lambda t: softmax_xent(t, [0, 2, 3]), z)
        ok &= check("softmax_xent[mask]", lambda t: softmax_xent(t, [1, 2, 2], {1, 2}), z)
        teacher = rng.normal(size=(3, 4))
        ok &= check("soft_distill_loss", lambda t: soft_distill_loss(t, teacher, 2.0), z)
        a, c = _point(rng, (2, 3), (2, 3))
        ok &= check("add/sub/mul", lambda p: tsum(mul(t_add(p["a"], p["c"]), sub(p["a"], p["c"]))),
                    {"a": a, "c": c})
        ok &= check("mean/reshape/flatten", lambda t: mean(square(flatten(reshape(t, (1, 2, 3))))), a)
        ok &= check("take_columns", lambda t: tsum(square(take_columns(t, 2))), z)
        anchor, wts = rng.normal(size=(2, 3)), rng.random((2, 3))
        ok &= check("quadratic_penalty", lambda t: quadratic_penalty({"p": t}, {"p": anchor}, {"p": wts}, 3.0), a)

        cfg, params, xb = _tiny_model_point(rng, 1e-3)
        y = [0, 1, 2]
        ok &= check("full model loss",
                    lambda p: softmax_xent(Model(cfg, p)(xb), y), params, tol=1e-3, eps=1e-3)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30
    detail = f"{len(worst)} checks x 10 points in {elapsed:.1f}s; worst rel err " + ", ".join(
        f"{k}={v:.1e}" for k, v in worst.items())
    assert report(1, "gradient correctness", ok, detail)


# --- 2 ------------------------------------------------------------------------------

def _brute_metrics(rows):
    T = len(rows)
    avgs = [sum(rows[t]) / (t + 1) for t in range(T)]
    if T < 2:
        return avgs, None
    f = sum(max(rows[t][i] - rows[T - 1][i] for t in range(i, T - 1)) for i in range(T - 1)) / (T - 1)
    return avgs, f


def test_criterion_2_metric_oracle(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 11))
        rows = [list(rng.integers(0, 10_001, t + 1) / 10_000) for t in range(T)]
        m = AccuracyMatrix.from_rows(rows)
        avgs, f = _brute_metrics(rows)
        worst = max([worst] + [abs(average_accuracy(m, t + 1) - a) for t, a in enumerate(avgs)])
        if f is not None:
            worst = max(worst, abs(average_forgetting(m) - f))
    def exact(rows):
        # accuracies are count ratios, so hand cases enter as exact decimals
        return AccuracyMatrix.from_rows([[Fraction(v) for v in r] for r in rows])

    hand = [
        average_accuracy(exact([["0.9"]]), 1) == 0.9,
        average_accuracy(exact([["1"], ["0.8", "0.7"]]), 2) == 0.75,
        average_forgetting(exact([["0.9"], ["0.7", "1"]])) == 0.2,
        average_forgetting(exact([["0.9"], ["0.85", "0.8"], ["0.6", "0.7", "1"]])) == 0.2,
        average_forgetting(exact([["0.5"], ["0.6", "1"]])) == -0.1,
    ]
    ok = worst <= 1e-12 and all(hand)
    assert report(2, "metric oracle equivalence", ok,
                  f"1000 matrices, max |diff| = {worst:.1e}; hand cases {sum(hand)}/{len(hand)}")


# --- 3 ------------------------------------------------------------------------------

def test_criterion_3_partitions_and_leakage(report, runs):
    details, ok = [], True
    for name in ("bloodmnist", "organamnist", "pathmnist", "tissuemnist"):
        k, cpt = MEDMNIST_SUBSETS[name][3], MEDMNIST_SUBSETS[name][4]
        data = gen_synthetic_tasks(SynthConfig(classes=k, train_per_class=3, val_per_class=1, test_per_class=1,
                                               image_shape=(1, 4, 4), name=name))
        tasks = split_classes(data, cpt)
        sets = [set(t.labels) for t in tasks]
        disjoint = all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1:])
        exhaustive = set().union(*sets) == set(range(k))
        sized = tuple(len(s) for s in sets) == cpt
        ok &= disjoint and exhaustive and sized
        details.append(f"{name}{list(cpt)}")
    scn = build_incremental_scenario(stream_data(), (2, 2, 2, 2), CLASS_IL)
    rejected = 0
    for t in range(4):
        for i in range(t + 1, 4):
            try:
                scn.eval_mask(t, i)
            except ProtocolViolation:
                rejected += 1
    ok &= rejected == 6
    violations = sum(runs["lb", kind, s].context.violations() for kind in (CLASS_IL, TASK_IL) for s in SEEDS)
    reads = sum(int(runs["lb", CLASS_IL, s].context.guards["train"].counts.sum()) for s in SEEDS)
    ok &= violations == 0 and reads > 0
    assert report(3, "partition and protocol properties", ok,
                  f"{', '.join(details)} disjoint/exhaustive/sized; {rejected}/6 future queries rejected; "
                  f"{violations} out-of-contract accesses over {reads} LB train reads")


# --- 4 ------------------------------------------------------------------------------

def test_criterion_4_catastrophic_forgetting(report, runs):
    lb = [runs["lb", CLASS_IL, s].records[CLASS_IL] for s in SEEDS]
    ic = [runs["icarl", CLASS_IL, s].records[CLASS_IL] for s in SEEDS]
    lb_f = np.mean([r.forgetting for r in lb])
    ic_f = np.mean([r.forgetting for r in ic])
    lb_a = np.mean([r.final_accuracy for r in lb])
    ic_a = np.mean([r.final_accuracy for r in ic])
    lb_only = sum(sum(runs["lb", CLASS_IL, s].timings) for s in SEEDS)
    ok = lb_f >= 0.40 and ic_f <= 0.5 * lb_f and ic_a - lb_a >= 0.15 and runs["elapsed"] < 600
    assert report(4, "catastrophic forgetting reproduction", ok,
                  f"LB F={100 * lb_f:.1f}pts A_T={100 * lb_a:.1f}; iCaRL F={100 * ic_f:.1f}pts "
                  f"A_T={100 * ic_a:.1f} (gap {100 * (ic_a - lb_a):+.1f}); LB train time {lb_only:.1f}s, "
                  f"all 60 runs {runs['elapsed']:.0f}s")


# --- 5 ------------------------------------------------------------------------------

def test_criterion_5_task_il_vs_class_il(report, runs):
    failures = []
    for name in CL_STRATEGIES:
        for s in SEEDS:
            til = runs[name, TASK_IL, s].records[TASK_IL].final_accuracy
            cil = runs[name, CLASS_IL, s].records[CLASS_IL].final_accuracy
            if not til >= cil:
                failures.append(f"{name}/seed{s}: {til:.3f} < {cil:.3f}")
    summary = ", ".join(
        f"{n} {np.mean([runs[n, TASK_IL, s].records[TASK_IL].final_accuracy for s in SEEDS]):.2f}/"
        f"{np.mean([runs[n, CLASS_IL, s].records[CLASS_IL].final_accuracy for s in SEEDS]):.2f}"
        for n in CL_STRATEGIES)
    assert report(5, "task-IL >= class-IL per strategy and seed", not failures,
                  f"{6 * len(SEEDS) - len(failures)}/{6 * len(SEEDS)} pairs hold (task/class A_T: {summary})"
                  + (f"; violations: {failures}" if failures else ""))


# --- 6 ------------------------------------------------------------------------------

def test_criterion_6_domain_aware_dominance(report):
    doms = DomainSequence.of([stream_data(seed=31, classes=4, name="alpha"),
                              stream_data(seed=32, classes=4, name="beta")])
    scn = build_cross_domain(doms, aware=True)
    checked, failures = 0, []
    for name in CL_STRATEGIES:
        for s in SEEDS:
            recs = run_seed(scn, StrategyConfig(name), DESK_MODEL, DESK_TRAIN, s).records
            aware, agn = recs["domain-aware"].matrix, recs["domain-agnostic"].matrix
            for t in range(1, aware.T + 1):
                for i in range(1, t + 1):
                    checked += 1
                    if aware.get(t, i) < agn.get(t, i):
                        failures.append(f"{name}/seed{s}/a[{t},{i}]")
    assert report(6, "domain-aware >= domain-agnostic on shared checkpoints", not failures,
                  f"{checked - len(failures)}/{checked} matrix entries hold" +
                  (f"; violations: {failures}" if failures else ""))


# --- 7 ------------------------------------------------------------------------------

def test_criterion_7_collapse(report, streams, runs):
    scn = streams[CLASS_IL]
    mismatches = []
    for name in ("ewc", "mas", "lwf"):
        for s in SEEDS:
            base = runs["lb", CLASS_IL, s]
            other = run_seed(scn, StrategyConfig(name, lam=0.0), DESK_MODEL, DESK_TRAIN, s)
            same = all(np.array_equal(p.data, other.model.params[k].data) for k, p in base.model.params.items())
            same &= base.records[CLASS_IL].matrix == other.records[CLASS_IL].matrix
            if not same:
                mismatches.append(f"{name}/seed{s}")
    ub = [run_seed(scn, StrategyConfig("ub"), DESK_MODEL, DESK_TRAIN, s).records[CLASS_IL].final_accuracy
          for s in SEEDS]
    ok = not mismatches and min(ub) > 0.99
    assert report(7, "lambda=0 collapse and UB ceiling", ok,
                  f"{15 - len(mismatches)}/15 lambda=0 runs bit-identical to LB; UB accuracy min {min(ub):.4f}"
                  + (f"; mismatches: {mismatches}" if mismatches else ""))


# --- 8 ------------------------------------------------------------------------------

def test_criterion_8_determinism(report, tmp_path):
    text = """
[scenario]
kind = class-il
synth_classes = 8
synth_train_per_class = 40
[strategy]
name = lb,ewc,icarl
[model]
conv_filters = 8,16
feature_dim = 32
head_hidden = 32
[training]
epochs = 3
[run]
seeds = 0,1
"""
    cfg = parse_config_text(text)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("results.json"))
    identical = [p for p in files if (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()]
    data = stream_data()
    round_trips = 0
    for ds in data:
        write_container(ds, tmp_path / f"synth_{ds.split}.llcb")
        back = read_container(tmp_path / f"synth_{ds.split}.llcb")
        write_container(back, tmp_path / f"again_{ds.split}.llcb")
        round_trips += int(back == ds and (tmp_path / f"synth_{ds.split}.llcb").read_bytes()
                           == (tmp_path / f"again_{ds.split}.llcb").read_bytes())
    ok = len(files) == 6 and len(identical) == len(files) and round_trips == 3
    assert report(8, "determinism and container round-trip", ok,
                  f"{len(identical)}/{len(files)} results.json byte-identical across reruns; "
                  f"{round_trips}/3 containers round-trip byte-exactly")
