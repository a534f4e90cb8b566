"""Seeded end-to-end experiment execution."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, dump_config
from .data import DataSplits, SynthConfig, gen_synthetic_tasks, load_splits
from .errors import CLBenchError, ConfigError
from .metrics import AccuracyMatrix, RunRecord, emit_aggregate, emit_results
from .model import Model, ModelConfig, build_model, grow_head
from .scenario import (CLASS_IL, DOMAIN_AGNOSTIC, DOMAIN_AWARE, TASK_IL, DomainSequence, Scenario,
                       build_cross_domain, build_fine_grained_cross_domain, build_incremental_scenario)
from .strategies import (Joint, RunContext, Strategy, StrategyConfig, TrainSettings, evaluate_indices,
                         make_strategy, train_task)

logger = logging.getLogger(__name__)


@dataclass
class SeedResult:
    records: Dict[str, RunRecord]
    context: RunContext
    model: Model
    strategy: Strategy
    timings: List[float] = field(default_factory=list)


def describe(scenario: Scenario) -> Dict:
    return {
        "kind": scenario.kind,
        "datasets": list(scenario.domains),
        "fine_grained": scenario.fine_grained,
        "tasks": [list(t.labels) for t in scenario.tasks],
    }


def _record_kinds(scenario: Scenario, eval_kinds: Optional[Sequence[str]]) -> List[str]:
    if eval_kinds:
        return list(eval_kinds)
    if scenario.cross_domain:
        return [DOMAIN_AWARE, DOMAIN_AGNOSTIC]
    return [scenario.kind]


def run_seed(scenario: Scenario, strategy_cfg: StrategyConfig, model_cfg: ModelConfig,
             settings: TrainSettings, seed: int, eval_kinds: Optional[Sequence[str]] = None,
             record_timing: bool = False) -> SeedResult:
    """Train one strategy through every task of ``scenario`` for one seed.

    Cross-domain scenarios are evaluated under both the domain-aware and the
    domain-agnostic mask on the same checkpoints, so one training run yields
    one record per evaluation view.
    """
    kinds = _record_kinds(scenario, eval_kinds)
    views = {k: scenario if k == scenario.kind else scenario.with_kind(k) for k in kinds}
    model = build_model(dataclasses.replace(model_cfg, input_shape=scenario.data.train.image_shape, seed=seed))
    strategy = make_strategy(copy.copy(strategy_cfg), settings)
    ctx = RunContext(scenario, seed, settings)
    tasks = scenario.tasks
    timings: List[float] = []
    status, error = "complete", None
    is_joint = isinstance(strategy, Joint)
    matrices = {k: AccuracyMatrix(1 if is_joint else len(tasks)) for k in kinds}

    try:
        if is_joint:
            start = time.perf_counter()
            for t, task in enumerate(tasks):
                grow_head(model, task.labels, t)
            ctx.open(train=np.concatenate([x.train for x in tasks]), val=np.concatenate([x.val for x in tasks]))
            strategy.train_all(model, ctx)
            timings.append(time.perf_counter() - start)
            test = np.concatenate([x.test for x in tasks])
            ctx.open(test=test)
            acc = evaluate_indices(lambda x, m: strategy.predict(model, x, m), ctx, "test", test,
                                   range(scenario.class_count))
            for k in kinds:
                matrices[k].record_entry(1, 1, acc)
        else:
            for t, task in enumerate(tasks):
                start = time.perf_counter()
                grow_head(model, task.labels, t)
                ctx.open(train=strategy.accessible_train(ctx, t), val=task.val)
                train_task(strategy, model, ctx, t)
                timings.append(time.perf_counter() - start)
                ctx.open(test=np.concatenate([x.test for x in tasks[: t + 1]]))
                for k, view in views.items():
                    for i in range(t + 1):
                        acc = evaluate_indices(lambda x, m: strategy.predict(model, x, m), ctx, "test",
                                               tasks[i].test, view.eval_mask(t, i))
                        matrices[k].record_entry(t + 1, i + 1, acc)
                ctx.open()
    except CLBenchError as exc:
        status, error = "partial", f"{type(exc).__name__}: {exc}"
        logger.error("seed %d (%s) aborted: %s", seed, strategy.name, error)

    wall = timings if record_timing else [None] * len(timings)
    records = {k: RunRecord({**describe(views[k])}, strategy.name, seed, matrices[k], list(wall), status, error)
               for k in kinds}
    return SeedResult(records, ctx, model, strategy, timings)


# --- building scenarios from a config ---------------------------------------

def load_datasets(cfg: ExperimentConfig) -> List[DataSplits]:
    s = cfg.scenario
    if s.source == "container":
        return [load_splits(s.data_dir, name) for name in s.datasets]
    out = []
    for d, (name, classes) in enumerate(zip(s.datasets, s.synth_classes)):
        out.append(gen_synthetic_tasks(SynthConfig(
            classes=classes, train_per_class=s.synth_train_per_class, val_per_class=s.synth_val_per_class,
            test_per_class=s.synth_test_per_class, image_shape=tuple(s.synth_image_shape),
            sigma=s.synth_sigma, seed=s.synth_seed + d, name=name)))
    return out


def build_scenario(cfg: ExperimentConfig, datasets: Optional[List[DataSplits]] = None) -> Scenario:
    s = cfg.scenario
    datasets = load_datasets(cfg) if datasets is None else datasets
    parts = cfg.partitions()
    if s.kind in (TASK_IL, CLASS_IL):
        if len(datasets) != 1:
            raise ConfigError(f"{s.kind} uses exactly one dataset, got {len(datasets)}")
        return build_incremental_scenario(datasets[0], parts[0], s.kind, s.split_seed, s.shuffle_classes)
    seq = DomainSequence.of(datasets)
    if s.kind == "fine-grained":
        return build_fine_grained_cross_domain(seq, parts, aware=True)
    return build_cross_domain(seq, aware=(s.kind == DOMAIN_AWARE))


def strategy_configs(cfg: ExperimentConfig) -> List[StrategyConfig]:
    st = cfg.strategy
    return [StrategyConfig(name, st.lam, st.temperature, st.exemplars_per_class, st.balanced_epochs, st.lr,
                           st.momentum, st.fisher_samples, st.nme) for name in st.name]


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None) -> List[RunRecord]:
    """Run every (strategy, seed) pair; write per-seed results and per-view aggregates."""
    out = Path(cfg.run.out if out is None else out)
    scenario = build_scenario(cfg)
    model_cfg = ModelConfig(scenario.data.train.image_shape, tuple(cfg.model.conv_filters),
                            cfg.model.feature_dim, cfg.model.head_hidden)
    settings = TrainSettings(cfg.training.epochs, cfg.training.batch_size, cfg.training.patience)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8", newline="\n")
    records: List[RunRecord] = []
    for st_cfg in strategy_configs(cfg):
        by_kind: Dict[str, List[RunRecord]] = {}
        for seed in cfg.run.seeds:
            result = run_seed(scenario, st_cfg, model_cfg, settings, seed, record_timing=cfg.run.record_timing)
            for kind, rec in result.records.items():
                emit_results(rec, out / st_cfg.name / kind / f"seed{seed}")
                (out / st_cfg.name / kind / f"seed{seed}" / "timing.json").write_text(
                    json.dumps({"wall_clock_s": result.timings}) + "\n", encoding="utf-8")
                by_kind.setdefault(kind, []).append(rec)
                records.append(rec)
        for kind, recs in by_kind.items():
            emit_aggregate(recs, out / st_cfg.name / kind)
    return records
