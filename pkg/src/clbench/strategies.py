"""Continual-learning strategies over the shared model.

LB (plain fine-tuning), UB (joint training), EWC, MAS, LwF, iCaRL and EEIL.
Each strategy object owns its persistent state across tasks; the runner
drives it through :func:`train_task` and :meth:`Strategy.predict`.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .autodiff import (SGD, Tensor, active_tape, backward, l2_normalize, mul, no_grad,
                       soft_distill_loss, softmax, softmax_xent, take_columns)
from .autodiff.tensor import make_result
from .data import AccessGuard, batch_iter
from .errors import ConfigError, DataError, DimensionError, NumericalError, ProtocolViolation
from .metrics import accuracy
from .model import Model, apply_mask, extract_features, predict_logits, read_tensors, write_tensors
from .rng import seed_rng
from .scenario import Scenario

logger = logging.getLogger(__name__)

STRATEGIES = ("lb", "ub", "ewc", "mas", "lwf", "icarl", "eeil")
DEFAULT_LAMBDA = {"ewc": 10.0, "mas": 0.1, "lwf": 1.0, "icarl": 1.0, "eeil": 1.0}


@dataclass
class StrategyConfig:
    name: str = "lb"
    lam: Optional[float] = None
    temperature: float = 2.0
    exemplars_per_class: int = 20
    balanced_epochs: Optional[int] = None
    lr: float = 0.01
    momentum: float = 0.9
    fisher_samples: int = 2000
    nme: bool = True

    def __post_init__(self):
        self.name = self.name.lower()
        if self.name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA.get(self.name, 0.0)
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.exemplars_per_class < 0:
            raise ConfigError(f"exemplar budget must be >= 0, got {self.exemplars_per_class}")


@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 32
    patience: int = 5


class RunContext:
    """Per-seed access point to the scenario data, with access guards."""

    def __init__(self, scenario: Scenario, seed: int, settings: TrainSettings):
        self.scenario = scenario
        self.seed = seed
        self.settings = settings
        d = scenario.data
        self.guards: Dict[str, AccessGuard] = {"train": AccessGuard(d.train), "val": AccessGuard(d.val),
                                               "test": AccessGuard(d.test)}

    def fetch(self, split: str, indices):
        return self.guards[split].fetch(indices)

    def labels(self, split: str, indices) -> np.ndarray:
        return self.guards[split].labels(indices)

    def open(self, train=None, val=None, test=None) -> None:
        """Set the allowed index sets for the next phase (``None`` = nothing)."""
        for split, idx in (("train", train), ("val", val), ("test", test)):
            self.guards[split].allow(np.zeros(0, dtype=np.int64) if idx is None else idx)

    def open_all(self) -> None:
        for g in self.guards.values():
            g.allow(None)

    def violations(self) -> int:
        return sum(g.violations for g in self.guards.values())


# --- regularisers ----------------------------------------------------------

def _align(arr: np.ndarray, shape) -> np.ndarray:
    """Zero-pad ``arr`` to ``shape`` (parameters only ever grow)."""
    if arr.shape == tuple(shape):
        return arr
    out = np.zeros(shape)
    out[tuple(slice(0, s) for s in arr.shape)] = arr
    return out


def quadratic_penalty(params: Mapping[str, Tensor], anchor: Mapping[str, np.ndarray],
                      weights: Mapping[str, np.ndarray], lam: float) -> Tensor:
    """``lam/2 * sum_k W_k (theta_k - theta*_k)^2`` over the named parameters."""
    names = [n for n in weights if n in params]
    for n in names:
        if params[n].shape != weights[n].shape or anchor[n].shape != weights[n].shape:
            raise DimensionError(f"penalty for {n}: parameter {params[n].shape}, anchor {anchor[n].shape}, "
                                 f"weights {weights[n].shape}")
    diffs = [params[n].data - anchor[n] for n in names]
    value = 0.5 * lam * sum(float(np.sum(weights[n] * d * d)) for n, d in zip(names, diffs))

    def bw(g):
        return [float(g) * lam * weights[n] * d for n, d in zip(names, diffs)]

    return make_result(np.float64(value), [params[n] for n in names], bw)


def fisher_diagonal(forward: Callable[[np.ndarray], Tensor], params: Mapping[str, Tensor],
                    samples: Iterable, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Mean squared per-sample gradient of -log p(y|x), with y drawn from the
    model's own (masked) predictive distribution.

    ``samples`` yields ``(x, mask)`` pairs, one sample per ``x``; ``mask`` is
    a boolean logit mask or None.
    """
    acc = {n: np.zeros_like(p.data) for n, p in params.items()}
    count = 0
    for x, mask in samples:
        logits = _finite_logits(forward(x))
        k = logits.shape[1]
        row = np.ones(k, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), (1, k))[0]
        p = softmax(np.where(row, logits.data[0], -np.inf))
        y = int(rng.choice(k, p=p))
        grads = backward(softmax_xent(logits, [y], row[None, :]), params=params.values())
        for n in acc:
            acc[n] += grads[n] ** 2
        count += 1
    if count == 0:
        return acc
    return {n: v / count for n, v in acc.items()}


def mas_importance(forward: Callable[[np.ndarray], Tensor], params: Mapping[str, Tensor],
                   samples: Iterable[np.ndarray]) -> Dict[str, np.ndarray]:
    """Mean absolute per-sample gradient of the squared L2 norm of the outputs."""
    acc = {n: np.zeros_like(p.data) for n, p in params.items()}
    count = 0
    for x in samples:
        o = _finite_logits(forward(x))
        sq = make_result(np.sum(o.data ** 2), (o,), lambda g, o=o: (2.0 * float(g) * o.data,))
        grads = backward(sq, params=params.values())
        for n in acc:
            acc[n] += np.abs(grads[n])
        count += 1
    if count == 0:
        return acc
    return {n: v / count for n, v in acc.items()}


# --- rehearsal -------------------------------------------------------------

class ExemplarBudgetWarning(UserWarning):
    pass


def herding_select(features: np.ndarray, m: int) -> List[int]:
    """Greedy herding: step k adds the sample that brings the running mean of
    the selection closest to the class mean. Ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if m > n:
        warnings.warn(f"exemplar budget {m} exceeds {n} available samples; capping", ExemplarBudgetWarning)
        m = n
    mu = features.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    picked: List[int] = []
    for k in range(1, m + 1):
        dist = np.linalg.norm(mu[None, :] - (running[None, :] + features) / k, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        picked.append(i)
        available[i] = False
        running += features[i]
    return picked


@dataclass
class ExemplarStore:
    budget: int
    exemplars: Dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.exemplars.values())

    def indices(self) -> np.ndarray:
        if not self.exemplars:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.exemplars[c] for c in sorted(self.exemplars)]).astype(np.int64)

    def classes(self) -> List[int]:
        return sorted(self.exemplars)


def _features_of(model: Model, ctx: RunContext, indices: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(indices), batch):
        x, _ = ctx.fetch("train", indices[start:start + batch])
        out.append(extract_features(model, x, normalize=True))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.feature_dim))


def update_exemplar_store(store: ExemplarStore, new_classes: Sequence[int], model: Model, m: int,
                          ctx: RunContext, candidates: np.ndarray) -> ExemplarStore:
    """Herd ``m`` exemplars for each new class out of ``candidates`` (train
    indices); truncate older lists to ``m`` keeping their selection order."""
    store.budget = m
    for c in list(store.exemplars):
        store.exemplars[c] = store.exemplars[c][:m]
    labels = ctx.labels("train", candidates)
    for c in new_classes:
        idx = candidates[labels == c]
        if idx.size == 0 or m == 0:
            store.exemplars[c] = np.zeros(0, dtype=np.int64)
            continue
        feats = _features_of(model, ctx, idx)
        store.exemplars[c] = idx[herding_select(feats, m)]
    return store


def class_means(model: Model, ctx: RunContext, store: ExemplarStore) -> Dict[int, np.ndarray]:
    means = {}
    for c in store.classes():
        idx = store.exemplars[c]
        if idx.size == 0:
            continue
        mu = _features_of(model, ctx, idx).mean(axis=0)
        means[c] = l2_normalize(mu)
    return means


def nme_classify(features: np.ndarray, means: Mapping[int, np.ndarray], mask) -> np.ndarray:
    """Nearest normalised class mean among ``mask``; ties go to the lowest class."""
    classes = sorted(set(int(c) for c in mask))
    if not classes:
        raise ProtocolViolation("empty mask for NME classification")
    missing = [c for c in classes if c not in means]
    if missing:
        raise ProtocolViolation(f"no exemplars stored for classes {missing}")
    f = l2_normalize(np.asarray(features, dtype=np.float64))
    mu = np.stack([means[c] for c in classes])
    d = np.linalg.norm(f[:, None, :] - mu[None, :, :], axis=2)
    return np.asarray(classes)[np.argmin(d, axis=1)]


def icarl_nme_classify(model: Model, means: Mapping[int, np.ndarray], batch, mask) -> np.ndarray:
    return nme_classify(extract_features(model, batch), means, mask)


def lwf_loss(model: Model, teacher: Optional[Model], x, y, mask, lam: float, T: float) -> Tensor:
    """Cross-entropy on the batch plus ``lam`` times distillation on the
    teacher's logit columns."""
    logits = model(x)
    ce = softmax_xent(logits, y, mask)
    if teacher is None:
        return ce
    return ce + distill_term(logits, teacher, x, lam, T)


def distill_term(logits: Tensor, teacher: Model, x, lam: float, T: float) -> Tensor:
    k_old = teacher.class_count
    if k_old > logits.shape[1]:
        raise ProtocolViolation(f"teacher has {k_old} logits, student only {logits.shape[1]}")
    with no_grad():
        target = teacher(x).data
    return mul(soft_distill_loss(take_columns(logits, k_old), target, T), lam)


# --- training loop ---------------------------------------------------------

def _check_finite(loss: Tensor) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {loss.item()}")


def _check_params(model: Model) -> None:
    bad = [k for k, p in model.params.items() if not np.isfinite(p.data).all()]
    if bad:
        raise NumericalError(f"non-finite parameters after update: {bad}")


def _finite_logits(logits: Tensor) -> Tensor:
    if not np.isfinite(logits.data).all():
        raise NumericalError("non-finite logits during importance estimation")
    return logits


def head_predict(model: Model, x, mask) -> np.ndarray:
    return apply_mask(predict_logits(model, x), mask)


def evaluate_indices(predict: Callable, ctx: RunContext, split: str, indices: np.ndarray, mask,
                     batch: int = 256):
    preds, labels = [], []
    for start in range(0, len(indices), batch):
        x, y = ctx.fetch(split, indices[start:start + batch])
        preds.append(predict(x, mask))
        labels.append(y)
    return accuracy(np.concatenate(preds), np.concatenate(labels))


def fit(model: Model, ctx: RunContext, t: int, indices: np.ndarray,
        loss_fn: Callable[[Model, np.ndarray, np.ndarray], Tensor], epochs: int, lr: float, momentum: float,
        val_indices: Optional[np.ndarray] = None, val_mask=None, stream: str = "shuffle",
        epoch_indices: Optional[Callable[[int], np.ndarray]] = None) -> Dict:
    """SGD over ``indices`` with best-validation restore.

    ``epoch_indices(epoch)``, when given, replaces ``indices`` per epoch
    (used by the balanced phase of EEIL).
    """
    if len(indices) == 0 and epoch_indices is None:
        raise DataError(f"task {t}: empty training set")
    s = ctx.settings
    opt = SGD(model.params, lr, momentum)
    best_acc, best_state, bad = None, None, 0
    history = []
    for epoch in range(epochs):
        rng = seed_rng(ctx.seed, stream, t, epoch)
        pool = indices if epoch_indices is None else epoch_indices(epoch)
        for b in batch_iter(pool, s.batch_size, rng, shuffle=True):
            x, y = ctx.fetch("train", b)
            active_tape().clear()
            loss = loss_fn(model, x, y)
            _check_finite(loss)
            opt.step(backward(loss, params=model.params.values()))
        _check_params(model)
        if val_indices is None or len(val_indices) == 0:
            continue
        acc = evaluate_indices(lambda xb, m: head_predict(model, xb, m), ctx, "val", val_indices, val_mask)
        history.append(float(acc))
        if best_acc is None or acc > best_acc:
            best_acc, best_state, bad = acc, model.state_dict(), 0
        else:
            bad += 1
            if s.patience > 0 and bad >= s.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return {"val_history": history, "best_val": None if best_acc is None else float(best_acc)}


# --- strategies ------------------------------------------------------------

class Strategy:
    name = "lb"
    rehearsal = False

    def __init__(self, cfg: StrategyConfig):
        self.cfg = cfg
        self.teacher: Optional[Model] = None
        self.store = ExemplarStore(cfg.exemplars_per_class)
        self.means: Dict[int, np.ndarray] = {}

    # hooks ---------------------------------------------------------------
    def accessible_train(self, ctx: RunContext, t: int) -> np.ndarray:
        task = ctx.scenario.tasks[t]
        if self.rehearsal and len(self.store):
            return np.concatenate([task.train, self.store.indices()])
        return task.train

    def loss(self, model: Model, ctx: RunContext, t: int, x, y) -> Tensor:
        return softmax_xent(model(x), y, ctx.scenario.train_mask(t, y))

    def after_fit(self, model: Model, ctx: RunContext, t: int) -> None:
        pass

    def predict(self, model: Model, x, mask) -> np.ndarray:
        return head_predict(model, x, mask)

    # driver --------------------------------------------------------------
    def train_task(self, model: Model, ctx: RunContext, t: int) -> Dict:
        task = ctx.scenario.tasks[t]
        if len(task.train) == 0:
            raise DataError(f"task {t} has no training samples")
        info = fit(model, ctx, t, self.accessible_train(ctx, t),
                   lambda m, x, y: self.loss(m, ctx, t, x, y), ctx.settings.epochs,
                   self.cfg.lr, self.cfg.momentum, task.val, ctx.scenario.eval_mask(t, t))
        self.after_fit(model, ctx, t)
        return info

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """Flat view of the persistent state for the sidecar file."""
        out = {f"store/{c}": v.astype(np.float64) for c, v in self.store.exemplars.items()}
        out.update({f"means/{c}": v for c, v in self.means.items()})
        if self.teacher is not None:
            out.update({f"teacher/{k}": v.data for k, v in self.teacher.params.items()})
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], model: Model) -> None:
        """Inverse of :meth:`state_tensors`; ``model`` supplies the teacher's architecture."""
        sections = _split_sections(tensors)
        self.store.exemplars = {int(c): v.astype(np.int64) for c, v in sections.get("store", {}).items()}
        self.means = {int(c): v for c, v in sections.get("means", {}).items()}
        teacher = sections.get("teacher")
        if teacher:
            self.teacher = model.clone()
            self.teacher.load_state_dict(teacher)
            self.teacher.freeze()


class FineTune(Strategy):
    name = "lb"


class _Regularized(Strategy):
    """Shared machinery of EWC and MAS: running-sum diagonal against the
    latest anchor."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.weights: Dict[str, np.ndarray] = {}
        self.anchor: Dict[str, np.ndarray] = {}

    def loss(self, model, ctx, t, x, y):
        ce = softmax_xent(model(x), y, ctx.scenario.train_mask(t, y))
        if not self.weights:
            return ce
        w = {n: _align(v, model.params[n].shape) for n, v in self.weights.items()}
        a = {n: _align(v, model.params[n].shape) for n, v in self.anchor.items()}
        return ce + quadratic_penalty(model.params, a, w, self.cfg.lam)

    def _samples(self, ctx: RunContext, t: int):
        task = ctx.scenario.tasks[t]
        rng = seed_rng(ctx.seed, "fisher", t, 1)
        order = rng.permutation(len(task.train))[: self.cfg.fisher_samples]
        for i in task.train[np.sort(order)]:
            yield ctx.fetch("train", [i])

    def estimate(self, model, ctx, t) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def after_fit(self, model, ctx, t):
        diag = self.estimate(model, ctx, t)
        for n, v in diag.items():
            prev = self.weights.get(n)
            self.weights[n] = v if prev is None else _align(prev, v.shape) + v
        self.anchor = model.state_dict()

    def state_tensors(self):
        out = super().state_tensors()
        out.update({f"{self.name}/weights/{k}": v for k, v in self.weights.items()})
        out.update({f"{self.name}/anchor/{k}": v for k, v in self.anchor.items()})
        return out

    def load_state_tensors(self, tensors, model):
        super().load_state_tensors(tensors, model)
        sections = _split_sections(tensors)
        self.weights = sections.get(f"{self.name}/weights", {})
        self.anchor = sections.get(f"{self.name}/anchor", {})


class EWC(_Regularized):
    name = "ewc"

    def estimate(self, model, ctx, t):
        rng = seed_rng(ctx.seed, "fisher", t, 0)
        samples = ((x, ctx.scenario.train_mask(t, y)) for x, y in self._samples(ctx, t))
        return fisher_diagonal(model, model.params, samples, rng)


class MAS(_Regularized):
    name = "mas"

    def estimate(self, model, ctx, t):
        return mas_importance(model, model.params, (x for x, _ in self._samples(ctx, t)))


class LwF(Strategy):
    name = "lwf"

    def loss(self, model, ctx, t, x, y):
        return lwf_loss(model, self.teacher, x, y, ctx.scenario.train_mask(t, y), self.cfg.lam,
                        self.cfg.temperature)

    def after_fit(self, model, ctx, t):
        self.teacher = model.clone().freeze()


class ICaRL(Strategy):
    name = "icarl"
    rehearsal = True

    def loss(self, model, ctx, t, x, y):
        return lwf_loss(model, self.teacher, x, y, ctx.scenario.train_mask(t, y), self.cfg.lam,
                        self.cfg.temperature)

    def after_fit(self, model, ctx, t):
        task = ctx.scenario.tasks[t]
        update_exemplar_store(self.store, task.labels, model, self.cfg.exemplars_per_class, ctx, task.train)
        self.means = class_means(model, ctx, self.store)
        self.teacher = model.clone().freeze()

    def predict(self, model, x, mask):
        if self.cfg.nme and self.means:
            return icarl_nme_classify(model, self.means, x, mask)
        return head_predict(model, x, mask)


def balanced_counts(labels: np.ndarray) -> int:
    """Per-class sample count of the balanced phase: the smallest class."""
    _, counts = np.unique(labels, return_counts=True)
    return int(counts.min())


class EEIL(ICaRL):
    name = "eeil"

    @property
    def balanced_epochs(self) -> int:
        return self.cfg.balanced_epochs

    def after_fit(self, model, ctx, t):
        task = ctx.scenario.tasks[t]
        epochs = self.balanced_epochs
        if len(self.store) and epochs > 0:
            pool = self.accessible_train(ctx, t)
            labels = ctx.labels("train", pool)
            n_c = balanced_counts(labels)
            by_class = {c: pool[labels == c] for c in np.unique(labels)}

            def epoch_indices(epoch):
                rng = seed_rng(ctx.seed, "balanced", t, epoch)
                return np.concatenate([rng.choice(idx, n_c, replace=False) for _, idx in sorted(by_class.items())])

            fit(model, ctx, t, pool, lambda m, x, y: self.loss(m, ctx, t, x, y), epochs,
                self.cfg.lr * 0.1, self.cfg.momentum, stream="balanced-shuffle", epoch_indices=epoch_indices)
        update_exemplar_store(self.store, task.labels, model, self.cfg.exemplars_per_class, ctx, task.train)
        self.means = {}
        self.teacher = model.clone().freeze()

    def predict(self, model, x, mask):
        return head_predict(model, x, mask)


class Joint(Strategy):
    """Upper bound: one training phase over every task at once."""
    name = "ub"

    def train_all(self, model: Model, ctx: RunContext) -> Dict:
        scn = ctx.scenario
        train = np.concatenate([task.train for task in scn.tasks])
        val = np.concatenate([task.val for task in scn.tasks])
        last = len(scn.tasks) - 1
        full = np.ones(scn.class_count, dtype=bool)
        return fit(model, ctx, last, train, lambda m, x, y: softmax_xent(m(x), y, full),
                   ctx.settings.epochs, self.cfg.lr, self.cfg.momentum, val, range(scn.class_count))


def _split_sections(tensors: Mapping[str, np.ndarray]) -> Dict[str, Dict[str, np.ndarray]]:
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        tag, _, key = name.rpartition("/")
        out.setdefault(tag, {})[key] = arr
    return out


def save_strategy_state(strategy: Strategy, path) -> None:
    """Sidecar next to a model checkpoint; entries are tagged ``section/key``."""
    write_tensors(path, strategy.state_tensors())


def load_strategy_state(strategy: Strategy, path, model: Model) -> Strategy:
    strategy.load_state_tensors(read_tensors(path), model)
    return strategy


REGISTRY = {"lb": FineTune, "ewc": EWC, "mas": MAS, "lwf": LwF, "icarl": ICaRL, "eeil": EEIL, "ub": Joint}


def make_strategy(cfg: StrategyConfig, settings: Optional[TrainSettings] = None) -> Strategy:
    strategy = REGISTRY[cfg.name](cfg)
    if cfg.balanced_epochs is None:
        epochs = settings.epochs if settings is not None else TrainSettings().epochs
        cfg.balanced_epochs = max(1, (2 * epochs) // 10)
    return strategy


def train_task(strategy: Strategy, model: Model, ctx: RunContext, t: int) -> Dict:
    if strategy.name == "ub":
        raise ConfigError("the joint upper bound trains once over all tasks; use Joint.train_all")
    return strategy.train_task(model, ctx, t)
