"""Task sequences and evaluation masks for the incremental protocols.

Task-IL and class-IL split one dataset's label space into disjoint blocks.
Cross-domain protocols treat each dataset as a domain; global labels are
offset per domain so they never collide. Every scenario carries merged
train/val/test datasets whose labels are already global ids, and task
label sets are contiguous so that logit index == global label.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import DataSplits, ImageDataset
from .errors import ConfigError, ProtocolViolation
from .model import LogitMask
from .rng import seed_rng

TASK_IL = "task-il"
CLASS_IL = "class-il"
DOMAIN_AWARE = "domain-aware"
DOMAIN_AGNOSTIC = "domain-agnostic"
KINDS = (TASK_IL, CLASS_IL, DOMAIN_AWARE, DOMAIN_AGNOSTIC)

# name: (train, val, test, classes, classes per task)
MEDMNIST_SUBSETS = {
    "bloodmnist": (11959, 1712, 3421, 8, (2, 2, 2, 2)),
    "organamnist": (34581, 6491, 17778, 11, (3, 3, 3, 2)),
    "pathmnist": (89996, 10004, 7180, 9, (3, 2, 2, 2)),
    "tissuemnist": (165466, 23640, 47280, 8, (2, 2, 2, 2)),
}
DEFAULT_DOMAIN_ORDER = ("bloodmnist", "pathmnist", "organamnist", "tissuemnist")


@dataclass
class TaskSpec:
    index: int
    labels: Tuple[int, ...]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    domain: int = 0
    source_labels: Tuple[int, ...] = ()

    @property
    def label_set(self) -> frozenset:
        return frozenset(self.labels)


@dataclass
class Scenario:
    kind: str
    tasks: List[TaskSpec]
    class_count: int
    data: DataSplits
    domains: Tuple[str, ...] = ()
    fine_grained: bool = False
    label_to_task: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        check_partition(self.tasks, self.class_count)
        self.label_to_task = np.empty(self.class_count, dtype=np.int64)
        for task in self.tasks:
            self.label_to_task[list(task.labels)] = task.index

    def __len__(self):
        return len(self.tasks)

    @property
    def cross_domain(self) -> bool:
        return self.kind in (DOMAIN_AWARE, DOMAIN_AGNOSTIC)

    def with_kind(self, kind: str) -> "Scenario":
        if (kind in (TASK_IL, CLASS_IL)) == self.cross_domain:
            raise ConfigError(f"cannot view a {self.kind} scenario as {kind}")
        return replace(self, kind=kind)

    def seen_labels(self, t: int) -> Tuple[int, ...]:
        return tuple(lbl for task in self.tasks[: t + 1] for lbl in task.labels)

    def eval_mask(self, trained_up_to: int, eval_task: int) -> LogitMask:
        """Mask used to score task ``eval_task`` after training task ``trained_up_to``."""
        t, i = trained_up_to, eval_task
        if not 0 <= t < len(self.tasks):
            raise ProtocolViolation(f"no task {t} in a {len(self.tasks)}-task scenario")
        if i < 0 or i > t:
            raise ProtocolViolation(f"cannot evaluate task {i} after training only up to task {t}")
        if self.kind == TASK_IL:
            return LogitMask.of(self.tasks[i].labels)
        if self.kind == DOMAIN_AWARE:
            dom = self.tasks[i].domain
            return LogitMask.of(l for task in self.tasks[: t + 1] if task.domain == dom for l in task.labels)
        return LogitMask.of(self.seen_labels(t))

    def train_mask(self, t: int, labels: np.ndarray):
        """Loss mask while training task ``t`` on samples with ``labels``.

        Task-IL restricts each row to its own task's label block (rows from
        rehearsal memory keep their original task). Every other protocol
        uses all labels seen so far; cross-domain training is identical for
        the aware and agnostic views.
        """
        k = len(self.seen_labels(t))
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and labels.max() >= k:
            raise ProtocolViolation(f"label {int(labels.max())} belongs to a future task")
        if self.kind == TASK_IL:
            row_task = self.label_to_task[labels]
            return self.label_to_task[None, :k] == row_task[:, None]
        return np.ones(k, dtype=bool)


def check_partition(tasks: Sequence[TaskSpec], class_count: int) -> None:
    seen: Dict[int, int] = {}
    for task in tasks:
        for lbl in task.labels:
            if lbl in seen:
                raise ProtocolViolation(f"label {lbl} appears in tasks {seen[lbl]} and {task.index}")
            seen[lbl] = task.index
    if set(seen) != set(range(class_count)):
        missing = sorted(set(range(class_count)) - set(seen))
        raise ProtocolViolation(f"tasks do not cover the label space; missing {missing}")


def class_order(class_count: int, seed: int = 0, shuffle: bool = False) -> List[int]:
    """Order in which source classes are assigned to tasks."""
    if not shuffle:
        return list(range(class_count))
    return [int(c) for c in seed_rng(seed, "split").permutation(class_count)]


def relabel(splits: DataSplits, order: Sequence[int], offset: int = 0) -> DataSplits:
    """Map source label ``order[k]`` to global label ``offset + k``."""
    lut = np.empty(len(order), dtype=np.int64)
    lut[np.asarray(order)] = np.arange(len(order)) + offset
    out = []
    for ds in splits:
        out.append(ImageDataset(ds.images, lut[ds.labels], ds.split, ds.name, offset + len(order)))
    return DataSplits(*out)


def split_classes(splits: DataSplits, classes_per_task: Sequence[int], seed: int = 0,
                  shuffle_classes: bool = False, label_offset: int = 0, domain: int = 0,
                  first_index: int = 0, index_offsets: Tuple[int, int, int] = (0, 0, 0)) -> List[TaskSpec]:
    """Partition a dataset's classes into consecutive blocks.

    ``labels`` of each task are global ids (``label_offset`` + position in
    the class order); index arrays point into the splits after any offset.
    """
    k = splits.class_count
    if any(c < 1 for c in classes_per_task):
        raise ConfigError(f"classes per task must be positive, got {list(classes_per_task)}")
    if sum(classes_per_task) != k:
        raise ConfigError(f"classes per task {list(classes_per_task)} sum to {sum(classes_per_task)}, "
                          f"dataset {splits.name} has {k} classes")
    order = class_order(k, seed, shuffle_classes)
    tasks = []
    start = 0
    for t, n in enumerate(classes_per_task):
        source = tuple(order[start:start + n])
        index_lists = []
        for ds, off in zip(splits, index_offsets):
            index_lists.append(np.flatnonzero(np.isin(ds.labels, source)) + off)
        tasks.append(TaskSpec(first_index + t, tuple(range(label_offset + start, label_offset + start + n)),
                              *index_lists, domain=domain, source_labels=source))
        start += n
    return tasks


def build_incremental_scenario(splits: DataSplits, classes_per_task: Sequence[int], kind: str,
                               seed: int = 0, shuffle_classes: bool = False) -> Scenario:
    if kind not in (TASK_IL, CLASS_IL):
        raise ConfigError(f"incremental scenarios are task-il or class-il, got {kind!r}")
    tasks = split_classes(splits, classes_per_task, seed, shuffle_classes)
    data = relabel(splits, class_order(splits.class_count, seed, shuffle_classes))
    return Scenario(kind, tasks, splits.class_count, data, (splits.name,))


@dataclass
class DomainSequence:
    names: Tuple[str, ...]
    datasets: Tuple[DataSplits, ...]

    def __post_init__(self):
        self.names = tuple(self.names)
        self.datasets = tuple(self.datasets)
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate domain names in {list(self.names)}")
        if len(self.names) != len(self.datasets):
            raise ConfigError("one dataset per domain name is required")
        shapes = {ds.train.image_shape for ds in self.datasets}
        if len(shapes) > 1:
            raise ConfigError(f"domains disagree on image shape: {sorted(shapes)}")

    @classmethod
    def of(cls, datasets: Sequence[DataSplits]) -> "DomainSequence":
        return cls(tuple(ds.name for ds in datasets), tuple(datasets))

    @property
    def class_counts(self) -> Tuple[int, ...]:
        return tuple(ds.class_count for ds in self.datasets)

    @property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum((0,) + self.class_counts[:-1]))

    @property
    def class_count(self) -> int:
        return sum(self.class_counts)

    def merged(self) -> DataSplits:
        parts = [relabel(ds, range(ds.class_count), off) for ds, off in zip(self.datasets, self.offsets)]
        out = []
        for s, split in enumerate(("train", "val", "test")):
            images = np.concatenate([p[s].images for p in _as_lists(parts)])
            labels = np.concatenate([p[s].labels for p in _as_lists(parts)])
            out.append(ImageDataset(images, labels, split, "+".join(self.names), self.class_count))
        return DataSplits(*out)

    def index_offsets(self) -> List[Tuple[int, int, int]]:
        sizes = np.array([[len(ds.train), len(ds.val), len(ds.test)] for ds in self.datasets])
        starts = np.vstack([np.zeros(3, dtype=np.int64), np.cumsum(sizes, axis=0)[:-1]])
        return [tuple(int(v) for v in row) for row in starts]


def _as_lists(parts):
    return [(p.train, p.val, p.test) for p in parts]


def build_cross_domain(seq: DomainSequence, aware: bool) -> Scenario:
    """One task per domain."""
    return build_fine_grained_cross_domain(seq, [[k] for k in seq.class_counts], aware, fine_grained=False)


def build_fine_grained_cross_domain(seq: DomainSequence, splits_per_domain: Sequence[Sequence[int]],
                                    aware: bool, fine_grained: bool = True) -> Scenario:
    """Each domain is itself split into class blocks; tasks run in domain order."""
    if len(seq.names) < 2:
        raise ConfigError("cross-domain scenarios need at least two domains")
    if len(splits_per_domain) != len(seq.names):
        raise ConfigError(f"{len(splits_per_domain)} class partitions for {len(seq.names)} domains")
    tasks: List[TaskSpec] = []
    for d, (ds, offset, idx_off, cpt) in enumerate(zip(seq.datasets, seq.offsets, seq.index_offsets(),
                                                      splits_per_domain)):
        tasks.extend(split_classes(ds, cpt, label_offset=offset, domain=d, first_index=len(tasks),
                                   index_offsets=idx_off))
    kind = DOMAIN_AWARE if aware else DOMAIN_AGNOSTIC
    return Scenario(kind, tasks, seq.class_count, seq.merged(), seq.names, fine_grained)
