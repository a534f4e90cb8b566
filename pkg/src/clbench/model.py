"""Small CNN learner: conv feature extractor plus a shared, growable head.

Layout::

    [conv3x3 -> relu -> maxpool2] * len(conv_filters) -> flatten
      -> dense(feature_dim) -> relu                     (feature extractor)
      -> dense(head_hidden) -> relu -> dense(classes)   (classifier head)

The head's output layer gains columns as tasks arrive; existing columns
are never touched by growth.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, conv2d, dense_affine, flatten, l2_normalize, maxpool2, no_grad, relu
from .errors import ConfigError, CorruptionError, DimensionError, FormatError, ProtocolViolation
from .rng import seed_rng

EXTRACTOR_PREFIXES = ("conv", "feat")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: Tuple[int, int, int] = (3, 28, 28)
    conv_filters: Tuple[int, ...] = (16, 32)
    feature_dim: int = 128
    head_hidden: int = 512
    seed: int = 0

    def validate(self) -> None:
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise ConfigError(f"input shape must be positive, got {self.input_shape}")
        div = 2 ** len(self.conv_filters)
        if h % div or w % div:
            raise ConfigError(f"input {h}x{w} is not divisible by 2^{len(self.conv_filters)} pooling stages")
        if self.feature_dim < 1 or self.head_hidden < 1 or any(f < 1 for f in self.conv_filters):
            raise ConfigError("layer widths must be positive")

    @property
    def flat_dim(self) -> int:
        c, h, w = self.input_shape
        div = 2 ** len(self.conv_filters)
        channels = self.conv_filters[-1] if self.conv_filters else c
        return channels * (h // div) * (w // div)


@dataclass(frozen=True)
class LogitMask:
    labels: Tuple[int, ...]

    def __post_init__(self):
        if not self.labels:
            raise ProtocolViolation("logit mask must not be empty")

    @classmethod
    def of(cls, labels: Iterable[int]) -> "LogitMask":
        return cls(tuple(sorted(set(int(v) for v in labels))))

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, item):
        return item in self.labels

    def __len__(self):
        return len(self.labels)


class Model:
    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.class_to_task: List[int] = []
        self._head_rng = seed_rng(cfg.seed, "head")

    @property
    def class_count(self) -> int:
        return self.params["head.w"].shape[1]

    @property
    def extractor_params(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(EXTRACTOR_PREFIXES)}

    @property
    def head_params(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith(EXTRACTOR_PREFIXES)}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"state for {k} has shape {v.shape}, model has {self.params[k].shape}")
            self.params[k].data = v.copy()

    def clone(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        twin = Model(self.cfg, params)
        twin.class_to_task = list(self.class_to_task)
        return twin

    def freeze(self) -> "Model":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def _check_input(self, x) -> np.ndarray:
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise DimensionError(f"batch shape {x.shape} does not match model input {self.cfg.input_shape}")
        return x

    def features(self, x) -> Tensor:
        h = Tensor(self._check_input(x))
        for i in range(len(self.cfg.conv_filters)):
            h = maxpool2(relu(conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=1, pad=1)))
        h = flatten(h)
        return relu(dense_affine(h, self.params["feat.w"], self.params["feat.b"]))

    def head(self, feats: Tensor) -> Tensor:
        z = relu(dense_affine(feats, self.params["hidden.w"], self.params["hidden.b"]))
        return dense_affine(z, self.params["head.w"], self.params["head.b"])

    def __call__(self, x) -> Tensor:
        return self.head(self.features(x))


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic initialisation from ``cfg.seed``; the head starts with zero classes."""
    cfg.validate()
    rng = seed_rng(cfg.seed, "init")
    params: Dict[str, Tensor] = {}

    def add(name, data):
        params[name] = Tensor(data, requires_grad=True, name=name)

    c_in = cfg.input_shape[0]
    for i, f in enumerate(cfg.conv_filters):
        fan_in = c_in * 9
        add(f"conv{i}.w", _uniform(rng, (f, c_in, 3, 3), np.sqrt(6.0 / fan_in)))
        add(f"conv{i}.b", np.zeros(f))
        c_in = f
    add("feat.w", _uniform(rng, (cfg.flat_dim, cfg.feature_dim), np.sqrt(6.0 / cfg.flat_dim)))
    add("feat.b", np.zeros(cfg.feature_dim))
    add("hidden.w", _uniform(rng, (cfg.feature_dim, cfg.head_hidden), np.sqrt(6.0 / cfg.feature_dim)))
    add("hidden.b", np.zeros(cfg.head_hidden))
    add("head.w", np.zeros((cfg.head_hidden, 0)))
    add("head.b", np.zeros(0))
    return Model(cfg, params)


def expected_parameter_count(cfg: ModelConfig, classes: int = 0) -> int:
    total, c_in = 0, cfg.input_shape[0]
    for f in cfg.conv_filters:
        total += f * c_in * 9 + f
        c_in = f
    total += cfg.flat_dim * cfg.feature_dim + cfg.feature_dim
    total += cfg.feature_dim * cfg.head_hidden + cfg.head_hidden
    return total + cfg.head_hidden * classes + classes


def grow_head(model: Model, new_labels: Sequence[int], task_id: int) -> Model:
    """Append output columns for ``new_labels`` (must continue the current range)."""
    new_labels = [int(v) for v in new_labels]
    k = model.class_count
    if not new_labels:
        raise ProtocolViolation("grow_head called with no labels")
    if min(new_labels) < k or len(set(new_labels)) != len(new_labels):
        raise ProtocolViolation(f"labels {sorted(new_labels)} overlap existing classes [0, {k})")
    if sorted(new_labels) != list(range(k, k + len(new_labels))):
        raise ProtocolViolation(f"labels {sorted(new_labels)} do not continue the class range at {k}")
    n = len(new_labels)
    hidden = model.cfg.head_hidden
    bound = 1.0 / np.sqrt(hidden)
    w_new = _uniform(model._head_rng, (hidden, n), bound)
    b_new = _uniform(model._head_rng, (n,), bound)
    w, b = model.params["head.w"], model.params["head.b"]
    w.data = np.concatenate([w.data, w_new], axis=1)
    b.data = np.concatenate([b.data, b_new])
    model.class_to_task.extend([task_id] * n)
    return model


def forward_logits(model: Model, batch) -> Tensor:
    return model(batch)


def extract_features(model: Model, batch, normalize: bool = False) -> np.ndarray:
    with no_grad():
        f = model.features(batch).data
    return l2_normalize(f) if normalize else f


def predict_logits(model: Model, batch) -> np.ndarray:
    with no_grad():
        return model(batch).data


def apply_mask(logits, mask) -> np.ndarray:
    """Argmax restricted to ``mask``; ties resolve to the lowest label.

    ``mask`` is a label collection / LogitMask, or an (N, K) boolean array
    for per-row masks.
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    n, k = z.shape
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        m = np.broadcast_to(mask, (n, k))
        if not np.all(m.any(axis=1)):
            raise ProtocolViolation("empty logit mask")
    else:
        labels = sorted(set(int(v) for v in mask))
        if not labels:
            raise ProtocolViolation("empty logit mask")
        if labels[0] < 0 or labels[-1] >= k:
            raise ProtocolViolation(f"mask {labels} outside logit range [0, {k})")
        m = np.zeros(k, dtype=bool)
        m[labels] = True
        m = np.broadcast_to(m, (n, k))
    return np.argmax(np.where(m, z, -np.inf), axis=1)


# --- binary tensor envelope (checkpoints and strategy sidecars) -----------

CKPT_MAGIC = b"CLMD"
CKPT_VERSION = 1


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<HQ", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<HQ", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 14
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(raw):
                raise struct.error("payload truncated")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except struct.error as exc:
        raise CorruptionError(f"{path}: {exc}", offset=pos) from None
    return out


def save_checkpoint(model: Model, path) -> None:
    cfg = model.cfg
    tensors = {k: v.data for k, v in model.params.items()}
    tensors["meta.input_shape"] = np.array(cfg.input_shape, dtype=np.float64)
    tensors["meta.conv_filters"] = np.array(cfg.conv_filters, dtype=np.float64)
    tensors["meta.widths"] = np.array([cfg.feature_dim, cfg.head_hidden, cfg.seed], dtype=np.float64)
    tensors["meta.class_to_task"] = np.array(model.class_to_task, dtype=np.float64)
    write_tensors(path, tensors)


def load_checkpoint(path) -> Model:
    t = read_tensors(path)
    feature_dim, head_hidden, seed = (int(v) for v in t.pop("meta.widths"))
    cfg = ModelConfig(tuple(int(v) for v in t.pop("meta.input_shape")),
                      tuple(int(v) for v in t.pop("meta.conv_filters")), feature_dim, head_hidden, seed)
    class_to_task = [int(v) for v in t.pop("meta.class_to_task")]
    model = Model(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})
    model.class_to_task = class_to_task
    return model
