"""Optimizers, the training loop, evaluation and weight-snapshot files."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, augment, batches
from .models import ModelConfig, TinyModel, build_model, forward
from .seeding import stream_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.05
    schedule: str = "cosine"
    warmup_epochs: float = 1.0

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"optimizer kind must be adamw or sgd, got {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be constant or cosine, got {self.schedule!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimSpec":
        return cls(**d)


def learning_rate(spec: OptimSpec, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup then half-cosine decay to zero over ``total_steps``."""
    if spec.schedule == "constant":
        return spec.lr
    if step < warmup_steps:
        return spec.lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return spec.lr * 0.5 * (1.0 + math.cos(math.pi * min(step - warmup_steps, span) / span))


@dataclass
class OptimState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, params) -> "OptimState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimState, spec: OptimSpec,
               step_index: int, lr: float | None = None, decay_mask: list[bool] | None = None) -> None:
    """One AdamW update; ``step_index`` counts from 1 for bias correction."""
    lr = spec.lr if lr is None else lr
    b1, b2 = spec.betas
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        w = p.data
        if spec.weight_decay and (decay_mask is None or decay_mask[i]):
            w = w * (1.0 - lr * spec.weight_decay)
        p.assign(w - lr * (m / c1) / (np.sqrt(v / c2) + spec.eps))


def sgd_step(params: list[Tensor], grads: list[np.ndarray], state: OptimState, spec: OptimSpec,
             lr: float | None = None, decay_mask: list[bool] | None = None) -> None:
    lr = spec.lr if lr is None else lr
    for i, (p, g) in enumerate(zip(params, grads)):
        if spec.weight_decay and (decay_mask is None or decay_mask[i]):
            g = g + spec.weight_decay * p.data
        buf = state.m[i] = spec.momentum * state.m[i] + g
        p.assign(p.data - lr * buf)


# ---------------------------------------------------------------------------
# results and snapshots

@dataclass
class TrainResult:
    seed: int
    config_hash: str
    epochs: int
    status: str = "ok"
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    final_test_acc: float = float("nan")
    initial_test_acc: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def to_json(self) -> str:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainResult":
        d = json.loads(text)
        for k in ("final_test_acc", "initial_test_acc"):
            if d.get(k) is None:
                d[k] = float("nan")
        return cls(**d)


@dataclass
class WeightSnapshot:
    tensors: list[tuple[str, np.ndarray]]
    config_hash: str = ""
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        names = [n for n, _ in self.tensors]
        if len(set(names)) != len(names):
            raise ValueError("snapshot tensor names must be unique")

    def get(self, name: str) -> np.ndarray:
        for n, a in self.tensors:
            if n == name:
                return a
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n for n, _ in self.tensors]

    def equals(self, other: "WeightSnapshot") -> bool:
        if (self.config_hash, self.seed, self.epoch) != (other.config_hash, other.seed, other.epoch):
            return False
        if self.names() != other.names():
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (_, a), (_, b) in zip(self.tensors, other.tensors))


class SnapshotFormatError(ValueError):
    pass


SNAPSHOT_MAGIC = b"MIMW"
SNAPSHOT_VERSION = 1


def encode_snapshot(snap: WeightSnapshot) -> bytes:
    """Serialize to the little-endian ``MIMW`` layout.

    ``magic | u32 version | body | u32 crc32(body)`` where body is
    ``u32 meta_len | meta JSON`` followed by one record per tensor:
    ``u16 name_len | name | u8 rank | u32 dims[rank] | f64 data``.
    """
    meta = json.dumps({"config_hash": snap.config_hash, "seed": snap.seed, "epoch": snap.epoch},
                      sort_keys=True).encode()
    body = bytearray(struct.pack("<I", len(meta)) + meta)
    for name, arr in snap.tensors:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr).tobytes()
    return SNAPSHOT_MAGIC + struct.pack("<I", SNAPSHOT_VERSION) + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_snapshot(raw: bytes) -> WeightSnapshot:
    if len(raw) < 16 or raw[:4] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError("bad magic: not a MIMW snapshot")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    body = raw[8:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) != crc:
        raise SnapshotFormatError("CRC mismatch: snapshot is corrupted")
    try:
        (meta_len,) = struct.unpack_from("<I", body, 0)
        meta = json.loads(body[4:4 + meta_len].decode())
        pos = 4 + meta_len
        tensors = []
        while pos < len(body):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
            tensors.append((name, data))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise SnapshotFormatError(f"malformed snapshot body: {exc}") from exc
    return WeightSnapshot(tensors, meta["config_hash"], int(meta["seed"]), int(meta["epoch"]))


def save_snapshot(snap: WeightSnapshot, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_snapshot(snap))
    tmp.replace(path)


def load_snapshot(path) -> WeightSnapshot:
    return decode_snapshot(Path(path).read_bytes())


def snapshot_model(model: TinyModel, config_hash: str, seed: int, epoch: int) -> WeightSnapshot:
    return WeightSnapshot(model.state(), config_hash, seed, epoch)


# ---------------------------------------------------------------------------
# training

def predict(model: TinyModel, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [forward(model, Tensor(images[i:i + batch_size])).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Argmax accuracy; ``np.argmax`` breaks ties toward the lowest class index."""
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: TinyModel, dataset: Dataset) -> float:
    return accuracy_from_logits(predict(model, dataset.images), dataset.labels)


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 128
    augment: bool = True
    augment_pad: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


def run_hash(config: ModelConfig, optim: OptimSpec, epochs: int, settings: TrainSettings,
             data_id: str) -> str:
    payload = {"model": config.structure_hash(), "optim": optim.to_dict(), "epochs": epochs,
               "settings": settings.to_dict(), "data": data_id}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def train(config: ModelConfig, data: tuple[Dataset, Dataset], optim: OptimSpec, epochs: int, seed: int,
          settings: TrainSettings = TrainSettings(), data_id: str = "unnamed",
          initial_snapshot: bool = False):
    """Train one model from scratch.

    Returns ``(TrainResult, WeightSnapshot | None)``; the snapshot is withheld
    when the loss goes non-finite. With ``initial_snapshot`` a third element,
    the snapshot at epoch 0, is returned too.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    train_set, test_set = data
    config = replace(config, seed=seed)
    model = build_model(config)
    chash = run_hash(config, optim, epochs, settings, data_id)
    result = TrainResult(seed=seed, config_hash=chash, epochs=epochs)
    init_snap = snapshot_model(model, chash, seed, 0) if initial_snapshot else None

    params = model.parameters()
    decay_mask = [p.ndim >= 2 and name != "pos" for name, p in model.params.items()]
    state = OptimState.zeros(params)
    steps_per_epoch = math.ceil(len(train_set) / settings.batch_size)
    total_steps = steps_per_epoch * epochs
    warmup = min(int(round(optim.warmup_epochs * steps_per_epoch)), total_steps)
    aug_rng = stream_rng(seed, "augment")
    step = 0
    result.initial_test_acc = evaluate(model, test_set)

    for epoch in range(epochs):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for images, labels in batches(train_set, settings.batch_size, shuffle_seed=seed, epoch=epoch):
            images = augment(images, aug_rng, settings.augment, settings.augment_pad)
            logits = forward(model, Tensor(images))
            loss = ad.cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                result.status = "failed: non-finite loss"
                logger.warning("seed %d diverged at epoch %d step %d", seed, epoch, step)
                return (result, None, init_snap) if initial_snapshot else (result, None)
            model.zero_grad()
            ad.backward(loss)
            lr = learning_rate(optim, step, total_steps, warmup)
            grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
            step += 1
            if optim.kind == "adamw":
                adamw_step(params, grads, state, optim, step, lr, decay_mask)
            else:
                sgd_step(params, grads, state, optim, lr, decay_mask)
            loss_sum += loss.item() * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(labels)
        result.train_loss.append(loss_sum / seen)
        result.train_acc.append(correct / seen)
        result.test_acc.append(evaluate(model, test_set))
        result.epoch_seconds.append(time.perf_counter() - t0)
        logger.debug("seed %d epoch %d loss %.4f test %.4f", seed, epoch, result.train_loss[-1],
                     result.test_acc[-1])

    if not all(np.isfinite(p.data).all() for p in params):
        result.status = "failed: non-finite weights"
        return (result, None, init_snap) if initial_snapshot else (result, None)
    result.final_test_acc = result.test_acc[-1] if epochs else result.initial_test_acc
    snap = snapshot_model(model, chash, seed, epochs)
    return (result, snap, init_snap) if initial_snapshot else (result, snap)
