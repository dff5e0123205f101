"""SGD training, evaluation and checkpoints for networks described by a NetSpec."""
from __future__ import annotations

import csv
import io
import json
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import ops
from .arch import NetSpec
from .data import Dataset, augment_batch
from .model import DivergenceError, Network, param_names
from .tensor import load_tensor, save_tensor

__all__ = [
    "TrainConfig",
    "ModelState",
    "EpochMetrics",
    "init_params",
    "init_std",
    "train",
    "train_step",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "metrics_to_csv",
    "DivergenceError",
]

CHECKPOINT_FORMAT = "rootconv-checkpoint-1"
METRIC_COLUMNS = ("epoch", "loss", "train_acc", "eval_acc")


@dataclass
class TrainConfig:
    """Hyperparameters of a training run.

    ``lr_schedule`` is a list of ``(first_epoch, lr)`` steps; the entry with
    the largest ``first_epoch`` not after the current epoch applies.
    """

    lr_schedule: list[tuple[int, float]] = field(default_factory=lambda: [(0, 0.01)])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 50
    epochs: int = 10
    seed: int = 0
    pad_crop: bool = False
    mirror: bool = False

    def __post_init__(self) -> None:
        if not self.lr_schedule:
            raise ValueError("lr_schedule must have at least one entry")
        self.lr_schedule = sorted((int(e), float(lr)) for e, lr in self.lr_schedule)
        if self.lr_schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        if any(lr < 0 or not np.isfinite(lr) for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be finite and non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, v in self.lr_schedule:
            if start <= epoch:
                lr = v
        return lr


@dataclass
class ModelState:
    """Everything needed to resume: parameters, momentum, BN statistics, rng."""

    net: NetSpec
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    mean: np.ndarray | None = None

    def network(self) -> Network:
        return Network(self.net, self.params, self.buffers)

    def copy(self) -> "ModelState":
        cp = lambda d: {k: v.copy() for k, v in d.items()}
        return ModelState(self.net, cp(self.params), cp(self.momentum), cp(self.buffers), self.step,
                          json.loads(json.dumps(self.rng_state)), None if self.mean is None else self.mean.copy())


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: float | None = None


def init_std(kernel: Sequence[int], in_channels: int, groups: int = 1) -> float:
    """He-normal standard deviation with fan-in taken per filter group."""
    fan_in = kernel[0] * kernel[1] * (in_channels // groups)
    return float(np.sqrt(2.0 / fan_in))


def init_params(net: NetSpec, seed: int = 0) -> ModelState:
    """Fresh parameters: He-normal convs, fan-in scaled linears, BN at scale 1 / shift 0."""
    net = net.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_names(net):
        layer = net.layer(name.rsplit(".", 1)[0])
        suffix = name.rsplit(".", 1)[1]
        if suffix == "weight" and layer.kind == "conv":
            std = init_std(layer.kernel, layer.in_channels, layer.groups)
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
        elif suffix == "weight":
            std = np.sqrt(1.0 / shape[1])
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
        elif suffix == "gamma":
            params[name] = np.ones(shape, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    shp = net.shapes()
    buffers: dict[str, np.ndarray] = {}
    for l in net.layers:
        if l.kind == "batchnorm":
            c = shp[l.name][1]
            buffers[f"{l.name}.running_mean"] = np.zeros(c, np.float32)
            buffers[f"{l.name}.running_var"] = np.ones(c, np.float32)
    momentum = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(net, params, momentum, buffers, 0, rng.bit_generator.state)


# ----------------------------------------------------------------------
# optimisation

def _decayed(name: str) -> bool:
    return name.endswith(".weight")


def sgd_update(state: ModelState, grads: dict[str, np.ndarray], lr: float, momentum: float,
               weight_decay: float) -> None:
    """``v = mu*v + (g + wd*w)``; ``w -= lr*v``.  Weight decay touches weights only."""
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(p.dtype, copy=False)
        if weight_decay and _decayed(name):
            g = g + p.dtype.type(weight_decay) * p
        v = state.momentum[name]
        v *= p.dtype.type(momentum)
        v += g
        if lr:
            p -= p.dtype.type(lr) * v


def train_step(state: ModelState, x: np.ndarray, y: np.ndarray, lr: float, momentum: float = 0.9,
               weight_decay: float = 1e-4) -> tuple[float, int]:
    """One forward/backward/update on a batch; returns ``(loss, correct)``."""
    net = state.network()
    logits = net.logits(x, mode="train")
    loss, grad = ops.softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        bad = net.first_nonfinite()
        where = f"first non-finite activation at layer {bad!r}" if bad else "activations finite, loss overflowed"
        raise DivergenceError(f"loss became {loss} at step {state.step}; {where}")
    grads = net.backward(grad)
    sgd_update(state, grads, lr, momentum, weight_decay)
    state.step += 1
    return float(loss), int(np.sum(np.argmax(logits, axis=1) == y))


def batch_loss(state: ModelState, x: np.ndarray, y: np.ndarray, mode: str = "eval") -> float:
    """Loss of a batch without touching the state (BN statistics are restored)."""
    buffers = {k: v.copy() for k, v in state.buffers.items()}
    logits = Network(state.net, state.params, buffers).logits(x, mode=mode)
    return float(ops.softmax_cross_entropy(logits, y)[0])


def _batches(data: Dataset, mean: np.ndarray, config: TrainConfig, rng: np.random.Generator,
             ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = rng.permutation(len(data))
    for i in range(0, len(order), config.batch_size):
        idx = order[i:i + config.batch_size]
        x = data.images[idx] - mean
        if config.pad_crop or config.mirror:
            x = augment_batch(x, rng, pad_crop=config.pad_crop, mirror=config.mirror)
        yield x.astype(np.float32, copy=False), data.labels[idx]


def _prefetch(it: Iterator, depth: int = 2) -> Iterator:
    """Run ``it`` on a helper thread, at most ``depth`` items ahead."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in it:
                q.put(item)
        except BaseException as e:  # surfaced in the consumer
            q.put(e)
        q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    t.join()


def train(net: NetSpec, data: Dataset, config: TrainConfig, eval_data: Dataset | None = None,
          state: ModelState | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> tuple[ModelState, list[EpochMetrics]]:
    """Train ``net`` on ``data`` with SGD and momentum.

    Images are mean-subtracted with the training split's per-channel mean,
    which is stored on the returned state and reused by :func:`evaluate`.
    Runs are deterministic for a fixed ``config.seed``.
    """
    net = net.validate()
    want = tuple(net.input_shape[1:])
    if tuple(data.images.shape[1:]) != want:
        raise ValueError(f"dataset images are {data.images.shape[1:]}, network expects {want}")
    if state is None:
        state = init_params(net, config.seed)
    if state.mean is None:
        state.mean = data.channel_mean()
    mean = state.mean.reshape(1, -1, 1, 1).astype(np.float32)
    rng = np.random.default_rng()
    if state.rng_state:
        rng.bit_generator.state = state.rng_state
    else:
        rng = np.random.default_rng(config.seed)

    history: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        tot_loss, correct, seen = 0.0, 0, 0
        for x, y in _prefetch(_batches(data, mean, config, rng)):
            loss, ok = train_step(state, x, y, lr, config.momentum, config.weight_decay)
            tot_loss += loss * len(y)
            correct += ok
            seen += len(y)
        state.rng_state = rng.bit_generator.state
        m = EpochMetrics(epoch, tot_loss / max(seen, 1), correct / max(seen, 1),
                         evaluate(state, eval_data) if eval_data is not None else None)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return state, history


def evaluate(state: ModelState, data: Dataset, k: int = 1, batch_size: int = 100) -> float:
    """Top-``k`` accuracy on un-augmented (centre-crop) mean-subtracted images."""
    if tuple(data.images.shape[1:]) != tuple(state.net.input_shape[1:]):
        raise ValueError(f"dataset images are {data.images.shape[1:]}, network expects {state.net.input_shape[1:]}")
    mean = (state.mean if state.mean is not None else np.zeros(data.images.shape[1], np.float32))
    mean = mean.reshape(1, -1, 1, 1).astype(np.float32)
    net = Network(state.net, state.params, state.buffers)
    hits = 0
    for i in range(0, len(data), batch_size):
        x = (data.images[i:i + batch_size] - mean).astype(np.float32)
        y = data.labels[i:i + batch_size]
        logits = net.logits(x, mode="eval")
        if k == 1:
            hits += int(np.sum(np.argmax(logits, axis=1) == y))
        else:
            top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
            hits += int(np.sum(np.any(top == y[:, None], axis=1)))
    return hits / len(data) if len(data) else 0.0


# ----------------------------------------------------------------------
# persistence

def save_checkpoint(state: ModelState, directory: str | os.PathLike) -> Path:
    """Write ``manifest.json`` plus one RTN1 file per tensor into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    groups = (("param", state.params), ("momentum", state.momentum), ("buffer", state.buffers))
    for role, table in groups:
        for name, arr in table.items():
            fname = f"{role}.{name}.rtn"
            save_tensor(d / fname, arr)
            tensors[f"{role}:{name}"] = {"role": role, "name": name, "file": fname, "shape": list(arr.shape)}
    if state.mean is not None:
        save_tensor(d / "mean.rtn", state.mean)
        tensors["mean"] = {"role": "mean", "name": "mean", "file": "mean.rtn", "shape": list(state.mean.shape)}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "rng_state": state.rng_state,
        "net": state.net.to_dict(),
        "tensors": tensors,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_checkpoint(directory: str | os.PathLike) -> ModelState:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    net = NetSpec.from_dict(manifest["net"]).validate()
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "momentum": {}, "buffer": {}}
    mean = None
    for entry in manifest["tensors"].values():
        arr = load_tensor(d / entry["file"], entry["shape"])
        if entry["role"] == "mean":
            mean = arr
        else:
            tables[entry["role"]][entry["name"]] = arr
    missing = set(tables["param"]) ^ set(tables["momentum"])
    if missing:
        raise ValueError(f"parameters without momentum buffers (or vice versa): {sorted(missing)}")
    return ModelState(net, tables["param"], tables["momentum"], tables["buffer"], int(manifest["step"]),
                      manifest.get("rng_state") or {}, mean)


def metrics_to_csv(history: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRIC_COLUMNS)
    for m in history:
        wr.writerow([m.epoch, f"{m.loss:.6f}", f"{m.train_acc:.6f}",
                     "" if m.eval_acc is None else f"{m.eval_acc:.6f}"])
    return buf.getvalue()
