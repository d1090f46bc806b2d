"""Adam, the step-decay schedule, training/evaluation loops and the binary checkpoint format."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .blocks import Params
from .data import Dataset, PoseClip, flip_clip, flip_poses
from .metrics import LossWeights, MetricReport, build_report, loss_m, loss_r, loss_total
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"FFKT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    base_lr: float = 0.001
    decay: float = 0.95
    decay_every: int = 5
    batch_size: int = 8
    seed: int = 0
    lambda_m: float = 1.0
    lambda_r: float = 1.0
    flip_augment: bool = False
    refine_source: str = "input"
    grad_clip: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.base_lr < 0 or not 0 < self.decay <= 1 or self.decay_every < 1:
            raise ValueError("need base_lr >= 0, decay in (0, 1] and decay_every >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.refine_source not in ("input", "gt"):
            raise ValueError(f"refine_source must be 'input' or 'gt', got {self.refine_source!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_m, self.lambda_r)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.decay ** (epoch // cfg.decay_every)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: OptimState, lr: float) -> Params:
    """One bias-corrected Adam update; returns fresh parameter tensors and advances ``state``."""
    for name, g in grads.items():
        # a single nan/inf entry makes the sum non-finite
        if not math.isfinite(float(np.sum(g))):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        update = m / c1
        update /= denom
        update *= lr
        out[name] = Tensor(p.data - update, requires_grad=True, name=name)
    return out


# -- batching ----------------------------------------------------------------

def _stack(clips: list[PoseClip]) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.stack([c.frames_2d for c in clips])
    if any(c.frames_3d is None for c in clips):
        return x, None
    return x, np.stack([c.frames_3d for c in clips])


def batch_loss(params: Params, config: ModelConfig, clips: list[PoseClip], weights: LossWeights,
               refine_source: str = "input") -> Tensor:
    """Total loss averaged over the clips of one batch."""
    x, gt = _stack(clips)
    if gt is None:
        raise ValueError("training clips need 3D ground truth")
    ref = gt[..., :2] if refine_source == "gt" else None
    seq, center, _ = model_forward(Tensor(x), params, config, ref2d=None if ref is None else Tensor(ref))
    lm = loss_m(seq, Tensor(gt))
    lr = loss_r(center, Tensor(gt[:, config.center])) if config.refine_enabled else None
    return loss_total(lm, lr, weights)


def dataset_loss(params: Params, config: ModelConfig, dataset: Dataset, weights: LossWeights,
                 refine_source: str = "input", batch_size: int = 64) -> float:
    """Training objective over every clip, weighted by clip count, without building a graph."""
    total = 0.0
    with tn.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset.clips[start:start + batch_size]
            total += batch_loss(params, config, chunk, weights, refine_source).item() * len(chunk)
    return total / len(dataset)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for name in grads:
            grads[name] = grads[name] * (max_norm / total)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_mpjpe: float


def train(params: Params, config: ModelConfig, dataset: Dataset, cfg: TrainConfig,
          val: Dataset | None = None, state: OptimState | None = None, start_epoch: int = 0,
          on_epoch: Callable[[int, Params, OptimState, EpochLog], None] | None = None,
          ) -> tuple[Params, list[EpochLog], OptimState]:
    """Seeded mini-batch training.

    Each epoch draws its shuffle from ``(seed, epoch)`` so a run resumed from a
    checkpoint at an epoch boundary replays the same stream as an uninterrupted one.
    ``val`` defaults to the training set for the per-epoch MPJPE column.
    """
    if not len(dataset):
        raise ValueError("training dataset is empty")
    state = state or OptimState()
    weights = cfg.loss_weights
    val = val if val is not None else dataset
    history: list[EpochLog] = []
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        samples = list(dataset.clips)
        if cfg.flip_augment:
            samples += [flip_clip(c) for c in dataset.clips]
        order = rng.permutation(len(samples))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            loss = batch_loss(params, config, batch, weights, cfg.refine_source)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {b}")
            tn.backward(loss)
            grads = {name: p.grad for name, p in params.items()}
            if cfg.grad_clip:
                _clip_gradients(grads, cfg.grad_clip)
            params = adam_step(params, grads, state, lr)
            losses.append(value)
        report = evaluate(params, config, val)
        entry = EpochLog(epoch, lr, float(np.mean(losses)) if losses else float("nan"), report.mpjpe)
        log.info("epoch %d lr %.6g loss %.6f val_mpjpe %.6f", epoch, lr, entry.train_loss, entry.val_mpjpe)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, params, state, entry)
    return params, history, state


def predict(params: Params, config: ModelConfig, clips: list[PoseClip], flip_ensemble: bool = False,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Sequence ``(N, T, J, 3)`` and center ``(N, J, 3)`` predictions without building a graph."""
    seqs, centers = [], []
    with tn.no_grad():
        for start in range(0, len(clips), batch_size):
            chunk = clips[start:start + batch_size]
            x, _ = _stack(chunk)
            seq, center, _ = model_forward(Tensor(x), params, config)
            seq, center = seq.data, center.data
            if flip_ensemble:
                sk = chunk[0].skeleton
                xf = np.stack([flip_clip(c).frames_2d for c in chunk])
                seq_f, center_f, _ = model_forward(Tensor(xf), params, config)
                seq = 0.5 * (seq + flip_poses(seq_f.data, sk))
                center = 0.5 * (center + flip_poses(center_f.data, sk))
            seqs.append(seq)
            centers.append(center)
    return np.concatenate(seqs), np.concatenate(centers)


def evaluate(params: Params, config: ModelConfig, dataset: Dataset, flip_ensemble: bool = False,
             mm_per_unit: float = 1000.0) -> MetricReport:
    """Center-frame metrics over every window of ``dataset``."""
    if not dataset.has_3d():
        raise ValueError("evaluation needs 3D ground truth for every clip")
    _, centers = predict(params, config, dataset.clips, flip_ensemble)
    gts = np.stack([c.frames_3d[c.center] for c in dataset.clips])
    return build_report(centers, gts, root=dataset.skeleton.root, mm_per_unit=mm_per_unit)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    state: OptimState | None = None
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {"model": ckpt.config.to_dict(), "epoch": ckpt.epoch, "meta": ckpt.meta}
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in ckpt.params.items()]
    if ckpt.state is not None:
        s = ckpt.state
        header["optim"] = {"step": s.step, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
        tensors += [(f"adam.m/{n}", a) for n, a in s.m.items()]
        tensors += [(f"adam.v/{n}", a) for n, a in s.v.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_str(buf, json.dumps(header, sort_keys=True))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def parse_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.string())
        config = ModelConfig.from_dict(header["model"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after tensor table")
    expected = init_params(config, seed=0)
    params = {}
    for name, ref in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tensors[name].shape != ref.shape:
            raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, "
                                  f"config implies {ref.shape}")
        params[name] = Tensor(tensors.pop(name), requires_grad=True, name=name)
    state = None
    if "optim" in header:
        o = header["optim"]
        state = OptimState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        for key in list(tensors):
            kind, _, pname = key.partition("/")
            if kind in ("adam.m", "adam.v") and pname in params:
                if tensors[key].shape != params[pname].shape:
                    raise CheckpointError(f"moment {key!r} shape mismatch")
                (state.m if kind == "adam.m" else state.v)[pname] = tensors.pop(key)
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)[:3]}")
    return Checkpoint(config, params, state, header.get("epoch", 0), header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
