"""Fusionformer: a global spatio-temporal branch and a local trajectory branch fused by a frame-mixing head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .blocks import (LN_EPS, Params, block_param_count, embed, encoder_stack, init_block,
                     init_layer_norm, init_linear, init_positional, linear)
from .tensor import ShapeError, Tensor

DEFAULT_FRAME_POLICY = (3, 5, 7, 9)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 9
    joints: int = 17
    dim: int = 32
    n_heads: int = 4
    cte_heads: int = 2
    gim_spatial_layers: int = 4
    gim_temporal_layers: int = 4
    ste_layers: int = 4
    cte_layers: int = 4
    mlp_ratio: int = 2
    refine_enabled: bool = True
    refine_hidden: int = 64
    lim_enabled: bool = True
    share_embed: bool = False
    strict_frames: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.frames < 1 or self.frames % 2 == 0:
            raise ConfigError(f"frames must be odd, got {self.frames}")
        if self.strict_frames and self.frames not in DEFAULT_FRAME_POLICY:
            raise ConfigError(f"frames must be one of {DEFAULT_FRAME_POLICY} "
                              f"(set strict_frames=false for other odd values), got {self.frames}")
        if self.joints < 1 or self.dim < 1:
            raise ConfigError("joints and dim must be positive")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if (self.frames * self.dim) % self.cte_heads:
            raise ConfigError(f"frames*dim {self.frames * self.dim} not divisible by "
                              f"cte_heads {self.cte_heads}")
        layers = [self.gim_spatial_layers, self.gim_temporal_layers]
        if self.lim_enabled:
            layers += [self.ste_layers, self.cte_layers]
        if min(layers) < 1:
            raise ConfigError("every encoder needs at least one layer")
        if self.mlp_ratio < 1 or self.refine_hidden < 1:
            raise ConfigError("mlp_ratio and refine_hidden must be positive")

    @property
    def center(self) -> int:
        return self.frames // 2

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardTrace:
    attention: dict[str, list[np.ndarray]] = field(default_factory=dict)
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    gim_out: np.ndarray | None = None
    lim_out: np.ndarray | None = None
    refine_weights: np.ndarray | None = None


# -- parameters --------------------------------------------------------------

def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Seed-deterministic parameter set; insertion order is stable and used for serialisation."""
    rng = np.random.default_rng(seed)
    T, J, D = config.frames, config.joints, config.dim
    p: Params = {}
    init_linear(p, "gim.embed", 2, D, rng)
    init_positional(p, "gim.spatial_pe", J, D, rng)
    for i in range(config.gim_spatial_layers):
        init_block(p, f"gim.spatial.{i}", D, config.mlp_ratio, rng)
    init_positional(p, "gim.temporal_pe", T, J * D, rng)
    for i in range(config.gim_temporal_layers):
        init_block(p, f"gim.temporal.{i}", J * D, config.mlp_ratio, rng)
    if config.lim_enabled:
        if not config.share_embed:
            init_linear(p, "lim.embed", 2, D, rng)
        init_positional(p, "lim.ste_pe", T, D, rng)
        for i in range(config.ste_layers):
            init_block(p, f"lim.ste.{i}", D, config.mlp_ratio, rng)
        init_positional(p, "lim.cte_pe", J, T * D, rng)
        for i in range(config.cte_layers):
            init_block(p, f"lim.cte.{i}", T * D, config.mlp_ratio, rng)
    bound = 1.0 / np.sqrt(2 * T)
    p["head.conv.w"] = Tensor(rng.uniform(-bound, bound, size=(T, 2 * T)), requires_grad=True)
    p["head.conv.b"] = Tensor(np.zeros(T), requires_grad=True)
    init_layer_norm(p, "head.ln", D)
    init_linear(p, "head.out", D, 3, rng)
    if config.refine_enabled:
        init_linear(p, "refine.fc1", 2 * J * 3, config.refine_hidden, rng)
        init_linear(p, "refine.fc2", config.refine_hidden, 2, rng)
    for name, t in p.items():
        t.name = name
    return p


def param_count(config: ModelConfig) -> int:
    """Number of learnable scalars, computed in closed form from the config."""
    T, J, D, r = config.frames, config.joints, config.dim, config.mlp_ratio
    embed_ = 2 * D + D
    n = embed_ + J * D + config.gim_spatial_layers * block_param_count(D, r)
    n += T * J * D + config.gim_temporal_layers * block_param_count(J * D, r)
    if config.lim_enabled:
        n += 0 if config.share_embed else embed_
        n += T * D + config.ste_layers * block_param_count(D, r)
        n += J * T * D + config.cte_layers * block_param_count(T * D, r)
    n += T * 2 * T + T + 2 * D + D * 3 + 3
    if config.refine_enabled:
        h = config.refine_hidden
        n += 6 * J * h + h + 2 * h + 2
    return n


# -- branches ----------------------------------------------------------------

def _batched(x2d: Tensor, config: ModelConfig) -> tuple[Tensor, bool]:
    expected = (config.frames, config.joints, 2)
    if x2d.shape[-3:] != expected or x2d.ndim not in (3, 4):
        raise ShapeError(f"input clip has shape {x2d.shape}, config expects {expected} "
                         f"(optionally with a leading batch axis)")
    if x2d.ndim == 3:
        return tn.reshape(x2d, (1,) + x2d.shape), True
    return x2d, False


def gim_spatial_stage(x: Tensor, params: Params, config: ModelConfig,
                      trace: ForwardTrace | None = None) -> Tensor:
    """Per-frame attention over joint tokens: ``(..., T, J, 2) -> (..., T, J, D)``."""
    h = embed(x, params["gim.embed.w"], params["gim.embed.b"], params["gim.spatial_pe"])
    h, maps = encoder_stack(h, params, "gim.spatial", config.gim_spatial_layers, config.n_heads)
    if trace is not None:
        trace.attention["gim_spatial"] = [m.data for m in maps]
    return h


def gim_temporal_stage(h: Tensor, params: Params, config: ModelConfig,
                       trace: ForwardTrace | None = None) -> Tensor:
    """Attention over whole-frame tokens of width J*D."""
    *lead, T, J, D = h.shape
    lead = tuple(lead)
    h = tn.reshape(h, lead + (T, J * D)) + params["gim.temporal_pe"]
    h, maps = encoder_stack(h, params, "gim.temporal", config.gim_temporal_layers, config.n_heads)
    if trace is not None:
        trace.attention["gim_temporal"] = [m.data for m in maps]
    return tn.reshape(h, lead + (T, J, D))


def gim_forward(x2d: Tensor, params: Params, config: ModelConfig,
                trace: ForwardTrace | None = None) -> Tensor:
    """Spatial attention over joints per frame, then temporal attention over whole-frame tokens."""
    x, squeeze = _batched(x2d, config)
    out = gim_temporal_stage(gim_spatial_stage(x, params, config, trace), params, config, trace)
    return tn.reshape(out, out.shape[1:]) if squeeze else out


def reconstruct_trajectories(x: Tensor) -> Tensor:
    """Swap the frame and joint axes: ``(..., T, J, C) -> (..., J, T, C)``."""
    if x.ndim < 3:
        raise ShapeError(f"trajectory reconstruction needs rank >= 3, got {x.shape}")
    k = x.ndim - 3
    return tn.permute(x, tuple(range(k)) + (k + 1, k, k + 2))


# the frame/joint swap is its own inverse
inverse_trajectories = reconstruct_trajectories


def ste_forward(traj: Tensor, params: Params, config: ModelConfig,
                trace: ForwardTrace | None = None) -> Tensor:
    """Temporal attention inside each joint's own trajectory; ``traj`` is ``(..., J, T, D)``."""
    if traj.shape[-2:] != (config.frames, config.dim):
        raise ShapeError(f"STE input {traj.shape} does not end in {(config.frames, config.dim)}")
    h = traj + params["lim.ste_pe"]
    h, maps = encoder_stack(h, params, "lim.ste", config.ste_layers, config.n_heads)
    if trace is not None:
        trace.attention["ste"] = [m.data for m in maps]
    return h


def cte_forward(traj: Tensor, params: Params, config: ModelConfig,
                trace: ForwardTrace | None = None) -> tuple[Tensor, list[Tensor]]:
    """Cross-trajectory attention: each joint's whole trajectory is one token of width T*D."""
    T, D = config.frames, config.dim
    if traj.shape[-2:] != (T, D):
        raise ShapeError(f"CTE input {traj.shape} does not end in {(T, D)}")
    if (T * D) % config.cte_heads:
        raise ShapeError(f"token width {T * D} not divisible by {config.cte_heads} CTE heads")
    lead = traj.shape[:-2]
    h = tn.reshape(traj, lead + (T * D,)) + params["lim.cte_pe"]
    h, maps = encoder_stack(h, params, "lim.cte", config.cte_layers, config.cte_heads)
    if trace is not None:
        trace.attention["cte"] = [m.data for m in maps]
    return tn.reshape(h, lead + (T, D)), maps


def lim_forward(x2d: Tensor, params: Params, config: ModelConfig,
                trace: ForwardTrace | None = None) -> Tensor:
    x, squeeze = _batched(x2d, config)
    prefix = "gim.embed" if config.share_embed else "lim.embed"
    traj = reconstruct_trajectories(x)
    h = linear(traj, params[f"{prefix}.w"], params[f"{prefix}.b"])
    h = ste_forward(h, params, config, trace)
    h, _ = cte_forward(h, params, config, trace)
    out = inverse_trajectories(h)
    return tn.reshape(out, out.shape[1:]) if squeeze else out


def regression_head(gim_out: Tensor, lim_out: Tensor, params: Params) -> Tensor:
    """Concatenate branches along frames, mix 2T -> T frames, reduce width D -> 3 per joint."""
    if gim_out.shape != lim_out.shape:
        raise ShapeError(f"branch outputs differ: {gim_out.shape} vs {lim_out.shape}")
    *lead, T, J, D = gim_out.shape
    lead = tuple(lead)
    fused = tn.concat([gim_out, lim_out], axis=-3)
    fused = tn.reshape(fused, lead + (2 * T, J * D))
    mixed = tn.framewise_conv1d(fused, params["head.conv.w"], params["head.conv.b"])
    mixed = tn.reshape(mixed, lead + (T, J, D))
    normed = tn.layer_norm(mixed, params["head.ln.gamma"], params["head.ln.beta"], LN_EPS)
    return linear(normed, params["head.out.w"], params["head.out.b"])


def pose_refine(pred: Tensor, input2d: Tensor, params: Params,
                trace: ForwardTrace | None = None) -> Tensor:
    """Blend the predicted center pose with (reference x, y; predicted z) by learned confidences.

    ``pred`` is ``(..., T, J, 3)`` and ``input2d`` is ``(..., T, J, 2)``; returns ``(..., J, 3)``.
    """
    if input2d is None:
        raise ShapeError("pose refinement needs a reference 2D pose")
    if pred.shape[:-1] != input2d.shape[:-1]:
        raise ShapeError(f"refinement inputs disagree: {pred.shape} vs {input2d.shape}")
    c = pred.shape[-3] // 2
    lead = pred.shape[:-3]
    J = pred.shape[-2]
    idx = (Ellipsis, c, slice(None), slice(None))
    cand_a = pred[idx]
    ref = input2d[idx]
    cand_b = tn.concat([ref, cand_a[..., 2:3]], axis=-1)
    feats = tn.concat([tn.reshape(cand_a, lead + (J * 3,)), tn.reshape(cand_b, lead + (J * 3,))], axis=-1)
    hidden = tn.gelu(linear(feats, params["refine.fc1.w"], params["refine.fc1.b"]))
    conf = tn.softmax(linear(hidden, params["refine.fc2.w"], params["refine.fc2.b"]), axis=-1)
    if trace is not None:
        trace.refine_weights = conf.data
    w_a = tn.reshape(conf[..., 0:1], lead + (1, 1))
    w_b = tn.reshape(conf[..., 1:2], lead + (1, 1))
    return w_a * cand_a + w_b * cand_b


def model_forward(x2d: Tensor, params: Params, config: ModelConfig,
                  ref2d: Tensor | None = None) -> tuple[Tensor, Tensor, ForwardTrace]:
    """Full forward pass.

    Returns the ``(..., T, J, 3)`` sequence, the ``(..., J, 3)`` center pose and a trace.
    ``ref2d`` overrides the 2D pose used by the refinement stage (defaults to ``x2d``).
    """
    x2d = tn.as_tensor(x2d)
    x, squeeze = _batched(x2d, config)
    trace = ForwardTrace()
    gim = gim_forward(x, params, config, trace)
    if config.lim_enabled:
        lim = lim_forward(x, params, config, trace)
    else:
        lim = Tensor(np.zeros(gim.shape, dtype=gim.dtype))
    seq = regression_head(gim, lim, params)
    if config.refine_enabled:
        ref = x if ref2d is None else _batched(tn.as_tensor(ref2d), config)[0]
        center = pose_refine(seq, ref, params, trace)
    else:
        center = seq[:, config.center]
    trace.gim_out, trace.lim_out = gim.data, lim.data
    trace.shapes = {"input": x.shape, "gim": gim.shape, "lim": lim.shape,
                    "seq": seq.shape, "center": center.shape}
    if squeeze:
        seq = tn.reshape(seq, seq.shape[1:])
        center = tn.reshape(center, center.shape[1:])
    return seq, center, trace
