"""Transformer building blocks: attention, multi-head attention, pre-norm encoder blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

Params = dict[str, Tensor]

LN_EPS = 1e-5
PE_STD = 0.02


# -- initialisation ----------------------------------------------------------

def init_linear(params: Params, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{prefix}.w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_layer_norm(params: Params, prefix: str, width: int):
    params[f"{prefix}.gamma"] = Tensor(np.ones(width), requires_grad=True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(width), requires_grad=True)


def init_positional(params: Params, name: str, rows: int, width: int, rng: np.random.Generator):
    params[name] = Tensor(rng.normal(0.0, PE_STD, size=(rows, width)), requires_grad=True)


def init_block(params: Params, prefix: str, width: int, mlp_ratio: int, rng: np.random.Generator):
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.attn.{proj}", width, width, rng)
    hidden = mlp_ratio * width
    init_linear(params, f"{prefix}.mlp.fc1", width, hidden, rng)
    init_linear(params, f"{prefix}.mlp.fc2", hidden, width, rng)
    for ln in ("ln1", "ln2", "ln_final"):
        init_layer_norm(params, f"{prefix}.{ln}", width)


def block_param_count(width: int, mlp_ratio: int) -> int:
    hidden = mlp_ratio * width
    attn = 4 * (width * width + width)
    mlp = (width * hidden + hidden) + (hidden * width + width)
    return attn + mlp + 3 * 2 * width


# -- parameter views ---------------------------------------------------------

@dataclass
class AttentionParams:
    """Projections for ``n_heads`` heads; head ``i`` owns columns ``i*head_dim:(i+1)*head_dim``."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int

    def __post_init__(self):
        model_dim = self.w_q.shape[0]
        if model_dim % self.n_heads:
            raise ShapeError(f"model_dim {model_dim} not divisible by n_heads {self.n_heads}")
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (model_dim, model_dim):
                raise ShapeError(f"attention projection has shape {w.shape}, expected {(model_dim, model_dim)}")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.n_heads

    @classmethod
    def from_params(cls, params: Params, prefix: str, n_heads: int) -> AttentionParams:
        kw = {}
        for proj in ("q", "k", "v", "o"):
            kw[f"w_{proj}"] = params[f"{prefix}.{proj}.w"]
            kw[f"b_{proj}"] = params[f"{prefix}.{proj}.b"]
        return cls(n_heads=n_heads, **kw)


@dataclass
class BlockParams:
    attention: AttentionParams
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    ln1: tuple[Tensor, Tensor]
    ln2: tuple[Tensor, Tensor]
    ln_final: tuple[Tensor, Tensor]

    @classmethod
    def from_params(cls, params: Params, prefix: str, n_heads: int) -> BlockParams:
        def ln(name):
            return params[f"{prefix}.{name}.gamma"], params[f"{prefix}.{name}.beta"]

        return cls(
            attention=AttentionParams.from_params(params, f"{prefix}.attn", n_heads),
            fc1_w=params[f"{prefix}.mlp.fc1.w"], fc1_b=params[f"{prefix}.mlp.fc1.b"],
            fc2_w=params[f"{prefix}.mlp.fc2.w"], fc2_b=params[f"{prefix}.mlp.fc2.b"],
            ln1=ln("ln1"), ln2=ln("ln2"), ln_final=ln("ln_final"),
        )


# -- forward ops -------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        return tn.reshape(tn.matmul(tn.reshape(x, (1, -1)), w), (w.shape[1],)) + b
    return tn.matmul(x, w) + b


def attention(q: Tensor, k: Tensor, v: Tensor, d_k: int | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_k)) v over the last two axes; returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1] if d_k is None else d_k
    order = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = tn.scale(tn.matmul(q, tn.permute(k, order)), 1.0 / math.sqrt(d_k))
    weights = tn.softmax(scores, axis=-1)
    return tn.matmul(weights, v), weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., N, H*dh) -> (..., H, N, dh)
    lead = x.shape[:-2]
    n, width = x.shape[-2:]
    x = tn.reshape(x, lead + (n, n_heads, width // n_heads))
    k = len(lead)
    return tn.permute(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.shape[:-3]
    h, n, dh = x.shape[-3:]
    k = len(lead)
    x = tn.permute(x, tuple(range(k)) + (k + 1, k, k + 2))
    return tn.reshape(x, lead + (n, h * dh))


def multi_head_attention(x: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Returns the projected output and weights shaped ``(..., heads, tokens, tokens)``."""
    q = _split_heads(linear(x, p.w_q, p.b_q), p.n_heads)
    k = _split_heads(linear(x, p.w_k, p.b_k), p.n_heads)
    v = _split_heads(linear(x, p.w_v, p.b_v), p.n_heads)
    heads, weights = attention(q, k, v, p.head_dim)
    return linear(_merge_heads(heads), p.w_o, p.b_o), weights


def encoder_block(x: Tensor, p: BlockParams) -> tuple[Tensor, Tensor]:
    """Pre-norm block with a terminal layer norm; returns (output, attention weights)."""
    attn_out, weights = multi_head_attention(tn.layer_norm(x, *p.ln1, LN_EPS), p.attention)
    x1 = attn_out + x
    hidden = tn.gelu(linear(tn.layer_norm(x1, *p.ln2, LN_EPS), p.fc1_w, p.fc1_b))
    x2 = linear(hidden, p.fc2_w, p.fc2_b) + x1
    return tn.layer_norm(x2, *p.ln_final, LN_EPS), weights


def encoder_stack(x: Tensor, params: Params, prefix: str, n_layers: int,
                  n_heads: int) -> tuple[Tensor, list[Tensor]]:
    maps = []
    for i in range(n_layers):
        x, w = encoder_block(x, BlockParams.from_params(params, f"{prefix}.{i}", n_heads))
        maps.append(w)
    return x, maps


def embed(x: Tensor, w: Tensor, b: Tensor, pe: Tensor) -> Tensor:
    """Project ``(..., tokens, in_dim)`` to model width and add the first ``tokens`` rows of ``pe``."""
    tokens = x.shape[-2]
    if tokens > pe.shape[0]:
        raise ShapeError(f"embed: {tokens} tokens exceed positional table of {pe.shape[0]} rows")
    table = pe if tokens == pe.shape[0] else pe[:tokens]
    return linear(x, w, b) + table
