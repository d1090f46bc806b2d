"""Finite-difference audits of every differentiable op and of the assembled model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .metrics import LossWeights, loss_m, loss_r, loss_total
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor

TOY_CONFIG = ModelConfig(frames=3, joints=3, dim=4, n_heads=2, cte_heads=2, gim_spatial_layers=1,
                         gim_temporal_layers=1, ste_layers=1, cte_layers=1, refine_hidden=5)


@dataclass(frozen=True)
class CheckResult:
    kind: str  # "op" or "param"
    name: str
    error: float


def _op_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def leaf(*shape, low=None, high=None):
        data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
        return Tensor(data, requires_grad=True)

    def weighted(out: Tensor) -> Tensor:
        # a fixed random projection keeps every output entry in play
        w = Tensor(np.random.default_rng(0).normal(size=out.shape))
        return tn.sum(out * w)

    def case(build, *inputs):
        return lambda: weighted(build(*inputs)), list(inputs)

    a, b = leaf(3, 4), leaf(3, 4)
    pos = leaf(3, 4, low=0.5, high=2.0)
    return {
        "add": lambda: case(tn.add, a, leaf(4)),
        "sub": lambda: case(tn.sub, a, b),
        "mul": lambda: case(tn.mul, a, b),
        "div": lambda: case(tn.div, a, pos),
        "scale": lambda: case(lambda x: tn.scale(x, -1.7), a),
        "gelu": lambda: case(tn.gelu, a),
        "sqrt": lambda: case(tn.sqrt, pos),
        "exp": lambda: case(tn.exp, a),
        "sum": lambda: case(lambda x: tn.sum(x, axis=1, keepdims=True), a),
        "mean": lambda: case(lambda x: tn.mean(x, axis=0), a),
        "l2_norm_lastaxis": lambda: case(tn.l2_norm_lastaxis, pos),
        "matmul": lambda: case(tn.matmul, leaf(2, 3, 4), leaf(4, 5)),
        "softmax": lambda: case(lambda x: tn.softmax(x, axis=-1), a),
        "layer_norm": lambda: case(tn.layer_norm, leaf(2, 3, 5), leaf(5), leaf(5)),
        "framewise_conv1d": lambda: case(tn.framewise_conv1d, leaf(2, 4, 3), leaf(5, 4), leaf(5)),
        "reshape": lambda: case(lambda x: tn.gelu(tn.reshape(x, (2, 6))), a),
        "permute": lambda: case(lambda x: tn.permute(x, (2, 0, 1)), leaf(2, 3, 4)),
        "concat": lambda: case(lambda x, y: tn.concat([x, y], axis=1), a, leaf(3, 2)),
        "getitem": lambda: case(lambda x: tn.getitem(x, (slice(None), [0, 2, 2])), a),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def check_ops(seed: int = 0, h: float = 1e-6, ops: tuple[str, ...] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    out = []
    for name in ops or OP_NAMES:
        f, inputs = cases[name]()
        out.append(CheckResult("op", name, tn.finite_diff_check(f, inputs, h)))
    return out


def model_loss_fn(params, config: ModelConfig, seed: int = 0) -> Callable[[], Tensor]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(config.frames, config.joints, 2)))
    gt = Tensor(rng.normal(size=(config.frames, config.joints, 3)))
    weights = LossWeights()

    def f():
        seq, center, _ = model_forward(x, params, config)
        lr = loss_r(center, gt[config.center]) if config.refine_enabled else None
        return loss_total(loss_m(seq, gt), lr, weights)

    return f


def check_model(config: ModelConfig = TOY_CONFIG, seed: int = 0, h: float = 1e-4) -> list[CheckResult]:
    """Per-parameter relative error of the end-to-end loss gradient."""
    params = init_params(config, seed)
    report = tn.finite_diff_report(model_loss_fn(params, config, seed), params, h)
    return [CheckResult("param", name, err) for name, err in report.items()]


def worst(results: list[CheckResult]) -> CheckResult:
    return max(results, key=lambda r: r.error)
