"""Training losses and pose-evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(5.0, 150.0 + 1e-9, 5.0)


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 1.0
    lambda_r: float = 1.0

    def __post_init__(self):
        if self.lambda_m < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_m == 0 and self.lambda_r == 0:
            raise ValueError("loss weights cannot both be zero")


# -- losses ------------------------------------------------------------------

def _mean_joint_distance(pred: Tensor, gt: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    return tn.mean(tn.l2_norm_lastaxis(pred - gt))


def loss_m(pred_seq: Tensor, gt_seq: Tensor) -> Tensor:
    """Mean over frames and joints (and batch) of per-joint Euclidean error."""
    return _mean_joint_distance(pred_seq, tn.as_tensor(gt_seq))


def loss_r(pred_center: Tensor, gt_center: Tensor) -> Tensor:
    """Same as ``loss_m`` restricted to the center frame."""
    return _mean_joint_distance(pred_center, tn.as_tensor(gt_center))


def loss_total(lm: Tensor, lr: Tensor | None, w: LossWeights) -> Tensor:
    total = tn.scale(lm, w.lambda_m)
    if lr is not None and w.lambda_r:
        total = total + tn.scale(lr, w.lambda_r)
    return total


# -- metrics (plain numpy) ---------------------------------------------------

def mpjpe(pred: np.ndarray, gt: np.ndarray, root: int = 0) -> float:
    """Root-relative mean per-joint position error for one ``J x 3`` pose."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    return float(np.mean(np.linalg.norm((pred - pred[root]) - (gt - gt[root]), axis=-1)))


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, SimilarityTransform]:
    """Least-squares similarity transform (proper rotation, positive scale) mapping pred onto gt."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] < 3:
        raise ShapeError(f"procrustes needs matching J x 3 poses with J >= 3, got {pred.shape}, {gt.shape}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    sv = np.linalg.svd(g0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegeneratePoseError("target pose is degenerate (rank < 2 after centering)")
    u, s, vt = np.linalg.svd(g0.T @ p0)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rotation = u @ fix @ vt
    spread = float(np.sum(p0 * p0))
    # a prediction collapsed to a point is best matched by the target centroid
    scale = float(np.trace(np.diag(s) @ fix) / spread) if spread > 0 else 0.0
    translation = mu_g - scale * rotation @ mu_p
    tf = SimilarityTransform(scale, rotation, translation)
    return tf.apply(pred), tf


def p_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    aligned, _ = procrustes_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned - np.asarray(gt, float), axis=-1)))


def _root_relative_errors(pred_set, gt_set, root: int) -> np.ndarray:
    pred_set, gt_set = np.asarray(pred_set, float), np.asarray(gt_set, float)
    if pred_set.shape != gt_set.shape:
        raise ShapeError(f"prediction {pred_set.shape} and target {gt_set.shape} differ")
    rel_p = pred_set - pred_set[..., root:root + 1, :]
    rel_g = gt_set - gt_set[..., root:root + 1, :]
    err = np.linalg.norm(rel_p - rel_g, axis=-1)
    if err.shape[-1] < 2:
        raise ShapeError("PCK/AUC need at least one joint besides the root")
    # the root's error is identically zero after alignment, so it is left out
    return np.delete(err, root, axis=-1)


def per_joint_error(pred_set, gt_set, root: int = 0) -> np.ndarray:
    """Mean root-relative error of each joint over a ``(N, J, 3)`` set (root entry is 0)."""
    pred_set, gt_set = np.asarray(pred_set, float), np.asarray(gt_set, float)
    if pred_set.shape != gt_set.shape:
        raise ShapeError(f"prediction {pred_set.shape} and target {gt_set.shape} differ")
    rel = (pred_set - pred_set[..., root:root + 1, :]) - (gt_set - gt_set[..., root:root + 1, :])
    return np.linalg.norm(rel, axis=-1).reshape(-1, pred_set.shape[-2]).mean(axis=0)


def pck(pred_set, gt_set, threshold: float = PCK_THRESHOLD_MM, root: int = 0,
        mm_per_unit: float = 1000.0) -> float:
    """Percentage of non-root joints whose root-aligned error (in mm) is below ``threshold``."""
    if threshold <= 0:
        raise ValueError("PCK threshold must be positive")
    err_mm = _root_relative_errors(pred_set, gt_set, root) * mm_per_unit
    return float(100.0 * np.mean(err_mm < threshold))


def auc(pred_set, gt_set, root: int = 0, mm_per_unit: float = 1000.0) -> float:
    """Mean PCK over 5, 10, ..., 150 mm, scaled to [0, 1]."""
    err_mm = _root_relative_errors(pred_set, gt_set, root) * mm_per_unit
    return float(np.mean([np.mean(err_mm < t) for t in AUC_THRESHOLDS_MM]))


@dataclass
class MetricReport:
    mpjpe: float
    p_mpjpe: float
    pck: float
    auc: float
    n_poses: int
    per_clip: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"mpjpe={self.mpjpe!r}", f"p_mpjpe={self.p_mpjpe!r}", f"pck={self.pck!r}",
                 f"auc={self.auc!r}", f"n_poses={self.n_poses}"]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        return cls(**json.loads(text))


def build_report(preds: np.ndarray, gts: np.ndarray, root: int = 0,
                 mm_per_unit: float = 1000.0) -> MetricReport:
    """Aggregate metrics over ``N x J x 3`` center-frame predictions."""
    preds, gts = np.asarray(preds, float), np.asarray(gts, float)
    per_clip = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        per_clip.append({"index": i, "mpjpe": mpjpe(p, g, root), "p_mpjpe": p_mpjpe(p, g),
                         "pck": pck(p[None], g[None], root=root, mm_per_unit=mm_per_unit)})
    return MetricReport(
        mpjpe=float(np.mean([c["mpjpe"] for c in per_clip])),
        p_mpjpe=float(np.mean([c["p_mpjpe"] for c in per_clip])),
        pck=pck(preds, gts, root=root, mm_per_unit=mm_per_unit),
        auc=auc(preds, gts, root=root, mm_per_unit=mm_per_unit),
        n_poses=len(per_clip),
        per_clip=per_clip,
    )
