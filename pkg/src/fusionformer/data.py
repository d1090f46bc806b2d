"""Pose clips: file I/O, windowing, flip augmentation and a synthetic motion generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

POSE_FILE_VERSION = 1


class PoseFileError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...]
    root: int = 0
    left_right_pairs: tuple[tuple[int, int], ...] = ()
    parent: tuple[int, ...] | None = None
    # rest-pose offset of each joint from its parent, metres; only needed for synthesis
    offsets: tuple[tuple[float, float, float], ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        J = len(self.joint_names)
        if not 0 <= self.root < J:
            raise ValueError(f"root {self.root} out of range for {J} joints")
        seen = set()
        for a, b in self.left_right_pairs:
            for i in (a, b):
                if not 0 <= i < J:
                    raise ValueError(f"left/right index {i} out of range for {J} joints")
                if i in seen:
                    raise ValueError(f"joint {i} appears in more than one left/right pair")
                seen.add(i)
        if self.root in seen:
            raise ValueError("root joint cannot be paired")
        if self.parent is not None and len(self.parent) != J:
            raise ValueError("parent list length must equal joint count")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.n_joints)
        for a, b in self.left_right_pairs:
            perm[a], perm[b] = b, a
        return perm

    def bones(self) -> list[tuple[int, int]]:
        if self.parent is None:
            return []
        return [(p, j) for j, p in enumerate(self.parent) if p >= 0]


def _mirror(offsets):
    return [(-x, y, z) for x, y, z in offsets]


SIMPLE9 = SkeletonSpec(
    joint_names=("root", "l_hip", "l_knee", "r_hip", "r_knee",
                 "l_shoulder", "l_elbow", "r_shoulder", "r_elbow"),
    root=0,
    left_right_pairs=((1, 3), (2, 4), (5, 7), (6, 8)),
    parent=(-1, 0, 1, 0, 3, 0, 5, 0, 7),
    offsets=((0.0, 0.0, 0.0),
             (0.12, 0.0, 0.0), (0.0, -0.42, 0.0),
             (-0.12, 0.0, 0.0), (0.0, -0.42, 0.0),
             (0.18, 0.45, 0.0), (0.28, 0.0, 0.0),
             (-0.18, 0.45, 0.0), (-0.28, 0.0, 0.0)),
)

_H36M_LEFT = [(0.13, 0.0, 0.0), (0.0, -0.4, 0.0), (0.0, -0.38, 0.0)]
_H36M_LEFT_ARM = [(0.14, 0.0, 0.0), (0.0, -0.25, 0.0), (0.0, -0.22, 0.0)]

H36M17 = SkeletonSpec(
    joint_names=("hip", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
                 "spine", "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
                 "r_shoulder", "r_elbow", "r_wrist"),
    root=0,
    left_right_pairs=((4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)),
    parent=(-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
    offsets=tuple([(0.0, 0.0, 0.0)] + _mirror(_H36M_LEFT) + _H36M_LEFT
                  + [(0.0, 0.2, 0.0), (0.0, 0.18, 0.0), (0.0, 0.1, 0.0), (0.0, 0.1, 0.0)]
                  + _H36M_LEFT_ARM + _mirror(_H36M_LEFT_ARM)),
)

SKELETONS = {"simple9": SIMPLE9, "h36m17": H36M17}


@dataclass
class PoseClip:
    frames_2d: np.ndarray
    skeleton: SkeletonSpec
    frames_3d: np.ndarray | None = None
    fps: float = 50.0

    @property
    def n_frames(self) -> int:
        return self.frames_2d.shape[0]

    @property
    def center(self) -> int:
        return self.n_frames // 2

    def validate(self, odd_frames: bool = False):
        J = self.skeleton.n_joints
        if self.frames_2d.ndim != 3 or self.frames_2d.shape[1:] != (J, 2):
            raise ValueError(f"frames_2d has shape {self.frames_2d.shape}, expected (T, {J}, 2)")
        if not np.all(np.isfinite(self.frames_2d)):
            raise ValueError("frames_2d contains non-finite values")
        if self.frames_3d is not None:
            if self.frames_3d.shape != (self.n_frames, J, 3):
                raise ValueError(f"frames_3d has shape {self.frames_3d.shape}, "
                                 f"expected ({self.n_frames}, {J}, 3)")
            if not np.all(np.isfinite(self.frames_3d)):
                raise ValueError("frames_3d contains non-finite values")
        if odd_frames and self.n_frames % 2 == 0:
            raise ValueError(f"clip has an even frame count {self.n_frames}")


@dataclass
class Dataset:
    clips: list[PoseClip]
    split: str = "train"

    def __post_init__(self):
        if self.clips:
            sk = self.clips[0].skeleton
            for i, c in enumerate(self.clips):
                if c.skeleton != sk:
                    raise ValueError(f"clip {i} uses a different skeleton")

    def __len__(self):
        return len(self.clips)

    @property
    def skeleton(self) -> SkeletonSpec:
        return self.clips[0].skeleton

    def has_3d(self) -> bool:
        return bool(self.clips) and all(c.frames_3d is not None for c in self.clips)


# -- file format -------------------------------------------------------------

def _reject_constant(token):
    raise PoseFileError(f"non-finite number token {token!r} is not allowed")


def _skeleton_from_json(d: dict, where: str) -> SkeletonSpec:
    try:
        names = tuple(str(n) for n in d["joints"])
        left, right = list(d.get("left", [])), list(d.get("right", []))
        root = int(d.get("root", 0))
    except (KeyError, TypeError) as exc:
        raise PoseFileError(f"{where}: malformed skeleton ({exc})") from None
    if len(left) != len(right):
        raise PoseFileError(f"{where}: 'left' and 'right' lists differ in length")
    parent = tuple(int(p) for p in d["parents"]) if "parents" in d else None
    preset = next((s for s in SKELETONS.values() if s.joint_names == names), None)
    try:
        return SkeletonSpec(names, root, tuple(zip(map(int, left), map(int, right))), parent,
                            offsets=preset.offsets if preset and preset.parent == parent else None)
    except ValueError as exc:
        raise PoseFileError(f"{where}: {exc}") from None


def _array(value, shape_tail: tuple[int, ...], where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (ValueError, TypeError):
        raise PoseFileError(f"{where}: ragged or non-numeric array") from None
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail or arr.shape[0] == 0:
        raise PoseFileError(f"{where}: shape {arr.shape}, expected (T, {', '.join(map(str, shape_tail))})"
                            f" (joint-count mismatch vs skeleton?)")
    if not np.all(np.isfinite(arr)):
        raise PoseFileError(f"{where}: non-finite value")
    return arr


def parse_pose_document(text: str, source: str = "<string>") -> list[PoseClip]:
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise PoseFileError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise PoseFileError(f"{source}: top level must be an object")
    if doc.get("version") != POSE_FILE_VERSION:
        raise PoseFileError(f"{source}: unsupported version {doc.get('version')!r}")
    if "skeleton" not in doc or "clips" not in doc:
        raise PoseFileError(f"{source}: missing 'skeleton' or 'clips'")
    skeleton = _skeleton_from_json(doc["skeleton"], f"{source}: skeleton")
    J = skeleton.n_joints
    clips = []
    for i, c in enumerate(doc["clips"]):
        where = f"{source}: clips[{i}]"
        if not isinstance(c, dict) or "frames_2d" not in c:
            raise PoseFileError(f"{where}: missing 'frames_2d'")
        f2 = _array(c["frames_2d"], (J, 2), f"{where}.frames_2d")
        f3 = None
        if c.get("frames_3d") is not None:
            f3 = _array(c["frames_3d"], (J, 3), f"{where}.frames_3d")
            if f3.shape[0] != f2.shape[0]:
                raise PoseFileError(f"{where}: frames_3d has {f3.shape[0]} frames, frames_2d {f2.shape[0]}")
        fps = c.get("fps", 50.0)
        if not isinstance(fps, (int, float)) or fps <= 0:
            raise PoseFileError(f"{where}.fps: must be a positive number")
        clips.append(PoseClip(f2, skeleton, f3, float(fps)))
    return clips


def load_pose_file(path) -> list[PoseClip]:
    path = Path(path)
    return parse_pose_document(path.read_text(), str(path))


def dump_pose_document(clips: list[PoseClip]) -> str:
    if not clips:
        raise ValueError("cannot write an empty clip list")
    sk = clips[0].skeleton
    skel = {"joints": list(sk.joint_names), "root": sk.root,
            "left": [a for a, _ in sk.left_right_pairs], "right": [b for _, b in sk.left_right_pairs]}
    if sk.parent is not None:
        skel["parents"] = list(sk.parent)
    out = []
    for c in clips:
        if c.skeleton != sk:
            raise ValueError("all clips in one file must share a skeleton")
        c.validate()
        entry = {"fps": c.fps, "frames_2d": c.frames_2d.tolist()}
        if c.frames_3d is not None:
            entry["frames_3d"] = c.frames_3d.tolist()
        out.append(entry)
    return json.dumps({"version": POSE_FILE_VERSION, "skeleton": skel, "clips": out},
                      allow_nan=False, separators=(",", ":"))


def save_pose_file(path, clips: list[PoseClip]) -> None:
    Path(path).write_text(dump_pose_document(clips))


# -- windowing and augmentation ----------------------------------------------

def window_clips(sequence: PoseClip, T: int, stride: int = 1) -> list[PoseClip]:
    """Sliding ``T``-frame windows; a window's label is its center frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if sequence.n_frames < T:
        raise ValueError(f"sequence of {sequence.n_frames} frames is shorter than window {T}")
    out = []
    for start in range(0, sequence.n_frames - T + 1, stride):
        sl = slice(start, start + T)
        f3 = None if sequence.frames_3d is None else sequence.frames_3d[sl].copy()
        out.append(PoseClip(sequence.frames_2d[sl].copy(), sequence.skeleton, f3, sequence.fps))
    return out


def flip_clip(clip: PoseClip, skeleton: SkeletonSpec | None = None) -> PoseClip:
    """Mirror about x = 0 and swap left/right joints."""
    skeleton = skeleton or clip.skeleton
    perm = skeleton.flip_permutation()

    def mirror(a):
        if a is None:
            return None
        a = a[:, perm].copy()
        a[..., 0] = -a[..., 0]
        return a

    return replace(clip, frames_2d=mirror(clip.frames_2d), frames_3d=mirror(clip.frames_3d))


def flip_poses(poses: np.ndarray, skeleton: SkeletonSpec) -> np.ndarray:
    """Mirror an array of poses shaped ``(..., J, C)``."""
    out = poses[..., skeleton.flip_permutation(), :].copy()
    out[..., 0] = -out[..., 0]
    return out


# -- synthesis ---------------------------------------------------------------

def _rotation(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices ``Rz @ Ry @ Rx`` for an array of ``(..., 3)`` Euler angles."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    one, zero = np.ones_like(ax), np.zeros_like(ax)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(ax.shape + (3, 3))
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(ax.shape + (3, 3))
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(ax.shape + (3, 3))
    return rz @ ry @ rx


def forward_kinematics(skeleton: SkeletonSpec, angles: np.ndarray) -> np.ndarray:
    """Joint positions ``(T, J, 3)`` from per-joint local Euler angles ``(T, J, 3)``."""
    if skeleton.parent is None or skeleton.offsets is None:
        raise ValueError("skeleton needs a kinematic tree and rest offsets for synthesis")
    offsets = np.asarray(skeleton.offsets, float)
    local = _rotation(angles)
    T, J = angles.shape[:2]
    glob = np.zeros((T, J, 3, 3))
    pos = np.zeros((T, J, 3))
    for j in range(J):
        p = skeleton.parent[j]
        if p < 0:
            glob[:, j] = local[:, j]
            continue
        pos[:, j] = pos[:, p] + np.einsum("tab,b->ta", glob[:, p], offsets[j])
        glob[:, j] = glob[:, p] @ local[:, j]
    return pos


def synth_clip(rng: np.random.Generator, T: int, skeleton: SkeletonSpec, fps: float = 50.0,
               noise: float = 0.0, noise_rng: np.random.Generator | None = None) -> PoseClip:
    J = skeleton.n_joints
    amp = rng.uniform(0.1, 0.6, size=(J, 3))
    freq = rng.uniform(0.3, 1.5, size=(J, 3))
    phase = rng.uniform(0.0, 2 * math.pi, size=(J, 3))
    t = np.arange(T, dtype=float)[:, None, None] / fps
    angles = amp * np.sin(2 * math.pi * freq * t + phase)
    f3 = forward_kinematics(skeleton, angles)
    f3 = f3 - f3[:, skeleton.root:skeleton.root + 1]
    f2 = f3[..., :2].copy()
    if noise > 0:
        f2 = f2 + (noise_rng or rng).normal(0.0, noise, size=f2.shape)
    return PoseClip(f2, skeleton, f3, fps)


def synth_dataset(seed: int, n_clips: int, T: int, skeleton: SkeletonSpec = SIMPLE9,
                  noise: float = 0.0, fps: float = 50.0, split: str = "train") -> Dataset:
    """Orthographically projected sinusoidal joint-angle motion; deterministic in ``seed``."""
    # separate streams so the motion does not depend on the noise level
    motion, jitter = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return Dataset([synth_clip(motion, T, skeleton, fps, noise, jitter) for _ in range(n_clips)], split)


def mean_bone_length(dataset: Dataset) -> float:
    bones = dataset.skeleton.bones()
    lengths = [np.linalg.norm(c.frames_3d[:, j] - c.frames_3d[:, p], axis=-1).mean()
               for c in dataset.clips for p, j in bones]
    return float(np.mean(lengths))
