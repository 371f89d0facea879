"""On-disk sequence layout: frames, masks, cameras, keypoints, face geometry and parameters."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .io import FormatError, load_blob, read_json, read_png, save_blob, write_json, write_png
from .model import SequenceParams, TemplateModel, load_model, save_model

MODEL_FILE = "model.blob"
CAMERAS_FILE = "cameras.json"
KEYPOINTS_FILE = "keypoints.json"
FACE_FILE = "face_geometry.blob"
BACKGROUND_FILE = "background.png"
SPLIT_FILE = "split.json"
MOTION_FILE = "motion.json"
INIT_FILE = "init_params.blob"
GT_FILE = "gt_params.blob"
GT_AVATAR_FILE = "gt_avatar.blob"


@dataclass
class Sequence:
    model: TemplateModel
    cameras: list[Camera]
    images: list[np.ndarray]
    masks: list[np.ndarray]
    background: np.ndarray
    keypoints: np.ndarray  # T×K×2
    confidence: np.ndarray  # T×K
    face_vertices: np.ndarray | None = None  # T×Fv×3
    face_neutral: np.ndarray | None = None  # Fv×3
    init: SequenceParams | None = None
    gt: SequenceParams | None = None
    train: list[int] | None = None
    heldout: list[int] | None = None

    def __len__(self) -> int:
        return len(self.images)


def write_motion(path, params: SequenceParams, frames: list[int] | None = None) -> None:
    idx = range(params.n_frames) if frames is None else frames
    write_json(
        path,
        {
            "frames": [
                {
                    "pose": params.pose[t].tolist(),
                    "expression": params.expression[t].tolist(),
                    "translation": params.translation[t].tolist(),
                }
                for t in idx
            ]
        },
    )


def read_motion(path, model: TemplateModel | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pose T×J×3, expression T×E, translation T×3) from a motion file."""
    doc = read_json(path)
    try:
        frames = doc["frames"]
        pose = np.array([f["pose"] for f in frames], dtype=np.float64)
        expr = np.array([f["expression"] for f in frames], dtype=np.float64)
        trans = np.array([f["translation"] for f in frames], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed motion file ({exc})") from None
    if len(frames) == 0:
        raise FormatError(f"{path}: motion has no frames")
    if pose.ndim != 3 or pose.shape[2] != 3 or expr.ndim != 2 or trans.shape != (len(frames), 3):
        raise FormatError(f"{path}: inconsistent motion array shapes")
    if model is not None and (pose.shape[1] != model.n_joints or expr.shape[1] != model.n_expr):
        raise DimensionError(
            f"{path}: motion has {pose.shape[1]} joints / {expr.shape[1]} expression codes, model has {model.n_joints} / {model.n_expr}"
        )
    return pose, expr, trans


class DimensionError(ValueError):
    pass


def write_cameras(path, cameras: list[Camera]) -> None:
    write_json(path, {"cameras": [c.to_dict() for c in cameras]})


def read_cameras(path) -> list[Camera]:
    doc = read_json(path)
    try:
        return [Camera.from_dict(c) for c in doc["cameras"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed camera file ({exc})") from None


def write_keypoints(path, names: list[str], keypoints: np.ndarray, confidence: np.ndarray) -> None:
    write_json(
        path,
        {
            "landmarks": list(names),
            "frames": [{"keypoints": kp.tolist(), "confidence": c.tolist()} for kp, c in zip(keypoints, confidence)],
        },
    )


def read_keypoints(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    doc = read_json(path)
    try:
        names = list(doc["landmarks"])
        kp = np.array([f["keypoints"] for f in doc["frames"]], dtype=np.float64)
        conf = np.array([f["confidence"] for f in doc["frames"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed keypoint file ({exc})") from None
    if kp.ndim != 3 or kp.shape[1:] != (len(names), 2) or conf.shape != kp.shape[:2]:
        raise FormatError(f"{path}: keypoint arrays do not match {len(names)} landmarks")
    return names, kp, conf


def save_sequence(seq: Sequence, directory, extras: dict[str, np.ndarray] | None = None) -> list[Path]:
    """Write every artifact of a sequence; returns the written paths in a fixed order."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    written = []

    def out(name):
        p = root / name
        written.append(p)
        return p

    save_model(seq.model, out(MODEL_FILE))
    write_cameras(out(CAMERAS_FILE), seq.cameras)
    for t, (img, mask) in enumerate(zip(seq.images, seq.masks)):
        write_png(out(f"images/{t:04d}.png"), img)
        write_png(out(f"masks/{t:04d}.png"), mask.astype(np.float64))
    write_png(out(BACKGROUND_FILE), seq.background)
    write_keypoints(out(KEYPOINTS_FILE), seq.model.landmark_names(), seq.keypoints, seq.confidence)
    if seq.face_vertices is not None:
        arrays = {"face_vertices": seq.face_vertices}
        if seq.face_neutral is not None:
            arrays["face_neutral"] = seq.face_neutral
        save_blob(out(FACE_FILE), arrays, "face_geometry")
    if seq.train is not None:
        write_json(out(SPLIT_FILE), {"train": list(seq.train), "heldout": list(seq.heldout or [])})
    if seq.init is not None:
        seq.init.save(out(INIT_FILE))
    if seq.gt is not None:
        seq.gt.save(out(GT_FILE))
        write_motion(out(MOTION_FILE), seq.gt)
    if extras:
        save_blob(out(GT_AVATAR_FILE), extras, "gt_avatar")
    return written


def load_sequence(directory, model: TemplateModel | None = None) -> Sequence:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such dataset directory")
    model = model or load_model(root / MODEL_FILE)
    cameras = read_cameras(root / CAMERAS_FILE)
    T = len(cameras)
    images, masks = [], []
    for t in range(T):
        images.append(read_png(root / f"images/{t:04d}.png"))
        m = read_png(root / f"masks/{t:04d}.png")
        masks.append((m[..., 0] if m.ndim == 3 else m) > 0.5)
    background = read_png(root / BACKGROUND_FILE)
    names, kp, conf = read_keypoints(root / KEYPOINTS_FILE)
    if names != model.landmark_names():
        raise DimensionError(f"keypoint schema {names} does not match the model landmarks")
    if len(kp) != T:
        raise DimensionError(f"{len(kp)} keypoint frames for {T} cameras")
    fv = fn = None
    if (root / FACE_FILE).exists():
        arrays, _ = load_blob(root / FACE_FILE, "face_geometry")
        fv, fn = arrays["face_vertices"], arrays.get("face_neutral")
    split = read_json(root / SPLIT_FILE) if (root / SPLIT_FILE).exists() else {"train": list(range(T)), "heldout": []}
    init = SequenceParams.load(root / INIT_FILE) if (root / INIT_FILE).exists() else None
    gt = SequenceParams.load(root / GT_FILE) if (root / GT_FILE).exists() else None
    return Sequence(model, cameras, images, masks, background, kp, conf, fv, fn, init, gt, split["train"], split["heldout"])
