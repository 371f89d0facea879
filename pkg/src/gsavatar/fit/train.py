"""Avatar optimization: render both paths, compare to the frames, step Adam."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..camera import Camera
from ..field import HEADS, AvatarField, field_arrays, field_from_arrays
from ..io import FormatError, load_blob, save_blob
from ..model import FACE, SequenceParams, TemplateModel
from ..objective import (
    LossWeights,
    asset_regs,
    crop_box,
    face_loss,
    face_mirror_table,
    image_loss,
    laplacian_reg,
)
from ..splat import GaussianCloud, render_gaussians, render_gaussians_backward
from .adam import AdamState, NonFiniteGradient, adam_step
from .avatar import Canonical, Frame, animate, animate_backward, build_canonical, init_log_scale

log = logging.getLogger(__name__)

FIELD_GROUPS = ("body_plane", "face_plane") + HEADS
PARAM_GROUPS = ("pose", "expression", "translation", "shape", "joint_offset")
CHECKPOINT_KIND = "checkpoint"


@dataclass
class AvatarDataset:
    images: list[np.ndarray]  # H×W×3 in [0, 1]
    masks: list[np.ndarray]  # H×W bool
    cameras: list[Camera]
    background: np.ndarray  # H×W×3
    face_visible: np.ndarray | None = None  # T bool
    face_texture: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class TrainConfig:
    iterations: int = 600
    seed: int = 0
    lr: float = 1e-3
    param_lr: dict[str, float] = field(
        default_factory=lambda: {"pose": 1e-4, "expression": 1e-4, "translation": 1e-5, "shape": 1e-4, "joint_offset": 1e-5}
    )
    frozen: tuple[str, ...] = ()
    weights: LossWeights = field(default_factory=LossWeights)
    subdivisions: int = 1
    channels: int = 32
    resolution: int = 128
    hidden: int = 128
    groups: int = 8
    checkpoint_every: int = 0
    workers: int = 1

    def frozen_groups(self) -> set[str]:
        out = set()
        for name in self.frozen:
            if name == "field":
                out.update(FIELD_GROUPS)
            elif name == "params":
                out.update(PARAM_GROUPS)
            else:
                out.add(name)
        return out


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, iteration: int, checkpoint: dict | None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    field: AvatarField
    params: SequenceParams
    canon: Canonical
    history: list[dict]
    identity: dict[str, np.ndarray]

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint(self.field, self.params, self.identity, meta or {})


def create_field(model: TemplateModel, canon: Canonical, cfg: TrainConfig) -> AvatarField:
    rng = np.random.default_rng(cfg.seed)
    return AvatarField.create(
        canon.pos_mesh,
        canon.labels == FACE,
        3 * (model.n_joints - 1),
        rng,
        channels=cfg.channels,
        resolution=cfg.resolution,
        hidden=cfg.hidden,
        groups=cfg.groups,
        init_log_scale=init_log_scale(canon),
    )


def composite(rgb: np.ndarray, alpha: np.ndarray, background: np.ndarray) -> np.ndarray:
    return rgb + (1.0 - alpha)[..., None] * background


def render_frame(field: AvatarField, model: TemplateModel, canon: Canonical, params: SequenceParams, t: int, camera: Camera, background, workers: int = 1):
    """Pose-path render of frame t over the background."""
    frame = Frame(params.pose[t], params.expression[t], params.translation[t])
    _, cloud, _ = animate(field, model, canon, frame, params.shape, params.joint_offset, params.face_offset)
    res = render_gaussians(cloud, camera, workers=workers, keep_cache=False)
    return composite(res.rgb, res.alpha, background), res


class AvatarObjective:
    """Loss and gradients of one training frame."""

    def __init__(self, model: TemplateModel, canon: Canonical, data: AvatarDataset, cfg: TrainConfig):
        self.model, self.canon, self.data, self.cfg = model, canon, data, cfg
        self.w = cfg.weights
        self.face_index = canon.face_index
        self.face_faces = canon.face_faces
        self.face_uv = None if canon.uv is None else canon.uv[self.face_index]
        self.face_table = face_mirror_table(model.vertex_mirror, model.face_vertex_index)
        self.crops = [crop_box(m) for m in data.masks]
        visible = data.face_visible if data.face_visible is not None else np.zeros(len(data), dtype=bool)
        self.face_on = visible & (data.face_texture is not None) & (self.face_uv is not None) & (self.w.face != 0.0)

    def _render_term(self, cloud: GaussianCloud, t: int):
        res = render_gaussians(cloud, self.data.cameras[t], workers=self.cfg.workers)
        img = composite(res.rgb, res.alpha, self.data.background)
        loss, parts, g = image_loss(img, self.data.images[t], self.crops[t], self.w.l1, self.w.ssim)
        d_alpha = -(g * self.data.background).sum(axis=-1)
        cg = render_gaussians_backward(res.cache, g, d_alpha, workers=self.cfg.workers)
        return loss, parts, cg

    def evaluate(self, field: AvatarField, params: SequenceParams, t: int):
        """Weighted total, per-term values, field gradients and parameter gradients for frame t."""
        w, canon = self.w, self.canon
        frame = Frame(params.pose[t], params.expression[t], params.translation[t])
        tri, pose, cache = animate(field, self.model, canon, frame, params.shape, params.joint_offset, params.face_offset)
        terms: dict[str, float] = {}
        g: dict[str, np.ndarray] = {}

        def add(key, grad):
            g[key] = grad if key not in g else g[key] + grad

        l_tri, p_tri, cg_tri = self._render_term(tri, t)
        l_pose, p_pose, cg_pose = self._render_term(pose, t)
        terms["image_tri"], terms["image_pose"] = l_tri, l_pose
        terms["l1"] = p_pose["l1"]
        terms["ssim"] = p_pose["ssim"]
        add("tri_positions", cg_tri.positions)
        add("tri_log_scales", cg_tri.log_scales)
        add("tri_colors", cg_tri.colors)
        add("pose_positions", cg_pose.positions)
        add("pose_log_scales", cg_pose.log_scales)
        add("pose_colors", cg_pose.colors)
        total = l_tri + l_pose

        terms["face"] = 0.0
        if self.face_on[t]:
            fl, d_fv = face_loss(
                pose.positions[self.face_index], self.face_faces, self.face_uv, self.data.face_texture,
                self.data.images[t], self.data.cameras[t], True,
            )
            terms["face"] = fl
            total += w.face * fl
            d = np.zeros_like(pose.positions)
            d[self.face_index] = w.face * d_fv
            add("pose_positions", d)

        st = cache.static
        op = canon.laplacian
        lp_a, g_a = laplacian_reg(st.offsets, None, operator=op)
        lp_b, g_b = laplacian_reg(st.offsets + cache.dv_pose, None, operator=op)
        terms["lap_position"] = lp_a + lp_b
        total += w.lap_position * (lp_a + lp_b)
        add("dv_tri", w.lap_position * (g_a + g_b))
        add("dv_pose", w.lap_position * g_b)
        ls_a, gs_a = laplacian_reg(tri.log_scales, None, operator=op)
        ls_b, gs_b = laplacian_reg(pose.log_scales, None, operator=op)
        terms["lap_scale"] = ls_a + ls_b
        total += w.lap_scale * (ls_a + ls_b)
        add("tri_log_scales", w.lap_scale * gs_a)
        add("pose_log_scales", w.lap_scale * gs_b)
        lc_a, gc_a = laplacian_reg(tri.colors, None, operator=op)
        lc_b, gc_b = laplacian_reg(pose.colors, None, operator=op)
        terms["lap_color"] = lc_a + lc_b
        total += w.lap_color * (lc_a + lc_b)
        add("tri_colors", w.lap_color * gc_a)
        add("pose_colors", w.lap_color * gc_b)

        values, rg = asset_regs(
            st.offsets, cache.dv_pose, pose.log_scales, tri.colors, canon.labels,
            params.joint_offset, params.face_offset, self.model.joint_mirror, self.face_table,
        )
        for k, v in values.items():
            terms[k] = v
            total += getattr(w, k) * v
        add("dv_tri", w.offset * rg["offset"]["dv_tri"])
        add("dv_pose", w.offset * rg["offset"]["dv_pose"])
        add("pose_log_scales", w.scale * rg["scale"]["log_scales"])
        add("tri_colors", w.hand_color * rg["hand_color"]["colors"])

        ag = animate_backward(field, self.model, canon, cache, g)
        pg = {
            "pose": np.zeros_like(params.pose),
            "expression": np.zeros_like(params.expression),
            "translation": np.zeros_like(params.translation),
            "shape": ag.shape,
            "joint_offset": ag.joint_offset + w.joint_offset * rg["joint_offset"]["joint_offset"] + w.symmetry * rg["symmetry"]["joint_offset"],
        }
        pg["pose"][t] = ag.pose
        pg["expression"][t] = ag.expression
        pg["translation"][t] = ag.translation
        terms["total"] = total
        return total, terms, ag.field, pg


IDENTITY = ("shape", "joint_offset", "face_offset")
PARAM_NAMES = ("pose", "expression", "translation", "shape", "joint_offset", "face_offset")


@dataclass
class Checkpoint:
    field: AvatarField
    params: SequenceParams
    canon_identity: dict[str, np.ndarray]  # shape / joint_offset / face_offset the canonical mesh was built from
    meta: dict

    def canonical(self, model: TemplateModel) -> Canonical:
        c = self.canon_identity
        canon = build_canonical(model, c["shape"], c["joint_offset"], c["face_offset"], int(self.meta.get("subdivisions", 1)))
        if canon.n_points != self.field.n_points:
            raise ValueError(f"checkpoint field has {self.field.n_points} points, model builds {canon.n_points}")
        return canon


def _checkpoint_arrays(field: AvatarField, params: SequenceParams, identity: dict) -> dict[str, np.ndarray]:
    arrays = {k: v.copy() for k, v in field_arrays(field).items()}
    arrays.update({f"params.{k}": v.copy() for k, v in params.arrays().items()})
    arrays.update({f"canon.{k}": np.asarray(v, dtype=np.float64).copy() for k, v in identity.items()})
    return arrays


def save_checkpoint(path, field: AvatarField, params: SequenceParams, identity: dict, meta: dict | None = None) -> None:
    save_blob(path, _checkpoint_arrays(field, params, identity), CHECKPOINT_KIND, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_blob(path, CHECKPOINT_KIND)
    missing = [f"params.{n}" for n in PARAM_NAMES if f"params.{n}" not in arrays]
    missing += [f"canon.{n}" for n in IDENTITY if f"canon.{n}" not in arrays]
    if missing:
        raise FormatError(f"{path}: checkpoint lacks {missing}")
    try:
        fld = field_from_arrays(arrays, groups=int(meta.get("groups", 8)))
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint lacks field array {exc}") from None
    params = SequenceParams(**{n: arrays[f"params.{n}"] for n in PARAM_NAMES})
    return Checkpoint(fld, params, {n: arrays[f"canon.{n}"] for n in IDENTITY}, meta)


def train_avatar(
    model: TemplateModel,
    data: AvatarDataset,
    params: SequenceParams,
    cfg: TrainConfig | None = None,
    train_frames: list[int] | None = None,
    field: AvatarField | None = None,
    out_dir: str | Path | None = None,
    canon: Canonical | None = None,
) -> TrainResult:
    """Fit the field and refine pose, expression, translation, shape and joint offsets on the given frames."""
    cfg = cfg or TrainConfig()
    params = params.copy()
    params.validate(model)
    if params.n_frames != len(data):
        raise ValueError(f"params have {params.n_frames} frames, dataset has {len(data)}")
    frames = list(range(len(data))) if train_frames is None else list(train_frames)
    if not frames:
        raise ValueError("no training frames")
    identity = {k: getattr(params, k).copy() for k in IDENTITY}
    if canon is None:
        canon = build_canonical(model, params.shape, params.joint_offset, params.face_offset, cfg.subdivisions)
    field = create_field(model, canon, cfg) if field is None else field
    objective = AvatarObjective(model, canon, data, cfg)
    if data.face_visible is not None and data.face_visible.any() and data.face_texture is None:
        log.warning("no face texture available; face loss disabled")

    fparams = field.parameters()
    state = AdamState(
        total_steps=cfg.iterations,
        lr=cfg.lr,
        group_lr={k: v for k, v in cfg.param_lr.items()},
        frozen=cfg.frozen_groups() | {"face_offset"},
    )
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"groups": cfg.groups, "subdivisions": cfg.subdivisions}
    last_good = {"iteration": 0, "arrays": _checkpoint_arrays(field, params, identity)}
    history: list[dict] = []
    writer = None
    csv_file = None
    try:
        for it in range(cfg.iterations):
            t = frames[int(rng.integers(len(frames)))]
            total, terms, fg, pg = objective.evaluate(field, params, t)
            lr = state.lr_at(it)
            row = {"iteration": it, "frame": t, **terms, "lr": lr}
            history.append(row)
            if out is not None:
                if writer is None:
                    csv_file = open(out / "metrics.csv", "w", newline="")
                    writer = csv.DictWriter(csv_file, fieldnames=list(row))
                    writer.writeheader()
                writer.writerow(row)
            if not np.isfinite(total):
                _abort(out, last_good, meta, f"non-finite loss at iteration {it}", it)
            grads = dict(fg)
            grads.update(pg)
            arrays = dict(fparams)
            arrays.update(params.arrays())
            try:
                adam_step(state, arrays, grads, it)
            except NonFiniteGradient as exc:
                _abort(out, last_good, meta, f"iteration {it}: {exc}", it)
            last_good = {"iteration": it + 1, "arrays": _checkpoint_arrays(field, params, identity)} if _needs_snapshot(cfg, it) else last_good
            if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{it + 1:06d}.blob", field, params, identity, {**meta, "iteration": it + 1})
    finally:
        if csv_file is not None:
            csv_file.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.blob", field, params, identity, {**meta, "iteration": cfg.iterations})
    return TrainResult(field, params, canon, history, identity)


def _needs_snapshot(cfg: TrainConfig, it: int) -> bool:
    every = cfg.checkpoint_every or 50
    return (it + 1) % every == 0


def _abort(out, last_good, meta, message, it):
    if out is not None:
        save_blob(out / "last_good.blob", last_good["arrays"], CHECKPOINT_KIND, {**meta, "iteration": last_good["iteration"]})
    raise TrainingAborted(message, it, last_good)
