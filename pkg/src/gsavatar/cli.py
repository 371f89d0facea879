"""Command-line entry point: ``gsavatar <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .io import FormatError, read_png, write_json, write_png

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_DIMENSION = 5
EXIT_GRADCHECK = 6
EXIT_ABORTED = 7

log = logging.getLogger("gsavatar")


class CliError(Exception):
    def __init__(self, code: int, reason: str, detail: str = ""):
        super().__init__(detail or reason)
        self.code, self.reason, self.detail = code, reason, detail


def _fail(code: int, reason: str, detail: str = "") -> None:
    raise CliError(code, reason, detail)


# --- shared helpers -------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    apply_overrides(cfg, getattr(args, "set", None) or [])
    return cfg


def _workers(args) -> int:
    w = getattr(args, "workers", None)
    return max(1, os.cpu_count() or 1) if w is None else max(1, w)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        _fail(EXIT_MISSING, "missing-file", str(p))
    return p


def _dump(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))


def _camera_for(cameras: list, t: int):
    return cameras[t] if len(cameras) > 1 else cameras[0]


# --- commands -------------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    from .dataset import Sequence, save_sequence
    from .synthetic import make_scene

    cfg = _config(args)
    if args.seed is not None:
        cfg.scene.seed = args.seed
    out = Path(args.out)
    scene = make_scene(cfg.scene)
    seq = Sequence(
        scene.model, scene.cameras, scene.images, scene.masks, scene.background, scene.keypoints, scene.confidence,
        scene.face_vertices, scene.face_neutral, scene.init, scene.gt, scene.train, scene.heldout,
    )
    written = save_sequence(seq, out, extras={"colors": scene.colors, "log_scales": scene.log_scales})
    _dump(cfg, out)
    print(f"wrote {len(written)} files to {out} ({len(scene.images)} frames, {cfg.scene.size}x{cfg.scene.size})")
    return EXIT_OK


def fallback_init(model, keypoints: np.ndarray, confidence: np.ndarray, cameras: list):
    """Rest pose with a per-frame translation from linear least squares on the keypoints."""
    from .fit.register import pose_subset
    from .model import SequenceParams, shaped_template

    T = len(keypoints)
    params = SequenceParams.zeros(model, T)
    rest_v, rest_j = shaped_template(model, params.shape, None, None)
    idx = np.array([lm.index for lm in model.landmarks])
    is_joint = np.array([lm.kind == "joint" for lm in model.landmarks])
    ps = pose_subset(model, rest_v, rest_j, params.pose[:1], params.expression[:1], params.translation[:1], idx[~is_joint])
    pts = np.zeros((len(idx), 3))
    pts[is_joint] = ps.joints[0, idx[is_joint]]
    pts[~is_joint] = ps.vertices[0]
    for t in range(T):
        cam = _camera_for(cameras, t)
        R, tc = cam.rotation, cam.translation
        rows, rhs = [], []
        for k in np.flatnonzero(confidence[t] > 0):
            w = confidence[t, k]
            pc = R @ pts[k] + tc
            for axis, f, c in ((0, cam.fx, cam.cx), (1, cam.fy, cam.cy)):
                u = keypoints[t, k, axis] - c
                # u·(r3·(X+t)+tz) = f·(r_axis·(X+t)+t_axis), linear in t
                rows.append(w * (u * R[2] - f * R[axis]))
                rhs.append(w * (f * pc[axis] - u * pc[2]))
        if len(rows) >= 3:
            params.translation[t] = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    return params


def cmd_register(args) -> int:
    from .dataset import load_sequence
    from .fit.register import KeypointFrame, register_sequence
    from .model import SequenceParams

    cfg = _config(args)
    if args.iterations is not None:
        cfg.register.iterations = args.iterations
    seq = load_sequence(_require(args.data))
    if args.init:
        init = SequenceParams.load(_require(args.init))
    elif seq.init is not None:
        init = seq.init
    else:
        init = fallback_init(seq.model, seq.keypoints, seq.confidence, seq.cameras)
    if init.n_frames != len(seq):
        _fail(EXIT_DIMENSION, "frame-count-mismatch", f"init has {init.n_frames} frames, data has {len(seq)}")
    frames = [
        KeypointFrame(
            seq.keypoints[t], seq.confidence[t], seq.cameras[t],
            None if seq.face_vertices is None else seq.face_vertices[t], seq.images[t],
        )
        for t in range(len(seq))
    ]
    res = register_sequence(seq.model, frames, init, seq.face_neutral, cfg.register)
    out = Path(args.out)
    _dump(cfg, out)
    res.params.save(out / "params.blob")
    if res.texture is not None:
        write_png(out / "face_texture.png", res.texture)
    write_json(
        out / "registration.json",
        {
            "reprojection_px": res.reprojection_px,
            "face_visible": res.visible.astype(int).tolist(),
            "final_terms": {k: v for k, v in res.history[-1].items()} if res.history else {},
        },
    )
    print(f"registered {len(seq)} frames: mean reprojection {res.reprojection_px:.4f} px, face visible in {int(res.visible.sum())}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_sequence
    from .fit.metrics import evaluate
    from .fit.train import AvatarDataset, train_avatar, render_frame
    from .model import SequenceParams

    cfg = _config(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    cfg.train.workers = _workers(args)
    seq = load_sequence(_require(args.data))
    params = SequenceParams.load(_require(args.params))
    if params.n_frames != len(seq):
        _fail(EXIT_DIMENSION, "frame-count-mismatch", f"params have {params.n_frames} frames, data has {len(seq)}")
    visible, texture = None, None
    reg_dir = Path(args.params).parent
    if args.texture or (reg_dir / "face_texture.png").exists():
        texture = read_png(_require(args.texture or reg_dir / "face_texture.png"))
        info = reg_dir / "registration.json"
        if info.exists():
            visible = np.array(json.loads(info.read_text())["face_visible"], dtype=bool)
    data = AvatarDataset(seq.images, seq.masks, seq.cameras, seq.background, visible, texture)
    out = Path(args.out)
    _dump(cfg, out)
    res = train_avatar(seq.model, data, params, cfg.train, train_frames=seq.train, out_dir=out)
    report = {"iterations": cfg.train.iterations, "final_loss": res.history[-1]["total"] if res.history else None}
    for name, idx in (("train", seq.train or []), ("heldout", seq.heldout or [])):
        if idx:
            imgs = [render_frame(res.field, seq.model, res.canon, res.params, t, seq.cameras[t], seq.background, cfg.train.workers)[0] for t in idx]
            report[name] = evaluate(imgs, [seq.images[t] for t in idx], [seq.masks[t] for t in idx]).as_dict()
    write_json(out / "eval.json", report)
    msg = f"trained {cfg.train.iterations} iterations"
    if "heldout" in report:
        msg += f"; held-out PSNR {report['heldout']['mean_psnr']:.2f} dB, SSIM {report['heldout']['mean_ssim']:.4f}"
    print(msg)
    return EXIT_OK


def _load_for_animation(args):
    from .dataset import read_motion
    from .fit.train import load_checkpoint
    from .model import load_model

    model = load_model(_require(args.model))
    ckpt = load_checkpoint(_require(args.checkpoint))
    ident = ckpt.canon_identity
    expected = {"shape": (model.n_shape,), "joint_offset": (model.n_joints, 3), "face_offset": (len(model.face_vertex_index), 3)}
    for name, shape in expected.items():
        if ident[name].shape != shape:
            _fail(EXIT_DIMENSION, "checkpoint-model-mismatch", f"checkpoint {name} {ident[name].shape}, model expects {shape}")
    try:
        canon = ckpt.canonical(model)
    except ValueError as exc:
        _fail(EXIT_DIMENSION, "checkpoint-model-mismatch", str(exc))
    pose, expr, trans = read_motion(_require(args.motion), model)
    return model, ckpt, canon, pose, expr, trans


def _background(args, cam):
    if getattr(args, "background", None):
        bg = read_png(_require(args.background))
        if bg.shape[:2] != (cam.height, cam.width):
            _fail(EXIT_DIMENSION, "background-size-mismatch", f"{bg.shape[1]}x{bg.shape[0]} vs camera {cam.width}x{cam.height}")
        return bg
    return np.ones((cam.height, cam.width, 3))


def _render_motion(model, ckpt, canon, pose, expr, trans, cameras, args, out: Path) -> int:
    from .fit.avatar import Frame, animate
    from .fit.train import composite
    from .splat import render_gaussians

    out.mkdir(parents=True, exist_ok=True)
    p = ckpt.params
    for t in range(len(pose)):
        cam = _camera_for(cameras, t)
        _, cloud, _ = animate(ckpt.field, model, canon, Frame(pose[t], expr[t], trans[t]), p.shape, p.joint_offset, p.face_offset)
        res = render_gaussians(cloud, cam, workers=_workers(args), keep_cache=False)
        write_png(out / f"{t:04d}.png", composite(res.rgb, res.alpha, _background(args, cam)))
    return len(pose)


def cmd_animate(args) -> int:
    from .dataset import read_cameras
    from .fit.avatar import Frame, animate
    from .io import save_blob

    model, ckpt, canon, pose, expr, trans = _load_for_animation(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = ckpt.params
    for t in range(len(pose)):
        _, cloud, _ = animate(ckpt.field, model, canon, Frame(pose[t], expr[t], trans[t]), p.shape, p.joint_offset, p.face_offset)
        save_blob(
            out / f"cloud_{t:04d}.blob",
            {"positions": cloud.positions, "log_scales": cloud.log_scales, "colors": cloud.colors, "faces": cloud.faces},
            "gaussian_cloud",
            {"frame": t},
        )
    n = len(pose)
    if args.cameras:
        _render_motion(model, ckpt, canon, pose, expr, trans, read_cameras(_require(args.cameras)), args, out)
    print(f"animated {n} frames into {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .dataset import read_cameras

    model, ckpt, canon, pose, expr, trans = _load_for_animation(args)
    cameras = read_cameras(_require(args.cameras))
    if len(cameras) not in (1, len(pose)):
        _fail(EXIT_DIMENSION, "camera-count-mismatch", f"{len(cameras)} cameras for {len(pose)} frames")
    n = _render_motion(model, ckpt, canon, pose, expr, trans, cameras, args, Path(args.out))
    print(f"rendered {n} frames into {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        _fail(EXIT_GRADCHECK, "gradcheck-failed", ",".join(failed))
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_info(args) -> int:
    from .io import load_blob
    from .model import load_model

    if not (args.model or args.checkpoint or args.data):
        _fail(EXIT_USAGE, "usage", "info needs --model, --checkpoint or --data")
    if args.model:
        m = load_model(_require(args.model))
        print(
            f"model: vertices={m.n_vertices} faces={len(m.faces)} joints={m.n_joints} shape={m.n_shape} "
            f"expression={m.n_expr} landmarks={len(m.landmarks)} face_vertices={len(m.face_vertex_index)}"
        )
    if args.checkpoint:
        arrays, meta = load_blob(_require(args.checkpoint))
        n = len(arrays.get("field.pos_mesh", ()))
        frames = len(arrays.get("params.pose", ()))
        planes = arrays.get("field.body_plane")
        shape = "x".join(map(str, planes.shape)) if planes is not None else "-"
        print(f"checkpoint: points={n} frames={frames} triplane={shape} iteration={meta.get('iteration', '-')} subdivisions={meta.get('subdivisions', '-')}")
    if args.data:
        from .dataset import load_sequence

        seq = load_sequence(_require(args.data))
        h, w = seq.images[0].shape[:2]
        print(f"data: frames={len(seq)} size={w}x{h} keypoints={seq.keypoints.shape[1]} train={len(seq.train or [])} heldout={len(seq.heldout or [])}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsavatar", description="Animatable Gaussian avatars from monocular frames.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, workers=False):
        if config:
            sp.add_argument("--config", help="INI config file")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        if workers:
            sp.add_argument("--workers", type=int, help="render threads (default: all cores)")

    sp = sub.add_parser("make-synthetic", help="render a seeded synthetic sequence")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_make_synthetic)

    sp = sub.add_parser("register", help="fit pose, shape and offsets to keypoints")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", help="initial parameters (default: dataset init, else keypoint fallback)")
    sp.add_argument("--iterations", type=int)
    common(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("train", help="optimize the avatar")
    sp.add_argument("--data", required=True)
    sp.add_argument("--params", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--texture", help="face texture PNG (default: next to --params)")
    sp.add_argument("--iterations", type=int)
    common(sp, workers=True)
    sp.set_defaults(func=cmd_train)

    for name, func, help_ in (("animate", cmd_animate, "pose a checkpoint with a motion file"), ("render", cmd_render, "render a checkpoint")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--model", required=True)
        sp.add_argument("--motion", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--cameras", required=(name == "render"), help="camera JSON (one camera, or one per frame)")
        sp.add_argument("--background", help="background PNG (default: white)")
        common(sp, config=False, workers=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("info", help="print model, checkpoint or dataset dimensions")
    sp.add_argument("--model")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_info)
    return p


def _classify(exc: BaseException) -> tuple[int, str]:
    from .dataset import DimensionError
    from .fit.adam import NonFiniteGradient
    from .fit.train import TrainingAborted

    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING, "missing-file"
    if isinstance(exc, ConfigError):
        return EXIT_USAGE, "bad-config"
    if isinstance(exc, DimensionError):
        return EXIT_DIMENSION, "dimension-mismatch"
    if isinstance(exc, FormatError):
        return EXIT_FORMAT, "bad-format"
    if isinstance(exc, (TrainingAborted, NonFiniteGradient, FloatingPointError)):
        return EXIT_ABORTED, "non-finite"
    return EXIT_ERROR, "error"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        code, reason, detail = exc.code, exc.reason, exc.detail
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code, reason = _classify(exc)
        detail = str(exc)
        if code == EXIT_ERROR:
            log.debug("unhandled error", exc_info=True)
    detail = " ".join(str(detail).split())
    print(f"error: code={code} reason={reason} detail={detail}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
