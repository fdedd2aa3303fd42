"""Command-line front end.

Every command accepts ``--config FILE`` (``key = value`` lines, flags win),
``--seed`` and ``--out``, writes its outputs plus ``report.json`` (which
embeds the resolved configuration) into ``--out``, and exits with 0 on
success, 2 on invalid input and 3 when a solver does not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import embeddings as emb
from . import io
from . import metrics as met
from . import multicam as mc
from . import photometric as ph
from . import scanproc as sp
from . import synth
from .cameras import EUCM, MODELS, UCM, Brown, DoubleSphere, Pinhole, camera_from_dict, camera_to_json
from .errors import CamGeoError, FormatError
from .geometry import Pose, compose

log = logging.getLogger("camgeo")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3

DEFAULT_CAMERAS = {
    "pinhole": Pinhole(180.0, 180.0, 191.5, 127.5),
    "brown": Brown(180.0, 180.0, 191.5, 127.5, -0.28, 0.07, 0.0, 1e-4, -2e-4),
    "ucm": UCM(235.4, 245.1, 186.5, 132.6, 0.650),
    "eucm": EUCM(235.6, 245.4, 186.4, 132.7, 0.597, 1.112),
    "ds": DoubleSphere(181.4, 188.9, 186.4, 132.6, 0.571, -0.230),
}


class UsageError(CamGeoError):
    pass


# helpers ------------------------------------------------------------------------


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        size = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 384x256, got {text!r}") from None
    if min(size) <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return size


def parse_params(text: str) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"expected name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"parameter {k.strip()!r} is not a number") from None
    return out


def load_camera(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(str(exc.strerror or exc), path) from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    try:
        return camera_from_dict(d)
    except (CamGeoError, TypeError, AttributeError) as exc:
        raise FormatError(str(exc), path) from None


def load_pose(path) -> Pose:
    path = Path(path)
    try:
        return Pose.from_text(path.read_text())
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


def _need(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise FormatError("file not found", path)
    return Path(path)


def write_report(out: Path, command: str, args, results: dict) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config_file")}
    report = {"command": command, "config": _jsonable(cfg), "results": _jsonable(results)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


# commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = args.out
    rng_seed = args.seed
    cam = DEFAULT_CAMERAS[args.model]
    if args.params:
        cam = cam.with_params([args.params.get(n, v) for n, v in zip(cam.param_names(), cam.params())])
        unknown = set(args.params) - set(cam.param_names())
        if unknown:
            raise UsageError(f"unknown {cam.name} parameters: {sorted(unknown)}")
    W, H = args.size
    results: dict = {"camera": cam.to_dict()}
    if args.scene == "calibration":
        corrs, poses = synth.calibration_views(cam, (W, H), args.views, args.noise, seed=rng_seed)
        (out / "camera.json").write_text(camera_to_json(cam))
        cal.save_correspondences(corrs, out / "correspondences.jsonl")
        (out / "poses").mkdir(exist_ok=True)
        for k, p in enumerate(poses):
            (out / "poses" / f"view_{k:03d}.txt").write_text(p.to_text())
        results.update(views=args.views, points=corrs.n_points, noise=args.noise)
    elif args.scene == "plane":
        surf = [synth.tilted_plane()]
        rng = np.random.default_rng(rng_seed)
        rel = Pose.from_rotvec(rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3))
        it, dt, _ = synth.render(cam, Pose.identity(), (W, H), surf, rng_seed)
        ic, _, _ = synth.render(cam, rel, (W, H), surf, rng_seed)
        io.write_image(out / "target.png", it)
        io.write_image(out / "context.png", ic)
        io.write_depth(out / "depth.pfm", dt)
        (out / "pose.txt").write_text(rel.to_text())
        (out / "camera.json").write_text(camera_to_json(cam))
        results.update(valid_fraction=float(dt.valid.mean()))
    elif args.scene == "rig":
        rig = synth.yaw_rig(cam, args.yaws)
        scene = [synth.room()]
        bodies = {"prev": synth.body_motion(-args.step), "cur": Pose.identity(), "next": synth.body_motion(args.step)}
        files = []
        for k in range(len(rig)):
            name = f"cam{k}.json"
            (out / name).write_text(camera_to_json(rig.cameras[k]))
            files.append(name)
            for tag, body in bodies.items():
                img, depth, _ = synth.render(rig.cameras[k], compose(rig.extrinsics[k], body), (W, H), scene, rng_seed)
                io.write_image(out / f"cam{k}_{tag}.png", img)
                io.write_depth(out / f"cam{k}_{tag}.pfm", depth)
            for tag in ("prev", "next"):
                ego = synth.ego_motion(rig.extrinsics[k], bodies["cur"], bodies[tag])
                (out / f"cam{k}_ego_{tag}.txt").write_text(ego.to_text())
        mc.save_rig(rig, out / "rig.json", files)
        results.update(cameras=len(rig))
    elif args.scene == "panorama":
        pano = synth.surface_panorama(H, W, [synth.room()], rng_seed)
        io.write_image(out / "pano_rgb.png", pano.rgb)
        io.write_pfm(out / "pano_range.pfm", pano.range)
        results.update(valid_fraction=float(pano.valid.mean()))
    write_report(out, "synth", args, results)
    return EXIT_OK


def _init_model(args):
    if args.init:
        return load_camera(args.init)
    if args.model is None:
        raise UsageError("give --init CAMERA.json or --model NAME")
    W, H = args.size
    base = Pinhole(W / 2, W / 2, W / 2, H / 2)
    extra = {"ucm": {"alpha": 0.5}, "eucm": {"alpha": 0.5, "beta": 1.0}, "ds": {"alpha": 0.5, "xi": 0.0}, "brown": dict(k1=0.0, k2=0.0, k3=0.0, p1=0.0, p2=0.0)}
    return MODELS[args.model](base.fx, base.fy, base.cx, base.cy, **extra.get(args.model, {}))


def _optimizer(args) -> cal.OptimizerConfig:
    return cal.OptimizerConfig(max_iters=args.max_iters, seed=args.seed)


def cmd_calibrate(args) -> int:
    corrs = cal.load_correspondences(_need(args.corrs, "corrs"))
    res = cal.refine(_init_model(args), corrs, _optimizer(args))
    (args.out / "camera.json").write_text(camera_to_json(res.model))
    write_report(args.out, "calibrate", args, res.to_dict())
    print(f"{res.model.name}: rms {res.rms:.4f} px, mse {res.mre:.5f} px^2, {res.iterations} iterations, converged={res.converged}")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_perturb(args) -> int:
    truth = load_camera(_need(args.camera, "camera"))
    corrs = cal.load_correspondences(_need(args.corrs, "corrs"))
    res = cal.perturb_and_recover(truth, corrs, args.factor, _optimizer(args))
    (args.out / "camera.json").write_text(camera_to_json(res.model))
    write_report(args.out, "perturb", args, res.to_dict())
    worst = max(res.relative_errors.values())
    print(f"factor {args.factor}: worst relative error {100 * worst:.3f}%, rms {res.rms:.4f} px, converged={res.converged}")
    for name, e in res.relative_errors.items():
        print(f"  {name:>6} {100 * e:8.4f}%")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_rectify(args) -> int:
    src = load_camera(_need(args.camera, "camera"))
    img = io.read_image(_need(args.image, "image"))
    if args.dst:
        dst = load_camera(args.dst)
        if not isinstance(dst, Pinhole):
            raise FormatError("destination camera must be a pinhole model", args.dst)
    else:
        f = args.focal if args.focal else src.fx
        dst = Pinhole(f, f, (img.shape[1] - 1) / 2, (img.shape[0] - 1) / 2)
    out, mask = cal.rectify(img, src, dst)
    io.write_image(args.out / "rectified.png", out)
    io.write_mask(args.out / "rectified_mask.png", mask)
    write_report(args.out, "rectify", args, {"dst": dst.to_dict(), "valid_fraction": float(mask.mean())})
    return EXIT_OK


def cmd_warp_eval(args) -> int:
    cam_t = load_camera(_need(args.camera, "camera"))
    cam_c = load_camera(args.context_camera) if args.context_camera else cam_t
    target = io.read_image(_need(args.target, "target"))
    context = io.read_image(_need(args.context, "context"))
    depth = io.read_depth(_need(args.depth, "depth"), args.d_min, args.d_max)
    pose = load_pose(_need(args.pose, "pose"))
    if depth.shape != target.shape[:2]:
        raise FormatError(f"depth size {depth.shape} does not match target {target.shape[:2]}", args.depth)
    loss, best, keep = ph.view_synthesis_loss(target, context, depth, pose, cam_t, cam_c, args.alpha, args.lambda_d, not args.no_automask)
    io.write_pfm(args.out / "loss_map.pfm", np.where(keep, best, 0.0))
    results = {"total_loss": loss, "photometric_mean": float(np.mean(best[keep])), "kept_fraction": float(keep.mean())}
    write_report(args.out, "warp-eval", args, results)
    print(f"total loss {loss:.6f} over {100 * keep.mean():.1f}% of pixels")
    return EXIT_OK


def cmd_metrics(args) -> int:
    if not args.pred or not args.gt or len(args.pred) != len(args.gt):
        raise UsageError("give matching --pred and --gt depth files")
    preds = [io.read_depth(_need(p, "pred")) for p in args.pred]
    gts = [io.read_depth(_need(g, "gt")) for g in args.gt]
    for p, g, name in zip(preds, gts, args.pred):
        if p.shape != g.shape:
            raise FormatError(f"prediction size {p.shape} differs from ground truth {g.shape}", name)
    if len(preds) == 1 and args.mode in ("none", "median"):
        report = met.evaluate(preds[0], gts[0], args.mode, d_max=args.d_max)
        per = [report]
    else:
        mode = {"median": "per-frame"}.get(args.mode, args.mode)
        per, report = met.evaluate_rig(preds, gts, mode, d_max=args.d_max)
    write_report(args.out, "metrics", args, {"average": report.to_dict(), "per_camera": [r.to_dict() for r in per]})
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_embed(args) -> int:
    cam = load_camera(_need(args.camera, "camera"))
    if not isinstance(cam, Pinhole):
        raise FormatError("camera embeddings need a pinhole camera", args.camera)
    pose = load_pose(args.pose) if args.pose else Pose.identity()
    cfg = emb.FourierConfig(args.k_o, args.k_r, args.mu, args.mu)
    E = emb.camera_embedding(cam, pose, args.height, args.width, cfg, args.ray_mode)
    emb.write_embedding(args.out / "embedding.bin", E)
    write_report(args.out, "embed", args, {"shape": list(E.shape), "dim": cfg.dim})
    print(f"embedding {E.shape[0]}x{E.shape[1]}x{E.shape[2]}")
    return EXIT_OK


def cmd_scanproc(args) -> int:
    rgb = io.read_image(_need(args.rgb, "rgb"))
    rng_m = io.read_pfm(_need(args.range, "range"))
    if rng_m.shape != rgb.shape[:2]:
        raise FormatError(f"range size {rng_m.shape} does not match color {rgb.shape[:2]}", args.range)
    pano = sp.Panorama(rgb, np.where(rng_m > 0, rng_m, 0.0))
    spec = sp.CropSpec(args.azimuth, args.elevation, args.width, args.height, args.fov_h, args.fov_v)
    crop, depth = sp.extract_crop(pano, spec)
    io.write_image(args.out / "crop.png", crop)
    io.write_pfm(args.out / "crop_range.pfm", depth.depth)
    results = {"valid_fraction": float(depth.valid.mean()), "camera": spec.camera().to_dict()}
    if args.normals:
        X, _ = spec.camera().unproject_with_mask(ph.pixel_grid(spec.height, spec.width))
        X = X / np.linalg.norm(X, axis=-1, keepdims=True) * depth.depth[..., None]
        N = sp.estimate_normals(X, depth.valid, seed=args.seed)
        io.write_pfm(args.out / "crop_normals.pfm", N)
        results["normal_fraction"] = float(np.mean(np.linalg.norm(N, axis=-1) > 0))
    write_report(args.out, "scanproc", args, results)
    return EXIT_OK


# parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_file", type=Path, help="key = value file; explicit flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="camgeo", description="Camera geometry toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--scene", choices=["calibration", "plane", "rig", "panorama"], default="calibration")
    s.add_argument("--model", choices=sorted(DEFAULT_CAMERAS), default="ucm")
    s.add_argument("--params", type=parse_params, help="override camera parameters, e.g. alpha=0.6,fx=230")
    s.add_argument("--size", type=parse_size, default=(384, 256), help="WxH")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--noise", type=float, default=0.2, help="pixel noise std")
    s.add_argument("--yaws", type=float, nargs="+", default=[0.0, 75.0])
    s.add_argument("--step", type=float, default=1.0, help="rig forward motion per frame (m)")
    s.set_defaults(func=cmd_synth)

    for name, fn, helptext in (("calibrate", cmd_calibrate, "refine intrinsics from correspondences"), ("perturb", cmd_perturb, "perturb-and-recover experiment")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--corrs", type=Path)
        c.add_argument("--max-iters", type=int, default=200)
        if name == "calibrate":
            c.add_argument("--init", type=Path, help="initial camera JSON")
            c.add_argument("--model", choices=sorted(MODELS))
            c.add_argument("--size", type=parse_size, default=(384, 256))
        else:
            c.add_argument("--camera", type=Path, help="ground-truth camera JSON")
            c.add_argument("--factor", type=float, default=1.10)
        c.set_defaults(func=fn)

    r = sub.add_parser("rectify", parents=[common], help="resample an image into a pinhole camera")
    r.add_argument("--image", type=Path)
    r.add_argument("--camera", type=Path)
    r.add_argument("--dst", type=Path, help="destination pinhole JSON")
    r.add_argument("--focal", type=float, help="destination focal length (default: source fx)")
    r.set_defaults(func=cmd_rectify)

    w = sub.add_parser("warp-eval", parents=[common], help="self-supervised loss of a depth/pose pair")
    w.add_argument("--target", type=Path)
    w.add_argument("--context", type=Path)
    w.add_argument("--depth", type=Path)
    w.add_argument("--pose", type=Path, help="target-to-context pose text")
    w.add_argument("--camera", type=Path)
    w.add_argument("--context-camera", type=Path)
    w.add_argument("--alpha", type=float, default=ph.SSIM_WEIGHT)
    w.add_argument("--lambda-d", type=float, default=ph.SMOOTH_WEIGHT)
    w.add_argument("--d-min", type=float, default=ph.D_MIN)
    w.add_argument("--d-max", type=float, default=ph.D_MAX)
    w.add_argument("--no-automask", action="store_true")
    w.set_defaults(func=cmd_warp_eval)

    m = sub.add_parser("metrics", parents=[common], help="depth metrics")
    m.add_argument("--pred", type=Path, nargs="+")
    m.add_argument("--gt", type=Path, nargs="+")
    m.add_argument("--mode", choices=["none", "median", "shared"], default="none")
    m.add_argument("--d-max", type=float)
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("embed", parents=[common], help="export a camera embedding")
    e.add_argument("--camera", type=Path)
    e.add_argument("--pose", type=Path)
    e.add_argument("--height", type=int, default=32)
    e.add_argument("--width", type=int, default=48)
    e.add_argument("--k-o", type=int, default=20)
    e.add_argument("--k-r", type=int, default=10)
    e.add_argument("--mu", type=float, default=60.0)
    e.add_argument("--ray-mode", choices=["printed", "geometric"], default="printed")
    e.set_defaults(func=cmd_embed)

    k = sub.add_parser("scanproc", parents=[common], help="crop and normals from a panoramic scan")
    k.add_argument("--rgb", type=Path)
    k.add_argument("--range", type=Path)
    k.add_argument("--azimuth", type=float, default=0.0)
    k.add_argument("--elevation", type=float, default=0.0)
    k.add_argument("--width", type=int, default=64)
    k.add_argument("--height", type=int, default=48)
    k.add_argument("--fov-h", type=float, default=60.0)
    k.add_argument("--fov-v", type=float, default=45.0)
    k.add_argument("--normals", action="store_true")
    k.set_defaults(func=cmd_scanproc)
    return p


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise KeyError(command)


def read_config(path: Path, sub: argparse.ArgumentParser) -> dict:
    """Parse ``key = value`` lines into typed defaults for ``sub``."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(str(exc.strerror or exc), path) from None
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config_file",):
            raise FormatError(f"unknown option {key!r} for this command", path, lineno)
        act = actions[dest]
        try:
            if act.nargs in ("+", "*"):
                vals = value.split()
                out[dest] = [act.type(v) if act.type else v for v in vals]
            elif isinstance(act, argparse._StoreTrueAction):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                out[dest] = value.lower() in ("true", "1", "yes")
            else:
                out[dest] = act.type(value) if act.type else value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise FormatError(f"bad value for {key!r}: {exc}", path, lineno) from None
        if act.choices is not None and out[dest] not in act.choices:
            raise FormatError(f"{key!r} must be one of {sorted(act.choices)}", path, lineno)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config_file is not None:
            sub = _subparser(parser, args.command)
            sub.set_defaults(**read_config(args.config_file, sub))
            args = parser.parse_args(argv)
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (CamGeoError, OSError) as exc:
        print(f"camgeo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
