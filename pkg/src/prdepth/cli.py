"""``prdepth`` command-line front end.

Exit codes: 0 success, 2 usage or config error, 3 data or file-format error,
4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from prdepth import autodiff as ad
from prdepth import config as cfgmod
from prdepth import data, imageio, metrics, network, volume
from prdepth import planes as pr
from prdepth.config import ConfigError, RunConfig

log = logging.getLogger("prdepth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- argument parsing -------------------------------------------------------

_FLAG_HELP = {
    "strategy": "plane placement: UR, UA, DR or DA",
    "D": "number of depth planes",
    "plane_d_min": "near plane for UA/DA",
    "plane_d_max": "far plane for UA/DA",
    "filter_radius": "guided filter window radius",
    "filter_eps": "guided filter regularizer",
    "lam": "weight of the unfiltered cross-entropy",
    "use_filter": "guided refinement on/off",
    "use_confidence": "confidence-weighted residual loss on/off",
    "base_channels": "width of the first encoder stage",
    "encoder_depth": "number of stride-2 encoder stages",
    "steps": "training steps",
    "lr": "learning rate",
    "momentum": "SGD momentum (0 = plain SGD)",
    "seed": "random seed",
    "n_scenes": "number of scenes to synthesize",
    "height": "image height",
    "width": "image width",
    "samples": "sparse samples per image",
    "n_rects": "rectangles per synthetic scene",
    "depth_min": "nearest synthetic depth",
    "depth_max": "synthetic background depth",
    "slant": "slanted rectangles on/off",
}

_FLAG_TYPES: Dict[str, Callable] = {"int": int, "float": float, "bool": cfgmod.parse_bool}


def _add(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        kind = cfgmod.key_type(name)
        p.add_argument(
            "--" + name.replace("_", "-"),
            dest=name,
            type=_FLAG_TYPES.get(kind, str),
            default=argparse.SUPPRESS,
            help=_FLAG_HELP.get(name),
        )


PLANE_KEYS = ("strategy", "D", "plane_d_min", "plane_d_max")
FILTER_KEYS = ("filter_radius", "filter_eps")
NET_KEYS = PLANE_KEYS + FILTER_KEYS + (
    "lam", "use_filter", "use_confidence", "base_channels", "encoder_depth", "seed",
)
SYNTH_KEYS = ("n_scenes", "height", "width", "samples", "n_rects", "depth_min", "depth_max", "slant", "seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prdepth", description="Plane-residual depth completion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, *keys):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        _add(p, *keys)
        return p

    command("synth", "write a synthetic dataset", "out", *SYNTH_KEYS)
    command("sample", "sparsify a dense depth map", "depth", "out", "samples", "seed")
    command("encode", "depth map to plane and residual maps", "depth", "sparse", "plane", "residual", "planes", *PLANE_KEYS)
    command("decode", "plane and residual maps back to depth", "plane", "residual", "planes", "out")
    command("filter", "guided-filter a logit volume", "logits", "guide", "out", *FILTER_KEYS)
    command(
        "train", "train the toy network", "data", "checkpoint", "log", "steps", "lr", "momentum", *NET_KEYS
    )
    command("infer", "run a checkpoint on one scene", "checkpoint", "scene", "out", *NET_KEYS)
    command(
        "eval", "score predictions against ground truth",
        "gt_dir", "pred_dir", "checkpoint", "data", "report", "inverse_unit", *NET_KEYS,
    )
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    file_values: Dict = {}
    source = args.config
    if source is None and args.command in ("infer", "eval") and flags.get("checkpoint"):
        sidecar = Path(flags["checkpoint"] + ".cfg")
        source = sidecar if sidecar.exists() else None
    if source is not None:
        try:
            file_values = cfgmod.read_file(source)
        except OSError as exc:
            raise UsageError(f"cannot read config {source}: {exc}") from exc
    run = cfgmod.build(file_values, flags)
    if run.inverse_unit not in ("1/m", "1/km"):
        raise UsageError("inverse_unit must be 1/m or 1/km")
    return run


# --- helpers ----------------------------------------------------------------


def _require(run: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(run, k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _must_exist(*paths) -> None:
    for path in paths:
        if not Path(path).exists():
            raise DataError(f"no such file or directory: {path}")


def _writable_parent(*paths) -> None:
    for path in paths:
        parent = Path(path).resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        if not os.access(parent, os.W_OK):
            raise DataError(f"cannot write to {parent}")


def _read_depth(path) -> np.ndarray:
    img = imageio.read_pfm(path)
    if img.ndim != 2:
        raise DataError(f"{path}: expected a single-channel depth map")
    return img.astype(np.float64)


def _load_planes(path) -> pr.DepthPlaneSet:
    try:
        return pr.DepthPlaneSet.from_text(Path(path).read_text())
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad plane file ({exc})") from exc


def _load_params(run: RunConfig):
    _must_exist(run.checkpoint)
    net_config = run.network_config()
    try:
        return network.params_from_arrays(ad.load_checkpoint(run.checkpoint), net_config), net_config
    except ad.CheckpointError as exc:
        raise DataError(str(exc)) from exc


# --- commands ---------------------------------------------------------------


def cmd_synth(run: RunConfig) -> None:
    _require(run, "out")
    params = data.SceneParams(n_rects=run.n_rects, depth_min=run.depth_min, depth_max=run.depth_max, slant=run.slant)
    params.validate()
    if run.n_scenes < 1:
        raise UsageError("n_scenes must be at least 1")
    root = Path(run.out)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(run.n_scenes):
        scene_seed, sample_seed = (int(s) for s in np.random.SeedSequence([run.seed, i]).generate_state(2))
        scene = data.synth_scene(scene_seed, run.height, run.width, params)
        scene.sparse = data.sample_sparse(scene.depth_gt, run.samples, sample_seed)
        path = data.scene_dir(root, i)
        data.write_scene(path, scene)
        print(f"{path.name} scene_seed={scene_seed} sample_seed={sample_seed}")


def cmd_sample(run: RunConfig) -> None:
    _require(run, "depth", "out")
    _must_exist(run.depth)
    _writable_parent(run.out)
    depth = _read_depth(run.depth)
    imageio.write_pfm(run.out, data.sample_sparse(depth, run.samples, run.seed))


def cmd_encode(run: RunConfig) -> None:
    _require(run, "depth", "plane", "residual")
    _must_exist(run.depth, *([run.sparse] if run.sparse else []))
    planes_path = run.planes or run.plane + ".planes"
    _writable_parent(run.plane, run.residual, planes_path)
    depth = _read_depth(run.depth)
    range_source = _read_depth(run.sparse) if run.sparse else depth
    planes = pr.make_planes(run.strategy, run.D, run.plane_d_min, run.plane_d_max, sparse=range_source)
    pmap, clamped = pr.encode(depth, planes, valid=depth > 0)
    pmap.save(run.plane, run.residual)
    Path(planes_path).write_text(planes.to_text())
    log.info("planes (%s): %s", planes.strategy.value, " ".join(f"{d:.6g}" for d in planes.depths))
    if clamped:
        log.info("%d pixels clamped to the end planes", clamped)


def cmd_decode(run: RunConfig) -> None:
    _require(run, "plane", "residual", "planes", "out")
    _must_exist(run.plane, run.residual, run.planes)
    _writable_parent(run.out)
    pmap = pr.PRMap.load(run.plane, run.residual)
    imageio.write_pfm(run.out, pr.decode(pmap, _load_planes(run.planes)))


def _read_guide(path, D: int, hw) -> np.ndarray:
    if str(path).lower().endswith(".ppm"):
        guide = imageio.uint8_to_rgb(imageio.read_ppm(path)).mean(axis=0)[None]
    else:
        guide = imageio.read_pfm_stack(path).astype(np.float64)
    if guide.shape[1:] != tuple(hw) or guide.shape[0] not in (1, D):
        raise DataError(f"guide {guide.shape} does not fit a {D}x{hw[0]}x{hw[1]} volume")
    return np.broadcast_to(guide, (D,) + tuple(hw)).copy()


def cmd_filter(run: RunConfig) -> None:
    _require(run, "logits", "guide", "out")
    _must_exist(run.logits, run.guide)
    _writable_parent(run.out)
    logits, depths = volume.load_volume(run.logits)
    guide = _read_guide(run.guide, logits.shape[0], logits.shape[1:])
    volume.save_volume(run.out, volume.guided_filter(logits, guide, run.filter_radius, run.filter_eps), depths)


def cmd_train(run: RunConfig) -> None:
    _require(run, "data", "checkpoint")
    _must_exist(run.data)
    log_path = run.log or run.checkpoint + ".log.csv"
    _writable_parent(run.checkpoint, log_path)
    if run.steps < 0 or run.lr < 0:
        raise UsageError("steps and lr must be non-negative")
    dataset = data.load_dataset(run.data)
    if not dataset:
        raise DataError(f"no scenes under {run.data}")
    net_config = run.network_config()
    params, reports = network.train(dataset, net_config, run.steps, run.lr, log_path=log_path)
    ad.save_checkpoint(run.checkpoint, network.params_to_arrays(params))
    Path(run.checkpoint + ".cfg").write_text(run.to_text(only=NET_KEYS + ("momentum",)))
    if reports:
        log.info("step 0 total %.6g, step %d total %.6g", reports[0].total, len(reports) - 1, reports[-1].total)


def cmd_infer(run: RunConfig) -> None:
    _require(run, "checkpoint", "scene", "out")
    _must_exist(run.scene)
    params, net_config = _load_params(run)
    scene = data.read_scene(run.scene)
    if scene.sparse is None:
        raise DataError(f"{run.scene} has no sparse.pfm")
    depth, plane_map, conf = network.infer(scene.rgb, scene.sparse, params, net_config)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_pfm(out / "depth.pfm", depth)
    imageio.write_pgm(out / "plane.pgm", plane_map.astype(np.uint16))
    imageio.write_pfm(out / "conf.pfm", conf)


def _predictions(run: RunConfig, names: List[str]) -> Dict[str, np.ndarray]:
    preds: Dict[str, np.ndarray] = {}
    if run.pred_dir is not None:
        for name in names:
            path = Path(run.pred_dir) / name / "depth.pfm"
            _must_exist(path)
            preds[name] = _read_depth(path)
        return preds
    params, net_config = _load_params(run)
    for name in names:
        scene = data.read_scene(Path(run.data) / name)
        if scene.sparse is None:
            raise DataError(f"{name} has no sparse.pfm")
        preds[name] = network.infer(scene.rgb, scene.sparse, params, net_config)[0]
    return preds


def cmd_eval(run: RunConfig) -> None:
    _require(run, "gt_dir", "report")
    if (run.pred_dir is None) == (run.checkpoint is None):
        raise UsageError("give exactly one of --pred-dir or --checkpoint")
    if run.checkpoint is not None:
        _require(run, "data")
        _must_exist(run.data)
    _must_exist(run.gt_dir)
    _writable_parent(run.report)
    names = [p.name for p in data.list_scenes(run.gt_dir)]
    if not names:
        raise DataError(f"no scenes under {run.gt_dir}")
    preds = _predictions(run, names)

    scale = 1000.0 if run.inverse_unit == "1/km" else 1.0
    all_pred, all_gt = [], []
    rows = []
    for name in names:
        gt = _read_depth(Path(run.gt_dir) / name / "depth.pfm")
        if preds[name].shape != gt.shape:
            raise DataError(f"{name}: prediction {preds[name].shape} vs ground truth {gt.shape}")
        report = metrics.evaluate(preds[name], gt)
        rows.append([name] + report.row(scale))
        all_pred.append(preds[name].ravel())
        all_gt.append(gt.ravel())
    overall = metrics.evaluate(np.concatenate(all_pred), np.concatenate(all_gt))
    rows.append(["all"] + overall.row(scale))
    with open(run.report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene"] + overall.columns())
        writer.writerows(rows)
    print(overall.table(run.inverse_unit))


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "filter": cmd_filter,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        run = resolve_config(args)
        log.info("effective config:\n%s", run.to_text().rstrip())
        COMMANDS[args.command](run)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except network.TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (DataError, imageio.ImageFormatError, ad.CheckpointError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
