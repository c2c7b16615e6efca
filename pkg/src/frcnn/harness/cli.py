"""``frcnn`` command-line entry point.

Every subcommand accepts ``--config FILE`` (``key = value`` lines) and
``--seed``. A value given as a flag wins over the config file, which wins
over the built-in default.
"""

import argparse
from dataclasses import asdict, fields
import logging
import os
import sys

import numpy as np

from .. import __version__
from ..kernels import BACKEND
from . import config as cfgmod

log = logging.getLogger("frcnn")

REQUIRED = object()


def _synthetic_options():
    from .synthetic import SyntheticConfig

    return {f.name: f.default for f in fields(SyntheticConfig)}


def _run_options(skip=()):
    from .train import RunConfig

    return {f.name: f.default for f in fields(RunConfig) if f.name not in skip and f.name != "seed"}


def _options():
    """Per-subcommand ``{option: default}``; REQUIRED marks mandatory paths."""
    train_skip = ("n_train", "n_test", "scale", "nms_threshold", "score_floor")
    return {
        "gen-data": {"out": REQUIRED, "n_train": 200, "n_test": 50, **_synthetic_options()},
        "train": {"data": REQUIRED, "out": REQUIRED, **_run_options(train_skip)},
        "detect": {"checkpoint": REQUIRED, "data": REQUIRED, "out": REQUIRED, "scale": "single",
                   "nms_threshold": 0.3, "score_floor": 0.0, "bbox_reg": True},
        "eval": {"detections": REQUIRED, "data": REQUIRED, "iou_match": 0.5, "num_classes": 0},
        "compress": {"checkpoint": REQUIRED, "layer": REQUIRED, "t": REQUIRED, "out": REQUIRED,
                     "method": "jacobi"},
        "bench-svd": {"u": 1024, "v": 1024, "t": 64, "rois": 2000, "repeats": 15, "threads": 1,
                      "method": "jacobi"},
        "ablate": {"seeds": 3, "workers": 0, "out": "", **_run_options(("mode",)),
                   **{f"synth_{k}": v for k, v in _synthetic_options().items()
                      if k != "num_classes"}},
        "gradcheck": {},
    }


HELP = {
    "gen-data": "generate a synthetic train/test dataset",
    "train": "train a detection head (multitask, cls-only or stage-wise)",
    "detect": "run detection over a dataset manifest",
    "eval": "per-class AP of a detection directory against a manifest",
    "compress": "split a trunk layer of a checkpoint with truncated SVD",
    "bench-svd": "time a full vs. SVD-compressed FC layer",
    "ablate": "multi-task vs. stage-wise ablation over several seeds",
    "gradcheck": "finite-difference checks of every backward pass",
}

TYPED = {"t": int, "layer": str, "out": str, "data": str, "checkpoint": str, "detections": str}


def _arg_type(name, default):
    if default is REQUIRED:
        return TYPED.get(name, str)
    if isinstance(default, bool):
        return cfgmod.parse_bool
    if isinstance(default, tuple):
        return cfgmod.parse_int_list
    return type(default)


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="frcnn", description="Fast R-CNN detection-head harness")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND})")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, opts in _options().items():
        p = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name],
                           argument_default=argparse.SUPPRESS)
        for key, default in opts.items():
            flag = "--" + key.replace("_", "-")
            shown = "required" if default is REQUIRED else f"default {default!r}"
            p.add_argument(flag, dest=key, type=_arg_type(key, default), help=shown)
    return parser


def resolve(args):
    """Merge flags, config file and defaults for the chosen subcommand."""
    all_opts = _options()
    defaults = {"seed": 0, **all_opts[args.command]}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    file_values = cfgmod.read_config(args.config) if getattr(args, "config", None) else {}
    values, unknown = cfgmod.merge(defaults, file_values, flags)
    known_anywhere = {k for opts in all_opts.values() for k in opts}
    stray = [k for k in unknown if k not in known_anywhere]
    if stray:
        raise cfgmod.ConfigError(f"unknown config keys: {', '.join(stray)}")
    missing = [k for k, v in values.items() if v is REQUIRED]
    if missing:
        raise cfgmod.ConfigError("missing required option(s): "
                                 + ", ".join("--" + k.replace("_", "-") for k in missing))
    return values


def _store_for(manifest):
    from .synthetic import FeatureStore, load_manifest, load_synthetic_config

    images = load_manifest(manifest)
    return images, FeatureStore(images, cfg=load_synthetic_config(manifest))


def cmd_gen_data(o):
    from .synthetic import SyntheticConfig, generate_dataset

    synth = SyntheticConfig(**{k: o[k] for k in _synthetic_options()})
    for path in generate_dataset(o["out"], o["n_train"], o["n_test"], synth, o["seed"]):
        print(path)
    return 0


def _run_config(o, **extra):
    from .train import RunConfig

    names = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in {**o, **extra}.items() if k in names})


def cmd_train(o):
    from ..net import save_checkpoint
    from .train import train, write_loss_log

    run = _run_config(o)
    images, store = _store_for(o["data"])
    progress = lambda r: log.info("iter %d  total %.4f  cls %.4f  loc %.4f", r.iteration,  # noqa: E731
                                  r.total, r.cls, r.loc)
    result = train(run, images, store, progress=progress)
    meta = {"run": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(run).items()},
            "data": os.path.abspath(o["data"])}
    save_checkpoint(o["out"], result.net, result.normalizer, result.state, meta)
    write_loss_log(os.path.join(o["out"], "loss.tsv"), result.log)
    first, last = result.log[0], result.log[-1]
    print(f"mode\t{run.mode}\niterations\t{len(result.log)}\n"
          f"initial_loss\t{first.total:.6f}\nfinal_loss\t{last.total:.6f}\ncheckpoint\t{o['out']}")
    return 0


def cmd_detect(o):
    from ..geometry import write_boxes
    from ..net import load_checkpoint
    from .train import detect_dataset

    net, normalizer, _, _ = load_checkpoint(o["checkpoint"])
    images, store = _store_for(o["data"])
    run = _run_config(o, num_classes=net.num_classes, nms_threshold=o["nms_threshold"])
    dets = detect_dataset(net, normalizer, images, store, run, use_bbox_reg=o["bbox_reg"])
    os.makedirs(o["out"], exist_ok=True)
    total = 0
    for im, d in zip(images, dets):
        write_boxes(os.path.join(o["out"], f"{im.image_id}.txt"), d.boxes, d.labels, d.scores)
        total += len(d)
    print(f"images\t{len(images)}\ndetections\t{total}\nout\t{o['out']}")
    return 0


def cmd_eval(o):
    from ..detect import Detections, evaluate_ap
    from ..geometry import read_boxes
    from .synthetic import load_manifest

    images = load_manifest(o["data"])
    dets = []
    for im in images:
        path = os.path.join(o["detections"], f"{im.image_id}.txt")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no detection file for image {im.image_id}: {path}")
        boxes, labels, scores = read_boxes(path)
        if len(boxes) and (labels is None or scores is None):
            raise ValueError(f"{path}: detections need label and score columns")
        dets.append(Detections(boxes, labels if labels is not None else np.zeros(0, np.int64),
                               scores if scores is not None else np.zeros(0)))
    K = o["num_classes"] or max([int(im.gt_labels.max()) for im in images if len(im.gt_labels)] or [0])
    if K < 1:
        raise ValueError("cannot infer the class count; pass --num-classes")
    report = evaluate_ap(dets, [(im.gt_boxes, im.gt_labels) for im in images], K, o["iou_match"])
    print("class\tAP")
    for k, ap in report.ap.items():
        print(f"{k}\t{'nan' if np.isnan(ap) else f'{100 * ap:.2f}'}")
    print(f"mAP\t{100 * report.mean_ap:.2f}")
    return 0


def cmd_compress(o):
    from ..net import load_checkpoint, save_checkpoint
    from ..svd import compress_network_layer, reconstruction_error

    net, normalizer, _, meta = load_checkpoint(o["checkpoint"])
    original = next((layer for layer in net.trunk if layer.name == o["layer"]), None)
    comp = compress_network_layer(net, o["layer"], o["t"], o["method"])
    meta = dict(meta, compressed={"layer": o["layer"], "t": o["t"], "method": o["method"]})
    # optimizer velocity refers to the uncompressed layer, so it is not carried over
    save_checkpoint(o["out"], net, normalizer, None, meta)
    print(f"layer\t{o['layer']}\nrank\t{comp.rank}\n"
          f"params_before\t{original.param_count()}\nparams_after\t{comp.param_count()}\n"
          f"relative_error\t{reconstruction_error(original, comp):.6g}\ncheckpoint\t{o['out']}")
    return 0


def cmd_bench_svd(o):
    from ..net import FcLayer
    from ..svd import bench_throughput, compress, flop_count

    rng = np.random.default_rng(o["seed"])
    layer = FcLayer(rng.normal(0, 1 / np.sqrt(o["v"]), (o["u"], o["v"])), np.zeros(o["u"]))
    comp = compress(layer, o["t"], o["method"])
    x = rng.normal(size=(o["rois"], o["v"]))
    full = bench_throughput(layer, x, o["repeats"], threads=o["threads"])
    fast = bench_throughput(comp, x, o["repeats"], threads=o["threads"])
    ratio = flop_count(comp, o["rois"]) / flop_count(layer, o["rois"])
    print(f"u\t{o['u']}\nv\t{o['v']}\nt\t{o['t']}\nrois\t{o['rois']}\n"
          f"flop_ratio\t{ratio:.6g}\nfull_ms\t{1e3 * full.median_s:.3f}\n"
          f"compressed_ms\t{1e3 * fast.median_s:.3f}\nspeedup\t{full.median_s / fast.median_s:.3f}")
    return 0


def cmd_ablate(o):
    from .ablation import run_ablation
    from .synthetic import SyntheticConfig

    if o["seeds"] < 3:
        raise ValueError("--seeds must be at least 3")
    run = _run_config(o)
    synth = SyntheticConfig(num_classes=run.num_classes,
                            **{k[6:]: v for k, v in o.items() if k.startswith("synth_")})
    seeds = list(range(o["seed"], o["seed"] + o["seeds"]))
    report = run_ablation(run, seeds, synth, workers=o["workers"] or None)
    text = report.to_tsv()
    sys.stdout.write(text)
    if o["out"]:
        with open(o["out"], "w") as fh:
            fh.write(text)
    if report.failures:
        for seed, msg in report.failures.items():
            print(f"frcnn ablate: seed {seed} failed: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(o):
    from .gradcheck import run_all

    results = run_all(o["seed"])
    print("check\tmax_rel_error\tthreshold\tstatus")
    for name, (err, thr, ok) in results.items():
        print(f"{name}\t{err:.3e}\t{thr:.0e}\t{'ok' if ok else 'FAIL'}")
    return 0 if all(ok for _, _, ok in results.values()) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "compress": cmd_compress,
    "bench-svd": cmd_bench_svd,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    """Run the CLI; returns the process exit code (2 for usage errors)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        options = resolve(args)
        return COMMANDS[args.command](options)
    except Exception as exc:
        print(f"frcnn {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
