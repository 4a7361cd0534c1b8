"""Command line: synth, train, infer, eval, gradcheck, ablate, replay.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__, data, formats
from .checkpoint import CheckpointError, checkpoint_from_model, load_checkpoint, save_checkpoint
from .gradcheck import CASES, DOUBLE_TOL, run_suite
from .inference import CountingPredictor, tiled_infer, tta_infer
from .metrics import LossConfig, psnr
from .model import ADNet, ModelConfig, ModelWeights, count_parameters
from .training import NonFiniteLossError, TrainConfig, evaluate, train_loop
from .validation import check_tile

SEED_ENV = "ADNET_SEED"
ABLATION_ROWS = (("Baseline", "baseline"), ("Variant 1", "deform_single"), ("Variant 2", "pcd_only"), ("Ours", "full"))
# reduced-scale defaults for the ablation harness
ABLATION_DEFAULTS = {
    "model.base_channels": 16,
    "model.drdb_count": 1,
    "model.drdb_growth": 16,
    "batch_size": 4,
    "patch_size": 32,
    "patch_stride": 32,
    "epochs": 20,
    "milestone": 20,
    "val_every": 20,
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def _coerce(value: str, default: Any, key: str):
    text = value.strip()
    if default is None:
        return None if text.lower() == "none" else int(text)
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        return type(default)(text)
    except ValueError as exc:
        raise UsageError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from exc


def default_config() -> Dict[str, Any]:
    """Every configurable key with its default; model keys carry a ``model.`` prefix."""
    flat = {f"model.{k}": v for k, v in ModelConfig().to_dict().items()}
    flat.update(TrainConfig().to_flat())
    return flat


def parse_assignments(lines: Sequence[str], source: str) -> Dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(config_file: Optional[str], overrides: Sequence[str], seed: int,
                   base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    cfg = default_config()
    cfg["seed"] = cfg["preprocess.seed"] = seed
    cfg.update(base or {})
    raw: Dict[str, str] = {}
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            raw.update(parse_assignments(fh.read().splitlines(), config_file))
    raw.update(parse_assignments(overrides, "--set"))
    for key, value in raw.items():
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(value, default_config()[key], key)
    return cfg


def split_config(cfg: Dict[str, Any]):
    model = {k[len("model."):]: v for k, v in cfg.items() if k.startswith("model.")}
    train = {k: v for k, v in cfg.items() if not k.startswith("model.")}
    try:
        return ModelConfig(**model), TrainConfig.from_flat(train)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def write_manifest(out_dir: str, command: str, argv: List[str], seed: int, config: Dict[str, Any],
                   inputs: Dict[str, Any], outputs: Sequence[str]):
    doc = {
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _parse_tile(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--tile expects HxW, got {text!r}") from exc
    return h, w


def _parse_motion(text: Optional[str]):
    if text is None or text == "none":
        return None
    try:
        dy, dx = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--motion expects DY,DX or none, got {text!r}") from exc
    return dy, dx


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    seed = _seed(args)
    motion = _parse_motion(args.motion)
    if args.count < 1 or args.height < 1 or args.width < 1:
        raise UsageError("count, height and width must be positive")
    formats.ensure_dir(args.out)
    names = data.scene_names(args.count)
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        scene = data.make_synthetic_scene(rng, args.height, args.width, motion, args.noise)
        data.save_scene(os.path.join(args.out, name), scene)
    argv = ["synth", "--count", str(args.count), "--height", str(args.height), "--width", str(args.width),
            "--motion", args.motion or "none", "--noise", repr(args.noise), "--seed", str(seed), "--out", args.out]
    cfg = {"count": args.count, "height": args.height, "width": args.width, "motion": list(motion or ()),
           "noise": args.noise, "exposures": list(data.SYNTH_EXPOSURES), "gamma": data.SYNTH_GAMMA}
    write_manifest(args.out, "synth", argv, seed, cfg, {}, names)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _train_argv(command, args, seed, extra):
    argv = [command, "--data", args.data, "--out", args.out, "--seed", str(seed)]
    if getattr(args, "val", None):
        argv += ["--val", args.val]
    if getattr(args, "variant", None):
        argv += ["--variant", args.variant]
    if args.config:
        argv += ["--config", args.config]
    for item in args.set or []:
        argv += ["--set", item]
    return argv + extra


def cmd_train(args) -> int:
    seed = _seed(args)
    base = {"model.variant": args.variant} if args.variant else {}
    cfg = resolve_config(args.config, args.set or [], seed, base)
    model_cfg, train_cfg = split_config(cfg)
    scenes = data.load_dataset(args.data)
    if not scenes:
        raise ValueError(f"no scenes under {args.data}")
    if any(s.gt is None for s in scenes):
        raise ValueError("training requires ground truth (gt.pfm) for every scene")
    val = data.load_dataset(args.val) if args.val else None
    formats.ensure_dir(args.out)
    log_path = os.path.join(args.out, "metrics.tsv")
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("epoch\tloss\tpsnr_l\tpsnr_mu\n")

        def on_epoch(rec):
            log.write(rec.line() + "\n")
            log.flush()
            if not args.quiet:
                print(rec.line(), flush=True)

        result = train_loop(ADNet(model_cfg, seed=seed), scenes, train_cfg, val, on_epoch, dump_dir=args.out)
    save_checkpoint(os.path.join(args.out, "best.adnt"), result.best)
    save_checkpoint(os.path.join(args.out, "last.adnt"), result.last)
    write_manifest(args.out, "train", _train_argv("train", args, seed, []), seed, cfg,
                   {"data": args.data, "val": args.val}, ["best.adnt", "last.adnt", "metrics.tsv"])
    print(f"trained {result.step} steps; checkpoints in {args.out}")
    return 0


def _load_model(path: str) -> ADNet:
    ckpt = load_checkpoint(path)
    try:
        return ADNet(ckpt.model_config, ModelWeights.from_arrays(ckpt.params, requires_grad=False))
    except ValueError as exc:
        raise CheckpointError(f"{path}: incompatible checkpoint ({exc})") from exc


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    scene = data.load_scene(args.scene)
    h, w = scene.shape
    m = model.config.size_multiple
    gamma = TrainConfig().preprocess.gamma_default
    x = data.to_network_input(scene, gamma).astype(model.dtype)
    counter = CountingPredictor(model.predict)
    predict = counter
    if args.tile:
        th, tw = _parse_tile(args.tile)
        check_tile((th, tw), args.overlap, m)
        if h % m or w % m:
            raise ValueError(f"scene {h}x{w} must be divisible by {m} for this checkpoint")

        def predict(z):
            return tiled_infer(counter, z, th, tw, args.overlap, m)

    elif h % m or w % m:
        raise ValueError(f"scene {h}x{w} is not divisible by {m}; enable tiling or crop the input")
    out = tta_infer(predict, x) if args.tta else predict(x)
    formats.ensure_dir(args.out)
    outputs = ["result.pfm"]
    formats.write_pfm(os.path.join(args.out, "result.pfm"), data.from_network_output(out))
    if args.attention:
        maps = model.attention_maps(x)
        for name, amap in zip(("attention_short.pgm", "attention_long.pgm"), maps):
            formats.write_pgm(os.path.join(args.out, name), amap[0])
            outputs.append(name)
    argv = ["infer", "--checkpoint", args.checkpoint, "--scene", args.scene, "--out", args.out]
    if args.tta:
        argv.append("--tta")
    if args.tile:
        argv += ["--tile", args.tile, "--overlap", str(args.overlap)]
    if args.attention:
        argv.append("--attention")
    write_manifest(args.out, "infer", argv, 0, {"tta": args.tta, "tile": args.tile, "overlap": args.overlap,
                                                "gamma": gamma}, {"checkpoint": args.checkpoint, "scene": args.scene},
                   outputs)
    print(f"forward passes: {counter.calls}")
    return 0


def cmd_eval(args) -> int:
    pred = formats.read_pfm(args.result)
    gt = formats.read_pfm(args.gt)
    if pred.shape != gt.shape:
        raise formats.DimensionMismatchError(f"result {pred.shape} and gt {gt.shape} differ")
    cfg = LossConfig(mu=args.mu)
    pl, pm = psnr(pred, gt, "linear", cfg), psnr(pred, gt, "mu", cfg)
    print(f"PSNR-l {pl:.4f}\tPSNR-mu {pm:.4f}")
    if args.json:
        print(json.dumps({"psnr_l": pl, "psnr_mu": pm}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    if args.all and args.ops:
        raise UsageError("give either --all or op names, not both")
    if not args.all and not args.ops:
        raise UsageError("name at least one op or pass --all")
    unknown = [o for o in args.ops if o not in CASES]
    if unknown:
        raise UsageError(f"unknown op(s): {', '.join(unknown)}; known: {', '.join(CASES)}")
    results = run_suite(None if args.all else args.ops, cases=args.cases, seed=_seed(args), tol=args.tol)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} cases passed (tol {args.tol:g})")
    return 1 if failed else 0


def ablation_table(rows) -> str:
    lines = [f"{'':<10}\t{'PSNR-l':>8}\t{'PSNR-mu':>8}\t{'params':>8}"]
    for label, pl, pm, n in rows:
        lines.append(f"{label:<10}\t{pl:8.4f}\t{pm:8.4f}\t{n:8d}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    seed = _seed(args)
    cfg = resolve_config(args.config, args.set or [], seed, ABLATION_DEFAULTS)
    scenes = data.load_dataset(args.data)
    if any(s.gt is None for s in scenes):
        raise ValueError("ablation requires ground truth for every scene")
    if len(scenes) < 2:
        raise ValueError("ablation needs at least two scenes (training and held-out)")
    n_val = max(1, len(scenes) // 4)
    train, val = scenes[:-n_val], scenes[-n_val:]
    formats.ensure_dir(args.out)
    rows, outputs = [], []
    for label, variant in ABLATION_ROWS:
        model_cfg, train_cfg = split_config({**cfg, "model.variant": variant})
        model = ADNet(model_cfg, seed=seed)
        n_params = model.num_parameters()
        if n_params != count_parameters(model_cfg):
            raise RuntimeError(f"{label}: parameter count mismatch")
        result = train_loop(model, train, train_cfg)
        metrics = evaluate(result.model, val, train_cfg)
        rows.append((label, metrics["psnr_l"], metrics["psnr_mu"], n_params))
        name = f"{variant}.adnt"
        save_checkpoint(os.path.join(args.out, name), checkpoint_from_model(
            result.model, train_cfg.to_flat(), result.adam, result.step, metrics))
        outputs.append(name)
        if not args.quiet:
            print(f"{label}: PSNR-l {metrics['psnr_l']:.4f}  PSNR-mu {metrics['psnr_mu']:.4f}  params {n_params}",
                  flush=True)
    table = ablation_table(rows)
    with open(os.path.join(args.out, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    outputs.append("ablation.tsv")
    write_manifest(args.out, "ablate", _train_argv("ablate", args, seed, []), seed, cfg,
                   {"data": args.data, "train_scenes": len(train), "heldout_scenes": n_val}, outputs)
    print(table)
    return 0


def cmd_replay(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        argv = json.load(fh)["argv"]
    return main(argv)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adnet", description="Multi-frame HDR reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"random seed (default ${SEED_ENV} or 0)")

    def configured(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--quiet", action="store_true")

    s = sub.add_parser("synth", help="generate synthetic bracketed scenes")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--motion", default="none", help="DY,DX shift of the non-reference frames, or none")
    s.add_argument("--noise", type=float, default=0.0, help="noise sigma on the short exposure")
    s.add_argument("--out", required=True)
    seeded(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--val")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=[v for _, v in ABLATION_ROWS])
    seeded(s)
    configured(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="reconstruct one scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tta", action="store_true", help="average the 4x self-ensemble")
    s.add_argument("--tile", help="tile size HxW")
    s.add_argument("--overlap", type=int, default=0)
    s.add_argument("--attention", action="store_true", help="also write attention heatmaps")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR of a result against ground truth")
    s.add_argument("result")
    s.add_argument("gt")
    s.add_argument("--mu", type=float, default=LossConfig().mu)
    s.add_argument("--json", action="store_true", help="also print a JSON line")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("ops", nargs="*")
    s.add_argument("--all", action="store_true")
    s.add_argument("--cases", type=int, default=20)
    s.add_argument("--tol", type=float, default=DOUBLE_TOL)
    seeded(s)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and compare the four architecture variants")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    seeded(s)
    configured(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adnet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, CheckpointError, NonFiniteLossError, RuntimeError) as exc:
        print(f"adnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
