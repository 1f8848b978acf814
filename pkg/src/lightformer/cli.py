"""``lightformer`` command line: synth, prepare, train, eval, predict, gradcheck.

Exit codes: 0 success, 2 usage or contract error, 3 data or checkpoint error,
4 numeric error.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import MODEL_KEYS, TRAIN_KEYS, ModelConfig, from_mapping, load_run_config, parse_key_values
from .data import (
    FrameRecord,
    SceneSpec,
    image_to_array,
    load_dataset,
    read_frames_csv,
    read_manifest,
    read_ppm,
    sample_stats,
    split_samples,
    synth_scene,
    window_sequences,
    write_frames_csv,
    write_manifest,
    write_ppm,
)
from .errors import ConfigError, ConfigMismatchError, ContractError, DataError, LightFormerError
from .gradcheck import OPERATIONS, run_suite
from .model import CLASS_NAMES, DIRECTIONS, LightFormer
from .rng import make_rng
from .training import evaluate, train

log = logging.getLogger("lightformer")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x64, got {text!r}") from None
    return h, w


def _fraction(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"split must be in (0, 1), got {text}")
    return value


# -- synth --------------------------------------------------------------------------
def cmd_synth(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ContractError(f"{out} is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    records, stats_lines = [], [f"scenario={args.scenario}", f"seed={args.seed}"]
    total_distractors = 0
    for k in range(args.drives):
        name = f"drive{k:03d}"
        mode = args.left_mode
        if mode == "alternate":
            mode = "circle" if k % 2 == 0 else "arrow"
        spec = SceneSpec(scenario=args.scenario, left_mode=mode, occlusion_prob=args.occlusion)
        drive_seed = int(make_rng(args.seed, f"synth.drive.{k}").integers(2**31))
        scene = synth_scene(drive_seed, args.scenario, args.frames, args.size, spec)
        (out / name).mkdir(exist_ok=True)
        for t, (img, (s, lft)) in enumerate(zip(scene.frames, scene.states)):
            path = out / name / f"{t:05d}.ppm"
            write_ppm(path, img)
            records.append(FrameRecord(name, t, str(path), s, lft))
        total_distractors += scene.stats["distractors"]
        stats_lines += [f"{name}.{key}={value}" for key, value in scene.stats.items()]
    write_frames_csv(records, out / "frames.csv")
    stats_lines.insert(2, f"distractors={total_distractors}")
    (out / "stats.txt").write_text("\n".join(stats_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} frames from {args.drives} drives to {out}")
    return 0


# -- prepare ------------------------------------------------------------------------
def _print_stats(samples, title):
    st = sample_stats(samples)
    print(f"{title}: {len(samples)} samples; straight pass/stop {st['straight']['pass']}/"
          f"{st['straight']['stop']}; left pass/stop {st['left']['pass']}/{st['left']['stop']}")


def cmd_prepare(args):
    frames = read_frames_csv(args.frames)
    samples = window_sequences(frames, args.n, args.stride)
    if not samples:
        raise DataError(f"no drive in {args.frames} is long enough for N={args.n}, stride={args.stride}")
    out = Path(args.out)
    note = f"N={args.n} stride={args.stride} source={args.frames}"
    if args.split is None:
        write_manifest(samples, out, note)
        _print_stats(samples, str(out))
        return 0
    first, rest = split_samples(samples, args.split, args.seed)
    val = out.with_name(f"{out.stem}.val{out.suffix}")
    write_manifest(first, out, f"{note} split={args.split} seed={args.seed} part=train")
    write_manifest(rest, val, f"{note} split={args.split} seed={args.seed} part=val")
    _print_stats(first, str(out))
    _print_stats(rest, str(val))
    return 0


# -- train --------------------------------------------------------------------------
def _run_configs(args, X):
    values = {}
    if args.config:
        values = parse_key_values(Path(args.config).read_text(encoding="utf-8"), args.config)
    derived = dict(zip(("buffer_size", "in_channels", "image_height", "image_width"), X.shape[1:]))
    for key, value in derived.items():
        if key in values and int(values[key]) != value:
            raise ConfigError(f"config sets {key}={values[key]} but the manifest data has {value}")
    overrides = {**derived, "epochs": args.epochs, "learning_rate": args.lr,
                 "batch_size": args.batch_size, "seed": args.seed,
                 "centres_per_class": args.w}
    if args.ablate_tsa:
        overrides["ablate_tsa"] = True
    return load_run_config(args.config, overrides)


def cmd_train(args):
    samples = read_manifest(args.manifest)
    if not samples:
        raise DataError(f"{args.manifest} holds no samples")
    X, y = load_dataset(samples)
    model_cfg, train_cfg = _run_configs(args, X)
    model = LightFormer(model_cfg)
    log_path = Path(args.log) if args.log else Path(f"{args.out}.log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with log_path.open("w", encoding="utf-8") as fh:
        def on_epoch(record):
            line = record.to_line()
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)
            log.info("epoch %d done after %.1fs", record.epoch, time.perf_counter() - start)

        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        result = train(model, X, y, train_cfg, checkpoint_path=args.out, on_epoch=on_epoch)
    final = result.history[-1]
    print(f"saved {result.checkpoint} ({model.num_parameters()} parameters); "
          f"final loss {final.loss:.6f}, train_acc {final.train_acc:.6f}")
    return 0


# -- eval / predict -----------------------------------------------------------------
def _load_model(args):
    """Load ``--ckpt``; model keys set in ``--config`` must match the checkpoint."""
    model = load_checkpoint(args.ckpt)
    if args.config:
        values = parse_key_values(Path(args.config).read_text(encoding="utf-8"), args.config)
        unknown = set(values) - MODEL_KEYS - TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        wanted = from_mapping(ModelConfig, {k: v for k, v in values.items() if k in MODEL_KEYS})
        for key in sorted(set(values) & MODEL_KEYS):
            if getattr(model.config, key) != getattr(wanted, key):
                raise ConfigMismatchError(key, getattr(model.config, key), getattr(wanted, key))
    return model


def cmd_eval(args):
    model = _load_model(args)
    samples = read_manifest(args.manifest)
    if not samples:
        raise DataError(f"{args.manifest} holds no samples")
    X, y = load_dataset(samples)
    report = evaluate(model, X, y, batch_size=args.batch_size)
    print(report.to_text())
    print()
    print(f"samples={len(samples)}")
    print(report.to_key_values())
    return 0


def cmd_predict(args):
    model = _load_model(args)
    n = model.config.buffer_size
    if len(args.frames) != n:
        raise ContractError(f"got {len(args.frames)} frames, model expects N={n}")
    buffer = np.stack([image_to_array(read_ppm(p)) for p in args.frames])[None]
    probs = model.predict_proba(buffer)[0]
    for d, direction in enumerate(DIRECTIONS):
        cls = int(np.argmax(probs[d]))
        print(f"{direction}: {CLASS_NAMES[cls]} (p={probs[d, cls]:.4f})")
    return 0


# -- gradcheck ----------------------------------------------------------------------
def cmd_gradcheck(args):
    seeds = tuple(range(args.seeds))
    start = time.perf_counter()
    results = run_suite(seeds, args.tol, args.only)
    header = f"{'operation':<22}" + "".join(f"{'seed ' + str(s):>12}" for s in seeds) + f"{'result':>9}"
    print(header)
    print("-" * len(header))
    failed = 0
    for name, per_seed in results.items():
        ok = all(r.ok and r.max_rel_error < args.tol for r in per_seed)
        failed += not ok
        cells = "".join(f"{r.max_rel_error:>12.2e}" for r in per_seed)
        print(f"{name:<22}{cells}{'pass' if ok else 'FAIL':>9}")
    print(f"\n{len(results) - failed}/{len(results)} operations pass "
          f"(tolerance {args.tol:g}, {time.perf_counter() - start:.1f}s)")
    return 0 if not failed else 4


# -- parser -------------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="lightformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic traffic-light drives")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenario", choices=("day", "night"), default="day")
    p.add_argument("--drives", type=int, default=2, help="number of drives")
    p.add_argument("--frames", type=int, default=30, help="frames per drive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(32, 64), help="frame size HxW (default 32x64)")
    p.add_argument("--left-mode", choices=("circle", "arrow", "alternate"), default="circle",
                   help="left indicator shape; alternate switches per drive")
    p.add_argument("--occlusion", type=float, default=0.0, help="per-frame occlusion probability")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="window a frames CSV into a sequence manifest")
    p.add_argument("--frames", required=True, help="frames CSV (drive,frame,path,straight,left)")
    p.add_argument("--n", type=int, required=True, help="frames per buffer")
    p.add_argument("--stride", type=int, default=1, help="frame spacing inside a buffer")
    p.add_argument("--out", required=True, help="manifest path (train part when splitting)")
    p.add_argument("--split", type=_fraction, help="fraction kept in --out; the rest goes to <out>.val")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log path (default <out>.log)")
    p.add_argument("--ablate-tsa", action="store_true", help="remove temporal self-attention")
    p.add_argument("--w", type=int, help="cluster centres per class")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-status metrics of a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--config", help="run config the checkpoint must agree with")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image buffer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", nargs="+", required=True, help="N PPM frames, oldest first")
    p.add_argument("--config", help="run config the checkpoint must agree with")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", nargs="+", choices=sorted(OPERATIONS), help="restrict to these operations")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LightFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
