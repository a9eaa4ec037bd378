"""Command-line driver: build / analyze / train / eval / plot.

Heavy imports happen inside the command handlers so that ``--threads`` can
pin the BLAS thread count through the environment before numpy loads.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from xml.sax.saxutils import escape

__version__ = "0.1.0"


_TRAIN_FILE_KEYS = {
    "base_lr": float, "lr_factor": float, "momentum": float, "weight_decay": float,
    "batch_size": int, "max_epochs": int, "pad_crop": lambda v: v.lower() == "true",
    "hflip": lambda v: v.lower() == "true", "seed": int,
    "milestones": lambda v: tuple(int(m) for m in v.split(",") if m.strip()),
}


def _split_config_file(path):
    """A config file may mix architecture and training keys; split them."""
    from .exceptions import ConfigError

    arch_lines, train_kwargs = [], {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key = line.split("=", 1)[0].strip()
        if key in _TRAIN_FILE_KEYS:
            try:
                train_kwargs[key] = _TRAIN_FILE_KEYS[key](line.split("=", 1)[1].strip())
            except ValueError as e:
                raise ConfigError(f"config line {lineno}: {e}") from None
        else:
            arch_lines.append(line)
    return "\n".join(arch_lines) + "\n", train_kwargs


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file (architecture and training keys)")
    p.add_argument("--family", choices=["cifar", "imagenet"])
    p.add_argument("--depth", type=int, help="layer count (6n+2; 6n+4 for wide variants)")
    p.add_argument("--blocks", help="comma-separated blocks per group, e.g. 2,2,2")
    p.add_argument("--wrn", type=int, metavar="DEPTH",
                   help="wide variant named WRN-DEPTH-k; implies pre-activation order")
    p.add_argument("--width", type=int, help="width multiplier k")
    p.add_argument("--levels", type=int, help="number of shortcut levels m")
    p.add_argument("--order", choices=["post_act", "pre_act"])
    p.add_argument("--block-size", choices=["b33", "b333", "bottleneck"])
    p.add_argument("--final-type", choices=["A", "B"], help="final-level shortcut type")
    p.add_argument("--upper-type", choices=["A", "B"], help="root/middle shortcut type")
    p.add_argument("--classes", type=int, help="number of output classes")
    p.add_argument("--sd-pl", type=float, help="terminal survival probability for drop-path")
    p.add_argument("--seed", type=int, help="default 0")


def _arch_config(args):
    from .arch import ArchConfig, config_from_text
    from .exceptions import ConfigError

    if args.config:
        arch_text, _ = _split_config_file(args.config)
        cfg = config_from_text(arch_text)
    else:
        cfg = ArchConfig()
        cfg.depth = None  # flags must supply a size
    if args.wrn is not None:
        cfg.depth = args.wrn
        cfg.blocks_per_group = None
        cfg.block_order = "pre_act"
        if args.width is None and cfg.width_k == 1:
            raise ConfigError("--wrn needs --width (the k multiplier)")
    if args.family:
        cfg.family = args.family
    if args.depth is not None:
        cfg.depth = args.depth
        cfg.blocks_per_group = None
    if args.blocks:
        cfg.blocks_per_group = tuple(int(b) for b in args.blocks.split(","))
        cfg.depth = None
    if args.width is not None:
        cfg.width_k = args.width
    if args.levels is not None:
        cfg.levels_m = args.levels
    if args.order:
        cfg.block_order = args.order
    if args.block_size:
        cfg.block_size = args.block_size
    if args.final_type:
        cfg.final_shortcut = args.final_type
    if args.upper_type:
        cfg.upper_shortcut = args.upper_type
    if args.classes is not None:
        cfg.num_classes = args.classes
    if args.sd_pl is not None:
        cfg.sd_p_l = args.sd_pl
    return cfg


def _thread_setting() -> str:
    return os.environ.get("OMP_NUM_THREADS", "default")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_build(args) -> int:
    from .analysis import count_params
    from .arch import build, resolve_config

    cfg = _arch_config(args)
    plan = resolve_config(cfg)
    seed = args.seed if args.seed is not None else 0
    graph = build(cfg, seed=seed)
    report = count_params(graph)

    per_level: dict[int, int] = {}
    for ls in plan.level_shortcuts:
        per_level[ls.level] = per_level.get(ls.level, 0) + 1
    print(f"family          {plan.family}")
    size = cfg.depth if cfg.depth is not None else f"groups {[g.blocks for g in plan.groups]}"
    print(f"size            {size}")
    print("blocks          " + ", ".join(
        f"group{i} {g.blocks}x{g.width}ch/stride{g.stride}" for i, g in enumerate(plan.groups, 1)))
    print(f"shortcut levels {cfg.levels_m}")
    print(f"root shortcuts  {per_level.get(1, 0)}")
    print(f"middle shortcuts {per_level.get(2, 0)}")
    for lvl in sorted(k for k in per_level if k > 2):
        print(f"level-{lvl} shortcuts {per_level[lvl]}")
    print(f"block order     {cfg.block_order}")
    print(f"parameters      {report.total:,} ({report.millions():.1f}M)")
    if args.dump_ir:
        Path(args.dump_ir).write_text(graph.to_jsonl())
        print(f"graph IR written to {args.dump_ir}")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import count_params, count_paths, expected_active_blocks, expected_saving_ratio
    from .arch import build, resolve_config
    from .stochastic_depth import survival_schedule

    cfg = _arch_config(args)
    want_all = not (args.params or args.paths or args.expected_depth)
    rows: list[tuple[str, str]] = []

    seed = args.seed if args.seed is not None else 0
    if args.params or want_all:
        graph = build(cfg, seed=seed)
        report = count_params(graph)
        for scope, count in report.scopes:
            rows.append((f"params.{scope}", str(count)))
        rows.append(("params.total", str(report.total)))
        rows.append(("params.millions", f"{report.millions():.1f}"))
    if args.paths or want_all:
        graph = build(cfg, seed=seed)
        stats = count_paths(graph)
        rows.append(("paths.total", str(stats.count)))
        for length, cnt in sorted(stats.length_histogram.items()):
            rows.append((f"paths.length{length}", str(cnt)))
    if args.expected_depth or want_all:
        plan = resolve_config(cfg)
        p_l = args.pL if args.pL is not None else (cfg.sd_p_l or 0.5)
        sched = survival_schedule(plan.num_blocks, p_l)
        rows.append(("expected_depth.blocks", str(plan.num_blocks)))
        rows.append(("expected_depth.active", f"{expected_active_blocks(sched):g}"))
        rows.append(("expected_depth.saving", f"{expected_saving_ratio(sched):.6f}"))

    if args.format == "csv":
        print("metric,value")
        for key, value in rows:
            print(f"{key},{value}")
    else:
        width = max(len(k) for k, _ in rows)
        for key, value in rows:
            print(f"{key:<{width}}  {value}")
    return 0


def _load_datasets(args, manifest_entry=None, num_classes=10):
    """Datasets per CLI flags (or a manifest echo when re-running eval)."""
    from .data import load_cifar, synthetic_dataset
    from .exceptions import DataError

    src = manifest_entry or {}
    if args.synthetic or src.get("kind") == "synthetic":
        seed = src.get("seed", getattr(args, "data_seed", None))
        if seed is None:
            seed = 1
        samples = src.get("samples", getattr(args, "samples", 500))
        classes = src.get("classes", num_classes)
        difficulty = src.get("difficulty", getattr(args, "difficulty", "easy"))
        train_set = synthetic_dataset(seed, classes, samples, difficulty, split="train")
        test_set = synthetic_dataset(seed + 1, classes, max(classes, samples // 5),
                                     difficulty, split="test")
        entry = {"kind": "synthetic", "seed": seed, "samples": samples,
                 "classes": classes, "difficulty": difficulty,
                 "digests": {"train": train_set.digest, "test": test_set.digest}}
        return train_set, test_set, entry
    data_dir = src.get("path", args.data)
    if not data_dir:
        raise DataError("no dataset: pass --synthetic or --data DIR")
    variant = src.get("variant", getattr(args, "dataset", "c10"))
    train_set, test_set = load_cifar(data_dir, variant)
    entry = {"kind": variant, "path": str(data_dir), "variant": variant,
             "digests": {"train": train_set.digest, "test": test_set.digest}}
    return train_set, test_set, entry


def cmd_train(args) -> int:
    from .arch import build, config_to_dict, config_to_text
    from .data import save_checkpoint
    from .train import TrainConfig, normalize_dataset, train

    cfg = _arch_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_set, test_set, data_entry = _load_datasets(args, num_classes=cfg.num_classes)
    train_set, test_set, stats = normalize_dataset(train_set, test_set)

    file_train = _split_config_file(args.config)[1] if args.config else {}

    def setting(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return file_train.get(key, default)

    milestones = (tuple(int(m) for m in args.milestones.split(","))
                  if args.milestones else setting(None, "milestones", ()))
    augment = setting(args.augment, "pad_crop", False)
    seed = setting(args.seed, "seed", 0)
    tc = TrainConfig(base_lr=setting(args.lr, "base_lr", 0.1),
                     milestones=milestones,
                     lr_factor=file_train.get("lr_factor", 0.1),
                     momentum=setting(args.momentum, "momentum", 0.9),
                     weight_decay=setting(args.weight_decay, "weight_decay", 1e-4),
                     batch_size=setting(args.batch_size, "batch_size", 128),
                     max_epochs=setting(args.epochs, "max_epochs", 30),
                     pad_crop=augment,
                     hflip=setting(args.augment, "hflip", augment),
                     sd_p_l=args.sd_pl if args.sd_pl is not None else cfg.sd_p_l,
                     seed=seed)
    graph = build(cfg, seed=seed)

    manifest = {
        "tool_version": __version__,
        "command": "train",
        "arch": config_to_dict(cfg),
        "train": {"base_lr": tc.base_lr, "milestones": list(tc.milestones),
                  "lr_factor": tc.lr_factor, "momentum": tc.momentum,
                  "weight_decay": tc.weight_decay, "batch_size": tc.batch_size,
                  "max_epochs": tc.max_epochs, "pad_crop": tc.pad_crop,
                  "hflip": tc.hflip, "sd_p_l": tc.sd_p_l, "seed": tc.seed},
        "seed": seed,
        "threads": _thread_setting(),
        "dataset": data_entry,
        "normalization": stats,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    def checkpoint_hook(tag: str) -> None:
        name = "checkpoint.bin" if tag == "final" else f"checkpoint_{tag}.bin"
        save_checkpoint(out_dir / name, graph.state_dict(), config_to_text(cfg))

    log = train(graph, train_set, test_set, tc, out_dir=out_dir, checkpoint_hook=checkpoint_hook)
    final = log.rows[-1]
    print(f"finished {len(log.rows)} epochs: train_err {final.train_err:.2f}% "
          f"(acc {100 - final.train_err:.2f}%), test_err {final.test_err:.2f}%")
    print(f"metrics: {out_dir / 'metrics.csv'}")
    print(f"checkpoint: {out_dir / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .arch import build, config_from_text
    from .data import load_checkpoint
    from .exceptions import DataError
    from .train import evaluate
    from .stochastic_depth import survival_schedule

    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoint.bin"
    state, config_text = load_checkpoint(ckpt)

    cfg = config_from_text(config_text)
    graph = build(cfg, seed=manifest.get("seed", 0))
    graph.load_state(state)

    args.synthetic = manifest["dataset"].get("kind") == "synthetic"
    train_set, test_set, _ = _load_datasets(args, manifest_entry=manifest["dataset"])
    stats = manifest["normalization"]
    mean = np.asarray(stats["mean"], dtype=np.float32)[None, :, None, None]
    std = np.asarray(stats["std"], dtype=np.float32)[None, :, None, None]
    from dataclasses import replace
    test_set = replace(test_set, images=((test_set.images - mean) / std).astype(np.float32))

    schedule = None
    if manifest["train"].get("sd_p_l"):
        schedule = survival_schedule(graph.meta["num_blocks"], manifest["train"]["sd_p_l"])
    err = evaluate(graph, test_set, schedule=schedule)
    print(f"test_err {err:.4f}%")
    return 0


def _smooth(values, window: int):
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo:i + 1]) / (i + 1 - lo))
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def cmd_plot(args) -> int:
    from .train import MetricsLog

    series = []
    for path in args.csvs:
        log = MetricsLog.from_csv(path)
        xs = [r.epoch for r in log.rows]
        ys = _smooth([r.test_err for r in log.rows], args.window)
        series.append((Path(path).stem, xs, ys))
    svg = _render_svg(series, x_label="epoch",
                      y_label=f"test error % (window {args.window})")
    Path(args.output).write_text(svg)
    print(f"wrote {args.output}")
    return 0


def _render_svg(series, x_label: str, y_label: str,
                width: int = 720, height: int = 450) -> str:
    ml, mr, mt, mb = 60, 20, 20, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ph * (1 - (y - y0) / (y1 - y0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        parts.append(f'<text x="{px(xv):.1f}" y="{height - mb + 18}" font-size="11" '
                     f'text-anchor="middle">{xv:.0f}</text>')
        parts.append(f'<text x="{ml - 8}" y="{py(yv):.1f}" font-size="11" '
                     f'text-anchor="end" dominant-baseline="middle">{yv:.2f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 8}" font-size="12" '
                 f'text-anchor="middle">{escape(x_label)}</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2})">{escape(y_label)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{points}"><title>{escape(label)}</title></polyline>')
        ly = mt + 16 + 16 * i
        parts.append(f'<line x1="{ml + pw - 150}" y1="{ly}" x2="{ml + pw - 125}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw - 118}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rornet",
                                     description="Multilevel residual networks: build, analyze, train.")
    parser.add_argument("--threads", type=int, help="BLAS thread count (recorded in the manifest)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="resolve a config and print the graph summary")
    _add_arch_flags(p)
    p.add_argument("--dump-ir", metavar="PATH", help="write the JSON-lines node listing")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("analyze", help="parameter counts, path counts, expected depth")
    _add_arch_flags(p)
    p.add_argument("--params", action="store_true")
    p.add_argument("--paths", action="store_true")
    p.add_argument("--expected-depth", action="store_true")
    p.add_argument("--pL", type=float, help="terminal survival probability")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a model and write metrics/checkpoint/manifest")
    _add_arch_flags(p)
    p.add_argument("--synthetic", action="store_true", help="use the built-in blob dataset")
    p.add_argument("--data-seed", type=int, default=1, help="seed for --synthetic")
    p.add_argument("--samples", type=int, default=500, help="training samples for --synthetic")
    p.add_argument("--difficulty", choices=["easy", "medium", "hard"], default="easy")
    p.add_argument("--data", help="directory with CIFAR binary shards")
    p.add_argument("--dataset", choices=["c10", "c100"], default="c10")
    p.add_argument("--epochs", type=int, help="default 30")
    p.add_argument("--batch-size", type=int, help="default 128")
    p.add_argument("--lr", type=float, help="default 0.1")
    p.add_argument("--milestones", help="comma-separated decay epochs, e.g. 250,375")
    p.add_argument("--momentum", type=float, help="default 0.9")
    p.add_argument("--weight-decay", type=float, help="default 1e-4")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None,
                   help="pad-4 random crop and horizontal flip (default off)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 error of a checkpoint on its test split")
    p.add_argument("--run-dir", required=True, help="directory with manifest.json and checkpoint.bin")
    p.add_argument("--checkpoint", help="explicit checkpoint path override")
    p.add_argument("--data", help="dataset directory override")
    p.set_defaults(func=cmd_eval, synthetic=False)

    p = sub.add_parser("plot", help="render smoothed test-error curves to SVG")
    p.add_argument("csvs", nargs="+", help="metrics.csv files")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--window", type=int, default=5, help="smoothing window in epochs")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .exceptions import CheckpointError, ConfigError, DataError, NumericError
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, CheckpointError, FileNotFoundError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
