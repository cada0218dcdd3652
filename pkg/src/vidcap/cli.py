"""Command-line entry points.

Subcommands: synth (dataset generation), train, generate (captioning a
split), eval (metric report), regions (catalog inspection), gradcheck
(end-to-end gradient verification). Exit codes: 0 success, 1 runtime
failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, paper_config, toy_config
from .data import (
    FormatError,
    ManifestError,
    SynthSpec,
    build_vocab,
    generate_corpus,
    load_manifest,
    read_clip,
    tokenize,
)
from .encoder import RegionConfigError, enumerate_regions
from .inference import generate_caption
from .metrics import EvalInputError, evaluate, format_score
from .model import CaptionModel
from .training import (
    CheckpointError,
    NonFiniteLossError,
    Trainer,
    TrainSample,
    frame_caption,
    load_checkpoint,
)
from .verify import format_report, full_model_grad_check

USAGE_ERRORS = (
    ConfigError,
    ManifestError,
    FormatError,
    EvalInputError,
    CheckpointError,
    RegionConfigError,
    FileNotFoundError,
    NotADirectoryError,
    PermissionError,
    IsADirectoryError,
)


def _preset(name: str) -> RunConfig:
    return paper_config() if name == "paper" else toy_config()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _preset(args.preset)
    spec = SynthSpec(frames=cfg.frames, height=cfg.height, width=cfg.width, seed=args.seed)
    entries = generate_corpus(args.out, args.clips, spec)
    captions = [c for e in entries for c in e.captions]
    vocab = build_vocab(captions)
    splits = {s: sum(1 for e in entries if e.split == s) for s in ("train", "val", "test")}
    print(f"wrote {len(entries)} clips to {args.out}")
    print(f"splits: train={splits['train']} val={splits['val']} test={splits['test']}")
    print(f"captions: {len(captions)}, vocabulary: {len(vocab)} tokens")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_train_samples(data_dir: Path, cfg: RunConfig, model: CaptionModel):
    entries = load_manifest(data_dir / "manifest.jsonl")
    samples = []
    for entry in entries:
        if entry.split != "train":
            continue
        clip = read_clip(data_dir / entry.clip_path)
        patches = model.patches_for(clip)
        for caption in entry.captions:
            samples.append(
                TrainSample(entry.video_id, patches, frame_caption(tokenize(caption), model.vocab))
            )
    if not samples:
        raise ManifestError(f"{data_dir}: no training samples in manifest")
    return samples


def cmd_train(args) -> int:
    if args.config:
        cfg = RunConfig.from_json(args.config)
    else:
        cfg = _preset(args.preset)
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()

    data_dir = Path(args.data)
    out_dir = Path(args.out)
    if args.resume:
        model, optimizer, step, rng_state = load_checkpoint(args.resume)
        if args.config is None:
            cfg = model.cfg
            if args.max_steps is not None:
                cfg.max_steps = args.max_steps
            if args.seed is not None:
                cfg.seed = args.seed
        samples = _load_train_samples(data_dir, cfg, model)
        trainer = Trainer(model, samples, cfg, out_dir=out_dir)
        trainer.optimizer = optimizer
        trainer.step = step
        if rng_state is not None:
            trainer.rng.bit_generator.state = rng_state
        print(f"resumed from {args.resume} at step {step}")
    else:
        entries = load_manifest(data_dir / "manifest.jsonl")
        vocab = build_vocab(
            [c for e in entries if e.split == "train" for c in e.captions]
        )
        model = CaptionModel(cfg, vocab, seed=cfg.seed)
        samples = _load_train_samples(data_dir, cfg, model)
        trainer = Trainer(model, samples, cfg, out_dir=out_dir)

    print(
        f"training on {len(samples)} caption pairs for {trainer.total_steps} steps "
        f"(batch {cfg.batch_size} x {cfg.accumulation_steps} accumulation)"
    )
    history = trainer.run()
    if history:
        print(
            f"finished at step {history[-1].step}: "
            f"loss {history[-1].loss:.4f} (started {history[0].loss:.4f})"
        )
    log_path = out_dir / "train_log.jsonl"
    if log_path.exists():
        from .plots import save_loss_curve

        save_loss_curve(log_path, out_dir / "loss_curve.png")
        print(f"log: {log_path}")
        print(f"figure: {out_dir / 'loss_curve.png'}")
    print(f"final checkpoint: {out_dir / 'final'}")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    model, _, step, _ = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    entries = [e for e in load_manifest(data_dir / "manifest.jsonl") if e.split == args.split]
    if not entries:
        raise ManifestError(f"{data_dir}: no clips in split {args.split!r}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for entry in entries:
            clip = read_clip(data_dir / entry.clip_path)
            caption = generate_caption(model, clip)
            fh.write(json.dumps({"video_id": entry.video_id, "caption": caption}) + "\n")
    print(f"wrote {len(entries)} predictions from step-{step} checkpoint to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    report = evaluate(args.pred, args.refs)
    print(report.table())
    print(json.dumps(report.to_dict(), indent=2))
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        from .plots import save_metric_bars

        figure = out_path.with_suffix(".png")
        save_metric_bars(report, figure)
        print(f"report: {out_path}")
        print(f"figure: {figure}")
    return 0


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------


def cmd_regions(args) -> int:
    try:
        rows, cols = (int(part) for part in args.grid.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid expects ROWSxCOLS, got {args.grid!r}") from None
    catalog = enumerate_regions(rows, cols, args.delta, args.delta, args.g, args.threshold)
    print(
        f"{len(catalog)} regions on a {rows}x{cols} grid "
        f"(cell {args.g}, smallest extent {args.delta}, area threshold {args.threshold})"
    )
    print(
        "note: grid, areas and the threshold are all measured on the fused "
        "feature map; published counts that mix canvases are not reproducible"
    )
    areas = sorted({catalog.cell_area(r) for r in catalog.regions})
    histogram = {area: sum(1 for r in catalog.regions if catalog.cell_area(r) == area) for area in areas}
    for area, count in histogram.items():
        print(f"  area {area:6d} cells: {'#' * count} ({count})")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "regions.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("row,col,height_units,width_units,area_cells\n")
            for region in catalog.regions:
                fh.write(
                    f"{region.row},{region.col},{region.height_units},"
                    f"{region.width_units},{catalog.cell_area(region)}\n"
                )
        from .plots import save_region_histogram

        figure = out_dir / "region_areas.png"
        save_region_histogram(catalog, figure)
        print(f"catalog: {csv_path}")
        print(f"figure: {figure}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg = _preset(args.preset)
    report = full_model_grad_check(
        cfg, seed=args.seed, samples_per_param=args.samples, eps=args.eps
    )
    print(format_report(report, args.tolerance))
    return 0 if report.passed(args.tolerance) else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidcap",
        description="Desk-scale end-to-end video captioning with region-masked "
        "encoding and gated context attention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    formatter = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic video-caption dataset", formatter_class=formatter)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--clips", type=int, default=80, help="number of clips")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--preset", choices=("toy", "paper"), default="toy", help="clip shape preset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory", formatter_class=formatter)
    p.add_argument("--config", help="JSON configuration file (overrides the preset)")
    p.add_argument("--preset", choices=("toy", "paper"), default="toy", help="configuration preset")
    p.add_argument("--data", required=True, help="dataset directory with manifest.jsonl")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--max-steps", type=int, default=None, help="optimizer step budget")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="caption a dataset split with beam search", formatter_class=formatter)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to caption")
    p.add_argument("--out", required=True, help="predictions JSONL path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against references", formatter_class=formatter)
    p.add_argument("--pred", required=True, help="predictions JSONL ({video_id, caption})")
    p.add_argument("--refs", required=True, help="references JSONL ({video_id, captions})")
    p.add_argument("--out", help="write the JSON report here (plus a PNG alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("regions", help="inspect a mask-region catalog", formatter_class=formatter)
    p.add_argument("--grid", default="7x7", help="grid points as ROWSxCOLS")
    p.add_argument("--delta", type=int, default=2, help="smallest region extent in grid units")
    p.add_argument("--g", type=int, default=4, help="feature cells per grid cell side")
    p.add_argument("--threshold", type=float, default=0.3, help="max masked area fraction")
    p.add_argument("--out", help="directory for regions.csv and the histogram PNG")
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("gradcheck", help="verify gradients end to end", formatter_class=formatter)
    p.add_argument("--preset", choices=("toy", "paper"), default="toy", help="model preset")
    p.add_argument("--samples", type=int, default=4, help="coordinates probed per parameter")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--seed", type=int, default=0, help="model and probe seed")
    p.add_argument("--tolerance", type=float, default=1e-3, help="max relative error allowed")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
