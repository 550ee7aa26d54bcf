"""PickNet コマンドライン

    python -m picknet.main simulate --clean-dir speech/ --out-dir data/ --n-samples 10
    python -m picknet.main train --manifest data/manifest.jsonl --out model.pknt
    python -m picknet.main enhance dev0.wav dev1.wav --checkpoint model.pknt --out-prefix out/meeting
    python -m picknet.main eval --manifest data/manifest.jsonl --checkpoint model.pknt
    python -m picknet.main bench --checkpoint model.pknt

終了コード: 0 成功 / 1 実行時エラー / 2 使い方・設定のエラー
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional
from .logger import logger, attach_jsonl_log, detach_handler
from .error_handler import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, PickNetError, UsageError, show_error, show_exception
from .settings import Settings, apply_overrides, load_settings, save_settings


def _require_file(path: Optional[str], what: str) -> str:
    if not path:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_json(path: Optional[str], payload: dict):
    if path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
        logger.info(f"Report written to {out}")


def cmd_simulate(args, settings: Settings) -> int:
    from .simulator import load_clean_dir, load_noise_dir, simulate_dataset

    sim = settings.simulation
    clean_dir = args.clean_dir or sim.clean_dir
    out_dir = args.out_dir or sim.out_dir
    if not clean_dir or not Path(clean_dir).is_dir():
        raise UsageError(f"Clean speech directory not found: {clean_dir}")
    if not out_dir:
        raise UsageError("--out-dir is required")
    n_samples = args.n_samples or sim.n_samples

    clips = load_clean_dir(clean_dir, settings.dsp.sample_rate, sim.max_clip_seconds)
    noise_dir = args.noise_dir or sim.noise_dir
    bank = load_noise_dir(noise_dir, settings.dsp.sample_rate) if noise_dir else None
    manifest = simulate_dataset(clips, out_dir, n_samples, sim.seed, sim, bank)
    print(f"Simulated {n_samples} samples -> {manifest}")
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .trainer import Trainer, load_dataset

    cfg = settings.train
    manifest = _require_file(args.manifest or cfg.data_manifest, "Training manifest")
    if not args.out:
        raise UsageError("--out (checkpoint path) is required")
    resume = load_checkpoint(_require_file(args.resume, "Resume checkpoint")) if args.resume else None
    train_log = args.train_log or f"{args.out}.train.jsonl"

    dataset = load_dataset(manifest, cfg.feature_kind, settings.dsp, cfg.max_frames_per_sample)
    trainer = Trainer(cfg, settings.dsp, resume_from=resume)
    result = trainer.fit(dataset, log_path=train_log)
    save_checkpoint(trainer.checkpoint(result), args.out)
    save_settings(settings, f"{args.out}.config.json")

    final = result.losses[-1] if result.losses else float("nan")
    print(f"Trained {result.step} steps ({result.epoch} epochs), final loss {final:.4f} -> {args.out}")
    return EXIT_OK


def cmd_enhance(args, settings: Settings) -> int:
    from .audio_io import clip_stats, read_wavs, write_wav
    from .checkpoint import load_checkpoint
    from .streaming import diarize, make_selector, process_stream, write_rttm

    if not args.inputs:
        raise UsageError("At least one input WAV is required")
    for path in args.inputs:
        _require_file(path, "Input WAV")
    stream = settings.stream
    if args.subsample_n is not None:
        stream = stream.model_copy(update={"subsample_n": args.subsample_n})
    if args.no_smoothing:
        stream = stream.model_copy(update={"smoothing": "none"})
    checkpoint = None
    if stream.selector == "picknet":
        checkpoint = load_checkpoint(_require_file(args.checkpoint, "Checkpoint"))

    clips = read_wavs(args.inputs)
    selector = make_selector(stream, checkpoint)
    try:
        enhanced, timeline = process_stream(clips, config=stream, dsp=settings.dsp, selector=selector)
    finally:
        selector.cleanup()

    out_wav = write_wav(f"{args.out_prefix}.wav", enhanced)
    stats = clip_stats(enhanced)
    logger.info(f"Enhanced signal: rms {stats['rms']:.4f}, peak {stats['max']:.4f}")
    if args.timeline:
        timeline.write_jsonl(args.timeline)
    if args.rttm:
        write_rttm(diarize(timeline, args.min_dur), args.rttm, Path(args.out_prefix).name)
    save_settings(settings, f"{args.out_prefix}.config.json")
    print(f"Enhanced {len(clips)} channels, {len(timeline)} frames, "
          f"{timeline.n_evaluated} model evaluations -> {out_wav}")
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate_manifest
    from .simulator import read_manifest

    records = read_manifest(_require_file(args.manifest, "Manifest"))
    checkpoint = None
    if settings.stream.selector == "picknet":
        checkpoint = load_checkpoint(_require_file(args.checkpoint, "Checkpoint"))
    report = evaluate_manifest(records, checkpoint, settings.stream, settings.dsp, settings.eval)
    summary = report.to_dict()
    _write_json(args.out, summary)
    print(f"accuracy {summary['accuracy']:.4f}  max-energy {summary['max_energy_accuracy']:.4f}  "
          f"amplitude SNR {summary['amplitude_snr_db']:.2f} dB  ({summary['n_gated_frames']} gated frames)")
    return EXIT_OK


def cmd_bench(args, settings: Settings) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import affine_fit, run_bench

    checkpoint = load_checkpoint(_require_file(args.checkpoint, "Checkpoint"))
    bench = settings.bench
    updates = {}
    if args.m_list:
        updates["m_list"] = args.m_list
    if args.n_frames:
        updates["n_frames"] = args.n_frames
    if args.subsample_n:
        updates["subsample_n"] = args.subsample_n
    bench = bench.model_copy(update=updates)

    rows = run_bench(checkpoint, bench, seed=args.seed or 0)
    print(f"{'M':>3} {'MACs':>12} {'ms/frame N=1':>14} {'ms/frame N=' + str(bench.subsample_n):>14} {'evals':>7} {'ratio':>6}")
    for r in rows:
        print(f"{r.n_channels:>3} {r.macs_per_forward:>12} {r.ms_per_frame_full:>14.4f} "
              f"{r.ms_per_frame_subsampled:>14.4f} {r.evaluations_subsampled:>7} {r.speedup:>6.2f}")

    payload = {"rows": [dict(vars(r), speedup=r.speedup) for r in rows]}
    if len(rows) >= 2:
        a, b, residual = affine_fit({r.n_channels: r.macs_per_forward for r in rows})
        payload["mac_fit"] = {"a": float(a), "b": float(b), "residual": float(residual)}
        print(f"MAC(M) = {float(a):.0f} + {float(b):.0f} * M (residual {float(residual)})")
    _write_json(args.out, payload)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--seed", type=int, help="Seed for simulation and training")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override a config value (repeatable)")
    common.add_argument("--log", help="Write JSON Lines logs to this path")

    parser = argparse.ArgumentParser(prog="picknet", description="Closest-microphone selection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Generate a simulated training set")
    p.add_argument("--clean-dir")
    p.add_argument("--out-dir")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--noise-dir")

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--manifest")
    p.add_argument("--out", help="Output checkpoint path")
    p.add_argument("--train-log", help="Per-step JSON Lines training log")
    p.add_argument("--resume", help="Continue from this checkpoint")

    p = sub.add_parser("enhance", parents=[common], help="Select channels and write the enhanced signal")
    p.add_argument("inputs", nargs="+", help="One WAV per device")
    p.add_argument("--checkpoint")
    p.add_argument("--out-prefix", default="enhanced")
    p.add_argument("--subsample-n", type=int)
    p.add_argument("--no-smoothing", action="store_true")
    p.add_argument("--timeline", help="Write the posterior timeline (JSON Lines)")
    p.add_argument("--rttm", help="Write device diarization (RTTM)")
    p.add_argument("--min-dur", type=float, default=0.2)

    p = sub.add_parser("eval", parents=[common], help="Measure selection accuracy on a simulated set")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="Write the report as JSON")

    p = sub.add_parser("bench", parents=[common], help="Measure model cost per channel count")
    p.add_argument("--checkpoint")
    p.add_argument("--m-list", type=int, nargs="+")
    p.add_argument("--n-frames", type=int)
    p.add_argument("--subsample-n", type=int)
    p.add_argument("--out", help="Write the table as JSON")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    handler = attach_jsonl_log(args.log) if args.log else None
    try:
        settings = apply_overrides(load_settings(args.config), args.overrides)
        if args.seed is not None:
            settings = apply_overrides(settings, [f"simulation.seed={args.seed}", f"train.seed={args.seed}"])
        logger.info(f"Running {args.command}", extra={"event": {"effective_config": settings.model_dump(mode="json")}})
        return COMMANDS[args.command](args, settings)
    except PickNetError as e:
        return show_exception(e)
    except OSError as e:
        show_error("io_error", str(e))
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}")
        show_error("unknown_error", str(e))
        return EXIT_RUNTIME
    finally:
        if handler is not None:
            detach_handler(handler)


if __name__ == "__main__":
    sys.exit(main())
