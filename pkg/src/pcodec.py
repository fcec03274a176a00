#!/usr/bin/env python3
"""
Command-line interface for the probabilistic image codec.

Exit codes: 0 success, 2 usage or invalid settings, 3 data error,
4 bitstream/model mismatch.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from codec import (batch_encode, decode, decode_fields, decode_file, encode_file, metrics,
                   read_container)
from codec_config import get_config_manager, get_thread_count, get_training_config, use_config_file
from codec_errors import CodecError
from codec_model import CodecModel
from evaluation import CodecEvaluator, load_images, save_evaluation_results
from image_io import load_image, save_pgm, save_png
from ingest import generate_synthetic, ingest_directory, ingest_url_list
from posterior import band_name, field_statistics
from run_manager import RunManager
from sampler import SampleSpec
from selftest import run_selftest
from training import IMAGE_SUFFIXES, train

logger = logging.getLogger("pcodec")

EXIT_USAGE = 2
EXIT_DATA = 3


def _load_model(path: str) -> CodecModel:
    return CodecModel.load(Path(path), get_config_manager().get_coding_config())


def _image_files(paths: List[str]) -> List[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES))
        else:
            files.append(p)
    return files


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_init(args) -> int:
    manager = get_config_manager()
    arch = manager.get_architecture_config()
    if args.levels:
        arch.levels = args.levels
    model = CodecModel.initialize(arch, seed=args.seed, coding=manager.get_coding_config())
    model.save(Path(args.out))
    print(f"✅ CDF 9/7-initialised model (K={model.levels}) written to {args.out}")
    print(f"   Fingerprint: {model.fingerprint().hex()}")
    return 0


def cmd_encode(args) -> int:
    if len(args.inputs) == 1 and not args.out_dir:
        out = Path(args.out or Path(args.inputs[0]).with_suffix(".pcbs"))
        container = encode_file(Path(args.inputs[0]), _load_model(args.model), out)
        print(f"✅ {args.inputs[0]} -> {out}: {len(container.payload)} bytes, {container.bpp():.4f} bpp")
        return 0
    out_dir = Path(args.out_dir or ".")
    results = batch_encode(_image_files(args.inputs), Path(args.model), out_dir, threads=get_thread_count())
    for path, size in results:
        print(f"✅ {path}: {size} payload bytes")
    return 0


def cmd_decode(args) -> int:
    spec = SampleSpec(alpha=args.alpha, seed=args.seed, count=args.count)
    out = Path(args.out or Path(args.bitstream).with_suffix(".png"))
    paths = decode_file(Path(args.bitstream), _load_model(args.model), out, spec)
    for path in paths:
        print(f"✅ {path}")
    return 0


def cmd_sample(args) -> int:
    model = _load_model(args.model)
    container = read_container(Path(args.bitstream))
    reference = load_image(Path(args.reference)) if args.reference else None
    alphas = args.alpha or get_config_manager().get_sampling_config().alphas
    seeds = args.seed or [0]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.bitstream).stem

    report = {"bitstream": str(args.bitstream), "bpp": container.bpp(), "samples": []}
    for alpha in alphas:
        for seed in seeds:
            spec = SampleSpec(alpha=alpha, seed=seed, count=args.count)
            images = decode(container, model, spec)
            scores = metrics(reference, images)["candidates"] if reference is not None else [{}] * len(images)
            for n, (image, score) in enumerate(zip(images, scores)):
                path = out_dir / f"{stem}_a{alpha:g}_s{seed + n}.png"
                save_png(image, path)
                report["samples"].append({"file": path.name, "alpha": alpha, "seed": seed + n, **score})
                print(f"✅ {path}" + (f"  PSNR {score['psnr']:.2f} dB" if score else ""))
    report_path = out_dir / f"{stem}_samples.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, default=str)
    print(f"📝 Report: {report_path}")
    return 0


def cmd_train(args) -> int:
    config = get_training_config(args.preset)
    overrides = {k: v for k, v in (("lambda", args.lambda_), ("steps", args.steps), ("seed", args.seed))
                 if v is not None}
    if overrides:
        config = config.model_validate({**config.to_dict(), **overrides})

    model = _load_model(args.init_model) if args.init_model else None
    run = None
    if args.resume:
        run = RunManager("train", run_dir=Path(args.resume).parent.parent)
        if model is None:
            model = _load_model(str(Path(args.resume) / "model.pcmp"))
    print(f"🚀 Training: lambda={config.lambda_}, K={config.levels}, steps={config.steps}")
    result = train(config, Path(args.data), model=model, run=run,
                   resume=Path(args.resume) if args.resume else None)
    if args.out:
        result.model.save(Path(args.out))
        print(f"✅ Model written to {args.out}")
    print(f"   Run directory: {result.run_dir}")
    return 0


def cmd_metrics(args) -> int:
    reference = load_image(Path(args.reference))
    candidates = [load_image(Path(p)) for p in args.candidates]
    container = read_container(Path(args.bitstream)) if args.bitstream else None
    print(json.dumps(metrics(reference, candidates, container), indent=2, default=str))
    return 0


def cmd_inspect(args) -> int:
    model = _load_model(args.model)
    container = read_container(Path(args.bitstream))
    gain = args.gain or get_config_manager().get_sampling_config().variance_dump_gain
    _, fields = decode_fields(container, model)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = []
    for channel, field in enumerate(fields):
        for (level, orientation), scale in zip(field.scale.layout, field.scale.bands):
            save_pgm(scale * gain, out_dir / f"c{channel}_{band_name(level, orientation)}_scale.pgm")
        stats.extend({"channel": channel, **row} for row in field_statistics(field))
    with open(out_dir / "scale_statistics.json", "w") as f:
        json.dump({"bpp": container.bpp(), "gain": gain, "bands": stats}, f, indent=2)
    print(f"✅ Scale fields (x{gain:g}) written to {out_dir}")
    return 0


def cmd_ingest(args) -> int:
    levels = args.levels or get_config_manager().get_default_settings().get("levels", 4)
    if args.synthetic:
        manifest = generate_synthetic(Path(args.out), args.synthetic, size=args.size, seed=args.seed, levels=levels)
    elif args.urls:
        manifest = ingest_url_list(Path(args.urls), Path(args.out), levels)
    else:
        manifest = ingest_directory(Path(args.source), Path(args.out), levels)
    print(f"✅ {len(manifest.entries)} images in {args.out} ({len(manifest.skipped)} skipped)")
    for skipped in manifest.skipped:
        print(f"   ⚠️  {skipped.source}: {skipped.reason}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    references = {}
    for item in args.reference_model or []:
        label, _, path = item.partition("=")
        references[label] = _load_model(path)
    images = load_images(_image_files(args.images))
    sampling = get_config_manager().get_sampling_config()
    evaluator = CodecEvaluator(model, alphas=args.alpha or sampling.alphas,
                               seeds=range(args.seeds or sampling.seeds), reference_models=references)
    results = evaluator.run_analyses(images, args.analyses)
    summary = evaluator.summarize(results)

    runs_dir = Path(get_config_manager().get_runtime_config().get("runs_dir", "runs"))
    run = RunManager("evaluate", runs_dir=runs_dir)
    run.snapshot_config({"model": args.model, "analyses": list(results), "references": list(references)})
    run.snapshot_inputs({"count": len(images), "files": [name for name, _ in images]})
    save_evaluation_results(run.outputs_dir, results, summary)
    lines = ["# Evaluation", ""]
    for name, frame in results.items():
        lines += [f"## {name}", "", "```", frame.to_string(index=False), "```", ""]
    run.write_report("Evaluation", "\n".join(lines), name="evaluation")
    run.finalize_run()
    print(json.dumps(summary, indent=2, default=str))
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(seed=args.seed, names=args.check)
    for result in results:
        print(f"{'✅' if result.passed else '❌'} {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcodec", description="Probabilistic lossy image codec")
    parser.add_argument("--config", help="Codec YAML configuration (default: config/codec.yaml or $PCODEC_CONFIG)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="Write a CDF 9/7-initialised model")
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("encode", help="Encode image(s) to bitstream containers")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="Output container (single input)")
    p.add_argument("--out-dir", help="Output directory (batch mode, $PCODEC_THREADS workers)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="Decode a bitstream to PNG")
    p.add_argument("bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sample", help="Diverse reconstructions from one bitstream")
    p.add_argument("bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, action="append", help="Variance scale (repeatable)")
    p.add_argument("--seed", type=int, action="append", help="Noise seed (repeatable)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", default="samples")
    p.add_argument("--reference", help="Original image for MSE/PSNR in the report")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="Train a model")
    p.add_argument("--data", required=True, help="Directory of ingested PNGs")
    p.add_argument("--preset", help="Training preset from the configuration")
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-model", help="Start from this model instead of CDF 9/7 initialisation")
    p.add_argument("--resume", help="Checkpoint directory (runs/<id>/checkpoints/step-XXXXXX)")
    p.add_argument("--out", help="Write the final model here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="MSE/PSNR (and bpp) of candidates against a reference")
    p.add_argument("reference")
    p.add_argument("candidates", nargs="+")
    p.add_argument("--bitstream")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("inspect", help="Dump posterior scale fields as PGM images")
    p.add_argument("bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", default="inspect")
    p.add_argument("--gain", type=float)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ingest", help="Normalise images into a training/evaluation set")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--source", help="Directory of images")
    source.add_argument("--urls", help="Text file with one URL per line")
    source.add_argument("--synthetic", type=int, help="Generate this many synthetic images")
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("evaluate", help="Rate/fidelity and diversity analyses")
    p.add_argument("images", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--reference-model", action="append", help="label=path of another model (repeatable)")
    p.add_argument("--analyses", nargs="+", help="Subset of rate_distortion, alpha_sweep, variance_vs_rate")
    p.add_argument("--alpha", type=float, action="append")
    p.add_argument("--seeds", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="Fast property checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", action="append")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.config:
        use_config_file(Path(args.config))

    try:
        return args.func(args)
    except CodecError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except (FileNotFoundError, PermissionError) as e:
        print(f"❌ {e}")
        return EXIT_DATA
    except ValueError as e:
        print(f"❌ Invalid settings: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
