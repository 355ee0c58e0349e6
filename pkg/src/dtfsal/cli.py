"""Command-line surface: train, eval, predict, gradcheck, ablate.

Every command writes a run manifest next to its outputs; re-running with
``--from-manifest`` reproduces the numeric outputs bit-exactly in float64.
Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ModelConfig,
    PRESETS,
    RunConfig,
    dump_run_config,
    load_run_config,
    run_config_from_flat,
)
from .enhancement import parse_block_placement
from .gradcheck import run_suite
from .media import MediaError, load_clip, overlay, read_wav, write_pgm, write_png
from .model import SaliencyModel, build_model
from .synthetic import generate_synthetic
from .tensor import NumericsError
from .training import evaluate_model, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- manifests ---------------------------------------------------------------


def write_manifest(out_dir: Path, command: str, config: RunConfig, outputs: list[str], started: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config.flat(),
        "seed": config.seed,
        "code_version": __version__,
        "started_at": started,
        "finished_at": time.time(),
        "outputs": outputs,
        "argv": sys.argv[1:],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "run_manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def config_from_args(args) -> RunConfig:
    if getattr(args, "from_manifest", None):
        try:
            with open(args.from_manifest, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read manifest: {e}", EXIT_IO) from None
        config = run_config_from_flat(manifest["config"])
    elif getattr(args, "config", None):
        config = load_run_config(args.config)
    elif getattr(args, "preset", None):
        config = PRESETS[args.preset]()
    else:
        raise ConfigError("missing field 'config' (pass --config, --preset, or --from-manifest)")
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "precision", None):
        config.model = replace(config.model, precision=args.precision)
    return config


def _prepare_out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory: {e}", EXIT_IO) from None
    return out


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    started = time.time()
    config = config_from_args(args)
    out = _prepare_out_dir(args)
    model = build_model(config.model, seed=config.seed)
    if config.train.init_from:
        try:
            state, _ = load_checkpoint(config.train.init_from)
        except CheckpointError as e:
            raise CliError(str(e), EXIT_IO) from None
        model.load_state_dict(state, strict=False)
    corpus = generate_synthetic(config.data)
    result = train_model(model, corpus.samples, config.train, seed=config.seed, log=print)

    ckpt_path = out / "checkpoint.dtfs"
    save_checkpoint(str(ckpt_path), result.best_state, {"config": config.flat(), "best_epoch": result.best_epoch})
    history_path = out / "history.json"
    with open(history_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "history": result.history,
                "best_epoch": result.best_epoch,
                "best_val_cc": result.best_cc,
                "stopped_epoch": result.stopped_epoch,
                "generator_correlation": corpus.audio_video_correlation,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    config_path = out / "config.resolved"
    config_path.write_text(dump_run_config(config), encoding="utf-8")
    write_manifest(out, "train", config, [str(ckpt_path), str(history_path), str(config_path)], started)
    print(f"best epoch {result.best_epoch} (val CC {result.best_cc:.4f}); artifacts in {out}")
    return EXIT_OK


def _load_model_from_checkpoint(path: str) -> tuple[SaliencyModel, RunConfig]:
    try:
        state, manifest = load_checkpoint(path)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_IO) from None
    config = run_config_from_flat(manifest["config"])
    model = build_model(config.model, seed=config.seed)
    model.load_state_dict(state, strict=True)
    return model, config


def cmd_eval(args) -> int:
    started = time.time()
    model, ckpt_config = _load_model_from_checkpoint(args.checkpoint)
    config = config_from_args(args) if (args.config or args.from_manifest) else ckpt_config
    if args.seed is not None:
        config.seed = args.seed
    out = _prepare_out_dir(args)
    corpus = generate_synthetic(config.data)
    kinds = sorted({s.kind for s in corpus.samples})

    rows = []
    model.eval()
    for i, sample in enumerate(corpus.samples):
        lm = model.audio.logmel(sample.audio) if model.uses_audio else None
        pred, _, _ = model.forward(sample.clip.tensor(model.config.np_dtype), lm)
        scores = metrics.evaluate(pred.data, sample.density, sample.fixations)
        rows.append({"sample": i, "kind": sample.kind, **scores})

    summary = {"n_samples": len(rows)}
    for name in metrics.METRIC_NAMES:
        summary[f"mean_{name}"] = float(np.mean([r[name] for r in rows]))
    for kind in kinds:
        sub = [r for r in rows if r["kind"] == kind]
        for name in metrics.METRIC_NAMES:
            summary[f"mean_{name}_{kind}"] = float(np.mean([r[name] for r in sub]))

    json_path = out / "metrics.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"summary": summary, "per_sample": rows}, fh, indent=2, sort_keys=True)
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample", "kind", *metrics.METRIC_NAMES])
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "eval", config, [str(json_path), str(csv_path)], started, {"checkpoint": args.checkpoint})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.time()
    model, config = _load_model_from_checkpoint(args.checkpoint)
    out = _prepare_out_dir(args)
    try:
        clip = load_clip(args.clip, fps=config.data.fps)
        audio = None
        if args.audio and not args.no_audio:
            audio = read_wav(args.audio, target_rate=config.model.audio_sample_rate)
    except MediaError as e:
        raise CliError(str(e), EXIT_IO) from None
    saliency = model.predict(clip, audio)

    pgm_path = out / "saliency.pgm"
    write_pgm(str(pgm_path), saliency)
    outputs = [str(pgm_path)]
    png_path = out / "saliency.png"
    if write_png(str(png_path), saliency):
        outputs.append(str(png_path))
    if args.overlay:
        blend = overlay(clip.frames[-1], saliency)
        ov_path = out / "overlay.png"
        if write_png(str(ov_path), blend):
            outputs.append(str(ov_path))
    write_manifest(out, "predict", config, outputs, started, {"checkpoint": args.checkpoint, "clip": args.clip})
    print(f"saliency map ({saliency.shape[0]}x{saliency.shape[1]}) written to {pgm_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seeds))
    results = run_suite(name_filter=args.filter or "", seeds=seeds, tol=args.tol)
    if not results:
        raise ConfigError(f"no gradcheck cases match filter '{args.filter}'")
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, err, ok in results:
        print(f"{name:<{width}s}  max_rel_err {err:.3e}  {'pass' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    print(f"{len(results) - failures}/{len(results)} cases passed (seeds={len(seeds)}, tol={args.tol:g})")
    if failures:
        raise NumericsError(f"{failures} gradcheck case(s) failed")
    return EXIT_OK


ABLATION_AXES = {
    "block_placement": ("none", "lteb:1,2,3,4", "dltfb:4", "default"),
    "fusion_method": ("concat", "cross_attention", "amfb"),
    "decoder_mode": ("one", "unet", "multi"),
}


def ablation_variants(axis: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{axis}' (choose from {sorted(ABLATION_AXES)})")
    variants = []
    for option in ABLATION_AXES[axis]:
        model = base.model
        if axis == "block_placement":
            model = replace(model, block_placement=option)
        elif axis == "fusion_method":
            model = replace(model, fusion=option)
        else:
            model = replace(model, decoder=option)
        variants.append((option, replace_config(base, model)))
    return variants


def replace_config(base: RunConfig, model: ModelConfig) -> RunConfig:
    return RunConfig(model=model, data=base.data, train=base.train, seed=base.seed)


def cmd_ablate(args) -> int:
    started = time.time()
    base = config_from_args(args)
    out = _prepare_out_dir(args)
    corpus = generate_synthetic(base.data)
    rows = []
    for option, config in ablation_variants(args.axis, base):
        model = build_model(config.model, seed=config.seed)
        result = train_model(model, corpus.samples, config.train, seed=config.seed)
        model.load_state_dict(result.best_state)
        if args.axis == "decoder_mode":
            params = model.decoder.parameter_count()
        else:
            params = model.parameter_count()
        val = {k[4:]: v for k, v in result.history[result.best_epoch - 1].items() if k.startswith("val_")}
        rows.append({"variant": option, "params": params, **val})
        print(f"{args.axis}={option}: params={params} val_cc={val.get('cc'):.4f}")
    rows.sort(key=lambda r: -(r.get("cc") or 0.0))
    csv_path = out / f"ablation_{args.axis}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, f"ablate:{args.axis}", base, [str(csv_path)], started)
    print(f"ranked table written to {csv_path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtfsal", description="audio-visual saliency: train, evaluate, predict")
    parser.add_argument("--version", action="version", version=f"dtfsal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out-dir", required=out_required, help="directory for outputs and the run manifest")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--precision", choices=("f32", "f64"), default=None)
        p.add_argument("--from-manifest", default=None, help="re-run with the config recorded in a manifest")

    p_train = sub.add_parser("train", help="train on the synthetic corpus")
    p_train.add_argument("--config", default=None, help="flat-key config file")
    p_train.add_argument("--preset", choices=sorted(PRESETS), default=None)
    common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", default=None)
    common(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_pred = sub.add_parser("predict", help="emit a saliency map for a clip")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--clip", required=True, help=".npy clip or directory of frames")
    p_pred.add_argument("--audio", default=None, help="16-bit mono WAV")
    p_pred.add_argument("--no-audio", action="store_true")
    p_pred.add_argument("--overlay", action="store_true")
    common(p_pred)
    p_pred.set_defaults(fn=cmd_predict)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p_grad.add_argument("--filter", default="")
    p_grad.add_argument("--seeds", type=int, default=5)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="train and compare config variants")
    p_abl.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p_abl.add_argument("--config", default=None)
    p_abl.add_argument("--preset", choices=sorted(PRESETS), default=None)
    common(p_abl)
    p_abl.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, MediaError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
