"""Command-line interface.

One executable with subcommands for neuron simulation, phase-plane
analysis, corpus generation, training, evaluation, per-utterance
segmentation, and dynamics-by-depth sweeps. Every command is reproducible
from its flags plus the seed and emits plain CSV/JSON for external
plotting.

Exit codes: 0 success, 1 missing/unreadable files, 2 usage or contract
violations.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_manifest, save_manifest, split_manifest, synth_corpus
from .dynamics import (
    DynamicsSpec,
    fixed_points,
    simulate,
    trace_summary,
    triangle_wave,
    write_trace_csv,
)
from .losses import LossWeights
from .model import ModelConfig
from .training import decode_utterance, evaluate, load_model, robustness_eval, train
from .data import apply_cmvn

DYNAMICS_CHOICES = ("vanilla", "adaptive-threshold", "second-order", "double-neuron")

_CONFIG_KEYS = {
    "n_enc_blocks": int,
    "n_dec_blocks": int,
    "d_model": int,
    "d_ff": int,
    "n_heads": int,
    "activation": str,
    "dropout": float,
    "boundary_channels": int,
    "v_th": float,
    "surrogate_width": float,
    "frontend_channels": "int_pair",
    "peak_lr": float,
    "warmup": int,
    "batch_size": int,
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
}

_PARAM_KEYS = ("v_th0", "alpha", "delta_h", "a", "b", "c", "g", "m", "n", "v_clip", "u_jump")


def _parse_kv_file(path, allowed):
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
        conv = allowed[key]
        if conv == "int_pair":
            out[key] = tuple(int(v) for v in value.split(","))
        else:
            out[key] = conv(value)
    return out


def _require_file(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return Path(path)


def _dynamics_from_args(args):
    overrides = {}
    if getattr(args, "params_file", None):
        _require_file(args.params_file)
        overrides = _parse_kv_file(args.params_file, {k: float for k in _PARAM_KEYS})
    return DynamicsSpec.from_name(args.dynamics, **overrides)


def _write_json(payload, out):
    text = json.dumps(payload, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    spec = _dynamics_from_args(args)
    if args.wave == "constant":
        currents = np.full(args.steps, args.min)
        if args.min != args.max:
            raise ValueError("constant wave requires --min == --max")
    else:
        currents = triangle_wave(args.min, args.max, args.period, args.steps)
    trace = simulate(spec, currents)
    with open(args.out, "w", newline="") as fh:
        write_trace_csv(trace, fh)
    print(json.dumps({"dynamics": args.dynamics, **trace_summary(trace)}, sort_keys=True))
    return 0


def cmd_phase(args):
    spec = DynamicsSpec.from_name("second-order", a=args.a, b=args.b, c=args.c)
    report = fixed_points(spec, args.current)
    _write_json(report.to_dict(), args.out)
    return 0


def cmd_gen(args):
    out_dir = Path(args.out_dir)
    total = args.utts + args.eval_utts
    corpus = synth_corpus(args.vocab, total, args.dim, args.seed)
    if args.eval_utts:
        train_m, eval_m = split_manifest(corpus, args.utts)
        save_manifest(train_m, out_dir, "manifest.json")
        save_manifest(eval_m, out_dir, "manifest_eval.json")
    else:
        save_manifest(corpus, out_dir, "manifest.json")
    print(json.dumps({"out_dir": str(out_dir), "train_utts": args.utts,
                      "eval_utts": args.eval_utts, "vocab": args.vocab}, sort_keys=True))
    return 0


def _load_train_options(args):
    opts = {}
    if args.config:
        _require_file(args.config)
        opts = _parse_kv_file(args.config, _CONFIG_KEYS)
    # flags beat the config file
    for key in ("n_enc_blocks", "n_dec_blocks", "activation", "peak_lr", "warmup", "batch_size"):
        flag = getattr(args, key, None)
        if flag is not None:
            opts[key] = flag
    return opts


def _split_options(opts):
    weights = LossWeights(
        lambda1=opts.pop("lambda1", 1.0),
        lambda2=opts.pop("lambda2", 0.25),
        lambda3=opts.pop("lambda3", 1.0),
    )
    trainer = {
        "peak_lr": opts.pop("peak_lr", 5e-4),
        "warmup": opts.pop("warmup", 400),
        "batch_size": opts.pop("batch_size", 4),
    }
    return opts, trainer, weights


def cmd_train(args):
    manifest = load_manifest(_require_file(args.manifest))
    model_opts, trainer, weights = _split_options(_load_train_options(args))
    config = ModelConfig(
        vocab_size=manifest.vocab.size,
        d_feat=manifest.utterances[0].features.shape[1],
        **model_opts,
    )
    spec = DynamicsSpec.from_name(args.dynamics)
    summary = train(
        manifest,
        config,
        spec,
        weights=weights,
        steps=args.steps,
        seed=args.seed,
        out_dir=args.out_dir,
        **trainer,
    )
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args):
    _require_file(args.checkpoint)
    manifest = load_manifest(_require_file(args.manifest))
    metrics = evaluate(args.checkpoint, manifest, beam=args.beam)
    if args.noise is not None:
        metrics.update(robustness_eval(args.checkpoint, manifest, noise_high=args.noise,
                                       seed=args.seed, beam=args.beam))
    _write_json(metrics, args.out)
    return 0


def cmd_segment(args):
    _require_file(args.checkpoint)
    manifest = load_manifest(_require_file(args.manifest))
    matches = [u for u in manifest.utterances if u.id == args.utt_id]
    if not matches:
        raise ValueError(f"utterance id '{args.utt_id}' not in manifest")
    model, spec, vocab, stats = load_model(args.checkpoint)
    normed = apply_cmvn(manifest, stats)
    utt = next(u for u in normed.utterances if u.id == args.utt_id)
    hyp, trace = decode_utterance(model, spec, utt, beam=args.beam)
    total = utt.features.shape[0]
    out_base = Path(args.out)
    csv_path = out_base.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "current", "potential", "spike"])
        for t in range(len(trace.spikes)):
            writer.writerow([
                t,
                f"{trace.currents[t]:.17g}",
                f"{trace.potentials[t]:.17g}",
                int(trace.spikes[t]),
            ])
    payload = {
        "utt_id": utt.id,
        "boundary_frames": [min(4 * j + 2, total) for j in trace.boundary_frames],
        "boundary_frames_downsampled": list(trace.boundary_frames),
        "reference_boundaries": list(utt.boundaries),
        "hypothesis": hyp,
        "reference": list(utt.tokens),
    }
    json_path = out_base.with_suffix(".json")
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"csv": str(csv_path), "json": str(json_path)}, sort_keys=True))
    return 0


def cmd_sweep(args):
    manifest = load_manifest(_require_file(args.manifest))
    eval_manifest = load_manifest(_require_file(args.eval_manifest))
    dynamics = [d.strip() for d in args.dynamics_list.split(",") if d.strip()]
    layers = [int(x) for x in args.layers_list.split(",")]
    for d in dynamics:
        if d not in DYNAMICS_CHOICES:
            raise ValueError(f"unknown dynamics '{d}' in --dynamics-list")
    rows = []
    for dyn in dynamics:
        for n_layers in layers:
            out_dir = Path(args.out_dir) / f"{dyn}_L{n_layers}"
            config = ModelConfig(
                vocab_size=manifest.vocab.size,
                d_feat=manifest.utterances[0].features.shape[1],
                n_enc_blocks=n_layers,
            )
            summary = train(
                manifest,
                config,
                DynamicsSpec.from_name(dyn),
                steps=args.steps,
                seed=args.seed,
                out_dir=out_dir,
            )
            metrics = evaluate(summary["checkpoint"], eval_manifest, beam=args.beam)
            rows.append((dyn, n_layers, metrics["per_mean"], metrics["boundary_recall"]))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dynamics", "enc_blocks", "per_mean", "boundary_recall"])
        for row in rows:
            writer.writerow([row[0], row[1], f"{row[2]:.17g}", f"{row[3]:.17g}"])
    print(json.dumps({"rows": len(rows), "out": args.out}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spikeseg",
        description="Spiking-neuron sequence segmentation: simulate, analyze, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"spikeseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one dynamics neuron over a current wave")
    p.add_argument("--dynamics", required=True, choices=DYNAMICS_CHOICES)
    p.add_argument("--params-file", help="key=value overrides for dynamics parameters")
    p.add_argument("--wave", choices=("constant", "triangle"), default="triangle")
    p.add_argument("--min", type=float, default=0.015)
    p.add_argument("--max", type=float, default=0.15)
    p.add_argument("--period", type=int, default=100)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--out", required=True, help="output trace CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("phase", help="fixed points and stability of the quadratic drive")
    p.add_argument("--a", type=float, default=0.1014)
    p.add_argument("--b", type=float, default=-0.0832)
    p.add_argument("--c", type=float, default=0.9506)
    p.add_argument("--current", type=float, default=0.0)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_phase)

    p = sub.add_parser("gen", help="generate a synthetic segmentation corpus")
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--utts", type=int, default=200)
    p.add_argument("--eval-utts", type=int, default=0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key=value model/trainer overrides")
    p.add_argument("--dynamics", required=True, choices=DYNAMICS_CHOICES)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-enc-blocks", dest="n_enc_blocks", type=int)
    p.add_argument("--n-dec-blocks", dest="n_dec_blocks", type=int)
    p.add_argument("--activation", choices=("spike", "relu"))
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a manifest and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--noise", type=float, help="also run the uniform-noise robustness protocol")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="emit boundary data for one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--utt-id", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out", required=True, help="output basename (.csv/.json appended)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("sweep", help="PER grid over dynamics kinds and encoder depths")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--dynamics-list", required=True, help="comma-separated dynamics names")
    p.add_argument("--layers-list", required=True, help="comma-separated encoder block counts")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out-dir", default="sweep_runs")
    p.add_argument("--out", required=True, help="output grid CSV")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
