"""Command-line surface: corpus generation, preparation, training,
synthesis, representation analysis, metric evaluation, inspection.

Every command that produces artifacts writes a manifest.json holding the
command, its effective arguments, seeds, the config hash when a model is
involved, and the package version. Manifests carry no timestamps, so
identical manifests mean reproducible identical outputs (single-threaded).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, dsp
from .acoustic import AcousticError
from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    format_config,
    load_config,
)
from .corpus import Corpus, CorpusError, ToySpec, generate_corpus, load_matrix, overfit_spec, prepare_corpus
from .prosody import ProsodyError
from .tasks import SynthesisRequest, TaskError, analyze_representation, evaluate_pairs, save_result, synthesize
from .tensor import NonFiniteError
from .training import NumericFailure, Trainer, TrainingError, build_model_from_checkpoint, load_checkpoint

ENV_CORPUS_ROOT = "SFTTS_CORPUS_ROOT"

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3


class UsageError(ValueError):
    pass


def _corpus_root(args) -> str:
    root = getattr(args, "corpus", None) or os.environ.get(ENV_CORPUS_ROOT)
    if not root:
        raise UsageError(f"no corpus given (flag --corpus or ${ENV_CORPUS_ROOT})")
    return root


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    extra: dict | None = None) -> None:
    skip = {"func"}
    public = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    manifest = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in public.items()},
        "version": __version__,
    }
    manifest.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_prompt(source: str) -> np.ndarray:
    """A prompt is a .tmat mel file or a 'corpus_dir::utt_id' reference."""
    if "::" in source:
        root, _, utt_id = source.partition("::")
        return Corpus(root).load(utt_id).mel
    return load_matrix(source)


def _build_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            apply_overrides(cfg, {key.strip(): value.strip()})
        except (KeyError, ValueError) as e:
            raise UsageError(str(e)) from e
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_toygen(args) -> int:
    if args.preset == "overfit":
        spec = overfit_spec(seed=args.seed)
    else:
        spec = ToySpec(seed=args.seed)
    if args.speakers is not None:
        spec.num_speakers = args.speakers
    if args.train_utterances is not None:
        spec.train_utterances = args.train_utterances
    if args.val_utterances is not None:
        spec.val_utterances = args.val_utterances
    if args.test_utterances is not None:
        spec.test_utterances = args.test_utterances
    if args.prosody_mode is not None:
        spec.prosody_mode = args.prosody_mode
    if args.emit_audio:
        spec.emit_audio = True
    out = Path(args.out)
    generate_corpus(spec, out, force=args.force)
    _write_manifest(out, "toygen", args, {"seed": spec.seed})
    print(f"corpus written to {out}")
    return 0


def cmd_prepare(args) -> int:
    root = _corpus_root(args)
    corpus = prepare_corpus(root)
    print(f"prepared {len(corpus.utterance_ids())} utterances, "
          f"{len(corpus.speaker_stats())} speakers")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    corpus = Corpus(_corpus_root(args))
    cfg = _build_run_config(args)
    cfg.corpus_root = str(corpus.root)
    ckpt = out / "latest.ckpt"
    if args.resume:
        if not ckpt.exists():
            raise TrainingError(f"cannot resume: no checkpoint at {ckpt}")
        trainer = Trainer.restore(ckpt, corpus, out_dir=out,
                                  expect=cfg if args.config or args.set else None,
                                  force=args.force)
        if trainer.step >= trainer.cfg.train.max_steps:
            print(f"training already complete at step {trainer.step}")
            return 0
    else:
        out.mkdir(parents=True, exist_ok=True)
        trainer = Trainer(cfg, corpus, out_dir=out)
    (out / "config.txt").write_text(format_config(trainer.cfg))
    _write_manifest(out, "train", args, {
        "config_hash": config_hash(trainer.cfg),
        "seed": trainer.cfg.train.seed,
    })
    last = trainer.run(log_path=out / "loss_log.csv", quiet=args.quiet)
    trainer.save(ckpt)
    print(f"finished at step {trainer.step}; "
          f"final l1={last.get('l1', float('nan')):.4f}; checkpoint {ckpt}")
    return 0


def _synthesis_request(args, model) -> SynthesisRequest:
    if args.style_prompt and args.no_style_transfer:
        raise UsageError("--style-prompt conflicts with --no-style-transfer")
    phonemes = args.text.split()
    offsets = {}
    if args.pitch_offset:
        offsets["pitch"] = args.pitch_offset
    if args.duration_offset:
        offsets["duration"] = args.duration_offset
    if args.energy_offset:
        offsets["energy"] = args.energy_offset
    return SynthesisRequest(
        phonemes=phonemes,
        language=args.language,
        speaker_prompt=_load_prompt(args.speaker_prompt),
        style_prompt=_load_prompt(args.style_prompt) if args.style_prompt else None,
        unit_offsets=offsets,
        seed=args.seed,
        greedy=not args.sample,
        temperature=args.temperature,
    )


def cmd_synth(args) -> int:
    model, header = build_model_from_checkpoint(args.checkpoint)
    req = _synthesis_request(args, model)
    result = synthesize(model, req)
    out = Path(args.out)
    save_result(result, out)
    _write_manifest(out, "synth", args, {"config_hash": header["config_hash"],
                                         "seed": args.seed})
    if args.plot:
        _plot_outputs(result, out)
    if args.render_audio:
        dsp.write_wav(out / "audio.wav", dsp.render_audio(result.mel, seed=args.seed))
    print(f"synthesized {result.mel.shape[0]} frames to {out}")
    return 0


def cmd_analyze(args) -> int:
    model, header = build_model_from_checkpoint(args.checkpoint)
    req = _synthesis_request(args, model)
    result = analyze_representation(model, req, args.mode)
    out = Path(args.out)
    save_result(result, out)
    _write_manifest(out, "analyze", args, {"config_hash": header["config_hash"],
                                           "seed": args.seed, "mode": args.mode})
    if args.plot:
        _plot_outputs(result, out)
    print(f"analysis mode {args.mode}: {result.mel.shape[0]} frames to {out}")
    return 0


def cmd_metrics(args) -> int:
    model = None
    if args.checkpoint:
        model, _ = build_model_from_checkpoint(args.checkpoint)
    rows = evaluate_pairs(args.pairs, model, args.out)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        header, tensors = load_checkpoint(args.checkpoint)
        total = sum(int(np.prod(t.shape)) for n, t in tensors.items()
                    if not n.startswith(("optg_", "optd_")))
        print(f"checkpoint step: {header['step']}")
        print(f"config hash: {header['config_hash']}")
        print(f"vocabulary: {len(header['vocab'])} symbols")
        print(f"parameters (incl. discriminator): {total}")
        if args.verbose:
            for name in sorted(t for t in tensors if not t.startswith(("optg_", "optd_"))):
                print(f"  {name} {tuple(tensors[name].shape)}")
    if args.config:
        cfg = load_config(args.config, base=RunConfig())
        sys.stdout.write(format_config(cfg))
        print(f"# hash: {config_hash(cfg)}")
    if not args.checkpoint and not args.config:
        raise UsageError("inspect needs --checkpoint and/or --config")
    return 0


def _plot_outputs(result, out: Path) -> None:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(10, 4))
    ax.imshow(result.mel.T, origin="lower", aspect="auto", interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel band")
    fig.tight_layout()
    fig.savefig(out / "mel.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(result.f0_proxy)
    ax.set_xlabel("frame")
    ax.set_ylabel("pitch (normalized units)")
    fig.tight_layout()
    fig.savefig(out / "f0_contour.png", dpi=120)
    plt.close(fig)

    with open(out / "f0_contour.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "pitch_normalized"])
        for i, v in enumerate(result.f0_proxy):
            writer.writerow([i, float(v)])


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sftts", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", help="generate a synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--preset", choices=("default", "overfit"), default="default")
    p.add_argument("--speakers", type=int, default=None)
    p.add_argument("--train-utterances", type=int, default=None)
    p.add_argument("--val-utterances", type=int, default=None)
    p.add_argument("--test-utterances", type=int, default=None)
    p.add_argument("--prosody-mode", choices=("stochastic", "deterministic"), default=None)
    p.add_argument("--emit-audio", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("prepare", help="compute speaker stats and unit streams")
    p.add_argument("--corpus", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true",
                   help="allow resuming across a config-hash mismatch")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, fn in (("synth", cmd_synth), ("analyze", cmd_analyze)):
        p = sub.add_parser(name, help=f"{name} from a trained checkpoint")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--text", required=True, help="space-separated phoneme symbols")
        p.add_argument("--language", required=True)
        p.add_argument("--speaker-prompt", required=True,
                       help="mel .tmat file or corpus_dir::utt_id")
        p.add_argument("--style-prompt", default=None)
        p.add_argument("--no-style-transfer", action="store_true")
        p.add_argument("--pitch-offset", type=int, default=0)
        p.add_argument("--duration-offset", type=int, default=0)
        p.add_argument("--energy-offset", type=int, default=0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--sample", action="store_true",
                       help="temperature sampling instead of greedy decoding")
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--out", required=True)
        p.add_argument("--plot", action="store_true")
        if name == "analyze":
            p.add_argument("--mode", choices=("filter", "source", "coarse"),
                           default="coarse")
        else:
            p.add_argument("--render-audio", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("metrics", help="batch metrics over (output, prompt) pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="enables embedding-similarity rows")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("inspect", help="dump checkpoint/config information")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else USAGE_EXIT
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (NonFiniteError, NumericFailure) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC_EXIT
    except (CorpusError, dsp.FeatureError, TrainingError, TaskError, AcousticError,
            ProsodyError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
