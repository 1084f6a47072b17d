"""Command-line entry point (``scvc``).

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import evaluation as ev
from . import plotting
from .audio import griffin_lim_invert, mel_spectrogram, read_wav, write_wav
from .config import RunConfig, dump_run_config, load_run_config
from .data import load_corpus, synth_corpus, write_corpus
from .errors import CheckpointError, ValidationError
from .speaker import pretrain_speaker_encoder
from .training import new_model, read_metrics, train, write_metrics

log = logging.getLogger("scvc")

SPEAKER_GROUPS = ("speaker_encoder", "ge2e")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("spk_steps", "spk_steps"),
                      ("lambda_scl", "lambda_scl")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, **overrides))
    return cfg


def _corpus(args, cfg: RunConfig):
    corpus, report = load_corpus(args.data, unseen_speakers=args.unseen_speakers,
                                 eval_fraction=args.eval_fraction, seed=cfg.training.seed)
    if report:
        print(f"rejected inputs:\n{report}", file=sys.stderr)
    return corpus


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise ValidationError(f"{path}: exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ValidationError(f"{path}: directory is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_model(cfg: RunConfig, path, *, require: tuple[str, ...] = ()):
    model = new_model(cfg.model, cfg.training.seed)
    report = ckpt.apply_checkpoint(model, ckpt.load_checkpoint(path))
    missing = [g for g in require if g not in report.loaded]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks groups {', '.join(missing)}")
    log.info("%s", report)
    model.eval()
    return model


def _emit(out_dir: Path, stem: str, table: str, summary: dict[str, float]) -> None:
    (out_dir / f"{stem}.tsv").write_text(table, encoding="utf-8")
    text = plotting.write_summary(out_dir / f"{stem}_summary.txt", summary)
    sys.stdout.write(table)
    sys.stdout.write(text)


# --- commands -----------------------------------------------------------------

def cmd_synth_data(args) -> None:
    corpus = synth_corpus(args.speakers, args.utts, seed=args.seed)
    out = _prepare_out(Path(args.out), args.force)
    manifest = write_corpus(corpus, out)
    print(f"wrote {len(corpus.all_utterances())} utterances, manifest {manifest}")


def cmd_config(args) -> None:
    if not args.dump_defaults:
        raise ValidationError("config: nothing to do (use --dump-defaults)")
    sys.stdout.write(dump_run_config(RunConfig()))


def cmd_pretrain_speaker(args) -> None:
    cfg = _run_config(args)
    corpus = _corpus(args, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encoder, ge2e, losses = pretrain_speaker_encoder(corpus, cfg.model, cfg.training)
    model = new_model(cfg.model, cfg.training.seed, encoder.state_dict())
    model.ge2e.load_state_dict(ge2e.state_dict())
    ckpt.save_checkpoint(out, ckpt.model_tensors(model, SPEAKER_GROUPS))
    metrics = out.with_name(out.stem + "_ge2e.tsv")
    metrics.write_text("".join(f"{k}\t{v:.6f}\n" for k, v in enumerate(losses)), encoding="utf-8")
    print(f"ge2e loss {losses[0] if losses else float('nan'):.4f} -> "
          f"{losses[-1] if losses else float('nan'):.4f}; wrote {out}")


def cmd_train(args) -> None:
    cfg = _run_config(args)
    corpus = _corpus(args, cfg)
    model = _load_model(cfg, args.speaker_checkpoint, require=("speaker_encoder",))
    model.trained_steps = 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, history = train(corpus, model, cfg.training)
    ckpt.save_checkpoint(out, ckpt.model_tensors(model))
    write_metrics(out.with_name(out.stem + "_metrics.tsv"), history)
    if history:
        last = history[-1]
        print(f"step {last.step}: srl {last.srl:.4f} scl {last.scl:.4f}; wrote {out}")
    else:
        print(f"initialization checkpoint written to {out}")


def cmd_convert(args) -> None:
    cfg = _run_config(args)
    model = _load_model(cfg, args.checkpoint, require=("speaker_encoder", "content_encoder",
                                                       "decoder"))
    source = mel_spectrogram(read_wav(args.source))
    target = mel_spectrogram(read_wav(args.target_ref))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mel = model.convert(source, model.embed_utterance(source), model.embed_utterance(target))
    ckpt.save_checkpoint(out.with_suffix(".mel"), {"mel": mel.frames})
    wav = griffin_lim_invert(mel, iters=args.griffin_lim_iters, seed=cfg.training.seed)
    write_wav(out, wav)
    print(f"wrote {out} and {out.with_suffix('.mel')}")


def cmd_eval_probe(args) -> None:
    cfg = _run_config(args)
    corpus = _corpus(args, cfg)
    model = _load_model(cfg, args.checkpoint, require=("speaker_encoder", "content_encoder"))
    out = _prepare_out(Path(args.out), True)
    seed = cfg.training.seed
    _, content = ev.content_probe(model, corpus, steps=args.probe_steps, seed=seed, kind=args.kind)
    _, speaker = ev.speaker_probe(model, corpus, steps=args.probe_steps, seed=seed, kind=args.kind)
    rows = [("content", content), ("speaker_embedding", speaker)]
    table = "probe\taccuracy\tchance\tnum_eval\n" + "".join(
        f"{name}\t{r.accuracy:.6f}\t{r.chance:.6f}\t{r.num_eval}\n" for name, r in rows)
    summary = {**content.summary("content_probe"), **speaker.summary("speaker_probe")}
    _emit(out, "probe", table, summary)


def cmd_eval_conversion(args) -> None:
    cfg = _run_config(args)
    corpus = _corpus(args, cfg)
    model = _load_model(cfg, args.checkpoint)
    out = _prepare_out(Path(args.out), True)
    seed = cfg.training.seed
    pairs = ev.conversion_pairs(corpus, seed=seed, max_pairs=args.max_pairs)
    if not pairs:
        raise ValidationError("no held-out utterances to convert; raise --eval-fraction")
    probe = ev.reference_probe(model, corpus, steps=args.probe_steps, seed=seed)
    report = ev.evaluate_conversions(model, corpus, pairs, probe)
    _emit(out, "conversion", report.table(), report.summary())


def cmd_plots(args) -> None:
    out = _prepare_out(Path(args.out), True)
    written = []
    if args.metrics:
        history = read_metrics(args.metrics)
        plotting.write_loss_csv(out / "loss.csv", history)
        written += [out / "loss.csv", plotting.plot_losses(history, out / "loss.png")]
    if args.summary:
        acc, chance = {}, None
        for path in args.summary:
            for key, value in plotting.read_summary(path).items():
                if key.endswith("_accuracy"):
                    acc[key[:-len("_accuracy")]] = value
                elif key.endswith("_chance"):
                    chance = value
        plotting.write_probe_csv(out / "probes.csv", acc, chance)
        written += [out / "probes.csv", plotting.plot_probes(acc, chance, out / "probes.png")]
    if not written:
        raise ValidationError("plots: give --metrics and/or --summary")
    for path in written:
        print(path)


# --- parser -------------------------------------------------------------------

def _common(p, *, data=True):
    p.add_argument("--config", help="run config file (section.key = value lines)")
    p.add_argument("--seed", type=int, help="overrides training.seed")
    if data:
        p.add_argument("data", help="corpus root: <root>/<speaker>/*.wav")
        p.add_argument("--unseen-speakers", type=int, default=0,
                       help="speakers held out entirely (default 0)")
        p.add_argument("--eval-fraction", type=float, default=0.1,
                       help="per-speaker utterance holdout (default 0.1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scvc", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic corpus with manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="allow a non-empty --out")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("config", help="print the config schema with defaults")
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("pretrain-speaker", help="GE2E pretraining of the speaker encoder")
    _common(p)
    p.add_argument("--steps", dest="spk_steps", type=int, help="overrides training.spk_steps")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain_speaker)

    p = sub.add_parser("train", help="train content encoder and decoder")
    _common(p)
    p.add_argument("--speaker-checkpoint", required=True)
    p.add_argument("--steps", type=int, help="overrides training.steps")
    p.add_argument("--lambda-scl", type=float, help="overrides training.lambda_scl")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one utterance to a target voice")
    _common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source WAV")
    p.add_argument("--target-ref", required=True, help="WAV of the target speaker")
    p.add_argument("--out", required=True, help="output WAV; the mel goes beside it as .mel")
    p.add_argument("--griffin-lim-iters", type=int, default=60)
    p.set_defaults(func=cmd_convert)

    for name, func, helptext in (("eval-probe", cmd_eval_probe, "speaker-leakage probes"),
                                 ("eval-conversion", cmd_eval_conversion,
                                  "target-speaker recognition of conversions")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True, help="report directory")
        p.add_argument("--probe-steps", type=int, default=300)
        if name == "eval-probe":
            p.add_argument("--kind", choices=("linear", "mlp"), default="linear")
        else:
            p.add_argument("--max-pairs", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("plots", help="loss-curve and probe-accuracy figures (CSV + PNG)")
    p.add_argument("--metrics", help="training metrics TSV")
    p.add_argument("--summary", nargs="*", help="summary files from eval commands")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"scvc {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"scvc {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
