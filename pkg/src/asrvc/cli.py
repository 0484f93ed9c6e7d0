"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
All machine-readable output is ``key=value`` text on stdout; a one-line
config summary and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asrvc", description="Voice conversion with a feature-conditioned WaveNet decoder")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train decoder and speaker embeddings")
    t.add_argument("--manifest", required=True)
    t.add_argument("--encoder", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--f0", action="store_true", help="condition on F0 as well")
    t.add_argument("--preset", choices=("toy", "paper"), default="toy")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--crop", type=int, default=8192, help="crop length in samples")
    t.add_argument("--batch", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--checkpoint-every", type=int, default=0)

    f = sub.add_parser("fit-speaker", help="add a new speaker to a trained checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--manifest", required=True)
    f.add_argument("--name", required=True)
    f.add_argument("--steps", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--encoder", default=None, help="defaults to the path recorded in the checkpoint")
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--seed", type=int, default=None)

    c = sub.add_parser("convert", help="convert a WAV to a target speaker")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--encoder", required=True)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--speaker", required=True)
    c.add_argument("--temperature", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="objective metrics")
    esub = e.add_subparsers(dest="metric", parser_class=_Parser)
    esub.required = True
    m = esub.add_parser("mcd")
    m.add_argument("--ref", required=True)
    m.add_argument("--hyp", required=True)
    s = esub.add_parser("speaker-id")
    s.add_argument("--classifier", required=True)
    s.add_argument("--manifest", required=True)

    k = sub.add_parser("train-classifier", help="train the speaker-ID CNN")
    k.add_argument("--manifest", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--steps", type=int, required=True)
    k.add_argument("--preset", choices=("toy", "paper"), default="paper")
    k.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="incremental vs naive generation throughput")
    b.add_argument("--ckpt", default=None, help="trained checkpoint; random weights if omitted")
    b.add_argument("--preset", choices=("toy", "paper"), default="paper", help="used without --ckpt")
    b.add_argument("--seconds", type=float, required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--naive-budget", type=float, default=60.0, help="seconds of naive recompute before extrapolating")

    x = sub.add_parser("features", help="extract front-end features to a matrix file")
    x.add_argument("--in", dest="input", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--kind", choices=("mel", "f0", "cepstra"), required=True)
    return p


def _summary(args) -> str:
    skip = {"command", "metric"}
    parts = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip]
    name = args.command + (f" {args.metric}" if getattr(args, "metric", None) else "")
    return f"asrvc {name} " + " ".join(parts)


def _cmd_train(args, out):
    from .train import TrainConfig, read_manifest, save_checkpoint, train

    config = TrainConfig(steps=args.steps, batch_size=args.batch, crop_samples=args.crop, lr=args.lr,
                         seed=args.seed, use_f0=args.f0, preset=args.preset,
                         checkpoint_every=args.checkpoint_every)
    manifest = read_manifest(args.manifest)

    def log(step, loss):
        print(f"step={step} loss={loss:.6f}", file=out, flush=True)

    ckpt = train(manifest, args.encoder, config, on_step=log, save_to=args.out)
    save_checkpoint(args.out, ckpt)


def _cmd_fit_speaker(args, out):
    from .train import fit_speaker, load_checkpoint, read_manifest, save_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    manifest = read_manifest(args.manifest)

    def log(step, loss):
        print(f"step={step} loss={loss:.6f}", file=out, flush=True)

    new = fit_speaker(ckpt, manifest, args.steps, name=args.name, encoder_ckpt=args.encoder, lr=args.lr,
                      seed=args.seed, on_step=log)
    save_checkpoint(args.out, new)


def _cmd_convert(args, out):
    from .audio_io import read_wav, write_wav
    from .train import convert, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    ckpt.table.index(args.speaker)  # fail before any heavy work
    wav = read_wav(args.input)
    result = convert(ckpt, args.encoder, wav, args.speaker, args.temperature, args.seed)
    write_wav(args.out, result)
    print(f"samples_in={len(wav)} samples_out={len(result)}", file=out)


def _cmd_eval(args, out):
    from .audio_io import read_wav

    if args.metric == "mcd":
        from .metrics import mcd_report

        print(mcd_report(read_wav(args.ref), read_wav(args.hyp)).to_text(), file=out)
    else:
        from .metrics import identification_accuracy, load_classifier
        from .train import read_manifest

        acc, n = identification_accuracy(load_classifier(args.classifier), read_manifest(args.manifest))
        print(f"accuracy_pct={acc:.3f} n={n}", file=out)


def _cmd_train_classifier(args, out):
    from .metrics import ClassifierConfig, identification_accuracy, save_classifier, train_classifier
    from .train import read_manifest

    manifest = read_manifest(args.manifest)
    n = len(manifest.speakers)
    make = ClassifierConfig.toy if args.preset == "toy" else ClassifierConfig
    clf = train_classifier(manifest, make(n_classes=max(n, 2)), steps=args.steps, seed=args.seed,
                           on_step=lambda s, l: print(f"step={s} loss={l:.6f}", file=out, flush=True))
    save_classifier(args.out, clf)
    acc, count = identification_accuracy(clf, manifest)
    print(f"train_accuracy_pct={acc:.3f} n={count}", file=out)


def _cmd_bench(args, out):
    from .decoder import DecoderConfig, init_decoder
    from .infer import bench_infer

    if args.ckpt:
        from .train import load_checkpoint

        ckpt = load_checkpoint(args.ckpt)
        params, config = ckpt.params, ckpt.decoder_config
    else:
        config = DecoderConfig.toy() if args.preset == "toy" else DecoderConfig.paper()
        params = init_decoder(config, args.seed)
    report = bench_infer(params, config, seconds=args.seconds, seed=args.seed, naive_budget_s=args.naive_budget)
    print(report.to_text(), file=out)


def _cmd_features(args, out):
    from .archive import save_features
    from .audio_io import read_wav
    from .dsp import estimate_f0, log_mel, mel_cepstra

    w = read_wav(args.input)
    if args.kind == "mel":
        mat = log_mel(w).frames
    elif args.kind == "f0":
        mat = estimate_f0(w).values_hz[:, None]
    else:
        mat = mel_cepstra(w).frames
    save_features(args.out, np.asarray(mat, np.float32))
    print(f"kind={args.kind} frames={mat.shape[0]} dims={mat.shape[1]}", file=out)


COMMANDS = {
    "train": _cmd_train,
    "fit-speaker": _cmd_fit_speaker,
    "convert": _cmd_convert,
    "eval": _cmd_eval,
    "train-classifier": _cmd_train_classifier,
    "bench": _cmd_bench,
    "features": _cmd_features,
}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    print(_summary(args), file=err, flush=True)
    try:
        COMMANDS[args.command](args, out)
    except NumericError as exc:
        print(f"error: {args.command}: {exc}", file=err)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=err)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
