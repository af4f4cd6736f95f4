"""Command-line entry point.

Exit statuses: 0 success, 2 usage, 3 configuration, 4 numeric divergence, 5 I/O.
``TANDEM_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from .corpus import CLASS_NAMES, FEATURE_TYPES, GeneratorSpec, dump_png, generate_corpus, read_corpus, \
    split_by_patient, write_corpus
from .errors import ConfigError, FormatError, TandemError
from .image_encoder import EncoderConfig
from .model import ModelConfig
from .trainer import TrainConfig, Trainer, drop_rate_sweep, text_attention_stats, write_metrics_csv

log = logging.getLogger("tandemnet")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_MODEL_FIELDS = {"embed_dim", "hidden", "attn_dim", "num_sentences", "skip_connection"}
_ENCODER_FIELDS = {f.name for f in fields(EncoderConfig)}
_CAPTION_FIELDS = {"freeze_attention_epochs", "finetune_lr", "head_lr", "max_decode_length"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config handling


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(value)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) for v in value.split(","))
    return type(like)(value)


def _overrides(args) -> dict[str, str]:
    """Config-file values first, then any explicitly given flag."""
    values = read_config_file(args.config) if args.config else {}
    known = _TRAIN_FIELDS | _MODEL_FIELDS | {f"encoder.{k}" for k in _ENCODER_FIELDS} | _CAPTION_FIELDS
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    for key in known:
        flag = getattr(args, key.replace(".", "_"), None)
        if flag is not None:
            values[key] = str(flag)
    return values


def build_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    values = _overrides(args)

    def pick(defaults, names, prefix=""):
        out = {}
        for name in names:
            key = prefix + name
            if key in values:
                try:
                    out[name] = _coerce(values[key], getattr(defaults, name))
                except ValueError:
                    raise ConfigError(key, f"cannot parse {values[key]!r}") from None
        return out

    enc = EncoderConfig(**pick(EncoderConfig(), _ENCODER_FIELDS, "encoder."))
    train_cfg = TrainConfig(**{**pick(TrainConfig(), _TRAIN_FIELDS), "seed": args.seed})
    model_cfg = ModelConfig(encoder=enc, **pick(ModelConfig(), _MODEL_FIELDS))
    model_cfg.validate()
    caption = {k: values[k] for k in _CAPTION_FIELDS if k in values}
    return model_cfg, train_cfg, caption


def write_config_echo(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _echo(args, out_path, **extra) -> None:
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    payload.update(extra)
    write_config_echo(out_path, payload)


def _load_corpus(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    return read_corpus(path)


def _require_file(path, what: str) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _held_out(corpus, meta_or_args) -> tuple:
    fraction = meta_or_args.get("test_fraction", 0.2)
    seed = meta_or_args.get("split_seed", 0)
    return split_by_patient(corpus, fraction, seed=seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    spec = GeneratorSpec(num_patients=args.patients, samples_per_patient=args.samples_per_patient,
                         image_size=args.image_size, level_noise=args.level_noise,
                         pixel_noise=args.pixel_noise, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(spec)
    write_corpus(corpus, out)
    if args.png_dir:
        dump_png(corpus, args.png_dir, limit=args.png_limit)
    _echo(args, out.with_name(out.name + ".config.json"), spec=spec.to_dict())
    print(f"wrote {len(corpus)} samples ({len(corpus.vocab)} tokens in vocabulary) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint

    model_cfg, cfg, _ = build_configs(args)
    corpus = _load_corpus(args.corpus)
    model_cfg.vocab_size = len(corpus.vocab)
    train, test = split_by_patient(corpus, args.test_fraction, seed=args.split_seed)
    if cfg.val_fraction > 0:
        fit_part, val_part = split_by_patient(train, cfg.val_fraction, seed=cfg.seed)
    else:
        fit_part, val_part = train, None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.create(model_cfg, cfg, fit_part, args.kind)
    rows = trainer.fit(fit_part.samples, val_part.samples if val_part else None)
    rows = list(rows)
    with_text = trainer.evaluate(test.samples, True) if args.kind == "tandem" else None
    without = trainer.evaluate(test.samples, False)
    rows.append({"epoch": trainer.epoch, "split": "test", "loss": without.loss,
                 "acc_with_text": with_text.accuracy if with_text else float("nan"),
                 "acc_without_text": without.accuracy})
    write_metrics_csv(rows, out / "metrics.csv")
    save_checkpoint(out / "model.ckpt", trainer, corpus.vocab,
                    {"test_fraction": args.test_fraction, "split_seed": args.split_seed})
    _echo(args, out / "run_config.json", model=model_cfg.to_dict(), train=cfg.to_dict())
    if with_text is not None:
        print(f"test accuracy with text: {with_text.accuracy:.4f}")
    print(f"test accuracy without text: {without.accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint

    _require_file(args.checkpoint, "checkpoint")
    corpus = _load_corpus(args.corpus)
    trainer, meta = load_checkpoint(args.checkpoint)
    samples = corpus.samples if args.split == "all" else _held_out(corpus, meta)[1 if args.split == "test" else 0].samples
    modes = [args.text] if args.text is not None else [True, False]
    if trainer.kind != "tandem":
        modes = [False]
    rows = []
    for text in modes:
        rep = trainer.evaluate(samples, text)
        label = "with_text" if text else "without_text"
        rows.append((label, rep))
        print(f"accuracy {label}: {rep.accuracy:.4f} (n={rep.count})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "accuracy", "loss", "count", "confusion"])
            for label, rep in rows:
                w.writerow([label, f"{rep.accuracy:.6f}", f"{rep.loss:.6f}", rep.count,
                            " ".join(str(v) for v in rep.confusion.ravel())])
        _echo(args, out / "run_config.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model_cfg, cfg, _ = build_configs(args)
    try:
        rates = [float(r) for r in args.rates.split(",") if r.strip()]
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("rates", f"cannot parse {args.rates!r} / {args.seeds!r}") from None
    corpus = _load_corpus(args.corpus)
    model_cfg.vocab_size = len(corpus.vocab)
    train, test = split_by_patient(corpus, args.test_fraction, seed=args.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = drop_rate_sweep(model_cfg, cfg, train, test, rates, seeds)
    report.write_csv(out / "sweep.csv")
    _echo(args, out / "run_config.json", model=model_cfg.to_dict(), train=cfg.to_dict())
    for r, (w, wo) in zip(rates, report.table()):
        print(f"r={r:g}: with text {w:.4f}, without text {wo:.4f}")
    return EXIT_OK


def cmd_attn_export(args) -> int:
    from .checkpoint import load_checkpoint
    from .export import export_attention_map
    from .head import ModalityPolicy
    from .tensor import no_grad
    from .trainer import make_batch

    _require_file(args.checkpoint, "checkpoint")
    corpus = _load_corpus(args.corpus)
    trainer, meta = load_checkpoint(args.checkpoint)
    if trainer.kind != "tandem":
        raise ConfigError("checkpoint", "attention export needs a tandem model")
    samples = _held_out(corpus, meta)[1].samples if args.split == "test" else corpus.samples
    if not 0 <= args.index < len(samples):
        raise ConfigError("index", f"must lie in [0, {len(samples)})")
    sample = samples[args.index]
    model = trainer.model.eval()
    with no_grad():
        out = model.forward(make_batch([sample], trainer.mean, None, with_text=not args.no_text),
                            ModalityPolicy(trainer.cfg.drop_rate, "eval", not args.no_text))
    alpha = out.attention.alpha.data[0]
    g = model.cfg.encoder.grid_side
    size = args.size or model.cfg.encoder.input_size
    dest = Path(args.out)
    pgm, csv_path = export_attention_map(alpha, g, size, dest, stem=f"attention_{args.index:04d}")
    _echo(args, dest / "run_config.json", label=CLASS_NAMES[sample.label])
    print(f"wrote {pgm} and {csv_path}")
    return EXIT_OK


def cmd_text_attn_stats(args) -> int:
    from .checkpoint import load_checkpoint

    _require_file(args.checkpoint, "checkpoint")
    corpus = _load_corpus(args.corpus)
    trainer, meta = load_checkpoint(args.checkpoint)
    if trainer.kind != "tandem":
        raise ConfigError("checkpoint", "text attention needs a tandem model")
    samples = _held_out(corpus, meta)[1].samples if args.split == "test" else corpus.samples
    table = text_attention_stats(trainer.model, samples, trainer.cfg.drop_rate, trainer.mean)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    N = table.shape[1] - 1
    names = list(FEATURE_TYPES[:N]) if N <= len(FEATURE_TYPES) else [f"sentence_{j}" for j in range(N)]
    with open(out / "text_attention.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + names + ["mean"])
        for y, row in enumerate(table):
            w.writerow([CLASS_NAMES[y]] + [f"{v:.6f}" for v in row])
    _echo(args, out / "run_config.json")
    np.set_printoptions(precision=4, suppress=True)
    print(table)
    return EXIT_OK


def cmd_caption(args) -> int:
    from .captioner import CaptionConfig, Captioner, CaptionTrainer, slot_accuracy
    from .checkpoint import load_checkpoint

    values = _overrides(args)
    cap_kwargs = {}
    for k in _CAPTION_FIELDS:
        if k in values:
            like = getattr(CaptionConfig(), k)
            try:
                cap_kwargs[k] = _coerce(values[k], like)
            except ValueError:
                raise ConfigError(k, f"cannot parse {values[k]!r}") from None
    cap_cfg = CaptionConfig(**cap_kwargs)
    _require_file(args.checkpoint, "checkpoint")
    corpus = _load_corpus(args.corpus)
    trainer, meta = load_checkpoint(args.checkpoint)
    if trainer.kind != "tandem":
        raise ConfigError("checkpoint", "captioning needs a tandem model")
    train, test = _held_out(corpus, meta)
    rng = np.random.default_rng(args.seed)
    captioner = Captioner(trainer.model, len(corpus.vocab), rng)
    ct = CaptionTrainer(captioner, cap_cfg, trainer.mean, corpus.vocab, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    losses = []
    for epoch in range(args.epochs):
        loss = ct.train_epoch(train.samples)
        losses.append(loss)
        log.info("caption epoch %d loss=%.4f%s", epoch, loss, " (attention frozen)" if epoch < cap_cfg.freeze_attention_epochs else "")
    samples = test.samples[:args.limit] if args.limit else test.samples
    generated = ct.generate(samples)
    with open(out / "reports.txt", "w") as fh:
        for i, sentences in enumerate(generated):
            if i:
                fh.write("\n")
            fh.write("".join(s + "\n" for s in sentences))
    acc = slot_accuracy(generated, samples)
    with open(out / "caption_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([[e, f"{v:.6f}"] for e, v in enumerate(losses)])
    _echo(args, out / "run_config.json", caption=cap_cfg.to_dict(), slot_accuracy=acc)
    print(f"slot accuracy on {len(samples)} held-out samples: {acc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p) -> None:
    g = p.add_argument_group("model / optimisation (override --config)")
    g.add_argument("--drop-rate", dest="drop_rate", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--cnn-lr", dest="cnn_lr", type=float)
    g.add_argument("--attention-lr", dest="attention_lr", type=float)
    g.add_argument("--lr-decay", dest="lr_decay", type=float)
    g.add_argument("--clip-norm", dest="clip_norm", type=float)
    g.add_argument("--dtype", choices=("float64", "float32"))
    g.add_argument("--embed-dim", dest="embed_dim", type=int, help="K")
    g.add_argument("--hidden", type=int, help="D (must equal C)")
    g.add_argument("--attn-dim", dest="attn_dim", type=int, help="M (must equal C)")
    g.add_argument("--num-sentences", dest="num_sentences", type=int, help="N")
    g.add_argument("--widen-factor", dest="encoder_widen_factor", type=int)
    g.add_argument("--base-width", dest="encoder_base_width", type=int)
    g.add_argument("--encoder-dropout", dest="encoder_dropout", type=float)


def _add_split_flags(p) -> None:
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tandemnet", description="Image + report classifier with optional text at test time.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="key=value file; explicit flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=50)
    p.add_argument("--samples-per-patient", type=int, default=20)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--level-noise", type=float, default=0.15)
    p.add_argument("--pixel-noise", type=float, default=0.06)
    p.add_argument("--png-dir")
    p.add_argument("--png-limit", type=int, default=16)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model, write checkpoint and metrics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("tandem", "image-only"), default="tandem")
    _add_split_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint with and/or without text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--with-text", dest="text", action="store_const", const=True)
    mode.add_argument("--no-text", dest="text", action="store_const", const=False)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval, text=None)

    p = sub.add_parser("sweep", help="test accuracy across modality drop rates")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rates", default="0,0.25,0.5,0.75")
    p.add_argument("--seeds", default="0")
    _add_split_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attn-export", help="write one sample's attention map (PGM + CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--size", type=int)
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.set_defaults(func=cmd_attn_export)

    p = sub.add_parser("text-attn-stats", help="mean text attention per class and feature type")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.set_defaults(func=cmd_text_attn_stats)

    p = sub.add_parser("caption", help="fine-tune report generation and decode held-out samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--limit", type=int, default=0, help="decode only the first N held-out samples")
    p.add_argument("--freeze-attention-epochs", dest="freeze_attention_epochs", type=int)
    p.add_argument("--finetune-lr", dest="finetune_lr", type=float)
    p.add_argument("--head-lr", dest="head_lr", type=float)
    p.add_argument("--max-decode-length", dest="max_decode_length", type=int)
    p.set_defaults(func=cmd_caption)
    return parser


def _thread_limit():
    raw = os.environ.get("TANDEM_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("TANDEM_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("TANDEM_THREADS", f"expected a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except TandemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
