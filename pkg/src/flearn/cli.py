"""Command-line front end.

Every subcommand writes its outputs atomically and records a run manifest
(``<output>.manifest.json``, or ``manifest.json`` inside an output directory)
holding the argv, resolved configuration, seeds, and SHA-256 checksums of
inputs and outputs. Exit codes: 0 success, 1 usage, 2 input or format
error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import os
import sys
import tempfile
from typing import Sequence

from . import __version__
from .arith import ForgettingRate, apply_forgetting, layer_distances, load_checkpoint, save_checkpoint
from .data import Vocab, corpus_files, build_vocab, generate_corpus, load_corpus, parse_records
from .editors import (
    PRETRAIN_CONFIG,
    STAGE_FORGET,
    STAGE_LEARN,
    EditorStrategy,
    Strategy,
    build_original_model,
    forget_delta,
    pretrain_base,
    run_editor,
)
from .errors import ConfigError, DivergenceError, FlearnError, InputError
from .experiments import compare_strategies, desk_model_config, lambda_sweep, time_strategies
from .lora import LoraConfig, init_adapters, lora_fine_tune, merge_adapters
from .metrics import evaluate, exact_match_accuracy
from .model import ParamSet
from .trainer import FtcConfig, TrainConfig, fine_tune, fine_tune_constrained, split_seed

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGENCE = 0, 1, 2, 3

LORA_SEED_STAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# file plumbing


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: str, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Run:
    """Tracks inputs and outputs of one invocation and writes its manifest."""

    def __init__(self, argv: Sequence[str], args: argparse.Namespace):
        self.argv = list(argv)
        self.args = args
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seeds: dict = {}
        self.started = _now()

    def input(self, path: str) -> str:
        if not os.path.exists(path):
            raise InputError(f"input not found: {path}")
        if os.path.isdir(path):
            self.inputs.extend(os.path.join(path, f) for f in sorted(os.listdir(path)) if not f.startswith("."))
        else:
            self.inputs.append(path)
        return path

    def output(self, path: str) -> str:
        real = os.path.realpath(path)
        if any(os.path.realpath(p) == real for p in self.inputs):
            raise InputError(f"refusing to overwrite input file {path}")
        self.outputs.append(path)
        return path

    def write(self, path: str, data: bytes | str) -> None:
        write_atomic(self.output(path), data)

    def checkpoint(self, path: str, obj) -> None:
        save_checkpoint(obj, self.output(path))

    def manifest_path(self) -> str:
        out = self.args.out
        return os.path.join(out, "manifest.json") if os.path.isdir(out) else out + ".manifest.json"

    def finish(self) -> None:
        manifest = {
            "tool": "flearn",
            "version": __version__,
            "command": self.args.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": {p: _sha256(p) for p in self.inputs if os.path.isfile(p)},
            "outputs": {p: _sha256(p) for p in self.outputs},
            "started": self.started,
            "finished": _now(),
        }
        path = self.manifest_path()
        if os.path.realpath(path) in {os.path.realpath(p) for p in self.inputs}:
            raise InputError(f"refusing to overwrite input file {path}")
        write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _snapshot(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _snapshot(v) if dataclasses.is_dataclass(v) else (v.value if hasattr(v, "value") else v)
    return out


# ---------------------------------------------------------------------------
# config assembly


def _train_config(args, base: TrainConfig = TrainConfig(), seed: int | None = None) -> TrainConfig:
    overrides = {
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "grad_accum_steps": args.grad_accum,
    }
    cfg = dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


def _lora_config(args) -> LoraConfig:
    kw = {"seed": split_seed(args.seed, LORA_SEED_STAGE)}
    if args.rank is not None:
        kw["rank"] = args.rank
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    return LoraConfig(**kw)


def _ftc_config(args) -> FtcConfig:
    kw = {}
    if args.epsilon is not None:
        kw["epsilon"] = args.epsilon
    if args.layer is not None:
        kw["target_layer"] = args.layer
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    if args.epochs is not None:
        kw["steps"] = args.epochs
    return FtcConfig(**kw)


def _load_params(run: Run, path: str, vocab: Vocab | None = None) -> ParamSet:
    obj = load_checkpoint(run.input(path))
    if not isinstance(obj, ParamSet):
        raise InputError(f"{path} does not hold model parameters")
    if vocab is not None and obj.config.vocab_size != len(vocab):
        raise InputError(f"{path} has vocab size {obj.config.vocab_size}, corpus vocab has {len(vocab)}")
    return obj


def _load_data(run: Run, directory: str):
    return load_corpus(run.input(directory))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run, a) -> None:
    corpus = generate_corpus(a.pairs, a.background, a.control, a.seed, multi_token=a.multi_token)
    vocab = build_vocab(corpus, max_size=a.max_vocab)
    run.config = {"pairs": a.pairs, "background": a.background, "control": a.control,
                  "multi_token": a.multi_token, "max_vocab": a.max_vocab}
    run.seeds = {"corpus": a.seed}
    os.makedirs(a.out, exist_ok=True)
    for name, text in corpus_files(corpus, vocab).items():
        run.write(os.path.join(a.out, name), text)


def cmd_pretrain(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    model_cfg = desk_model_config(vocab, seed=a.seed)
    cfg = _train_config(a, PRETRAIN_CONFIG, seed=split_seed(a.seed, 3))
    target = None if a.target_accuracy <= 0 else a.target_accuracy
    base = pretrain_base(corpus, vocab, model_cfg, cfg, target_accuracy=target)
    run.config = {"model": _snapshot(model_cfg), "train": _snapshot(cfg), "target_accuracy": target}
    run.seeds = {"model": a.seed, "train": cfg.seed}
    run.checkpoint(a.out, base)


def cmd_train_original(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    base = _load_params(run, a.model, vocab)
    cfg = _train_config(a, seed=a.seed)
    run.config = {"train": _snapshot(cfg)}
    run.seeds = {"train": cfg.seed}
    run.checkpoint(a.out, build_original_model(base, corpus, vocab, cfg))


def cmd_forget(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    original = _load_params(run, a.model, vocab)
    rate = ForgettingRate(a.lam)
    train = _train_config(a, seed=split_seed(a.seed, STAGE_FORGET))
    lora = _lora_config(a) if a.method == "lora" else None
    delta = forget_delta(original, corpus, vocab, a.method, train, lora)
    run.config = {"method": a.method, "lambda": a.lam, "train": _snapshot(train),
                  "lora": _snapshot(lora) if lora else None}
    run.seeds = {"forget_train": train.seed, **({"lora": lora.seed} if lora else {})}
    if a.delta_out:
        run.checkpoint(a.delta_out, delta)
    run.checkpoint(a.out, apply_forgetting(original, delta, rate))


def cmd_learn(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    theta = _load_params(run, a.model, vocab)
    train = _train_config(a, seed=split_seed(a.seed, STAGE_LEARN))
    run.seeds = {"learn_train": train.seed}
    if a.method == "full_ft":
        run.config = {"method": a.method, "train": _snapshot(train)}
        post = fine_tune(theta, corpus.new_records, vocab, train, stage="learn_train")
    elif a.method == "lora":
        lora = _lora_config(a)
        run.config = {"method": a.method, "train": _snapshot(train), "lora": _snapshot(lora)}
        run.seeds["lora"] = lora.seed
        trained = lora_fine_tune(theta, init_adapters(theta.config, lora), corpus.new_records, vocab, train, stage="learn_train")
        post = merge_adapters(theta, trained)
    else:
        ftc = _ftc_config(a)
        run.config = {"method": a.method, "ftc": _snapshot(ftc)}
        post = fine_tune_constrained(theta, corpus.new_records, vocab, ftc)
    run.checkpoint(a.out, post)


def _strategy(a, kind) -> EditorStrategy:
    kind = Strategy(kind)
    return EditorStrategy.default(
        kind,
        seed=a.seed,
        rate=a.lam if kind.forgets else None,
        train=_train_config(a),
        lora=_lora_config(a) if kind.uses_lora else None,
        ftc=_ftc_config(a) if kind is Strategy.FT_C else None,
    )


def cmd_edit(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    original = _load_params(run, a.model, vocab)
    strategy = _strategy(a, a.strategy)
    edited = run_editor(strategy, original, corpus, vocab)
    run.config = {"strategy": _snapshot(strategy)}
    run.seeds = {"seed": a.seed}
    run.checkpoint(a.out, edited.params)


def cmd_eval(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    pre = _load_params(run, a.pre, vocab)
    post = _load_params(run, a.post, vocab)
    fmt = a.format or "zsre"
    if a.records:
        with open(run.input(a.records), "rb") as fh:
            records = parse_records(fh, fmt)
    else:
        records = corpus.eval_records
    if not records:
        raise InputError("no records to evaluate")
    run.config = {"format": fmt, "records": a.records or "eval.jsonl"}
    if fmt == "instruction":
        acc = exact_match_accuracy(post, records, vocab)
        run.write(a.out, f"n_records,accuracy\n{len(records)},{acc!r}\n")
        return
    rep = evaluate(pre, post, records, vocab, control=corpus.control)
    header = ("reliability", "generality", "locality", "control_pre", "control_post", "n_records")
    row = (rep.reliability, rep.generality, rep.locality, rep.control_accuracy_pre, rep.control_accuracy_post)
    cells = ["" if v is None else repr(float(v)) for v in row] + [str(rep.n_records)]
    run.write(a.out, ",".join(header) + "\n" + ",".join(cells) + "\n")


def cmd_sweep(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    original = _load_params(run, a.model, vocab)
    lambdas = a.lam if a.lam else [0.1, 0.3, 0.5, 0.7, 0.9]
    train = _train_config(a, seed=split_seed(a.seed, STAGE_FORGET))
    lora = _lora_config(a)
    result = lambda_sweep(original, corpus, vocab, lambdas, a.method, train, lora)
    run.config = {"method": a.method, "lambdas": list(lambdas), "train": _snapshot(train), "lora": _snapshot(lora)}
    run.seeds = {"forget_train": train.seed, "lora": lora.seed}
    run.write(a.out, result.to_csv())


def cmd_time(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    original = _load_params(run, a.model, vocab)
    kinds = a.strategy or [s.value for s in Strategy]
    strategies = [_strategy(a, k) for k in kinds]
    table = time_strategies(strategies, original, corpus, vocab, a.counts, a.repeats)
    run.config = {"strategies": kinds, "counts": list(a.counts), "repeats": a.repeats}
    run.seeds = {"seed": a.seed}
    run.write(a.out, table.to_csv())


def cmd_analyze_params(run: Run, a) -> None:
    model = load_checkpoint(run.input(a.model))
    ref = load_checkpoint(run.input(a.ref))
    run.config = {"model": a.model, "ref": a.ref}
    run.write(a.out, layer_distances(model, ref).to_csv())


def cmd_compare(run: Run, a) -> None:
    corpus, vocab = _load_data(run, a.data)
    original = _load_params(run, a.model, vocab)
    kinds = a.strategy or [s.value for s in Strategy]
    strategies = [_strategy(a, k) for k in kinds]
    table = compare_strategies(original, corpus, vocab, strategies)
    run.config = {"strategies": [_snapshot(s) for s in strategies]}
    run.seeds = {"seed": a.seed}
    text = table.to_csv()
    if not a.with_seconds:
        # wall time is not reproducible; blank it unless asked for
        lines = text.splitlines()
        text = "\n".join([lines[0]] + [ln.rsplit(",", 1)[0] + "," for ln in lines[1:]]) + "\n"
    run.write(a.out, text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-original": cmd_train_original,
    "forget": cmd_forget,
    "learn": cmd_learn,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "time": cmd_time,
    "analyze-params": cmd_analyze_params,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flearn", description="Forget-then-learn knowledge updating on a small transformer.")
    parser.add_argument("--version", action="version", version=f"flearn {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help, *, data=True, model=False, train=False, lora=False, ftc=False, out="output path"):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--seed", type=int, default=0, help="parent seed (default 0)")
        if data:
            p.add_argument("--data", required=True, help="corpus directory from gen-data")
        if model:
            p.add_argument("--model", required=True, help="input parameter checkpoint")
        if train or ftc:
            p.add_argument("--epochs", type=int, help="training epochs (FT-c: optimizer steps)")
            p.add_argument("--lr", type=float, help="learning rate")
        if train:
            p.add_argument("--batch", type=int, help="micro-batch size")
            p.add_argument("--grad-accum", type=int, help="micro-batches per optimizer step")
        if lora:
            p.add_argument("--rank", type=int, help="LoRA rank")
            p.add_argument("--alpha", type=float, help="LoRA alpha")
        if ftc:
            p.add_argument("--epsilon", type=float, help="FT-c L-inf radius")
            p.add_argument("--layer", type=int, help="FT-c target layer (default: last)")
        p.add_argument("--out", required=True, help=out)
        return p

    strategies = [s.value for s in Strategy]

    p = add("gen-data", "Generate a synthetic fact corpus directory.", data=False, out="output directory")
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--background", type=int, default=200)
    p.add_argument("--control", type=int, default=40)
    p.add_argument("--max-vocab", type=int, default=512)
    p.add_argument("--multi-token", action="store_true", help="two-word answers")

    p = add("pretrain", "Train a fresh base model on background, control, and old facts.", train=True)
    p.add_argument("--target-accuracy", type=float, default=95.0, help="early-stop threshold in percent; 0 disables")

    add("train-original", "Fine-tune a base model on the old facts.", model=True, train=True)

    p = add("forget", "Subtract scaled old-knowledge parameters.", model=True, train=True, lora=True)
    p.add_argument("--method", choices=("full_ft", "lora"), default="full_ft")
    p.add_argument("--lambda", dest="lam", type=float, required=True, help="forgetting rate")
    p.add_argument("--delta-out", help="also write the old-knowledge delta here")

    p = add("learn", "Fine-tune on the new facts.", model=True, train=True, lora=True, ftc=True)
    p.add_argument("--method", choices=("full_ft", "lora", "ft_c"), default="full_ft")

    p = add("edit", "Run a complete knowledge-updating strategy.", model=True, train=True, lora=True, ftc=True)
    p.add_argument("--strategy", choices=strategies, required=True)
    p.add_argument("--lambda", dest="lam", type=float, help="forgetting rate (forgetting strategies)")

    p = add("eval", "Score an edited model against its original.", out="report CSV")
    p.add_argument("--pre", required=True, help="original checkpoint")
    p.add_argument("--post", required=True, help="edited checkpoint")
    p.add_argument("--records", help="records file (default: the corpus eval.jsonl)")
    p.add_argument("--format", choices=("instruction", "zsre"), help="records format (default zsre)")

    p = add("sweep", "Forgetting-rate sweep scored on the old answers.", model=True, train=True, lora=True, out="sweep CSV")
    p.add_argument("--method", choices=("full_ft", "lora"), default="full_ft")
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", help="rates (default 0.1 0.3 0.5 0.7 0.9)")

    p = add("time", "Wall-clock editing time per strategy.", model=True, train=True, lora=True, ftc=True, out="timing CSV")
    p.add_argument("--strategy", choices=strategies, nargs="+")
    p.add_argument("--lambda", dest="lam", type=float, help="forgetting rate (default per strategy)")
    p.add_argument("--counts", type=int, nargs="+", default=[1, 10, 100])
    p.add_argument("--repeats", type=int, default=1)

    p = add("analyze-params", "Per-tensor L2 distances between two checkpoints.", data=False, model=True, out="distance CSV")
    p.add_argument("--ref", required=True, help="reference checkpoint")

    p = add("compare", "Edit with several strategies and tabulate the metrics.", model=True, train=True, lora=True, ftc=True, out="compare CSV")
    p.add_argument("--strategy", choices=strategies, nargs="+")
    p.add_argument("--lambda", dest="lam", type=float, help="forgetting rate (default per strategy)")
    p.add_argument("--with-seconds", action="store_true", help="keep wall-clock seconds in the CSV")
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    detail = "".join(f" {k}={v}" for k, v in extra.items() if v is not None)
    print(f"flearn: {kind}: {message}{detail}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    for name in ("lam", "lr", "epochs", "batch", "grad_accum", "rank", "alpha", "epsilon", "layer"):
        if not hasattr(args, name):
            setattr(args, name, None)
    run = Run(argv, args)
    try:
        COMMANDS[args.command](run, args)
        run.finish()
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, "divergence", str(exc), stage=exc.stage, epoch=exc.epoch, step=exc.step)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except (FlearnError, OSError) as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
