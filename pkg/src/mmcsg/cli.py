"""Command-line entry point: ``synth``, ``train``, ``eval``, ``generate``, ``gradcheck``.

Settings resolve as command-line flag > ``--config`` JSON key > built-in
default.  Config keys are the :class:`RunConfig` field names.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, canonical_json, load_checkpoint, save_checkpoint
from .corpus import SynthSpec, generate_corpus, split
from .evaluation import evaluate
from .features import SchemaError, VocabSpec, detokenize, dump_sessions, load_sessions
from .fusion import GATE_ACTIVATIONS, MODALITIES
from .metrics import DegenerateInputError, welch_significant
from .model import InputError, ModelConfig, NumericError, bundle_vectors, greedy_decode, \
    init_params, as_tensors
from .tensor import DimensionError
from .train import TrainConfig, grad_check, tiny_config, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = {
    "T": (),
    "TA": ("audio",),
    "TP": ("personal",),
    "TV": ("visual",),
    "TAV": ("audio", "visual"),
    "TAVP": ("audio", "visual", "personal"),
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # paths
    corpus: str = "corpus.jsonl"
    checkpoint: str = "model.mmcs"
    log: str = "train_log.jsonl"
    report: str = "report.json"
    # corpus
    n_sessions: int = 1000
    synth_vocab_size: int = 120
    signal_strength: float = 0.9
    min_filler: int = 10
    max_filler: int = 16
    split_ratios: tuple = (0.80, 0.06, 0.14)
    # model
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 0
    max_src_len: int = 480
    max_tgt_len: int = 50
    n_intents: int = 7
    d_audio: int = 16
    d_visual: int = 16
    gate_activation: str = "none"
    loss_alpha1: float = 0.2
    use_audio: bool = True
    use_visual: bool = True
    use_personal: bool = True
    # training
    learning_rate: float = 3e-5
    batch_size: int = 16
    epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    target: str = "mcs"
    seed: int = 0


DEFAULTS = RunConfig()
FIELD_NAMES = {f.name for f in fields(RunConfig)}


# --------------------------------------------------------------------- parser

def _ratios(text: str) -> tuple:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def _add(p: argparse.ArgumentParser, flag: str, help: str, **kw) -> None:
    dest = kw.pop("dest", flag.lstrip("-").replace("-", "_"))
    if "action" not in kw and "type" not in kw:
        kw["type"] = type(getattr(DEFAULTS, dest))
    p.add_argument(flag, dest=dest, default=getattr(DEFAULTS, dest), help=help, **kw)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON file of RunConfig keys")
    _add(p, "--seed", "seed for corpus, split, init and shuffling")


def _corpus_flags(p, with_split=True) -> None:
    _add(p, "--corpus", "session JSONL path")
    if with_split:
        _add(p, "--split-ratios", "train,val,test fractions", type=_ratios)


def _model_flags(p) -> None:
    _add(p, "--d-model", "model width")
    _add(p, "--n-heads", "attention heads")
    _add(p, "--n-encoder-layers", "encoder blocks")
    _add(p, "--n-decoder-layers", "decoder blocks")
    _add(p, "--d-ff", "feed-forward width (0 means 4 x d-model)")
    _add(p, "--max-src-len", "transcript truncation length in tokens")
    _add(p, "--max-tgt-len", "summary length limit in tokens")
    _add(p, "--n-intents", "intent classes")
    _add(p, "--d-audio", "audio vector length")
    _add(p, "--d-visual", "video vector length")
    _add(p, "--gate-activation", "compound gate nonlinearity", choices=GATE_ACTIVATIONS)
    _add(p, "--loss-alpha1", "intent loss weight (generation weight is 1 - alpha1)")
    for m in ("audio", "visual", "personal"):
        _add(p, f"--use-{m}", f"enable the {m} modality", action=argparse.BooleanOptionalAction)
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None,
                   help="modality set by name (T = text only); overrides --use-* flags")
    p.add_argument("--single-task", action="store_true", default=False,
                   help="drop the intent loss (alpha1=0, alpha2=1)")


def _train_flags(p) -> None:
    _add(p, "--learning-rate", "Adam step size")
    _add(p, "--batch-size", "sessions per step")
    _add(p, "--epochs", "passes over the training split")
    _add(p, "--adam-beta1", "Adam first-moment decay")
    _add(p, "--adam-beta2", "Adam second-moment decay")
    _add(p, "--adam-eps", "Adam epsilon")
    _add(p, "--grad-clip-norm", "global gradient norm limit")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mmcsg", formatter_class=fmt,
                                     description="Multimodal concern summary generation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", formatter_class=fmt, help="write a synthetic corpus")
    _common(p)
    _add(p, "--out", "output JSONL path", dest="corpus")
    _add(p, "--n", "number of sessions", dest="n_sessions")
    _add(p, "--vocab-size", "corpus word inventory size", dest="synth_vocab_size")
    _add(p, "--signal-strength", "share of sessions whose slots live only in the modalities")
    _add(p, "--min-filler", "fewest filler words per transcript")
    _add(p, "--max-filler", "most filler words per transcript")
    _add(p, "--d-audio", "audio vector length")
    _add(p, "--d-visual", "video vector length")
    _add(p, "--split-ratios", "train,val,test fractions (validated here)", type=_ratios)

    p = sub.add_parser("train", formatter_class=fmt, help="train and write a checkpoint")
    _common(p)
    _corpus_flags(p)
    _add(p, "--checkpoint", "output checkpoint path")
    _add(p, "--log", "output training log (JSON lines)")
    _add(p, "--target", "summary to learn", choices=("mcs", "doctor"))
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", formatter_class=fmt, help="score a checkpoint on the test split")
    _common(p)
    _corpus_flags(p)
    _add(p, "--checkpoint", "checkpoint to evaluate")
    _add(p, "--report", "output report path (canonical JSON)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="which split to score")
    p.add_argument("--compare", default=None,
                   help="another report; adds Welch's t on per-session ROUGE-L")
    p.add_argument("--gold", action="store_true", default=False,
                   help="score the references against themselves")

    p = sub.add_parser("generate", formatter_class=fmt, help="decode one session to stdout")
    _common(p)
    _add(p, "--corpus", "session JSONL path")
    _add(p, "--checkpoint", "checkpoint to decode with")
    p.add_argument("--session", default=None, help="session id (default: first in file)")

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference check of every parameter on a tiny model")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.add_argument("--trials", type=int, default=20, help="coordinates sampled per tensor")
    _add(p, "--gate-activation", "compound gate nonlinearity", choices=GATE_ACTIVATIONS)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        cfg = _read_config(known.config)
        # config keys become defaults of every subparser, flags still win
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                own = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in cfg.items() if k in own})
    return parser.parse_args(argv)


def _read_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(cfg) - FIELD_NAMES)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    if "split_ratios" in cfg:
        cfg["split_ratios"] = tuple(cfg["split_ratios"])
    return cfg


# ------------------------------------------------------------------- helpers

def _check_ratios(ratios) -> None:
    if (len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9):
        raise UsageError(f"split ratios must be three non-negative numbers summing to 1, "
                         f"got {list(ratios)}")


def _need_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _need_parent(path: str) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


def _modalities(args) -> tuple[str, ...]:
    if args.ablation is not None:
        return ABLATIONS[args.ablation]
    return tuple(m for m in MODALITIES if getattr(args, f"use_{m}"))


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _splits(args, d_audio: int, d_visual: int, n_intents: int):
    _check_ratios(args.split_ratios)
    _need_file(args.corpus, "corpus")
    raw = load_sessions(args.corpus, d_audio=d_audio, d_visual=d_visual, n_intents=n_intents)
    return split(raw, args.split_ratios, args.seed)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    _check_ratios(args.split_ratios)
    _need_parent(args.corpus)
    try:
        spec = SynthSpec(n_sessions=args.n_sessions, vocab_size=args.synth_vocab_size,
                         d_audio=args.d_audio, d_visual=args.d_visual, seed=args.seed,
                         signal_strength=args.signal_strength, min_filler=args.min_filler,
                         max_filler=args.max_filler)
    except ValueError as exc:
        raise UsageError(str(exc))
    dump_sessions(generate_corpus(spec), args.corpus)
    print(f"wrote {args.n_sessions} sessions to {args.corpus}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need_parent(args.checkpoint)
    _need_parent(args.log)
    alpha1 = 0.0 if args.single_task else args.loss_alpha1
    train_set, val_set, _ = _splits(args, args.d_audio, args.d_visual, args.n_intents)
    if not train_set:
        raise UsageError("training split is empty")
    vocab = VocabSpec.build(t for b in train_set
                            for t in (b.transcript, b.mcs, b.doctor_summary or ""))
    try:
        config = ModelConfig(
            vocab_size=len(vocab), d_model=args.d_model, n_heads=args.n_heads,
            n_encoder_layers=args.n_encoder_layers, n_decoder_layers=args.n_decoder_layers,
            d_ff=args.d_ff, max_src_len=args.max_src_len, max_tgt_len=args.max_tgt_len,
            n_intents=args.n_intents, d_audio=args.d_audio, d_visual=args.d_visual,
            gate_activation=args.gate_activation, loss_alpha1=alpha1,
            loss_alpha2=1.0 - alpha1, modalities=_modalities(args), seed=args.seed)
        tc = TrainConfig(learning_rate=args.learning_rate, batch_size=args.batch_size,
                         epochs=args.epochs, adam_beta1=args.adam_beta1,
                         adam_beta2=args.adam_beta2, adam_eps=args.adam_eps,
                         grad_clip_norm=args.grad_clip_norm, seed=args.seed, target=args.target)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.target == "doctor" and any(b.doctor_summary is None for b in train_set):
        raise UsageError("--target doctor needs a doctor_summary on every training session")
    for b in (*train_set, *val_set):
        b.encode(vocab, config.max_src_len, config.max_tgt_len)

    with open(args.log, "w", encoding="utf-8", newline="\n") as log_fh:
        def write(rec: dict) -> None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

        params, _ = train(config, init_params(config), train_set, val_set, tc, on_record=write)
    meta = {"vocab": vocab.words(), "target": args.target,
            "split_ratios": list(args.split_ratios), "split_seed": args.seed}
    save_checkpoint(args.checkpoint, config, params, meta)
    print(f"wrote {args.checkpoint} and {args.log}")
    return EXIT_OK


def _load_model(path: str):
    _need_file(path, "checkpoint")
    try:
        config, params, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}")
    if "vocab" not in meta:
        raise UsageError(f"{path}: checkpoint carries no vocabulary")
    return config, params, meta, VocabSpec(meta["vocab"])


def _compare(report: dict, other_path: str) -> dict:
    _need_file(other_path, "comparison report")
    try:
        other = json.loads(Path(other_path).read_text(encoding="utf-8"))
        theirs = {row["id"]: row["rouge_l"] for row in other["per_session"]}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{other_path}: not an evaluation report ({exc})")
    ours = [row["rouge_l"] for row in report["per_session"]]
    b = list(theirs.values())
    try:
        res = welch_significant(ours, b)
    except DegenerateInputError:
        # both runs constant per session: t is 0 for equal means, undefined otherwise
        same = float(np.mean(ours)) == float(np.mean(b))
        res = {"t": 0.0 if same else None, "df": None, "critical_05": None,
               "significant_05": False if same else None, "degenerate": True}
    except ValueError as exc:
        raise UsageError(f"--compare: {exc}")
    out = {"other": str(other_path), "metric": "rouge_l"}
    for k, v in res.items():
        out[k] = round(v, 4) if isinstance(v, float) else v
    return out


def cmd_eval(args) -> int:
    _need_parent(args.report)
    config, params, meta, vocab = _load_model(args.checkpoint)
    parts = dict(zip(("train", "val", "test"),
                     _splits(args, config.d_audio, config.d_visual, config.n_intents)))
    bundles = parts[args.split]
    if not bundles:
        raise UsageError(f"{args.split} split is empty")
    target = meta.get("target", "mcs")
    if target == "doctor" and any(b.doctor_summary is None for b in bundles):
        raise UsageError("checkpoint was trained on doctor summaries; some sessions lack one")
    for b in bundles:
        b.encode(vocab, config.max_src_len, config.max_tgt_len)
    report = evaluate(bundles, params, config, target=target, gold=args.gold)
    report["split"] = args.split
    if args.compare:
        report["welch"] = _compare(report, args.compare)
    text = canonical_json(report) + "\n"
    _write_text(args.report, text)
    m = report["metrics"]
    print(f"{args.split}: n={report['n_sessions']} bleu={m['bleu']:.4f} "
          f"rouge_l={m['rouge_l']:.4f} token_f1={report['token_f1']:.4f} "
          f"intent_acc={report['intent_accuracy']:.4f}")
    if "welch" in report:
        w = report["welch"]
        print(f"welch: t={w['t']} df={w['df']} significant_05={w['significant_05']}")
    return EXIT_OK


def cmd_generate(args) -> int:
    config, params, _, vocab = _load_model(args.checkpoint)
    _need_file(args.corpus, "corpus")
    sessions = load_sessions(args.corpus, d_audio=config.d_audio, d_visual=config.d_visual,
                             n_intents=config.n_intents)
    if not sessions:
        raise UsageError("corpus is empty")
    if args.session is None:
        bundle = sessions[0]
    else:
        found = [b for b in sessions if b.session_id == args.session]
        if not found:
            raise UsageError(f"no session with id {args.session!r}")
        bundle = found[0]
    bundle.encode(vocab, config.max_src_len, config.max_tgt_len)
    ids = greedy_decode(bundle.src_ids, bundle_vectors(bundle), as_tensors(params), config,
                        config.max_tgt_len)
    print(detokenize(ids, vocab))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = tiny_config(gate_activation=args.gate_activation, seed=args.seed)
    report = grad_check(config, tolerance=args.tolerance, trials=args.trials, seed=args.seed)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else f"FAIL ({len(report.failures)} parameter(s))"
    print(f"gradcheck {verdict} tolerance={args.tolerance:g}")
    return EXIT_OK if report.passed else EXIT_CHECK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "generate": cmd_generate, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors and --help
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DimensionError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
