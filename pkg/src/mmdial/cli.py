"""Command-line surface.

Subcommands: gen-data, train, eval, generate, chat, gradcheck,
ablate-pnet, ablate-history.  Model-shape settings can come from a JSON
config file (--config); any flag given on the command line overrides
its file counterpart.  Fields tied to the dataset (vocabulary size,
image feature width, window sizes) always come from the dataset's own
metadata so a checkpoint can never silently disagree with its corpus.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .data import (
    EOS,
    SyntheticSpec,
    Utterance,
    attribute_ids,
    oracle_response,
    read_dataset,
    write_dataset,
)
from .errors import ConfigError, MmdialError
from .metrics import bleu, nist
from .model import generate_greedy
from .trainer import (
    PNET_GRID,
    TrainConfig,
    ablate_history,
    ablate_pnet,
    evaluate,
    grad_check,
    train,
)

logger = logging.getLogger(__name__)

# paper-scale profile: the published model shape, selectable but far
# beyond what the desk-scale acceptance runs need
PAPER_SCALE = {"d_model": 512, "d_ff": 2048, "n_layers": 2, "n_heads": 8,
               "batch_size": 150, "epochs": 10, "lr": 0.0004, "warmup_steps": 0}

_SPEC_FLAGS = [f.name for f in fields(SyntheticSpec)]
_TRAIN_FLAGS = ["lr", "batch_size", "epochs", "seed", "precision",
                "history_mode", "dropout_granularity", "warmup_steps",
                "target_bleu4", "n_layers", "d_model", "n_heads", "d_ff",
                "p_net", "h_len", "tie_output"]
# these follow the dataset, never the command line
_DATA_COUPLED = ["vocab_size", "d_img", "max_images", "max_len", "context_size"]


def _add_train_flags(sub):
    sub.add_argument("--config", type=Path, help="JSON file of config fields")
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--precision", type=int, choices=(32, 64))
    sub.add_argument("--history-mode", choices=("trained", "fixed"))
    sub.add_argument("--dropout-granularity", choices=("step", "sample"))
    sub.add_argument("--warmup-steps", type=int)
    sub.add_argument("--target-bleu4", type=float)
    sub.add_argument("--n-layers", type=int)
    sub.add_argument("--d-model", type=int)
    sub.add_argument("--n-heads", type=int)
    sub.add_argument("--d-ff", type=int)
    sub.add_argument("--p-net", type=float)
    sub.add_argument("--h-len", type=int)
    sub.add_argument("--paper-scale", action="store_true",
                     help="start from the published model shape")


def apply_paper_scale(blob: dict) -> dict:
    """Overlay the paper-scale profile; explicit settings still win."""
    return {**PAPER_SCALE, **blob}


def _train_config_from(args, spec: SyntheticSpec) -> TrainConfig:
    blob: dict = {}
    if args.config:
        blob.update(json.loads(Path(args.config).read_text()))
    flags = {name: getattr(args, name) for name in _TRAIN_FLAGS
             if getattr(args, name, None) is not None}
    if getattr(args, "paper_scale", False):
        blob = apply_paper_scale(blob)
    blob.update(flags)
    for name in _DATA_COUPLED:
        if name in blob and blob[name] != getattr(spec, name):
            logger.warning("%s=%s ignored; dataset says %s", name, blob[name],
                           getattr(spec, name))
        blob[name] = getattr(spec, name)
    return TrainConfig.from_dict(blob)


def _load_split(args):
    splits, vocab, spec, codebook = read_dataset(args.data)
    return splits, vocab, spec, codebook


def _print_metric_table(report: dict) -> None:
    print(f"{'BLEU-1':8s} {report['bleu1']:8.2f}")
    print(f"{'BLEU-2':8s} {report['bleu2']:8.2f}")
    print(f"{'BLEU-3':8s} {report['bleu3']:8.2f}")
    print(f"{'BLEU-4':8s} {report['bleu4']:8.2f}")
    print(f"{'NIST':8s} {report['nist']:8.4f}")
    print(f"{'samples':8s} {report['n']:8d}")


def _cmd_gen_data(args) -> int:
    blob: dict = {}
    if args.config:
        blob.update(json.loads(Path(args.config).read_text()))
    for name in _SPEC_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            blob[name] = value
    spec = SyntheticSpec(**blob)
    sizes = write_dataset(args.out, spec, args.n_samples)
    for split, count in sizes.items():
        print(f"{split:6s} {count:6d}")
    return 0


def _cmd_train(args) -> int:
    splits, _, spec, _ = _load_split(args)
    config = _train_config_from(args, spec)
    print("config:", json.dumps(config.to_dict(), sort_keys=True))
    out_dir = Path(args.out)
    _, result = train(config, splits["train"], splits["valid"],
                      out_dir=out_dir, log_path=out_dir / "metrics.jsonl",
                      resume_from=args.resume)
    for row in result.epoch_metrics:
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:7.4f}  "
              f"BLEU-4 {row.get('bleu4', float('nan')):6.2f}")
    if result.halted:
        print(f"halted: {result.halted}")
        return 1
    print(f"best BLEU-4 {result.best_bleu4:.2f} at epoch {result.best_epoch}"
          f" ({result.wall_time_s:.1f}s)")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    splits, vocab, spec, codebook = _load_split(args)
    samples = splits[args.split]
    if args.oracle:
        cands = [oracle_response(s, spec, vocab, codebook) for s in samples]
        refs = [s.response for s in samples]
        b = bleu(cands, refs)
        report = {"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
                  "nist": nist(cands, refs), "n": len(samples)}
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt (or --oracle)")
        model, _ = load_model(args.ckpt)
        report = evaluate(model, samples)
    _print_metric_table(report)
    return 0


def _cmd_generate(args) -> int:
    splits, vocab, _, _ = _load_split(args)
    model, _ = load_model(args.ckpt)
    samples = splits[args.split]
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples):
            ids = generate_greedy(model, sample.utterances(),
                                  conversation_start=sample.conversation_start)
            fh.write(json.dumps({
                "index": i,
                "response": ids,
                "response_words": vocab.decode(ids),
                "reference": sample.response,
            }) + "\n")
    print(f"wrote {len(samples)} responses to {args.out}")
    return 0


def _parse_chat_line(line: str, vocab, tag_vectors: dict[str, np.ndarray],
                     d_img: int) -> Utterance:
    """Words become token ids; @tags become image feature vectors."""
    words = []
    features = []
    for piece in line.split():
        if piece.startswith("@"):
            tag = piece[1:].lower()
            if tag in tag_vectors:
                features.append(tag_vectors[tag])
            else:
                print(f"(unknown attribute tag {piece!r}, ignored)")
        else:
            words.append(piece.lower())
    feats = np.stack(features) if features else np.zeros((0, d_img))
    return Utterance("user", [vocab.id(w) for w in words], feats)


def _cmd_chat(args) -> int:
    _, vocab, spec, codebook = _load_split(args)
    model, _ = load_model(args.ckpt)
    tag_vectors = {vocab.token(tid): codebook[i]
                   for i, tid in enumerate(attribute_ids(spec))}
    window = model.config.context_size

    print(f"attribute tags: {' '.join('@' + w for w in sorted(tag_vectors))}")
    print("type a message; :reset clears context, :quit exits")
    context: list[Utterance] = []
    turns_seen = 0
    while True:
        try:
            line = input("you> ")
        except EOFError:
            break
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":reset":
            context = []
            turns_seen = 0
            print("(context cleared)")
            continue
        query = _parse_chat_line(line, vocab, tag_vectors, spec.d_img)
        # each turn adds two utterances; the window still reaches back to
        # the true first utterance as long as it has not overflowed
        conversation_start = 2 * turns_seen <= window
        if not context:
            logger.info("empty context: the trained history seed carries turn one")
        ids = generate_greedy(model, [*context, query],
                              conversation_start=conversation_start)
        print("bot>", " ".join(vocab.decode(ids)) or "(empty)")
        reply_tokens = [t for t in ids if t != EOS]
        context = [*context, query,
                   Utterance("system", reply_tokens, np.zeros((0, spec.d_img)))]
        context = context[-window:]
        turns_seen += 1
    return 0


def _cmd_gradcheck(args) -> int:
    blob: dict = {"p_net": 0.0}
    if args.config:
        blob.update(json.loads(Path(args.config).read_text()))
    for name in ("d_model", "n_layers", "n_heads", "d_ff", "h_len", "seed",
                 "vocab_size", "d_img"):
        value = getattr(args, name, None)
        if value is not None:
            blob[name] = value
    defaults = dict(vocab_size=24, n_layers=2, d_model=8, n_heads=2, d_ff=16,
                    h_len=3, d_img=6, max_images=3, max_len=12, context_size=2)
    config = TrainConfig.from_dict({**defaults, **blob})
    report = grad_check(config)
    print(f"parameters  {report['n_parameters']}")
    print(f"max rel err {report['max_rel_err']:.3e} ({report['worst_param']})")
    print(f"runtime     {report['runtime_s']:.1f}s")
    print("PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 1


def _cmd_ablate_pnet(args) -> int:
    splits, _, spec, _ = _load_split(args)
    config = _train_config_from(args, spec)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablate_pnet(config, splits["train"], splits["valid"], seeds=seeds)
    print(f"{'p_net':6s} {'median BLEU-4':>14s}  per-seed")
    for row in rows:
        per_seed = " ".join(f"{b:6.2f}" for b in row["bleu4_by_seed"])
        print(f"{row['p_net']:<6.1f} {row['median_bleu4']:>14.2f}  {per_seed}")
    return 0


def _cmd_ablate_history(args) -> int:
    splits, _, spec, _ = _load_split(args)
    config = _train_config_from(args, spec)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablate_history(config, splits["train"], splits["valid"], seeds=seeds)
    print(f"{'seed':5s} {'trained':>8s} {'fixed':>8s} {'margin':>8s}")
    wins = 0
    for row in rows:
        wins += row["margin"] > 0
        print(f"{row['seed']:<5d} {row['trained_bleu4']:8.2f} "
              f"{row['fixed_bleu4']:8.2f} {row['margin']:+8.2f}")
    print(f"trained beats fixed in {wins}/{len(rows)} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmdial",
        description="multimodal dialogue response generation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-samples", type=int, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--n-keywords", type=int)
    p.add_argument("--n-attributes", type=int)
    p.add_argument("--d-img", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--max-images", type=int)
    p.add_argument("--context-size", type=int)
    p.add_argument("--feature-noise", type=float)
    p.add_argument("--p-textonly-query", type=float)
    p.add_argument("--p-distractor-image", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or the rule-based oracle)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--oracle", action="store_true",
                   help="score the rule-based responder instead of a model")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("generate", help="decode a split to a responses file")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("chat", help="interactive REPL against a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.set_defaults(fn=_cmd_chat)

    p = sub.add_parser("gradcheck", help="finite-difference check at tiny width")
    p.add_argument("--config", type=Path)
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--h-len", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--d-img", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("ablate-pnet", help="fusion probability sweep")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_ablate_pnet)

    p = sub.add_parser("ablate-history", help="trained vs fixed conversation seed")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_ablate_history)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except MmdialError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
