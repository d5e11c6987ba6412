"""Command-line entry point wiring corpus, training, and rescoring into
reproducible experiments.

Config files are flat key=value text; command-line flags override file
values. All randomness derives from --seed. RTLM_THREADS caps evaluation
parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, Optional

from . import corpus as corpus_mod
from .corpus import build_vocab, load_corpus, make_segments, split_documents_per_utterance
from .models import (
    ARCHITECTURES,
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .rescoring import (
    RescoreConfig,
    aggregate_wer,
    compute_wer,
    error_prone_analysis,
    mpsswe,
    parse_nbest,
    rescore,
)
from .training import TrainConfig, evaluate_ppl, train, write_loss_csv

_CONFIG_KEYS = {
    "arch": str, "n_blocks": int, "d_model": int, "n_heads": int,
    "segment_len": int, "lstm_blocks": str, "fusion_activation": str,
    "norm_style": str, "tie_embeddings": bool, "vocab_min_count": int,
    "train_corpus": str, "heldout_corpus": str,
    "lr": float, "optimizer": str, "clip_norm": float, "epochs": int,
    "warmup_steps": int, "seed": int, "split_utterances": bool,
}

_CONFIG_DEFAULTS = {
    "n_blocks": 2, "d_model": 64, "n_heads": 4, "segment_len": 16,
    "lstm_blocks": "", "fusion_activation": "linear", "norm_style": "post",
    "tie_embeddings": False, "vocab_min_count": 1,
    "lr": 1e-3, "optimizer": "adam", "clip_norm": 5.0, "epochs": 1,
    "warmup_steps": 100, "seed": 0, "split_utterances": False,
}


def read_config(path: str) -> Dict:
    """Flat key=value text; # starts a comment. Corpus paths resolve
    relative to the config file's directory."""
    cfg = dict(_CONFIG_DEFAULTS)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            kind = _CONFIG_KEYS[key]
            cfg[key] = (value.lower() in ("1", "true", "yes")) if kind is bool \
                else kind(value)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("train_corpus", "heldout_corpus"):
        if key in cfg and not os.path.isabs(cfg[key]):
            cfg[key] = os.path.join(base, cfg[key])
    return cfg


def _parse_lstm_blocks(text: Optional[str]):
    if text is None or text.strip() == "":
        return None
    return frozenset(int(s) for s in text.split(",") if s.strip() != "")


def _model_config(cfg: Dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        architecture=cfg["arch"], vocab_size=vocab_size,
        n_blocks=cfg["n_blocks"], d_model=cfg["d_model"],
        n_heads=cfg["n_heads"], segment_len=cfg["segment_len"],
        lstm_block_indices=_parse_lstm_blocks(cfg["lstm_blocks"]),
        fusion_activation=cfg["fusion_activation"], norm_style=cfg["norm_style"],
        tie_embeddings=cfg["tie_embeddings"])


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("RTLM_THREADS", "1")))
    except ValueError:
        return 1


def _load_streams(path: str, vocab, segment_len: int, split_utts: bool):
    docs = load_corpus(path)
    if split_utts:
        docs = split_documents_per_utterance(docs)
    return [make_segments(d, vocab, segment_len) for d in docs]


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = read_config(args.config)
    if args.arch:
        cfg["arch"] = args.arch
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.lstm_blocks is not None:
        cfg["lstm_blocks"] = args.lstm_blocks
    if "arch" not in cfg:
        raise ValueError("no architecture given (config key arch or --arch)")
    if "train_corpus" not in cfg:
        raise ValueError("config key train_corpus is required")

    docs = load_corpus(cfg["train_corpus"])
    if cfg["split_utterances"]:
        docs = split_documents_per_utterance(docs)
    vocab = build_vocab(docs, cfg["vocab_min_count"])
    mc = _model_config(cfg, len(vocab))
    params = init_params(mc, seed=cfg["seed"])
    tc = TrainConfig(learning_rate=cfg["lr"], optimizer=cfg["optimizer"],
                     clip_norm=cfg["clip_norm"], epochs=cfg["epochs"],
                     seed=cfg["seed"], warmup_steps=cfg["warmup_steps"])
    streams = [make_segments(d, vocab, mc.segment_len) for d in docs]
    params, log = train(mc, params, streams, tc)

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(mc, params, os.path.join(args.out, "model"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    write_loss_csv(log, os.path.join(args.out, "loss.csv"))
    if "heldout_corpus" in cfg:
        held = _load_streams(cfg["heldout_corpus"], vocab, mc.segment_len,
                             cfg["split_utterances"])
        print(f"heldout_ppl {evaluate_ppl(mc, params, held, _eval_threads()):.4f}")
    print(f"trained {mc.architecture}: {len(log)} steps, "
          f"final loss {log[-1].loss:.4f}")
    return 0


def cmd_eval_ppl(args) -> int:
    mc, params = load_checkpoint(args.checkpoint)
    vocab = corpus_mod.Vocab.load(args.vocab or _sibling(args.checkpoint, "vocab.txt"))
    if len(vocab) != mc.vocab_size:
        raise ValueError(f"vocabulary size {len(vocab)} does not match "
                         f"checkpoint vocab_size {mc.vocab_size}")
    streams = _load_streams(args.corpus, vocab, mc.segment_len, args.split_utterances)
    print(f"ppl {evaluate_ppl(mc, params, streams, _eval_threads()):.4f}")
    return 0


def _sibling(checkpoint_stem: str, name: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(checkpoint_stem)), name)


def _write_rescore_tsv(path: str, results, lists):
    by_key = {(r.conv_id, r.utt_id): r for r in results}
    with open(path, "w", encoding="utf-8") as f:
        f.write("conv\tutt\tchosen\tref_len\terrors\tam\tlm\ttotal\twords\n")
        for rec in lists:
            r = by_key[(rec.conv_id, rec.utt_id)]
            errs = compute_wer(rec.ref_words, r.words).errors
            f.write(f"{r.conv_id}\t{r.utt_id}\t{r.chosen}\t{len(rec.ref_words)}\t"
                    f"{errs}\t{r.am_score:.6f}\t{r.lm_score:.6f}\t"
                    f"{r.total_score:.6f}\t{' '.join(r.words)}\n")


def _run_rescore(args):
    mc, params = load_checkpoint(args.checkpoint)
    vocab = corpus_mod.Vocab.load(args.vocab or _sibling(args.checkpoint, "vocab.txt"))
    second = None
    if args.checkpoint2:
        second = load_checkpoint(args.checkpoint2)
    rc = RescoreConfig(lm_scale=args.lm_scale, interp_weight=args.interp_weight,
                       history_mode=args.history_mode)
    lists = parse_nbest(args.nbest)
    results = rescore(lists, (mc, params), rc, vocab, mc.segment_len,
                      second_model=second)
    return lists, results, (mc, params), vocab


def cmd_rescore(args) -> int:
    lists, results, _, _ = _run_rescore(args)
    if args.out:
        _write_rescore_tsv(args.out, results, lists)
    print(f"wer {aggregate_wer(results, lists):.4f}")
    return 0


def cmd_analyze(args) -> int:
    lists, results, model, vocab = _run_rescore(args)
    baseline = None
    if args.baseline_checkpoint:
        mc_b, params_b = load_checkpoint(args.baseline_checkpoint)
        rc = RescoreConfig(lm_scale=args.lm_scale, interp_weight=args.interp_weight,
                           history_mode=args.history_mode)
        baseline = rescore(lists, (mc_b, params_b), rc, vocab, mc_b.segment_len)
    train_counts = None
    if args.train_corpus:
        counts: Dict[str, int] = {}
        for doc in load_corpus(args.train_corpus):
            for utt in doc.utterances:
                for w in utt:
                    counts[w] = counts.get(w, 0) + 1
        train_counts = counts
    report = error_prone_analysis(results, lists, train_counts=train_counts,
                                  baseline=baseline)
    lines = ["metric\tvalue",
             f"n_error_prone_words\t{len(report.error_prone)}",
             f"n_error_prone_tokens\t{report.n_error_prone_tokens}"]
    if report.avg_score_error_prone is not None:
        lines.append(f"avg_lm_score_error_prone\t{report.avg_score_error_prone:.4f}")
    if report.n_words_better_than_baseline is not None:
        lines.append(f"n_words_better_than_baseline\t{report.n_words_better_than_baseline}")
    if report.mean_train_occurrences_of_better is not None:
        lines.append("mean_train_occurrences_of_better\t"
                     f"{report.mean_train_occurrences_of_better:.2f}")
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
            f.write("\nword\tmisses\toccurrences\n")
            for w, (miss, tot) in sorted(report.error_prone.items()):
                f.write(f"{w}\t{miss}\t{tot}\n")
    print(text)
    return 0


def _read_errors_tsv(path: str) -> Dict[str, int]:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        conv_i, utt_i, err_i = (header.index(k) for k in ("conv", "utt", "errors"))
        for line in f:
            cells = line.rstrip("\n").split("\t")
            out[f"{cells[conv_i]}/{cells[utt_i]}"] = int(cells[err_i])
    return out


def cmd_mpsswe(args) -> int:
    a = _read_errors_tsv(args.system_a)
    b = _read_errors_tsv(args.system_b)
    if set(a) != set(b):
        raise ValueError("the two rescoring outputs cover different utterances")
    keys = sorted(a)
    result = mpsswe([a[k] for k in keys], [b[k] for k in keys])
    verdict = "S" if result.significant else "NS"
    print(f"z {result.z:.4f}\np {result.p_value:.4f}\nsignificant {verdict}")
    return 0


def cmd_self_test(args) -> int:
    from .selftest import run_self_test
    return run_self_test(seed=args.seed if args.seed is not None else 0)


# ------------------------------------------------------------------ dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtlm",
        description="Recurrent-transformer language modeling lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--seed", type=int)
    p.add_argument("--lstm-blocks", dest="lstm_blocks",
                   help="comma-separated block indices for the LSTM module")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-ppl", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split-utterances", action="store_true",
                   help="evaluate each utterance as its own document")
    p.set_defaults(fn=cmd_eval_ppl)

    def rescore_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--checkpoint2", help="second model for interpolation")
        p.add_argument("--nbest", required=True)
        p.add_argument("--vocab")
        p.add_argument("--interp-weight", dest="interp_weight", type=float, default=0.6)
        p.add_argument("--lm-scale", dest="lm_scale", type=float, default=1.0)
        p.add_argument("--history-mode", dest="history_mode",
                       choices=("rescored", "original"), default="rescored")
        p.add_argument("--out")

    p = sub.add_parser("rescore", help="rescore an N-best file")
    rescore_flags(p)
    p.set_defaults(fn=cmd_rescore)

    p = sub.add_parser("analyze", help="error-prone-word score analysis")
    rescore_flags(p)
    p.add_argument("--baseline-checkpoint", dest="baseline_checkpoint")
    p.add_argument("--train-corpus", dest="train_corpus",
                   help="corpus for word occurrence counts")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("mpsswe", help="matched-pairs significance test")
    p.add_argument("--system-a", dest="system_a", required=True,
                   help="rescore TSV of the first system")
    p.add_argument("--system-b", dest="system_b", required=True,
                   help="rescore TSV of the second system")
    p.set_defaults(fn=cmd_mpsswe)

    p = sub.add_parser("self-test", help="run built-in gradient and oracle checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_self_test)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, ArithmeticError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
