"""Deterministic generators for the bundled synthetic data.

The cross-utterance corpus plants a dependency that only crosses utterance
boundaries: each utterance opens with a cue word, and the next utterance
contains the answer word paired to that cue at a fixed position. Models with
cross-utterance state can learn the answer; a single-utterance model sees
pure noise there.

Run `python -m rtlm.synthdata <out_dir>` to regenerate everything that ships
under data/.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from .corpus import Document, Vocab
from .models import ModelConfig, init_params, save_checkpoint
from .rescoring import (
    Hypothesis,
    NBestList,
    RescoreConfig,
    rescore,
    write_nbest,
)

N_CUES = 8
N_FILLERS = 30
UTT_WORDS = 5           # words per utterance; +eos makes a 6-token segment
ANSWER_POSITIONS = (2, 4)

CUES = [f"c{i}" for i in range(N_CUES)]
ANSWERS = [f"a{i}" for i in range(N_CUES)]
FILLERS = [f"f{i:02d}" for i in range(N_FILLERS)]

NBEST_WORDS = ["red", "green", "blue", "cyan", "black", "white", "cat", "dog",
               "fox", "owl", "run", "walk", "jump", "rest", "sun", "moon",
               "sky", "sea", "hill", "road"]


def cross_utterance_corpus(n_convs: int, n_utts: int, seed: int):
    """Conversations of fixed-length utterances: cue first, the previous
    cue's answer at ANSWER_POSITIONS, fillers elsewhere. Within one
    utterance nothing predicts the answer; only carried state does."""
    rng = np.random.default_rng(seed)
    docs = []
    for k in range(n_convs):
        utts = []
        prev_cue = None
        for _ in range(n_utts):
            cue = int(rng.integers(0, N_CUES))
            answer = ANSWERS[prev_cue] if prev_cue is not None \
                else ANSWERS[int(rng.integers(0, N_CUES))]
            words = [CUES[cue]]
            for pos in range(1, UTT_WORDS):
                words.append(answer if pos in ANSWER_POSITIONS
                             else FILLERS[int(rng.integers(0, N_FILLERS))])
            utts.append(words)
            prev_cue = cue
        docs.append(Document(f"conv{k}", utts))
    return docs


def write_corpus(docs, path: str):
    with open(path, "w", encoding="utf-8") as f:
        for i, doc in enumerate(docs):
            if i:
                f.write("\n")
            for utt in doc.utterances:
                f.write(" ".join(utt) + "\n")


def synthetic_nbest(n_convs: int, seed: int):
    """N-best lists over a small vocabulary: references are random word
    sequences, hypotheses are corrupted copies with acoustic scores that
    loosely prefer less-corrupted candidates."""
    rng = np.random.default_rng(seed)
    lists = []
    for c in range(n_convs):
        n_utts = int(rng.integers(3, 7))
        for u in range(n_utts):
            ref = [NBEST_WORDS[i] for i in rng.integers(0, len(NBEST_WORDS),
                                                        size=rng.integers(3, 6))]
            hyps = []
            for h in range(int(rng.integers(3, 6))):
                words = list(ref)
                n_edits = 0
                if h > 0 or rng.random() < 0.4:
                    for pos in range(len(words)):
                        if rng.random() < 0.35:
                            words[pos] = NBEST_WORDS[int(rng.integers(0, len(NBEST_WORDS)))]
                            n_edits += 1
                    if rng.random() < 0.2 and len(words) > 2:
                        del words[int(rng.integers(0, len(words)))]
                        n_edits += 1
                am = -2.0 * len(words) - 1.1 * n_edits + float(rng.normal(0.0, 1.5))
                lm = -1.8 * len(words) + float(rng.normal(0.0, 0.8))
                hyps.append(Hypothesis(words, am, lm))
            lists.append(NBestList(f"conv{c}", f"utt{u}", u, ref, hyps))
    return lists


def rescore_vocab() -> Vocab:
    return Vocab(NBEST_WORDS)


def rescore_model_config(vocab_size: int) -> ModelConfig:
    return ModelConfig("lstm_lm", vocab_size=vocab_size, n_blocks=1, d_model=16,
                       n_heads=1, segment_len=8)


def generate(out_dir: str, seed: int = 0):
    os.makedirs(out_dir, exist_ok=True)

    write_corpus(cross_utterance_corpus(40, 40, seed=seed + 1),
                 os.path.join(out_dir, "synth_train.txt"))
    write_corpus(cross_utterance_corpus(5, 40, seed=seed + 2),
                 os.path.join(out_dir, "synth_heldout.txt"))

    lists = synthetic_nbest(20, seed=seed + 3)
    write_nbest(lists, os.path.join(out_dir, "synth_nbest.jsonl"))

    vocab = rescore_vocab()
    cfg = rescore_model_config(len(vocab))
    m1 = init_params(cfg, seed=seed + 11)
    m2 = init_params(cfg, seed=seed + 12)
    save_checkpoint(cfg, m1, os.path.join(out_dir, "rescore_m1"))
    save_checkpoint(cfg, m2, os.path.join(out_dir, "rescore_m2"))
    vocab.save(os.path.join(out_dir, "rescore_vocab.txt"))

    rc = RescoreConfig(lm_scale=1.0, interp_weight=0.6)
    results = rescore(lists, (cfg, m1), rc, vocab, cfg.segment_len,
                      second_model=(cfg, m2))
    chosen = [r.chosen for r in results]
    if len(set(chosen)) < 2:
        raise AssertionError("degenerate N-best set: every selection identical")
    with open(os.path.join(out_dir, "golden_selections.tsv"), "w",
              encoding="utf-8") as f:
        f.write("conv\tutt\tchosen\n")
        for r in results:
            f.write(f"{r.conv_id}\t{r.utt_id}\t{r.chosen}\n")
    print(f"wrote synthetic data to {out_dir}")


if __name__ == "__main__":
    generate(sys.argv[1] if len(sys.argv) > 1 else "data")
