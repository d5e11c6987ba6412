"""N-best rescoring with extended history and per-conversation state
carryover, optional linear probability interpolation of two LMs, word error
rate with alignment, the matched-pairs significance test on per-utterance
error counts, and error-prone-word score analysis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import EOS_WORD, Vocab, build_extended_history
from .models import init_state, score_tokens


@dataclass
class Hypothesis:
    words: List[str]
    am_score: float
    base_lm_score: float


@dataclass
class NBestList:
    conv_id: str
    utt_id: str
    index: int  # position within the conversation, contiguous from 0
    ref_words: List[str]
    hyps: List[Hypothesis]


@dataclass
class RescoreConfig:
    lm_scale: float = 1.0
    interp_weight: float = 0.6  # weight on the first model
    history_mode: str = "rescored"  # or "original": ASR 1-best feeds the history

    def __post_init__(self):
        if not 0.0 <= self.interp_weight <= 1.0:
            raise ValueError(f"interp_weight must be in [0, 1], got {self.interp_weight}")
        if self.lm_scale < 0.0:
            raise ValueError(f"lm_scale must be >= 0, got {self.lm_scale}")
        if self.history_mode not in ("rescored", "original"):
            raise ValueError(f"history_mode must be rescored or original, "
                             f"got {self.history_mode!r}")


@dataclass
class UtteranceResult:
    conv_id: str
    utt_id: str
    chosen: int
    words: List[str]
    total_score: float
    lm_score: float
    am_score: float
    token_log_probs: np.ndarray  # one per chosen-hypothesis word, float64


def parse_nbest(path: str) -> List[NBestList]:
    """One JSON object per line: {"conv", "utt", "idx", "ref", "hyps"};
    each hyp is {"words", "am", "lm"}. Order is preserved."""
    lists: List[NBestList] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                hyps = [Hypothesis(list(h["words"]), float(h["am"]), float(h["lm"]))
                        for h in obj["hyps"]]
                rec = NBestList(str(obj["conv"]), str(obj["utt"]), int(obj["idx"]),
                                list(obj["ref"]), hyps)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"nbest parse error at line {lineno}: {e}") from e
            if not rec.hyps:
                raise ValueError(f"nbest parse error at line {lineno}: empty hypothesis list")
            for h in rec.hyps:
                if not (math.isfinite(h.am_score) and math.isfinite(h.base_lm_score)):
                    raise ValueError(
                        f"nbest parse error at line {lineno}: non-finite score")
            lists.append(rec)
    return lists


def write_nbest(lists: Sequence[NBestList], path: str):
    with open(path, "w", encoding="utf-8") as f:
        for rec in lists:
            obj = {"conv": rec.conv_id, "utt": rec.utt_id, "idx": rec.index,
                   "ref": rec.ref_words,
                   "hyps": [{"words": h.words, "am": h.am_score, "lm": h.base_lm_score}
                            for h in rec.hyps]}
            f.write(json.dumps(obj) + "\n")


def _check_conversation_order(lists: Sequence[NBestList]):
    seen_done = set()
    current = None
    expected_idx = 0
    for rec in lists:
        if rec.conv_id != current:
            if rec.conv_id in seen_done:
                raise ValueError(
                    f"conversation {rec.conv_id!r} is split across the input")
            if current is not None:
                seen_done.add(current)
            current = rec.conv_id
            expected_idx = 0
        if rec.index != expected_idx:
            raise ValueError(
                f"conversation {rec.conv_id!r}: utterance index {rec.index} "
                f"where {expected_idx} was expected")
        expected_idx += 1


def rescore(lists: Sequence[NBestList], model, rc: RescoreConfig, vocab: Vocab,
            segment_len: int, second_model=None) -> List[UtteranceResult]:
    """Re-ranks every N-best list with neural LM scores over extended history.

    model and second_model are (ModelConfig, Parameters) pairs. For each
    utterance the context is the last segment_len - 1 words of the
    conversation history so far (eos-terminated 1-best words, rescored or
    original per rc.history_mode), seeded with eos at conversation start as
    in training. With a second model, per-token probabilities are combined
    linearly, P = w * P1 + (1 - w) * P2, before log-summing. The selection
    maximizes am_score + lm_scale * lm_score; ties go to the lower
    hypothesis index. Model states carry across utterances per conversation.
    """
    _check_conversation_order(lists)
    cfg1, params1 = model
    if second_model is not None:
        cfg2, params2 = second_model
        if cfg2.vocab_size != cfg1.vocab_size:
            raise ValueError("interpolated models must share a vocabulary")
    results: List[UtteranceResult] = []
    w = rc.interp_weight

    state1 = state2 = None
    history: List[str] = []
    current_conv = None
    for rec in lists:
        if rec.conv_id != current_conv:
            current_conv = rec.conv_id
            history = []
            state1 = init_state(cfg1)
            state2 = init_state(cfg2) if second_model is not None else None

        context_words = build_extended_history(history, rec.hyps[0].words, segment_len)
        context_ids = vocab.encode(context_words) or [vocab.eos_id]

        best = None
        for i, hyp in enumerate(rec.hyps):
            target_ids = vocab.encode(hyp.words)
            lp1, ns1 = score_tokens(cfg1, params1, context_ids, target_ids, state1)
            ns2 = None
            if second_model is not None:
                lp2, ns2 = score_tokens(cfg2, params2, context_ids, target_ids, state2)
                token_lp = np.log(w * np.exp(lp1) + (1.0 - w) * np.exp(lp2)) \
                    if len(lp1) else lp1
            else:
                token_lp = lp1
            lm = float(token_lp.sum())
            total = hyp.am_score + rc.lm_scale * lm
            if best is None or total > best[0]:
                best = (total, i, lm, token_lp, ns1, ns2)

        total, i, lm, token_lp, ns1, ns2 = best
        chosen = rec.hyps[i]
        results.append(UtteranceResult(
            conv_id=rec.conv_id, utt_id=rec.utt_id, chosen=i,
            words=list(chosen.words), total_score=total, lm_score=lm,
            am_score=chosen.am_score, token_log_probs=token_lp))

        # conversation state advances along the selected hypothesis
        state1, state2 = ns1, ns2
        history_words = (chosen.words if rc.history_mode == "rescored"
                         else rec.hyps[0].words)
        history.extend(history_words)
        history.append(EOS_WORD)
    return results


# ------------------------------------------------------------------ WER

@dataclass
class WerResult:
    subs: int
    ins: int
    dels: int
    wer: float
    # (op, ref_word or None, hyp_word or None), op in {ok, sub, ins, del}
    alignment: List[Tuple[str, Optional[str], Optional[str]]]
    empty_ref: bool = False

    @property
    def errors(self) -> int:
        return self.subs + self.ins + self.dels


def compute_wer(ref: Sequence[str], hyp: Sequence[str]) -> WerResult:
    """Minimal edit distance with unit costs and a deterministic alignment
    (substitution preferred over insert+delete on ties). WER is errors over
    reference length; an empty reference is scored as insertions over
    max(1, len(ref)) and flagged."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)

    alignment = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            op = "ok" if ref[i - 1] == hyp[j - 1] else "sub"
            alignment.append((op, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            alignment.append(("del", ref[i - 1], None))
            i -= 1
        else:
            alignment.append(("ins", None, hyp[j - 1]))
            j -= 1
    alignment.reverse()

    subs = sum(1 for op, _, _ in alignment if op == "sub")
    ins = sum(1 for op, _, _ in alignment if op == "ins")
    dels = sum(1 for op, _, _ in alignment if op == "del")
    wer = (subs + ins + dels) / max(1, n)
    return WerResult(subs, ins, dels, wer, alignment, empty_ref=(n == 0 and m > 0))


# ------------------------------------------------------------------ MPSSWE

@dataclass
class MpssweResult:
    z: float
    p_value: float
    significant: bool
    n_effective: int


def mpsswe(errors_a: Sequence[float], errors_b: Sequence[float],
           alpha: float = 0.05) -> MpssweResult:
    """Matched-pairs test on aligned per-segment error counts.

    Uses the segments where the two systems differ; z is mean(d) over its
    standard error, with a two-tailed normal p-value. Identical systems give
    z = 0, p = 1. Fewer than two differing segments (but not zero) is an
    error: the statistic is undefined.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"error sequences must align, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        return MpssweResult(0.0, 1.0, False, 0)
    if d.size < 2:
        raise ValueError(f"mpsswe undefined for {d.size} differing segment(s)")
    sd = d.std(ddof=1)
    if sd == 0.0:
        return MpssweResult(math.copysign(math.inf, d.mean()), 0.0, True, int(d.size))
    z = d.mean() / (sd / math.sqrt(d.size))
    p = math.erfc(abs(z) / math.sqrt(2.0))  # two-tailed normal
    return MpssweResult(float(z), float(p), p < alpha, int(d.size))


# ------------------------------------------------------------------ analysis

@dataclass
class AnalysisReport:
    # word -> (times misrecognized, reference occurrences), error-prone only
    error_prone: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    # mean -log P over selected-hypothesis tokens of error-prone words
    avg_score_error_prone: Optional[float] = None
    n_error_prone_tokens: int = 0
    # word -> mean -log P over its selected-hypothesis tokens
    per_word_avg_score: Dict[str, float] = field(default_factory=dict)
    # set when a baseline is given: words this model scores better (lower
    # -log P) than the baseline, and their mean training-set occurrences
    n_words_better_than_baseline: Optional[int] = None
    mean_train_occurrences_of_better: Optional[float] = None


def error_prone_analysis(results: Sequence[UtteranceResult],
                         lists: Sequence[NBestList],
                         train_counts: Optional[Dict[str, int]] = None,
                         baseline: Optional[Sequence[UtteranceResult]] = None,
                         ) -> AnalysisReport:
    """Score analysis on error-prone words.

    A reference word is error-prone when more than half of its occurrences
    are misrecognized by the selected hypotheses (any alignment other than a
    correct match). LM scores are negative token log-probabilities of the
    selected hypotheses. Against a baseline's per-word averages, reports how
    common (in the training set) the words scored better than baseline are.
    """
    by_key = {(r.conv_id, r.utt_id): r for r in results}
    miss: Dict[str, int] = {}
    total: Dict[str, int] = {}
    for rec in lists:
        res = by_key.get((rec.conv_id, rec.utt_id))
        if res is None:
            raise ValueError(f"no rescoring result for utterance {rec.utt_id!r}")
        aligned = compute_wer(rec.ref_words, res.words)
        for op, ref_word, _ in aligned.alignment:
            if ref_word is None:
                continue
            total[ref_word] = total.get(ref_word, 0) + 1
            if op != "ok":
                miss[ref_word] = miss.get(ref_word, 0) + 1

    report = AnalysisReport()
    for word, n in total.items():
        wrong = miss.get(word, 0)
        if wrong * 2 > n:
            report.error_prone[word] = (wrong, n)

    score_sum: Dict[str, float] = {}
    score_n: Dict[str, int] = {}
    ep_sum, ep_n = 0.0, 0
    for res in results:
        for word, lp in zip(res.words, res.token_log_probs):
            s = -float(lp)
            score_sum[word] = score_sum.get(word, 0.0) + s
            score_n[word] = score_n.get(word, 0) + 1
            if word in report.error_prone:
                ep_sum += s
                ep_n += 1
    report.per_word_avg_score = {w: score_sum[w] / score_n[w] for w in score_sum}
    report.n_error_prone_tokens = ep_n
    report.avg_score_error_prone = (ep_sum / ep_n) if ep_n else None

    if baseline is not None:
        base_report_scores: Dict[str, List[float]] = {}
        for res in baseline:
            for word, lp in zip(res.words, res.token_log_probs):
                base_report_scores.setdefault(word, []).append(-float(lp))
        base_avg = {w: sum(v) / len(v) for w, v in base_report_scores.items()}
        better = [w for w, s in report.per_word_avg_score.items()
                  if w in base_avg and s < base_avg[w]]
        report.n_words_better_than_baseline = len(better)
        if better and train_counts is not None:
            occ = [train_counts.get(w, 0) for w in better]
            report.mean_train_occurrences_of_better = float(np.mean(occ))
    return report


def per_utterance_errors(results: Sequence[UtteranceResult],
                         lists: Sequence[NBestList]) -> List[int]:
    """Edit-error count of each selected hypothesis against its reference,
    in input order."""
    by_key = {(r.conv_id, r.utt_id): r for r in results}
    out = []
    for rec in lists:
        res = by_key[(rec.conv_id, rec.utt_id)]
        out.append(compute_wer(rec.ref_words, res.words).errors)
    return out


def aggregate_wer(results: Sequence[UtteranceResult],
                  lists: Sequence[NBestList]) -> float:
    """Corpus-level WER: total errors over total reference words."""
    by_key = {(r.conv_id, r.utt_id): r for r in results}
    errors, ref_len = 0, 0
    for rec in lists:
        res = by_key[(rec.conv_id, rec.utt_id)]
        errors += compute_wer(rec.ref_words, res.words).errors
        ref_len += len(rec.ref_words)
    return errors / max(1, ref_len)
