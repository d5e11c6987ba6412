"""Text ingestion: vocabulary, tokenization, utterance/document structure,
fixed-length segment packing for training, and extended-history contexts for
rescoring.

Conventions: whitespace tokenization, lowercased. Every utterance is
terminated with the eos token in the packed stream, so eos both separates
utterances and receives probability mass at utterance ends. Both points are
package conventions, configurable at the call sites that need to differ.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

UNK_WORD = "<unk>"
EOS_WORD = "<eos>"
N_SPECIALS = 2


class Vocab:
    """Bijective word/id map with unk and eos specials at ids 0 and 1."""

    def __init__(self, words: Sequence[str]):
        self.id_to_word: List[str] = [UNK_WORD, EOS_WORD] + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")
        self.unk_id = 0
        self.eos_id = 1

    def __len__(self) -> int:
        return len(self.id_to_word)

    def encode_word(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def encode(self, words: Iterable[str]) -> List[int]:
        return [self.encode_word(w) for w in words]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.id_to_word[i] for i in ids]

    def save(self, path: str):
        """One word per line; line index equals id minus the special count."""
        with open(path, "w", encoding="utf-8") as f:
            for w in self.id_to_word[N_SPECIALS:]:
                f.write(w + "\n")

    @staticmethod
    def load(path: str) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            words = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return Vocab(words)


@dataclass
class Document:
    doc_id: str
    utterances: List[List[str]]


@dataclass
class SegmentStream:
    """Fixed-length token-id segments of one document's packed stream.

    Concatenating the segments and dropping the padded tail of the last one
    reproduces the eos-terminated token stream. masks mark real positions
    with 1 and padding with 0.
    """

    doc_id: str
    segment_len: int
    eos_id: int
    segments: List[List[int]] = field(default_factory=list)
    masks: List[List[int]] = field(default_factory=list)

    def n_tokens(self) -> int:
        return sum(sum(m) for m in self.masks)

    def training_pairs(self):
        """Yields (inputs, targets, mask) per segment; inputs are the stream
        shifted right by one with eos standing in at the document start."""
        prev_last = self.eos_id
        for seg, mask in zip(self.segments, self.masks):
            inputs = [prev_last] + seg[:-1]
            yield inputs, seg, mask
            prev_last = seg[-1]  # only the final segment is padded


def tokenize(line: str) -> List[str]:
    return line.lower().split()


def load_corpus(path: str) -> List[Document]:
    """UTF-8 text, one utterance per line, blank line separates documents."""
    docs: List[Document] = []
    current: List[List[str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            words = tokenize(line)
            if not words:
                if current:
                    docs.append(Document(f"doc{len(docs)}", current))
                    current = []
                continue
            current.append(words)
    if current:
        docs.append(Document(f"doc{len(docs)}", current))
    return docs


def build_vocab(docs: Sequence[Document], min_count: int = 1) -> Vocab:
    """Words with count >= min_count, ordered by count desc then
    lexicographically; everything else maps to unk."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for doc in docs:
        for utt in doc.utterances:
            counts.update(utt)
    if not counts:
        raise ValueError("empty corpus: no words to build a vocabulary from")
    kept = [w for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocab(kept)


def make_segments(doc: Document, vocab: Vocab, segment_len: int) -> SegmentStream:
    """Packs the eos-terminated utterance stream into segment_len-sized
    pieces; the final partial segment is padded with eos and those positions
    are masked out of the loss."""
    if segment_len < 2:
        raise ValueError(f"segment_len must be >= 2, got {segment_len}")
    stream: List[int] = []
    for utt in doc.utterances:
        stream.extend(vocab.encode(utt))
        stream.append(vocab.eos_id)
    out = SegmentStream(doc.doc_id, segment_len, vocab.eos_id)
    for start in range(0, len(stream), segment_len):
        seg = stream[start:start + segment_len]
        mask = [1] * len(seg)
        while len(seg) < segment_len:
            seg.append(vocab.eos_id)
            mask.append(0)
        out.segments.append(seg)
        out.masks.append(mask)
    return out


def split_documents_per_utterance(docs: Sequence[Document]) -> List[Document]:
    """One document per utterance: trains or evaluates a model with all
    cross-utterance context removed (the single-utterance condition)."""
    out = []
    for doc in docs:
        for i, utt in enumerate(doc.utterances):
            out.append(Document(f"{doc.doc_id}.u{i}", [list(utt)]))
    return out


def build_extended_history(history_words: Sequence[str], current_words: Sequence[str],
                           segment_len: int) -> List[str]:
    """Last segment_len - 1 words of the flattened history, so that the
    context plus the first word of the current utterance fills one
    segment_len-word segment. Shorter histories are returned whole.

    history_words is the flat eos-joined word stream of the conversation so
    far; current_words only documents what the context will precede.
    """
    if segment_len < 1:
        raise ValueError(f"segment_len must be >= 1, got {segment_len}")
    keep = max(0, segment_len - 1)
    if keep == 0:
        return []
    return list(history_words[-keep:]) if history_words else []
