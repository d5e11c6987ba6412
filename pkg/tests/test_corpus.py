import pytest

from rtlm.corpus import (
    Document,
    Vocab,
    build_extended_history,
    build_vocab,
    load_corpus,
    make_segments,
    split_documents_per_utterance,
)


def doc(*utts):
    return Document("d0", [u.split() for u in utts])


# ---------------------------------------------------------------- vocab

def test_build_vocab_min_count_filters():
    v = build_vocab([doc("a a b")], min_count=2)
    assert len(v) == 3  # unk, eos, a
    assert v.encode_word("a") >= 2
    assert v.encode_word("b") == v.unk_id


def test_build_vocab_min_count_one_keeps_all():
    v = build_vocab([doc("c a b")], min_count=1)
    assert sorted(v.id_to_word[2:]) == ["a", "b", "c"]


def test_build_vocab_tie_broken_lexicographically():
    v = build_vocab([doc("b a a b")], min_count=1)
    assert v.id_to_word[2:] == ["a", "b"]


def test_build_vocab_count_ordering():
    v = build_vocab([doc("b b b a a z")], min_count=1)
    assert v.id_to_word[2:] == ["b", "a", "z"]


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([Document("d", [])])


def test_vocab_round_trip_and_oov():
    v = build_vocab([doc("alpha beta")], min_count=1)
    for w in ("alpha", "beta"):
        assert v.decode([v.encode_word(w)]) == [w]
    assert v.encode_word("gamma") == v.unk_id


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([doc("b a a")], min_count=1)
    path = str(tmp_path / "vocab.txt")
    v.save(path)
    v2 = Vocab.load(path)
    assert v2.id_to_word == v.id_to_word
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines == v.id_to_word[2:]  # line index = id after specials


# ---------------------------------------------------------------- segments

def test_make_segments_spec_trace():
    v = build_vocab([doc("a b", "c")], min_count=1)
    s = make_segments(doc("a b", "c"), v, segment_len=3)
    a, b, c, eos = (v.encode_word("a"), v.encode_word("b"), v.encode_word("c"),
                    v.eos_id)
    assert s.segments == [[a, b, eos], [c, eos, eos]]
    assert s.masks == [[1, 1, 1], [1, 1, 0]]


def test_make_segments_exact_fit_no_padding():
    v = build_vocab([doc("a b c")], min_count=1)
    s = make_segments(doc("a b c"), v, segment_len=4)
    assert len(s.segments) == 1
    assert s.masks == [[1, 1, 1, 1]]


def test_make_segments_empty_document():
    v = build_vocab([doc("a")], min_count=1)
    s = make_segments(Document("e", []), v, segment_len=4)
    assert s.segments == [] and s.masks == []


def test_make_segments_requires_t_at_least_two():
    v = build_vocab([doc("a")], min_count=1)
    with pytest.raises(ValueError):
        make_segments(doc("a"), v, segment_len=1)


def test_segment_packing_conservation():
    utts = ["a b c", "d e", "f", "g h i j k"]
    d = doc(*utts)
    v = build_vocab([d], min_count=1)
    for t in (2, 3, 5, 8):
        s = make_segments(d, v, segment_len=t)
        n_words = sum(len(u.split()) for u in utts)
        assert s.n_tokens() == n_words + len(utts)  # words plus one eos each


def test_training_pairs_shift_across_segments():
    d = doc("a b c d e")
    v = build_vocab([d], min_count=1)
    s = make_segments(d, v, segment_len=3)
    pairs = list(s.training_pairs())
    stream = [tok for seg in s.segments for tok in seg]
    assert pairs[0][0] == [v.eos_id] + stream[:2]
    assert pairs[1][0] == stream[2:5]
    assert [p[1] for p in pairs] == s.segments


def test_split_documents_per_utterance():
    d = Document("conv", [["a"], ["b", "c"]])
    singles = split_documents_per_utterance([d])
    assert [s.utterances for s in singles] == [[["a"]], [["b", "c"]]]
    assert len({s.doc_id for s in singles}) == 2


# ---------------------------------------------------------------- corpus file

def test_load_corpus_blank_line_splits_documents(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("A b\nc\n\nD e\n", encoding="utf-8")
    docs = load_corpus(str(path))
    assert [d.utterances for d in docs] == [[["a", "b"], ["c"]], [["d", "e"]]]


def test_load_corpus_lowercases_and_strips(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("  Hello   WORLD \n", encoding="utf-8")
    docs = load_corpus(str(path))
    assert docs[0].utterances == [["hello", "world"]]


# ---------------------------------------------------------------- history

def test_extended_history_spec_trace():
    assert build_extended_history(["a", "b", "c", "d", "e"], ["x"], 4) == ["c", "d", "e"]


def test_extended_history_empty():
    assert build_extended_history([], ["x"], 4) == []


def test_extended_history_short_history_returned_whole():
    assert build_extended_history(["a", "b"], ["x"], 8) == ["a", "b"]


def test_extended_history_length_bound():
    hist = [f"w{i}" for i in range(50)]
    for t in (1, 2, 5, 30, 100):
        assert len(build_extended_history(hist, ["x"], t)) <= max(0, t - 1)
    assert build_extended_history(hist, ["x"], 1) == []
