import math

import numpy as np
import numpy.testing as npt
import pytest

from rtlm.corpus import Document, build_vocab, make_segments
from rtlm.models import ModelConfig, forward, init_params
from rtlm.tensor import backward, cross_entropy_logits
from rtlm.training import (
    TrainConfig,
    clip_global_norm,
    evaluate_ppl,
    train,
    write_loss_csv,
)


def alternating_doc(n_pairs, doc_id="d0"):
    return Document(doc_id, [["a", "b"] * n_pairs])


def streams_for(docs, vocab, t):
    return [make_segments(d, vocab, t) for d in docs]


# ---------------------------------------------------------------- train

def test_train_learns_alternating_corpus_within_200_steps():
    doc = alternating_doc(1600)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=2, d_model=64,
                      n_heads=4, segment_len=16)
    params = init_params(cfg, seed=0)
    tc = TrainConfig(epochs=1, warmup_steps=20, seed=0)
    streams = streams_for([doc], vocab, cfg.segment_len)
    assert len(streams[0].segments) >= 200
    _, log = train(cfg, params, streams, tc)
    assert log[199].ppl < 1.2

    # a trained model beats the uniform baseline on held-out text
    heldout = streams_for([alternating_doc(40, "h0")], vocab, cfg.segment_len)
    trained_ppl = evaluate_ppl(cfg, params, heldout)
    uniform = init_params(cfg, seed=0)
    uniform["out.w"].data[...] = 0.0
    uniform["out.b"].data[...] = 0.0
    assert trained_ppl < evaluate_ppl(cfg, uniform, heldout)


def test_zero_learning_rate_leaves_params_bit_unchanged():
    doc = alternating_doc(20)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=8)
    params = init_params(cfg, seed=3)
    before = {name: t.data.copy() for name, t in params.items()}
    train(cfg, params, streams_for([doc], vocab, 8), TrainConfig(learning_rate=0.0))
    for name, t in params.items():
        assert (t.data == before[name]).all(), name


def test_same_seed_gives_identical_loss_logs():
    doc = alternating_doc(30)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("rtlm_d_xl", vocab_size=len(vocab), n_blocks=2, d_model=16,
                      n_heads=2, segment_len=8)
    logs = []
    for _ in range(2):
        params = init_params(cfg, seed=5)
        _, log = train(cfg, params, streams_for([doc], vocab, 8),
                       TrainConfig(epochs=1, seed=7))
        logs.append([(r.epoch, r.step, r.loss) for r in log])
    assert logs[0] == logs[1]


def test_nan_loss_aborts_naming_the_segment():
    doc = alternating_doc(10)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=8)
    params = init_params(cfg, seed=1)
    params["embed.table"].data[...] = np.nan
    with pytest.raises(ArithmeticError) as exc:
        train(cfg, params, streams_for([doc], vocab, 8), TrainConfig())
    assert "d0" in str(exc.value) and "segment 0" in str(exc.value)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_loss_csv(tmp_path):
    doc = alternating_doc(8)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=8)
    params = init_params(cfg, seed=1)
    _, log = train(cfg, params, streams_for([doc], vocab, 8), TrainConfig())
    path = str(tmp_path / "loss.csv")
    write_loss_csv(log, path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == "epoch,step,loss,ppl"
    assert len(lines) == len(log) + 1


# ---------------------------------------------------------------- clipping

def test_clip_bounds_global_norm():
    doc = alternating_doc(10)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=8)
    params = init_params(cfg, seed=2)
    stream = make_segments(doc, vocab, 8)
    inputs, targets, mask = next(stream.training_pairs())
    logits, _ = forward(cfg, params, inputs)
    params.zero_grad()
    backward(cross_entropy_logits(logits, targets, mask))
    clip = 0.01
    pre = clip_global_norm(params, clip)
    assert pre > clip
    post = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                         for t in params.tensors()))
    assert post <= clip + 1e-6


# ---------------------------------------------------------------- masking

def test_padded_positions_contribute_nothing():
    doc = Document("d0", [["a", "b", "c"]])  # stream of 4 incl eos, T=6 pads 2
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=6)
    params = init_params(cfg, seed=4)
    stream = make_segments(doc, vocab, 6)
    inputs, targets, mask = next(stream.training_pairs())
    assert mask == [1, 1, 1, 1, 0, 0]

    def loss_and_grad(pad_value):
        tgt = list(targets)
        tgt[-1] = pad_value
        logits, _ = forward(cfg, params, inputs)
        params.zero_grad()
        loss = cross_entropy_logits(logits, tgt, mask)
        backward(loss)
        return float(loss.data), params["embed.table"].grad.copy()

    la, ga = loss_and_grad(vocab.eos_id)
    lb, gb = loss_and_grad(0)
    assert la == lb
    npt.assert_array_equal(ga, gb)


# ---------------------------------------------------------------- perplexity

def test_uniform_model_ppl_equals_vocab_size():
    doc = alternating_doc(16)
    vocab = build_vocab([doc], min_count=1)
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=8)
    params = init_params(cfg, seed=6)
    params["out.w"].data[...] = 0.0
    params["out.b"].data[...] = 0.0
    ppl = evaluate_ppl(cfg, params, streams_for([doc], vocab, 8))
    npt.assert_allclose(ppl, len(vocab), atol=1e-3)


def test_lstm_lm_ppl_invariant_to_segment_length():
    rng = np.random.default_rng(60)
    words = [f"w{i}" for i in rng.integers(0, 12, size=37)]
    doc = Document("d0", [words[:20], words[20:]])
    vocab = build_vocab([doc], min_count=1)
    cfg8 = ModelConfig("lstm_lm", vocab_size=len(vocab), n_blocks=2, d_model=16,
                       n_heads=1, segment_len=8)
    cfg16 = ModelConfig("lstm_lm", vocab_size=len(vocab), n_blocks=2, d_model=16,
                        n_heads=1, segment_len=16)
    params = init_params(cfg8, seed=8)
    a = evaluate_ppl(cfg8, params, streams_for([doc], vocab, 8))
    b = evaluate_ppl(cfg16, params, streams_for([doc], vocab, 16))
    npt.assert_allclose(a, b, rtol=1e-4)


def test_evaluate_ppl_threaded_matches_serial():
    rng = np.random.default_rng(61)
    docs = [Document(f"d{i}", [[f"w{j}" for j in rng.integers(0, 6, size=9)]])
            for i in range(4)]
    vocab = build_vocab(docs, min_count=1)
    cfg = ModelConfig("rtlm_d", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=6)
    params = init_params(cfg, seed=9)
    streams = streams_for(docs, vocab, 6)
    serial = evaluate_ppl(cfg, params, streams, n_threads=1)
    threaded = evaluate_ppl(cfg, params, streams, n_threads=3)
    npt.assert_allclose(serial, threaded, rtol=1e-12)
