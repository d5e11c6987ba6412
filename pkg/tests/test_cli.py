import filecmp
import os

import pytest

from rtlm.cli import dispatch, read_config
from rtlm.corpus import Vocab
from rtlm.models import ModelConfig, init_params, save_checkpoint
from rtlm.synthdata import cross_utterance_corpus, write_corpus

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(REPO, "data")


@pytest.fixture()
def toy_config(tmp_path):
    write_corpus(cross_utterance_corpus(3, 6, seed=1), str(tmp_path / "train.txt"))
    write_corpus(cross_utterance_corpus(1, 6, seed=2), str(tmp_path / "held.txt"))
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(
        "n_blocks=1\nd_model=16\nn_heads=2\nsegment_len=6\n"
        "train_corpus=train.txt\nheldout_corpus=held.txt\n"
        "epochs=1\nwarmup_steps=10\nseed=0\n", encoding="utf-8")
    return str(cfg)


def test_train_emits_checkpoint_and_loss_csv(toy_config, tmp_path, capsys):
    out = str(tmp_path / "run")
    rc = dispatch(["train", "--arch", "rtlm_f_xl", "--config", toy_config,
                   "--out", out])
    assert rc == 0
    for name in ("model.manifest", "model.bin", "vocab.txt", "loss.csv"):
        assert os.path.exists(os.path.join(out, name)), name
    printed = capsys.readouterr().out
    assert "heldout_ppl" in printed and "rtlm_f_xl" in printed


def test_train_idempotent_bit_exact(toy_config, tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (out1, out2):
        assert dispatch(["train", "--arch", "tlm", "--config", toy_config,
                         "--seed", "3", "--out", out]) == 0
    for name in ("model.manifest", "model.bin", "vocab.txt", "loss.csv"):
        assert filecmp.cmp(os.path.join(out1, name), os.path.join(out2, name),
                           shallow=False), name


def test_eval_ppl_uniform_model_prints_vocab_size(tmp_path, capsys):
    corpus_path = tmp_path / "c.txt"
    corpus_path.write_text("a b a b\nb a\n", encoding="utf-8")
    vocab = Vocab(["a", "b"])
    cfg = ModelConfig("tlm", vocab_size=len(vocab), n_blocks=1, d_model=8,
                      n_heads=2, segment_len=4)
    params = init_params(cfg, seed=0)
    params["out.w"].data[...] = 0.0
    params["out.b"].data[...] = 0.0
    stem = str(tmp_path / "model")
    save_checkpoint(cfg, params, stem)
    vocab.save(str(tmp_path / "vocab.txt"))
    rc = dispatch(["eval-ppl", "--checkpoint", stem, "--corpus", str(corpus_path)])
    assert rc == 0
    ppl = float(capsys.readouterr().out.split()[-1])
    assert abs(ppl - len(vocab)) < 1e-3


def test_rescore_on_bundled_data(tmp_path, capsys):
    out = str(tmp_path / "rescored.tsv")
    rc = dispatch(["rescore",
                   "--checkpoint", os.path.join(DATA, "rescore_m1"),
                   "--checkpoint2", os.path.join(DATA, "rescore_m2"),
                   "--vocab", os.path.join(DATA, "rescore_vocab.txt"),
                   "--nbest", os.path.join(DATA, "synth_nbest.jsonl"),
                   "--interp-weight", "0.6", "--lm-scale", "1.0",
                   "--out", out])
    assert rc == 0
    assert capsys.readouterr().out.startswith("wer ")
    with open(out, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0].split("\t")[:3] == ["conv", "utt", "chosen"]
    assert len(lines) == 97  # header + 96 utterances


def test_mpsswe_command_on_two_systems(tmp_path, capsys):
    common = ["--checkpoint", os.path.join(DATA, "rescore_m1"),
              "--vocab", os.path.join(DATA, "rescore_vocab.txt"),
              "--nbest", os.path.join(DATA, "synth_nbest.jsonl")]
    a, b = str(tmp_path / "a.tsv"), str(tmp_path / "b.tsv")
    assert dispatch(["rescore", *common, "--lm-scale", "0.0", "--out", a]) == 0
    assert dispatch(["rescore", *common, "--lm-scale", "8.0", "--out", b]) == 0
    capsys.readouterr()
    rc = dispatch(["mpsswe", "--system-a", a, "--system-b", b])
    assert rc == 0
    printed = capsys.readouterr().out
    assert printed.startswith("z ") and "significant" in printed


def test_analyze_writes_report(tmp_path, capsys):
    out = str(tmp_path / "report.tsv")
    rc = dispatch(["analyze",
                   "--checkpoint", os.path.join(DATA, "rescore_m1"),
                   "--baseline-checkpoint", os.path.join(DATA, "rescore_m2"),
                   "--vocab", os.path.join(DATA, "rescore_vocab.txt"),
                   "--nbest", os.path.join(DATA, "synth_nbest.jsonl"),
                   "--out", out])
    assert rc == 0
    with open(out, encoding="utf-8") as f:
        text = f.read()
    assert text.startswith("metric\tvalue")
    assert "n_error_prone_words" in text


def test_self_test_exits_zero():
    assert dispatch(["self-test"]) == 0


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        dispatch(["train", "--nonsense"])
    assert exc.value.code == 2


def test_runtime_failure_exits_one(capsys):
    rc = dispatch(["eval-ppl", "--checkpoint", "/does/not/exist",
                   "--corpus", "/does/not/exist"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_read_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("archh=tlm\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_config(str(path))


def test_shipped_toy_configs_parse():
    cfg_dir = os.path.join(REPO, "configs")
    names = sorted(os.listdir(cfg_dir))
    assert len(names) == 7
    for name in names:
        cfg = read_config(os.path.join(cfg_dir, name))
        assert os.path.exists(cfg["train_corpus"]), name
