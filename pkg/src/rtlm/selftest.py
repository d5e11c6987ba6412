"""Built-in sanity suite for the `rtlm self-test` command: gradient spot
checks against finite differences plus the structural oracles that the full
test suite exercises in depth."""

from __future__ import annotations

import itertools

import numpy as np

from .layers import AttentionParams, causal_mha
from .models import ModelConfig, forward, init_params
from .rescoring import compute_wer, mpsswe
from .tensor import (
    Tensor,
    backward,
    cross_entropy_logits,
    layer_norm,
    matmul,
    mul,
    softmax_rows,
    stop_gradient,
    sum_all,
    tanh,
)


def _fd_ok(build_loss, tensors, rng, h=1e-3, tol=1e-3, n_coords=6) -> bool:
    for t in tensors:
        t.zero_grad()
    backward(build_loss())
    for t in tensors:
        flat = t.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            analytic = float(t.grad.reshape(-1)[c])
            ok = False
            for step in (h, h / 5, h / 25):
                orig = flat[c]
                flat[c] = orig + step
                fp = float(build_loss().data)
                flat[c] = orig - step
                fm = float(build_loss().data)
                flat[c] = orig
                numeric = (fp - fm) / (2 * step)
                if abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0) < tol:
                    ok = True
                    break
            if not ok:
                return False
    return True


def _edit_distance_recursive(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(_edit_distance_recursive(a[1:], b[1:]) + (a[0] != b[0]),
               _edit_distance_recursive(a[1:], b) + 1,
               _edit_distance_recursive(a, b[1:]) + 1)


def run_self_test(seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    failures = 0

    def report(name, ok):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures += 1

    # gradient spot checks
    x = Tensor(rng.uniform(-1, 1, (3, 4)).astype(np.float32), requires_grad=True)
    m = Tensor(rng.uniform(-1, 1, (4, 3)).astype(np.float32), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 4).astype(np.float32), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, 4).astype(np.float32), requires_grad=True)
    w = Tensor(rng.choice([-1.0, 1.0], (3, 4)).astype(np.float32))
    report("gradients: matmul+tanh",
           _fd_ok(lambda: sum_all(tanh(matmul(x, m))), [x, m], rng))
    report("gradients: layer_norm",
           _fd_ok(lambda: sum_all(mul(layer_norm(x, g, b), w)), [x, g, b], rng))
    report("gradients: softmax+cross_entropy",
           _fd_ok(lambda: cross_entropy_logits(x, [1, 0, 3]), [x], rng))

    # stop-gradient cuts attribution exactly
    y = Tensor(rng.uniform(-1, 1, (2, 2)).astype(np.float32), requires_grad=True)
    y.zero_grad()
    backward(sum_all(mul(stop_gradient(y), y)))
    report("stop_gradient: constant factor", (y.grad == y.data).all())
    y.zero_grad()
    backward(sum_all(stop_gradient(tanh(y))))
    report("stop_gradient: zero upstream", (y.grad == 0).all())

    # attention memory equals the suffix of a full-context pass
    d = 8
    def wmat(*shape):
        return Tensor(rng.uniform(-0.4, 0.4, shape).astype(np.float32))
    p = AttentionParams(w_q=wmat(d, d), w_k=wmat(d, d), w_v=wmat(d, d),
                        w_o=wmat(d, d), rel_emb=wmat(8, d), u=wmat(d), v=wmat(d),
                        n_heads=2)
    seq = rng.uniform(-1, 1, (4, d)).astype(np.float32)
    whole = causal_mha(Tensor(seq), None, p).data
    part = causal_mha(Tensor(seq[2:]), Tensor(seq[:2]), p).data
    report("attention: memory suffix oracle", np.allclose(part, whole[2:], atol=1e-5))

    # model-level forward determinism and normalization
    cfg = ModelConfig("rtlm_f_xl", vocab_size=12, n_blocks=2, d_model=8, n_heads=2,
                      segment_len=5, lstm_block_indices=frozenset({0}))
    params = init_params(cfg, seed=seed)
    ids = rng.integers(0, 12, size=5).tolist()
    la, _ = forward(cfg, params, ids)
    lb, _ = forward(cfg, params, ids)
    report("forward: deterministic", (la.data == lb.data).all())
    probs = softmax_rows(la).data.sum(axis=1)
    report("forward: rows normalize", np.allclose(probs, 1.0, atol=1e-6))

    # WER against exhaustive search on short pairs
    seqs = [list(s) for n in range(4) for s in itertools.product("ab", repeat=n)]
    ok = all(compute_wer(r, h).errors == _edit_distance_recursive(r, h)
             for r in seqs for h in seqs)
    report("wer: matches exhaustive search", ok)

    # matched-pairs test sanity
    same = mpsswe([1, 2, 0, 3], [1, 2, 0, 3])
    diff = mpsswe([2] * 40, [1] * 40)
    report("mpsswe: identical gives p=1", same.p_value == 1.0 and not same.significant)
    report("mpsswe: uniform difference significant", diff.significant)

    print(f"self-test: {'OK' if failures == 0 else f'{failures} failure(s)'}")
    return 0 if failures == 0 else 1
