"""Model assembly for the seven architectures: causal transformer LMs with
optional segment-wise attention recurrence (xl variants), LSTM-augmented
transformer blocks (rtlm variants, direct or fused), and a stacked LSTM LM.

Cross-segment state is carried in a MemoryState and re-enters the next
forward pass through stop_gradient, so training a segment never
backpropagates into earlier segments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import layers
from .layers import (
    AttentionParams,
    FfnParams,
    FusionParams,
    LstmParams,
    causal_mha,
    embed,
    ffn_block,
    fusion,
    lstm_forward,
)
from .tensor import (
    DTYPE,
    Tensor,
    add,
    layer_norm,
    log_softmax_rows_f64,
    matmul,
    no_grad,
    stop_gradient,
    transpose,
)

ARCHITECTURES = ("tlm", "tlm_xl", "rtlm_d", "rtlm_f", "rtlm_d_xl", "rtlm_f_xl",
                 "lstm_lm")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    vocab_size: int
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    segment_len: int = 16
    lstm_block_indices: Optional[frozenset] = None
    fusion_activation: str = "linear"
    d_ff: int = 0  # 0 means 4 * d_model
    norm_style: str = "post"
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.segment_len < 1 or self.vocab_size < 1 or self.n_blocks < 1:
            raise ValueError("segment_len, vocab_size and n_blocks must be positive")
        if self.norm_style not in ("post", "pre"):
            raise ValueError(f"norm_style must be post or pre, got {self.norm_style!r}")
        if self.fusion_activation not in layers.FUSION_ACTIVATIONS:
            raise ValueError(f"unknown fusion activation {self.fusion_activation!r}")
        idx = self.lstm_block_indices
        if self.uses_lstm_module:
            if idx is None:
                # fused works best in the third block, direct in the first;
                # clamp for shallow models
                idx = frozenset({min(2, self.n_blocks - 1)} if self.fused else {0})
            idx = frozenset(int(i) for i in idx)
            if not idx:
                raise ValueError(f"{self.architecture} needs at least one LSTM block")
            if not all(0 <= i < self.n_blocks for i in idx):
                raise ValueError(
                    f"lstm_block_indices {sorted(idx)} outside [0, {self.n_blocks})")
        else:
            if idx:
                raise ValueError(
                    f"{self.architecture} takes no lstm_block_indices, got {sorted(idx)}")
            idx = frozenset()
        object.__setattr__(self, "lstm_block_indices", idx)
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def is_lstm_lm(self) -> bool:
        return self.architecture == "lstm_lm"

    @property
    def uses_lstm_module(self) -> bool:
        return self.architecture.startswith("rtlm")

    @property
    def fused(self) -> bool:
        return self.architecture in ("rtlm_f", "rtlm_f_xl")

    @property
    def is_xl(self) -> bool:
        return self.architecture.endswith("_xl") and self.architecture != "lstm_lm"

    @property
    def rel_table_size(self) -> int:
        # memory plus current segment: distances 0 .. 2T-1
        return 2 * self.segment_len


@dataclass
class MemoryState:
    """Per-block carried state: previous-segment block inputs for the
    attention recurrence, and (h, c) pairs for LSTM blocks or layers."""

    attn_mem: Dict[int, Tensor] = field(default_factory=dict)
    lstm: Dict[int, Tuple[Tensor, Tensor]] = field(default_factory=dict)


class Parameters:
    """Named map from parameter path to Tensor, in stable insertion order."""

    def __init__(self, tensors: Dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(
                f"parameter {name!r} missing; the set is incomplete for this "
                f"architecture") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def init_params(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """Deterministic parameter initialization for the configured architecture."""
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.vocab_size
    p: Dict[str, Tensor] = {}

    def par(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    par("embed.table", rng.normal(0.0, 0.02, size=(v, d)).astype(DTYPE))

    if cfg.is_lstm_lm:
        for l in range(cfg.n_blocks):
            _init_lstm(par, rng, f"layer.{l}", d)
    else:
        for b in range(cfg.n_blocks):
            pre = f"block.{b}"
            if b in cfg.lstm_block_indices:
                _init_lstm(par, rng, pre, d)
                if cfg.fused:
                    par(f"{pre}.fusion.w_lstm", _xavier(rng, d, d))
                    par(f"{pre}.fusion.w_in", _xavier(rng, d, d))
                    par(f"{pre}.fusion.b", np.zeros(d, DTYPE))
            par(f"{pre}.attn.w_q", _xavier(rng, d, d))
            par(f"{pre}.attn.w_k", _xavier(rng, d, d))
            par(f"{pre}.attn.w_v", _xavier(rng, d, d))
            par(f"{pre}.attn.w_o", _xavier(rng, d, d))
            par(f"{pre}.attn.rel_emb",
                rng.normal(0.0, 0.02, size=(cfg.rel_table_size, d)).astype(DTYPE))
            par(f"{pre}.attn.u", np.zeros(d, DTYPE))
            par(f"{pre}.attn.v", np.zeros(d, DTYPE))
            par(f"{pre}.norm1.gamma", np.ones(d, DTYPE))
            par(f"{pre}.norm1.beta", np.zeros(d, DTYPE))
            par(f"{pre}.ffn.norm.gamma", np.ones(d, DTYPE))
            par(f"{pre}.ffn.norm.beta", np.zeros(d, DTYPE))
            par(f"{pre}.ffn.w1", _xavier(rng, d, cfg.d_ff))
            par(f"{pre}.ffn.b1", np.zeros(cfg.d_ff, DTYPE))
            par(f"{pre}.ffn.w2", _xavier(rng, cfg.d_ff, d))
            par(f"{pre}.ffn.b2", np.zeros(d, DTYPE))

    if not cfg.tie_embeddings:
        par("out.w", _xavier(rng, d, v))
    par("out.b", np.zeros(v, DTYPE))
    return Parameters(p)


def _init_lstm(par, rng, prefix, d):
    # uniform(-1/sqrt(d), 1/sqrt(d)) gates, forget-gate bias +1
    bound = 1.0 / np.sqrt(d)
    par(f"{prefix}.lstm.w_x",
        rng.uniform(-bound, bound, size=(d, 4 * d)).astype(DTYPE))
    par(f"{prefix}.lstm.w_h",
        rng.uniform(-bound, bound, size=(d, 4 * d)).astype(DTYPE))
    b = np.zeros(4 * d, DTYPE)
    b[d:2 * d] = 1.0
    par(f"{prefix}.lstm.b", b)


def _attn_view(params: Parameters, b: int, n_heads: int) -> AttentionParams:
    pre = f"block.{b}.attn"
    return AttentionParams(
        w_q=params[f"{pre}.w_q"], w_k=params[f"{pre}.w_k"],
        w_v=params[f"{pre}.w_v"], w_o=params[f"{pre}.w_o"],
        rel_emb=params[f"{pre}.rel_emb"], u=params[f"{pre}.u"],
        v=params[f"{pre}.v"], n_heads=n_heads)


def _ffn_view(params: Parameters, b: int) -> FfnParams:
    pre = f"block.{b}.ffn"
    return FfnParams(
        norm_gamma=params[f"{pre}.norm.gamma"], norm_beta=params[f"{pre}.norm.beta"],
        w1=params[f"{pre}.w1"], b1=params[f"{pre}.b1"],
        w2=params[f"{pre}.w2"], b2=params[f"{pre}.b2"])


def _lstm_view(params: Parameters, prefix: str) -> LstmParams:
    return LstmParams(w_x=params[f"{prefix}.lstm.w_x"],
                      w_h=params[f"{prefix}.lstm.w_h"],
                      b=params[f"{prefix}.lstm.b"])


def _fusion_view(params: Parameters, b: int, activation: str) -> FusionParams:
    pre = f"block.{b}.fusion"
    return FusionParams(w_lstm=params[f"{pre}.w_lstm"], w_in=params[f"{pre}.w_in"],
                        b=params[f"{pre}.b"], activation=activation)


def init_state(cfg: ModelConfig) -> MemoryState:
    """Zero LSTM states for the configured LSTM blocks/layers, no attention
    memory until a segment has been processed."""
    d = cfg.d_model
    lstm = {}
    keys = range(cfg.n_blocks) if cfg.is_lstm_lm else sorted(cfg.lstm_block_indices)
    for k in keys:
        lstm[k] = (Tensor(np.zeros((1, d), DTYPE)), Tensor(np.zeros((1, d), DTYPE)))
    return MemoryState(attn_mem={}, lstm=lstm)


def _check_state(cfg: ModelConfig, state: MemoryState):
    d = cfg.d_model
    expect = set(range(cfg.n_blocks)) if cfg.is_lstm_lm else set(cfg.lstm_block_indices)
    if set(state.lstm) != expect:
        raise ValueError(
            f"state LSTM blocks {sorted(state.lstm)} do not match config {sorted(expect)}")
    for h, c in state.lstm.values():
        if h.shape != (1, d) or c.shape != (1, d):
            raise ValueError(f"state LSTM shapes {h.shape}/{c.shape} do not match d={d}")
    if state.attn_mem:
        if not cfg.is_xl:
            raise ValueError(f"{cfg.architecture} carries no attention memory")
        for b, m in state.attn_mem.items():
            if not (0 <= b < cfg.n_blocks) or m.shape[1] != d or m.shape[0] > cfg.segment_len:
                raise ValueError(
                    f"attention memory for block {b} has bad shape {m.shape}")


def forward(cfg: ModelConfig, params: Parameters, ids, state: Optional[MemoryState] = None):
    """One segment forward pass. Returns (logits [T', V], new MemoryState).

    ids must hold between 1 and cfg.segment_len token ids. Carried state
    enters through stop_gradient; the returned state is detached from the
    graph. Positions are purely relative (query-key index differences over
    [memory; segment]), so memory rows are addressed the same way whether a
    segment came from a training stream or from an extended-history
    rescoring context, including partial segments shorter than segment_len.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError(f"forward: ids must be a nonempty 1-d sequence, got {ids.shape}")
    if ids.size > cfg.segment_len:
        raise ValueError(
            f"forward: segment of {ids.size} tokens exceeds segment_len {cfg.segment_len}")
    if state is None:
        state = init_state(cfg)
    _check_state(cfg, state)

    new_state = MemoryState()
    x = embed(ids, params["embed.table"])

    if cfg.is_lstm_lm:
        for l in range(cfg.n_blocks):
            h0, c0 = state.lstm[l]
            x, h, c = lstm_forward(x, stop_gradient(h0), stop_gradient(c0),
                                   _lstm_view(params, f"layer.{l}"))
            new_state.lstm[l] = (stop_gradient(h), stop_gradient(c))
        return _output_logits(cfg, params, x), new_state

    for b in range(cfg.n_blocks):
        if b in cfg.lstm_block_indices:
            h0, c0 = state.lstm[b]
            y, h, c = lstm_forward(x, stop_gradient(h0), stop_gradient(c0),
                                   _lstm_view(params, f"block.{b}"))
            new_state.lstm[b] = (stop_gradient(h), stop_gradient(c))
            xt = fusion(y, x, _fusion_view(params, b, cfg.fusion_activation)) \
                if cfg.fused else y
        else:
            xt = x
        mem = None
        if cfg.is_xl:
            if b in state.attn_mem:
                mem = stop_gradient(state.attn_mem[b])
            new_state.attn_mem[b] = stop_gradient(xt)

        g1, b1 = params[f"block.{b}.norm1.gamma"], params[f"block.{b}.norm1.beta"]
        ap = _attn_view(params, b, cfg.n_heads)
        if cfg.norm_style == "pre":
            attn_in = layer_norm(xt, g1, b1, layers.LN_EPS)
            attn_mem = layer_norm(mem, g1, b1, layers.LN_EPS) if mem is not None else None
            a = causal_mha(attn_in, attn_mem, ap)
        else:
            a = layer_norm(causal_mha(xt, mem, ap), g1, b1, layers.LN_EPS)
        x = ffn_block(a, _ffn_view(params, b))

    return _output_logits(cfg, params, x), new_state


def _output_logits(cfg: ModelConfig, params: Parameters, x: Tensor) -> Tensor:
    w = transpose(params["embed.table"]) if cfg.tie_embeddings else params["out.w"]
    return add(matmul(x, w), params["out.b"])


def lstm_lm_forward(cfg: ModelConfig, params: Parameters, ids,
                    state: Optional[MemoryState] = None):
    """Stacked-LSTM language model forward pass (architecture lstm_lm)."""
    if not cfg.is_lstm_lm:
        raise ValueError(f"lstm_lm_forward called with architecture {cfg.architecture}")
    return forward(cfg, params, ids, state)


def score_tokens(cfg: ModelConfig, params: Parameters, context_ids, target_ids,
                 state: Optional[MemoryState] = None):
    """Per-token log P(target_t | everything before it), float64.

    The model consumes context followed by target in segment_len-sized chunks
    with state carryover; only target positions are scored. The context must
    be nonempty when the target is (the first target token needs a
    predecessor position to be predicted from).
    """
    context = list(context_ids)
    target = list(target_ids)
    if not target:
        return np.zeros(0, dtype=np.float64), state if state is not None else init_state(cfg)
    if not context:
        raise ValueError("score_tokens: nonempty target needs a nonempty context")
    if state is None:
        state = init_state(cfg)

    seq = context + target
    inputs = seq[:-1]
    first_scored = len(context) - 1  # input position predicting target[0]
    out = np.zeros(len(target), dtype=np.float64)
    t_len = cfg.segment_len
    with no_grad():
        for start in range(0, len(inputs), t_len):
            chunk = inputs[start:start + t_len]
            logits, state = forward(cfg, params, chunk, state)
            logp = log_softmax_rows_f64(logits.data)
            for off in range(len(chunk)):
                pos = start + off
                if pos >= first_scored:
                    out[pos - first_scored] = logp[off, seq[pos + 1]]
    return out, state


def score_sequence(cfg: ModelConfig, params: Parameters, context_ids, target_ids,
                   state: Optional[MemoryState] = None):
    """Total log-probability of target_ids given context_ids and carried state."""
    scores, new_state = score_tokens(cfg, params, context_ids, target_ids, state)
    return float(scores.sum()), new_state


# ------------------------------------------------------------------ checkpoints

_CFG_BOOL = ("tie_embeddings",)
_CFG_INT = ("vocab_size", "n_blocks", "d_model", "n_heads", "segment_len", "d_ff")


def save_checkpoint(cfg: ModelConfig, params: Parameters, stem: str):
    """Writes <stem>.manifest (text: config header, then name/shape/offset per
    tensor) and <stem>.bin (little-endian float32 blob). Round-trips bit-exactly."""
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    blob = bytearray()
    lines = []
    for key in ("architecture", "fusion_activation", "norm_style") + _CFG_INT + _CFG_BOOL:
        lines.append(f"#cfg {key}={getattr(cfg, key)}")
    idx = ",".join(str(i) for i in sorted(cfg.lstm_block_indices)) or "none"
    lines.append(f"#cfg lstm_block_indices={idx}")
    for name, t in params.items():
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{name}\t{shape}\t{len(blob)}")
        blob.extend(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(stem + ".manifest", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(stem + ".bin", "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(stem: str):
    """Reads a checkpoint written by save_checkpoint.

    Returns (ModelConfig, Parameters) with requires_grad=True tensors.
    """
    cfg_kv = {}
    entries = []
    with open(stem + ".manifest", "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#cfg "):
                key, _, value = line[5:].partition("=")
                cfg_kv[key] = value
                continue
            name, shape_s, offset_s = line.split("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            entries.append((name, shape, int(offset_s)))
    kwargs = {"architecture": cfg_kv["architecture"],
              "fusion_activation": cfg_kv["fusion_activation"],
              "norm_style": cfg_kv["norm_style"]}
    for key in _CFG_INT:
        kwargs[key] = int(cfg_kv[key])
    for key in _CFG_BOOL:
        kwargs[key] = cfg_kv[key] == "True"
    raw_idx = cfg_kv["lstm_block_indices"]
    kwargs["lstm_block_indices"] = (
        None if raw_idx == "none" else frozenset(int(i) for i in raw_idx.split(",")))
    cfg = ModelConfig(**kwargs)

    with open(stem + ".bin", "rb") as f:
        blob = f.read()
    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    return cfg, Parameters(tensors)
