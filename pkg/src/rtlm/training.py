"""Segment-stream training with cross-entropy loss, state carryover inside
documents, global-norm gradient clipping, and perplexity evaluation."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .corpus import SegmentStream
from .models import MemoryState, ModelConfig, Parameters, forward, init_state
from .tensor import (
    NumericError,
    backward,
    cross_entropy_logits,
    log_softmax_rows_f64,
    no_grad,
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    epochs: int = 1
    seed: int = 0
    warmup_steps: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    ppl: float


class _Optimizer:
    def __init__(self, params: Parameters, tc: TrainConfig):
        self.params = params
        self.tc = tc
        self.step_count = 0
        if tc.optimizer == "adam":
            self.m = [np.zeros_like(t.data) for t in params.tensors()]
            self.v = [np.zeros_like(t.data) for t in params.tensors()]

    def _lr(self) -> float:
        lr = self.tc.learning_rate
        if self.tc.warmup_steps > 0:
            lr *= min(1.0, self.step_count / self.tc.warmup_steps)
        return lr

    def step(self):
        self.step_count += 1
        lr = self._lr()
        tensors = self.params.tensors()
        if self.tc.optimizer == "sgd":
            for t in tensors:
                t.data -= np.float32(lr) * t.grad
            return
        b1, b2, eps = self.tc.beta1, self.tc.beta2, self.tc.eps
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for t, m, v in zip(tensors, self.m, self.v):
            g = t.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            t.data -= np.float32(lr) * update.astype(np.float32)


def clip_global_norm(params: Parameters, clip_norm: float) -> float:
    """Scales all gradients so their global 2-norm is at most clip_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for t in params.tensors():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > clip_norm:
        factor = np.float32(clip_norm / norm)
        for t in params.tensors():
            if t.grad is not None:
                t.grad *= factor
    return norm


def train(cfg: ModelConfig, params: Parameters, streams: Sequence[SegmentStream],
          tc: TrainConfig) -> Tuple[Parameters, List[LogRow]]:
    """Iterates segments in document order, carrying MemoryState across the
    segments of one document and resetting it at document boundaries.
    Deterministic for a fixed seed and input order."""
    if not streams:
        raise ValueError("train: no segment streams")
    opt = _Optimizer(params, tc)
    log: List[LogRow] = []
    step = 0
    for epoch in range(tc.epochs):
        for stream in streams:
            state: MemoryState = init_state(cfg)
            for tau, (inputs, targets, mask) in enumerate(stream.training_pairs()):
                try:
                    logits, state = forward(cfg, params, inputs, state)
                    loss = cross_entropy_logits(logits, targets, mask)
                except NumericError as e:
                    raise ArithmeticError(
                        f"non-finite values at document {stream.doc_id!r} "
                        f"segment {tau}: {e}") from e
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise ArithmeticError(
                        f"non-finite loss at document {stream.doc_id!r} segment {tau}")
                params.zero_grad()
                backward(loss)
                clip_global_norm(params, tc.clip_norm)
                opt.step()
                step += 1
                log.append(LogRow(epoch, step, loss_val, math.exp(loss_val)))
    return params, log


def write_loss_csv(log: Sequence[LogRow], path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "loss", "ppl"])
        for row in log:
            writer.writerow([row.epoch, row.step, f"{row.loss:.6f}", f"{row.ppl:.6f}"])


def _stream_nll(cfg: ModelConfig, params: Parameters,
                stream: SegmentStream) -> Tuple[float, int]:
    nll = 0.0
    count = 0
    state = init_state(cfg)
    with no_grad():
        for inputs, targets, mask in stream.training_pairs():
            logits, state = forward(cfg, params, inputs, state)
            logp = log_softmax_rows_f64(logits.data)
            for pos, (tgt, m) in enumerate(zip(targets, mask)):
                if m:
                    nll -= logp[pos, tgt]
                    count += 1
    return nll, count


def evaluate_ppl(cfg: ModelConfig, params: Parameters,
                 streams: Sequence[SegmentStream], n_threads: int = 1) -> float:
    """exp(total NLL / total tokens) over all unmasked positions, accumulated
    in float64, with state carried within each document as in training.
    Documents may be sharded across threads; parameters are read-only here."""
    if not streams:
        raise ValueError("evaluate_ppl: no segment streams")
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda s: _stream_nll(cfg, params, s), streams))
    else:
        results = [_stream_nll(cfg, params, s) for s in streams]
    total_nll = sum(r[0] for r in results)
    total_count = sum(r[1] for r in results)
    if total_count == 0:
        raise ValueError("evaluate_ppl: no scoreable tokens")
    return math.exp(total_nll / total_count)
