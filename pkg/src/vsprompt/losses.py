"""Training objectives and evaluation metrics.

Token ids live in ``[0, V)``; the CTC blank is always ``V``.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log_softmax, mean, pick, record, reshape, scale

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the given number of frames."""


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean negative log-likelihood of ``label`` under ``softmax(logits)``.

    ``logits`` is ``[K]`` with an int label, or ``[N, K]`` with N labels.
    """
    single = logits.ndim == 1
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    K = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"label {labels.tolist()} out of range for {K} classes")
    x = reshape(logits, (1, K)) if single else logits
    if x.shape[0] != labels.size:
        raise ValueError(f"{x.shape[0]} logit rows but {labels.size} labels")
    return scale(mean(pick(log_softmax(x, axis=-1), labels)), -1.0)


def min_ctc_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(target, V: int) -> np.ndarray:
    t = np.asarray(target, dtype=np.int64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("CTC target must be a non-empty 1-d label sequence")
    if t.min() < 0 or t.max() >= V:
        raise ValueError(f"CTC target ids must lie in [0, {V}) (blank is {V}), got {t.tolist()}")
    return t


def _extended(target: np.ndarray, blank: int) -> tuple[np.ndarray, np.ndarray]:
    S = 2 * target.size + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = target[1:] != target[:-1]
    return ext, skip


def _alpha_beta(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray):
    """Log-space forward and backward variables; both include the emission at t."""
    T, S = lp.shape[0], ext.size
    emit = lp[:, ext]  # [T, S]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b + emit[t]
    logp = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    return alpha, beta, emit, logp


def _ctc_nll_and_grad(lp: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    T, K = lp.shape
    blank = K - 1
    need = min_ctc_frames(target.tolist())
    if T < need:
        raise CTCInfeasibleError(f"target of length {target.size} needs at least {need} frames, got {T}")
    ext, skip = _extended(target, blank)
    alpha, beta, emit, logp = _alpha_beta(lp, ext, skip)
    occ = np.exp(alpha + beta - emit - logp)  # state occupancy per frame
    grad = np.zeros((T, K))
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return -float(logp), grad


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """Negative log-probability of ``target`` summed over all CTC alignments.

    ``log_probs`` is ``[T, V+1]`` with the blank in the last column.
    """
    if log_probs.ndim != 2:
        raise ValueError(f"ctc_loss expects [T, V+1] log-probabilities, got {log_probs.shape}")
    tgt = _check_target(target, log_probs.shape[1] - 1)
    nll, grad = _ctc_nll_and_grad(log_probs.data, tgt)
    return record(np.array(nll), (log_probs,), lambda g: (g * grad,))


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean CTC loss over a batch ``[N, T, V+1]`` of equal-length sequences."""
    N, T, K = log_probs.shape
    if len(targets) != N:
        raise ValueError(f"{N} sequences but {len(targets)} targets")
    total = 0.0
    grad = np.zeros((N, T, K))
    for i, tgt in enumerate(targets):
        nll, grad[i] = _ctc_nll_and_grad(log_probs.data[i], _check_target(tgt, K - 1))
        total += nll
    grad /= N
    return record(np.array(total / N), (log_probs,), lambda g: (g * grad,))


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge repeated ids, then drop blanks."""
    return [k for k, _ in itertools.groupby(path) if k != blank]


def ctc_brute_force(log_probs, target) -> float:
    """CTC negative log-likelihood by summing over every frame path (tiny sizes only).

    Returns ``inf`` when no path collapses to ``target``.
    """
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
    T, K = lp.shape
    if T > 8 or K - 1 > 4:
        raise ValueError(f"enumeration limited to T <= 8 and V <= 4, got T={T}, V={K - 1}")
    want = list(target)
    blank = K - 1
    terms = [sum(lp[t, k] for t, k in enumerate(path))
             for path in itertools.product(range(K), repeat=T)
             if collapse(path, blank) == want]
    if not terms:
        return np.inf
    return -float(np.logaddexp.reduce(terms))


def greedy_ctc_decode(log_probs) -> list[int]:
    """Per-frame argmax (ties go to the lowest id), merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse(lp.argmax(axis=-1).tolist(), lp.shape[-1] - 1)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insertion, deletion and substitution costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("word error rate needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def word_accuracy(logits, labels) -> float:
    """Top-1 accuracy in percent; argmax ties resolve to the lowest class id."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy over an empty set")
    return 100.0 * float((logits.argmax(axis=-1) == labels).mean())
