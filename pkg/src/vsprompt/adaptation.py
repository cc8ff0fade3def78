"""Pretraining, prompt adaptation, finetuning baselines and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tape, Tensor, backward, no_grad
from .losses import cross_entropy, ctc_loss_batch, edit_distance, greedy_ctc_decode
from .model import RecognizerModel, forward, parameter_count
from .prompts import PromptSet
from .synthdata import Split

logger = logging.getLogger(__name__)

PROMPT_LR = {"add": 0.01, "pad": 0.01, "cat": 0.1}
FINETUNE_SCOPES = ("C", "B", "F")


class TrainingDiverged(RuntimeError):
    pass


class ScopeViolation(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    """AdamW state. ``lr`` maps parameter name to its base learning rate."""
    lr: dict[str, float]
    weight_decay: float = 0.0
    warmup: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_factor(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        return 1.0 if self.warmup <= 0 else min(step / self.warmup, 1.0)


def optimizer_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected adaptive-moment update with decoupled weight decay."""
    state.step += 1
    t = state.step
    factor = state.lr_factor(t)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != g.shape:
            raise ValueError(f"moment buffer for {name!r} has shape {m.shape}, gradient has {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = state.lr[name] * factor
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- configs

@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup: int = 50
    seed: int = 0


@dataclass
class AdaptationConfig:
    """``scope`` is "prompts" or one of the finetuning scopes "C", "B", "F"."""
    scope: str = "prompts"
    lr: dict[str, float] = field(default_factory=lambda: dict(PROMPT_LR))
    finetune_lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    weight_decay: float = 0.0
    warmup: int = 0
    seed: int = 0


@dataclass
class LogRow:
    run_id: str
    phase: str
    step: int
    loss: float
    metric: float
    lr: float


# ---------------------------------------------------------------- batching

def batches(split: Split, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, list]]:
    """Shuffled minibatches of equal-length videos."""
    order = rng.permutation(len(split))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(split.samples[i].video.shape[0], []).append(int(i))
    chunks = [idx[k:k + batch_size] for T in sorted(buckets) for idx in [buckets[T]]
              for k in range(0, len(idx), batch_size)]
    for c in rng.permutation(len(chunks)):
        chosen = [split.samples[i] for i in chunks[c]]
        yield np.stack([s.video for s in chosen]), [s.labels for s in chosen]


def _loss(model: RecognizerModel, out: Tensor, labels) -> Tensor:
    if model.config.mode == "ctc_sentence":
        return ctc_loss_batch(out, labels)
    return cross_entropy(out, [l[0] for l in labels])


def _batch_metric_counts(model: RecognizerModel, out: np.ndarray, labels) -> tuple[float, int]:
    """(errors, reference words) for CTC, (correct, samples) for word mode."""
    if model.config.mode == "ctc_sentence":
        errs = sum(edit_distance(list(l), greedy_ctc_decode(o)) for o, l in zip(out, labels))
        return float(errs), sum(len(l) for l in labels)
    pred = [int(np.argmax(o)) for o in out]
    return float(sum(int(p == l[0]) for p, l in zip(pred, labels))), len(labels)


def _accuracy(model: RecognizerModel, count: float, total: int) -> float:
    if model.config.mode == "ctc_sentence":
        return 100.0 * (1.0 - count / total)
    return 100.0 * count / total


def _run(model: RecognizerModel, split: Split, trainable: dict[str, Tensor], state: OptimizerState,
         epochs: int, batch_size: int, seed: int, run_id: str, phase: str,
         prompts: PromptSet | None = None) -> list[LogRow]:
    rng = np.random.default_rng([seed, 7])
    log = []
    for epoch in range(epochs):
        total_loss, count, total, nb = 0.0, 0.0, 0, 0
        for videos, labels in batches(split, batch_size, rng):
            for t in trainable.values():
                t.grad = None
            with Tape():
                out = forward(model, Tensor(videos), prompts)
                loss = _loss(model, out, labels)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"{run_id}: loss became {loss.item()} at epoch {epoch}")
                backward(loss)
            optimizer_step(state, trainable, {k: t.grad for k, t in trainable.items() if t.grad is not None})
            c, n = _batch_metric_counts(model, out.data, labels)
            count, total = count + c, total + n
            total_loss += loss.item()
            nb += 1
        row = LogRow(run_id, phase, epoch + 1, total_loss / nb, _accuracy(model, count, total),
                     max(state.lr.values(), default=0.0) * state.lr_factor())
        logger.debug("%s", row)
        log.append(row)
    return log


# ---------------------------------------------------------------- phases

def pretrain(model: RecognizerModel, train: Split, config: TrainConfig,
             run_id: str = "pretrain") -> tuple[RecognizerModel, list[LogRow]]:
    """Fit every parameter on the training speakers; returns the model and per-epoch log."""
    if len(train) == 0:
        raise ValueError("empty training split")
    model.set_trainable(model.params)
    state = OptimizerState(lr={k: config.lr for k in model.params}, weight_decay=config.weight_decay,
                           warmup=config.warmup)
    log = _run(model, train, model.params, state, config.epochs, config.batch_size, config.seed, run_id,
               "pretrain")
    model.freeze()
    return model, log


def adapt(model: RecognizerModel, prompts: PromptSet, adapt_split: Split, config: AdaptationConfig,
          run_id: str = "adapt") -> tuple[PromptSet, list[LogRow]]:
    """Tune only the prompt tensors on one speaker's adaptation data; ``model`` stays frozen."""
    if config.scope != "prompts":
        raise ScopeViolation(f"adapt() tunes prompts only; scope {config.scope!r} belongs to finetune()")
    if not model.frozen or any(t.requires_grad for t in model.params.values()):
        raise ScopeViolation("adapt() requires a frozen model: model parameters must not receive gradients")
    if len(adapt_split.speakers) != 1:
        raise ValueError(f"adaptation split must hold one speaker, got {sorted(adapt_split.speakers)}")
    groups = prompts.groups()
    if not groups:
        raise ValueError("prompt set is empty")
    missing = set(groups) - set(config.lr)
    if missing:
        raise ValueError(f"no learning rate for prompt groups {sorted(missing)}")
    prompts = prompts.copy().requires_grad_(True)
    named = prompts.tensors()
    lr = {}
    for name in named:
        kind = name.split(".")[1]
        lr[name] = config.lr[kind]
    state = OptimizerState(lr=lr, weight_decay=config.weight_decay, warmup=config.warmup)
    log = _run(model, adapt_split, named, state, config.epochs, config.batch_size, config.seed, run_id,
               "adapt", prompts)
    return prompts.requires_grad_(False), log


def finetune_parameters(model: RecognizerModel, scope: str) -> list[str]:
    if scope == "C":
        return list(model.group("pred"))
    if scope == "B":
        return list(model.group("back")) + list(model.group("pred"))
    if scope == "F":
        return list(model.params)
    raise ValueError(f"unknown finetuning scope {scope!r}; expected one of {FINETUNE_SCOPES}")


def finetune(model: RecognizerModel, adapt_split: Split, scope: str, config: AdaptationConfig,
             run_id: str = "finetune") -> tuple[RecognizerModel, list[LogRow], int]:
    """Update the scoped parameter groups of a copy; returns (copy, log, trainable count)."""
    names = finetune_parameters(model, scope)
    tuned = model.copy()
    tuned.set_trainable(names)
    trainable = {k: tuned.params[k] for k in names}
    state = OptimizerState(lr={k: config.finetune_lr for k in names}, weight_decay=config.weight_decay,
                           warmup=config.warmup)
    log = _run(tuned, adapt_split, trainable, state, config.epochs, config.batch_size, config.seed, run_id,
               f"finetune-{scope}")
    tuned.freeze()
    return tuned, log, sum(t.size for t in trainable.values())


def trainable_count(model: RecognizerModel, method: str, prompts: PromptSet | None = None) -> int:
    if method in ("FT-C", "FT-B", "FT-F"):
        return sum(model.params[k].size for k in finetune_parameters(model, method[-1]))
    if method == "baseline":
        return 0
    return parameter_count(None, prompts)["prompt_total"]


# ---------------------------------------------------------------- evaluation

def predict(model: RecognizerModel, split: Split, prompts: PromptSet | None = None,
            batch_size: int = 64) -> list[np.ndarray]:
    """Model outputs per sample, in split order."""
    outs: list = [None] * len(split)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(split.samples):
        by_len.setdefault(s.video.shape[0], []).append(i)
    with no_grad():
        for T in sorted(by_len):
            idx = by_len[T]
            for k in range(0, len(idx), batch_size):
                chunk = idx[k:k + batch_size]
                out = forward(model, Tensor(np.stack([split.samples[i].video for i in chunk])), prompts).data
                for i, o in zip(chunk, out):
                    outs[i] = o
    return outs


def evaluate(model: RecognizerModel, prompts: PromptSet | None, split: Split) -> dict:
    """Accuracy in percent (word accuracy = 100 * (1 - WER) in CTC mode) plus WER."""
    if len(split) == 0:
        raise ValueError(f"cannot evaluate on empty split {split.name!r}")
    outs = predict(model, split, prompts)
    labels = [s.labels for s in split.samples]
    count, total = _batch_metric_counts(model, outs, labels)
    res = {"n": len(split), "accuracy": _accuracy(model, count, total)}
    if model.config.mode == "ctc_sentence":
        res["wer"] = 100.0 * count / total
    return res
