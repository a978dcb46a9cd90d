"""Loss, Adam, the early-stopped training loop, fine-tuning and seed sweeps."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import fmean, pstdev
from typing import Sequence

import numpy as np

from . import numcore as nc
from .models import ParamBundle, init_params, loss_and_grad, predict_label, predict_proba
from .treebank import Example, Vocab

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d_emb: int = 50
    d_h: int = 50
    learning_rate: float = 0.001
    max_epochs: int = 50
    eval_every_n_sentences: int = 1000
    early_stop_threshold: float = 0.0005
    early_stop_window: int = 5
    seeds: tuple = (0, 1, 2)
    embeddings_trainable: bool = False

    def __post_init__(self):
        for name in ("d_emb", "d_h", "learning_rate", "max_epochs",
                     "eval_every_n_sentences", "early_stop_threshold", "early_stop_window"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        self.seeds = tuple(self.seeds)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class EvalRecord:
    sentences_seen: int
    validation_loss: float
    validation_accuracy: float


def bce_loss(p: float, y: int) -> float:
    return float(nc.bce(np.array([p], dtype=np.float64), y)[0])


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on ``params``; returns both."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def early_stop_check(history: Sequence, threshold: float, window: int) -> bool:
    """True once the mean of the last ``window`` loss decreases is below ``threshold``."""
    if len(history) < window + 1:
        return False
    losses = [getattr(r, "validation_loss", r) for r in history[-(window + 1):]]
    decreases = [losses[k - 1] - losses[k] for k in range(1, len(losses))]
    return fmean(decreases) < threshold


def evaluate(bundle: ParamBundle, examples: Sequence[Example]) -> tuple[float, float]:
    """Mean BCE loss and accuracy over ``examples``."""
    if not examples:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for ex in examples:
        p = predict_proba(bundle, ex)
        total += bce_loss(p, int(ex.label))
        correct += predict_label(p) == int(ex.label)
    return total / len(examples), correct / len(examples)


def accuracy(bundle: ParamBundle, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    hits = sum(predict_label(predict_proba(bundle, ex)) == int(ex.label) for ex in examples)
    return hits / len(examples)


def _update(bundle: ParamBundle, ex: Example, state: AdamState, lr: float) -> float:
    loss, _, grads = loss_and_grad(bundle, ex)
    adam_step(bundle.arrays, grads, state, lr)
    return loss


def train(model_tag: str, params: ParamBundle, train_set: Sequence[Example],
          val_set: Sequence[Example], config: TrainConfig, rng_seed: int):
    """Batch-1 Adam with periodic validation and best-checkpoint selection.

    Returns ``(best_params, history)``.  ``params`` is not modified.
    """
    if model_tag != params.arch:
        raise ValueError(f"model tag {model_tag!r} does not match parameters for {params.arch!r}")
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    work = params.copy()
    state = AdamState()
    rng = np.random.default_rng(rng_seed)
    history: list[EvalRecord] = []
    best, best_loss = None, math.inf
    seen = 0
    stop = False

    def checkpoint():
        nonlocal best, best_loss
        loss, acc = evaluate(work, val_set)
        history.append(EvalRecord(seen, loss, acc))
        log.debug("%s seed=%s seen=%d val_loss=%.4f val_acc=%.4f",
                  model_tag, rng_seed, seen, loss, acc)
        if loss < best_loss:
            best_loss = loss
            best = work.copy()

    for epoch in range(config.max_epochs):
        for idx in rng.permutation(len(train_set)):
            _update(work, train_set[idx], state, config.learning_rate)
            seen += 1
            if seen % config.eval_every_n_sentences == 0:
                checkpoint()
                if early_stop_check(history, config.early_stop_threshold,
                                    config.early_stop_window):
                    stop = True
                    break
        if stop:
            break
    if best is None:
        checkpoint()
    best.meta = dict(best.meta, sentences_seen=seen, epochs=epoch + 1,
                     best_validation_loss=best_loss)
    return best, history


def fine_tune(params: ParamBundle, augmentation_set: Sequence[Example],
              config: TrainConfig, rng_seed: int = 0) -> ParamBundle:
    """Exactly one shuffled pass with a fresh Adam state; no model selection."""
    if not augmentation_set:
        raise ValueError("augmentation set must be non-empty")
    work = params.copy()
    state = AdamState()
    rng = np.random.default_rng(rng_seed)
    updates = 0
    for idx in rng.permutation(len(augmentation_set)):
        _update(work, augmentation_set[idx], state, config.learning_rate)
        updates += 1
    work.meta = dict(work.meta, fine_tune_updates=updates)
    return work


# --------------------------------------------------------------------------
# multi-seed orchestration


@dataclass
class RunSpec:
    models: tuple
    train_set: list
    val_set: list
    test_sets: dict          # split name -> examples
    vocab: Vocab
    config: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 1


@dataclass
class RunResult:
    rows: list               # (model, seed, split, n, accuracy)
    checkpoints: dict        # (model, seed) -> ParamBundle
    histories: dict          # (model, seed) -> [EvalRecord]

    def mean(self, model: str, split: str) -> float:
        for m, seed, s, _, acc in self.rows:
            if m == model and s == split and seed == "mean":
                return acc
        raise KeyError((model, split))


def _run_one(job):
    model, seed, spec = job
    cfg = spec.config
    bundle = init_params(model, spec.vocab, cfg.d_emb, cfg.d_h, seed,
                         embeddings_trainable=cfg.embeddings_trainable)
    best, history = train(model, bundle, spec.train_set, spec.val_set, cfg, seed)
    best.meta["seed"] = seed
    accs = {name: accuracy(best, exs) for name, exs in spec.test_sets.items()}
    return model, seed, best, history, accs


def aggregate(per_seed: dict, sizes: dict, models: Sequence[str], seeds: Sequence,
              splits: Sequence[str]) -> list[tuple]:
    """Per-seed rows followed by a mean row, per model and split."""
    rows = []
    for model in models:
        for split in splits:
            accs = [per_seed[(model, s)][split] for s in seeds]
            for s, a in zip(seeds, accs):
                rows.append((model, s, split, sizes[split], a))
            rows.append((model, "mean", split, sizes[split], fmean(accs)))
    return rows


def seed_spread(rows, model, split) -> float:
    accs = [r[4] for r in rows if r[0] == model and r[2] == split and r[1] != "mean"]
    return pstdev(accs) if len(accs) > 1 else 0.0


def multi_seed_run(spec: RunSpec) -> RunResult:
    """Train and evaluate every (model, seed); jobs may fan out to processes."""
    seeds = spec.config.seeds
    if not seeds:
        raise ValueError("at least one seed is required")
    jobs = [(m, s, spec) for m in spec.models for s in seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    per_seed, ckpts, hists = {}, {}, {}
    for model, seed, best, history, accs in results:
        per_seed[(model, seed)] = accs
        ckpts[(model, seed)] = best
        hists[(model, seed)] = history
    sizes = {k: len(v) for k, v in spec.test_sets.items()}
    rows = aggregate(per_seed, sizes, spec.models, seeds, list(spec.test_sets))
    return RunResult(rows, ckpts, hists)
