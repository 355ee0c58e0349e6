"""Optimizer, schedule, and the train/eval loops.

Adam with bias correction, step-decay learning rate, early stopping on
validation CC, and deterministic behavior for a fixed seed: the parameter
init, the train/val split, and the per-epoch shuffles all derive from
explicit generators.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .config import TrainConfig
from .losses import prediction_loss
from .model import SaliencyModel
from .synthetic import SyntheticSample
from .tensor import GradTape, NumericsError, Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            # In-place so float32 parameters stay float32.
            p.data -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)


def lr_schedule(epoch: int, base_lr: float, decay: float = 0.1, step_epochs: int = 3) -> float:
    """Step decay: base_lr * decay^(epoch // step_epochs), epoch counted from 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * decay ** (epoch // step_epochs)


@dataclass
class TrainResult:
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_cc: float
    stopped_epoch: int


def _sample_forward(model: SaliencyModel, sample: SyntheticSample, logmel):
    clip = sample.clip.tensor(model.config.np_dtype)
    final, _, _ = model.forward(clip, logmel)
    return final


def evaluate_model(model: SaliencyModel, samples: Sequence[SyntheticSample], logmels=None) -> dict[str, float]:
    """Mean metrics over a sample list (eval mode, no tape)."""
    model.eval()
    try:
        sums = {name: 0.0 for name in metrics.METRIC_NAMES}
        for i, sample in enumerate(samples):
            lm = logmels[i] if logmels is not None else _logmel_for(model, sample)
            pred = _sample_forward(model, sample, lm).data
            scores = metrics.evaluate(pred, sample.density, sample.fixations)
            for name in sums:
                sums[name] += scores[name]
        n = max(1, len(samples))
        return {name: sums[name] / n for name in sums}
    finally:
        model.train()


def _logmel_for(model: SaliencyModel, sample: SyntheticSample):
    if not model.uses_audio:
        return None
    return model.audio.logmel(sample.audio)


def train_model(
    model: SaliencyModel,
    samples: Sequence[SyntheticSample],
    config: TrainConfig,
    seed: int = 0,
    log=None,
) -> TrainResult:
    """Train with early stopping on validation CC; returns the best state.

    The sample list is split train/val once (seeded); log-mel stacks are
    precomputed since the audio front end below the encoder is parameter
    free. A non-finite loss aborts with a NumericsError naming the step.
    """
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(np.random.PCG64(seed))
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(config.val_fraction * len(samples)))) if config.val_fraction > 0 else 0
    val_idx = order[: n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation fraction leaves no training samples")

    logmels = [(_logmel_for(model, s)) for s in samples]

    if config.freeze == "visual":
        trainable = model.parameter_groups()["audio_fusion"]
    else:
        trainable = dict(model.named_parameters())
    optimizer = Adam(trainable, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)

    history: list[dict] = []
    best_cc = -np.inf
    best_epoch = 0
    best_state = model.state_dict()
    bad_epochs = 0
    stopped = config.epochs

    for epoch in range(1, config.epochs + 1):
        lr = lr_schedule(epoch - 1, config.lr, config.lr_decay, config.lr_step_epochs)
        optimizer.lr = lr
        epoch_rng = np.random.default_rng(np.random.PCG64((seed + 1) * 10_000 + epoch))
        perm = epoch_rng.permutation(train_idx)
        total_loss = 0.0
        t0 = time.time()
        for j, idx in enumerate(perm):
            sample = samples[idx]
            optimizer.zero_grad()
            try:
                with GradTape() as tape:
                    pred = _sample_forward(model, sample, logmels[idx])
                    loss = prediction_loss(
                        sample.density,
                        pred,
                        lam_kl=config.lam_kl,
                        lam_cc=config.lam_cc,
                        eps=config.kl_eps,
                        textbook=config.kl_textbook,
                    )
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericsError("loss is not finite")
                tape.backward(loss)
            except NumericsError as e:
                raise NumericsError(f"aborting at epoch {epoch}, step {j}, sample {idx}: {e}") from e
            optimizer.step()
            total_loss += loss_value

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / len(perm),
        }
        if n_val:
            val_metrics = evaluate_model(
                model, [samples[i] for i in val_idx], [logmels[i] for i in val_idx]
            )
            record.update({f"val_{k}": v for k, v in val_metrics.items()})
            current = val_metrics["cc"]
        else:
            current = -record["train_loss"]
            record["val_cc"] = None
        history.append(record)
        if log:
            spent = time.time() - t0
            log(f"epoch {epoch}: loss {record['train_loss']:.4f} val_cc {record.get('val_cc')} lr {lr:.2e} ({spent:.1f}s)")

        if current > best_cc:
            best_cc = current
            best_epoch = epoch
            best_state = model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped = epoch
                break
        stopped = epoch

    return TrainResult(history, best_state, best_epoch, float(best_cc), stopped)
