"""Classifier training (natural and PGD adversarial) and AVmixup discriminator training."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, run_attack
from .data import Dataset, minibatches
from .errors import ConfigError, DomainError
from .models import ClassifierModel, DiscriminatorModel

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "av", "mixup", "avmixup")
TARGET_MODES = ("clean_vs_adv", "contrastive")
TAP_MODES = ("both", "low_only", "high_only")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 2e-4
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need lr >= 0, epochs >= 0 and batch_size >= 1")
        return self


@dataclass(frozen=True)
class AVmixupConfig:
    gamma: float = 2.0
    train_attack: AttackConfig = field(
        default_factory=lambda: AttackConfig(kind="pgd", epsilon=12 / 255, step_size=2 / 255, iterations=10)
    )
    augmentation: str = "avmixup"
    target_mode: str = "clean_vs_adv"
    taps_used: str = "both"

    def validate(self) -> "AVmixupConfig":
        if self.gamma < 1:
            raise ConfigError("gamma must be >= 1")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
        if self.taps_used not in TAP_MODES:
            raise ConfigError(f"taps_used must be one of {TAP_MODES}")
        self.train_attack.validate()
        return self


@dataclass
class TrainLog:
    steps: List[Tuple[int, float, float]] = field(default_factory=list)

    def add(self, step: int, loss: float, seconds: float) -> None:
        self.steps.append((step, loss, seconds))

    @property
    def losses(self) -> List[float]:
        return [loss for _, loss, _ in self.steps]

    @property
    def minutes(self) -> float:
        return self.steps[-1][2] / 60.0 if self.steps else 0.0

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "seconds"])
            for step, loss, secs in self.steps:
                w.writerow([step, repr(loss), f"{secs:.6f}"])

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.add(int(row["step"]), float(row["loss"]), float(row["seconds"]))
        return log


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _classifier_loss(model: ClassifierModel, x: np.ndarray, y: np.ndarray):
    p = model.param_tensors(requires_grad=True)
    logits, _, _ = model.forward(T.constant(x), p)
    loss = T.softmax_cross_entropy(logits, y)
    T.backward(loss)
    return loss.item(), {k: t.grad for k, t in p.items()}


def dataset_loss(model: ClassifierModel, dataset: Dataset, batch_size: int = 500) -> float:
    total = 0.0
    for idx in minibatches(len(dataset), batch_size):
        logits = model(T.constant(dataset.images[idx]))
        total += T.softmax_cross_entropy(logits, dataset.labels[idx]).item() * len(idx)
    return total / len(dataset)


def _train_classifier(
    model: ClassifierModel,
    dataset: Dataset,
    cfg: TrainConfig,
    attack: Optional[AttackConfig],
    ramp_steps: int = 0,
) -> Tuple[ClassifierModel, TrainLog]:
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if model.frozen:
        raise ConfigError("classifier is frozen")
    model = model.copy()
    state: Dict[str, np.ndarray] = {}
    log = TrainLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in minibatches(len(dataset), cfg.batch_size, cfg.shuffle, _epoch_seed(cfg.seed, epoch)):
            x, y = dataset.images[idx], dataset.labels[idx]
            if attack is not None:
                frac = min(1.0, (step + 1) / ramp_steps) if ramp_steps > 0 else 1.0
                step_attack = attack.replace(
                    seed=attack.seed ^ step, epsilon=attack.epsilon * frac, step_size=attack.step_size * frac
                )
                x = run_attack(model, x, y, step_attack)
            loss, grads = _classifier_loss(model, x, y)
            model.params, state = T.sgd_step(model.params, grads, cfg.lr, cfg.momentum, cfg.weight_decay, state)
            log.add(step, loss, time.perf_counter() - start)
            step += 1
        logger.info("epoch %d done after %d steps", epoch, step)
    return model, log


def train_natural(model: ClassifierModel, dataset: Dataset, cfg: TrainConfig) -> Tuple[ClassifierModel, TrainLog]:
    """Mini-batch SGD on the softmax cross-entropy; returns a trained copy and its log."""
    return _train_classifier(model, dataset, cfg, None)


def train_madry(
    model: ClassifierModel, dataset: Dataset, cfg: TrainConfig, attack: AttackConfig, ramp_steps: int = 0
) -> Tuple[ClassifierModel, TrainLog]:
    """Adversarial training: every batch is replaced by its PGD counterpart against the current weights.

    With ``ramp_steps > 0`` the attack radius and step grow linearly from
    ``1/ramp_steps`` of their value to the full value over that many steps.
    """
    if attack.kind != "pgd":
        raise ConfigError("Madry training uses PGD examples")
    return _train_classifier(model, dataset, cfg, attack, ramp_steps)


def avmixup_sample(x: np.ndarray, delta: np.ndarray, gamma: float, u) -> Tuple[np.ndarray, np.ndarray]:
    """Interpolate between ``x`` and its adversarial vertex ``x + gamma * delta``.

    ``u`` is a scalar or one weight per example.  Returns the mixed inputs
    and soft targets ``u * 0 + (1 - u) * 1``.  No clipping to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1) or not np.all(np.isfinite(u)):
        raise DomainError("mixing weight u must lie in [0, 1]")
    if u.ndim == 1 and x.ndim > 1:
        u_b = u.reshape((-1,) + (1,) * (x.ndim - 1))
    else:
        u_b = u
    # written as x + (1-u)*gamma*delta so that u=1 returns x bit-exactly
    x_hat = x + (1.0 - u_b) * (gamma * delta)
    t_hat = u * 0.0 + (1.0 - u) * 1.0
    return x_hat, t_hat


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (n >= 2)."""
    if n < 2:
        raise ConfigError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _taps(classifier: ClassifierModel, x: np.ndarray):
    _, h_low, h_high = classifier.forward(T.constant(x))
    return h_low, h_high


def discriminator_batch(
    classifier: ClassifierModel,
    x: np.ndarray,
    y: np.ndarray,
    avcfg: AVmixupConfig,
    attack_seed: int,
    rng_u: np.random.Generator,
    rng_pairs: np.random.Generator,
):
    """Build one training batch: (h_low, h_high, targets) as constants."""
    if avcfg.target_mode == "contrastive":
        h_low, h_high = _taps(classifier, x)
        perm = derangement(len(x), rng_pairs)
        lo = np.concatenate([h_low.data, h_low.data])
        hi = np.concatenate([h_high.data, h_high.data[perm]])
        t = np.concatenate([np.zeros(len(x)), np.ones(len(x))])
        return T.constant(lo), T.constant(hi), t

    x_adv = run_attack(classifier, x, y, avcfg.train_attack.replace(seed=attack_seed))
    delta = x_adv - x
    aug = avcfg.augmentation
    if aug in ("none", "av"):
        scale = 1.0 if aug == "none" else avcfg.gamma
        inputs = np.concatenate([x, x + scale * delta])
        t = np.concatenate([np.zeros(len(x)), np.ones(len(x))])
    else:
        gamma = 1.0 if aug == "mixup" else avcfg.gamma
        u = rng_u.uniform(0.0, 1.0, size=len(x))
        inputs, t = avmixup_sample(x, delta, gamma, u)
    h_low, h_high = _taps(classifier, inputs)
    return h_low, h_high, t


def train_discriminator(
    classifier: ClassifierModel,
    discriminator: DiscriminatorModel,
    dataset: Dataset,
    cfg: TrainConfig,
    avcfg: AVmixupConfig,
) -> Tuple[DiscriminatorModel, TrainLog]:
    """AVmixup training of the discriminator on a frozen classifier.

    Per batch: PGD perturbation against the classifier, per-example mixing
    weight ``u``, mixed inputs with soft targets, one SGD step on the BCE of
    the discriminator over the classifier's taps.
    """
    cfg.validate()
    avcfg.validate()
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    (cl, _, _), (ch, _, _) = classifier.spec.tap_shapes()
    dspec = discriminator.spec
    if dspec.c_low != cl or dspec.c_high != ch:
        raise ConfigError(f"discriminator expects taps with ({dspec.c_low}, {dspec.c_high}) channels, classifier gives ({cl}, {ch})")
    if dspec.taps != avcfg.taps_used:
        raise ConfigError(f"discriminator built for taps={dspec.taps!r} but taps_used={avcfg.taps_used!r}")
    if avcfg.target_mode == "contrastive" and cfg.batch_size < 2:
        raise ConfigError("contrastive targets need batch_size >= 2")
    classifier.freeze()
    discriminator = discriminator.copy()
    ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_u, rng_pairs = np.random.default_rng(ss[0]), np.random.default_rng(ss[1])
    state: Dict[str, np.ndarray] = {}
    log = TrainLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        batches = minibatches(len(dataset), cfg.batch_size, cfg.shuffle, _epoch_seed(cfg.seed, epoch))
        for idx in batches:
            if avcfg.target_mode == "contrastive" and len(idx) < 2:
                continue
            x, y = dataset.images[idx], dataset.labels[idx]
            h_low, h_high, t = discriminator_batch(
                classifier, x, y, avcfg, avcfg.train_attack.seed ^ step, rng_u, rng_pairs
            )
            p = discriminator.param_tensors(requires_grad=True)
            loss = T.bce_with_logits(discriminator.logit(h_low, h_high, p), t)
            T.backward(loss)
            grads = {k: v.grad for k, v in p.items()}
            discriminator.params, state = T.sgd_step(
                discriminator.params, grads, cfg.lr, cfg.momentum, cfg.weight_decay, state
            )
            log.add(step, loss.item(), time.perf_counter() - start)
            step += 1
    return discriminator, log


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
