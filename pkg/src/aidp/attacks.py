"""White-box attacks: FGSM, PGD, MIM, DeepFool, penalty-form C&W L2, and PGD
against the classifier plus discriminator.

All attacks take numpy batches ``x`` in [0, 1] and return new arrays; the
models are only read.  ``sign(0) == 0`` everywhere, so a zero gradient means
no movement.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)

KINDS = ("fgsm", "pgd", "mim", "deepfool", "cw_l2", "aux_aware_pgd")

# (epsilon, step) per dataset preset
PRESETS = {
    "svhn-paper": (12 / 255, 2 / 255),
    "cifar10-paper": (8 / 255, 1 / 255),
    "toy": (12 / 255, 2 / 255),
}


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 1 / 255
    iterations: int = 40
    random_start: bool = True
    mim_decay: float = 1.0
    lam: float = 0.0
    aux_target: float = 0.0
    cw_constant: float = 1.0
    cw_lr: float = 0.01
    cw_kappa: float = 0.0
    deepfool_overshoot: float = 0.02
    deepfool_candidates: int = 3
    seed: int = 0

    def validate(self) -> "AttackConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.epsilon < 0 or self.step_size < 0 or self.iterations < 0:
            raise ConfigError("epsilon, step_size and iterations must be non-negative")
        if not 0.0 <= self.aux_target <= 1.0:
            raise ConfigError("aux_target must lie in [0, 1]")
        if self.deepfool_candidates < 1:
            raise ConfigError("deepfool_candidates must be >= 1")
        return self

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def preset(cls, kind: str, dataset: str = "toy", **overrides) -> "AttackConfig":
        """Attack defaults for a dataset preset; C&W runs 100 steps, DeepFool 50."""
        eps, step = PRESETS[dataset]
        iterations = {"fgsm": 1, "cw_l2": 100, "deepfool": 50}.get(kind, 40)
        return cls(kind=kind, epsilon=eps, step_size=step, iterations=iterations, **overrides).validate()


def clip_to_ball(v: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Elementwise projection onto the L-infinity ball of ``radius`` around ``center``."""
    if radius < 0:
        raise DomainError("clip radius must be non-negative")
    if v.shape != center.shape:
        raise ShapeError(f"clip_to_ball: {v.shape} vs center {center.shape}")
    return np.minimum(np.maximum(v, center - radius), center + radius)


def project(v: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Ball clip followed by unit-box clip."""
    return np.clip(clip_to_ball(v, x0, epsilon), 0.0, 1.0)


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    return y


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean softmax cross-entropy with respect to the input batch."""
    _, g = T.grad_of(lambda xt: T.softmax_cross_entropy(model(xt), y), x)
    return g


def fgsm(model, x: np.ndarray, y, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = _labels(y, len(x))
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    return np.clip(x + epsilon * T.sign(loss_gradient(model, x, y)), 0.0, 1.0)


def _iterate_sign(
    x0: np.ndarray,
    start: np.ndarray,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    epsilon: float,
    step: float,
    iterations: int,
    momentum: Optional[float] = None,
) -> np.ndarray:
    if step > 2 * epsilon and iterations > 0:
        logger.warning("step size %.5g exceeds twice epsilon %.5g; iterates will oscillate", step, epsilon)
    x = start
    acc = np.zeros_like(x0)
    reduce_axes = tuple(range(1, x0.ndim))
    for _ in range(iterations):
        g = grad_fn(x)
        if momentum is not None:
            l1 = np.abs(g).sum(axis=reduce_axes, keepdims=True)
            acc = momentum * acc + g / np.where(l1 > 0, l1, 1.0)
            g = acc
        x = project(x + step * T.sign(g), x0, epsilon)
    return x


def _random_start(x0: np.ndarray, epsilon: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(x0 + rng.uniform(-epsilon, epsilon, size=x0.shape), 0.0, 1.0)


def pgd(model, x: np.ndarray, y, cfg: AttackConfig) -> np.ndarray:
    """Projected sign-gradient ascent on the cross-entropy; returns the last iterate."""
    x0 = np.asarray(x, dtype=np.float64)
    y = _labels(y, len(x0))
    start = _random_start(x0, cfg.epsilon, cfg.seed) if cfg.random_start else x0
    return _iterate_sign(
        x0, start, lambda xi: loss_gradient(model, xi, y), cfg.epsilon, cfg.step_size, cfg.iterations
    )


def mim(model, x: np.ndarray, y, cfg: AttackConfig) -> np.ndarray:
    """Momentum iterative method: sign steps along an L1-normalised gradient accumulator."""
    x0 = np.asarray(x, dtype=np.float64)
    y = _labels(y, len(x0))
    return _iterate_sign(
        x0,
        x0,
        lambda xi: loss_gradient(model, xi, y),
        cfg.epsilon,
        cfg.step_size,
        cfg.iterations,
        momentum=cfg.mim_decay,
    )


def aux_aware_gradient(classifier, discriminator, x: np.ndarray, y: np.ndarray, lam: float, target: float = 0.0):
    """Gradient of ``CE(C(x), y) - lam * BCE(D(taps(x)), target)`` with respect to x."""
    t = np.full(len(x), target)

    def objective(xt):
        logits, h_low, h_high = classifier.forward(xt)
        lc = T.softmax_cross_entropy(logits, y)
        if lam == 0:
            return lc
        ld = T.bce_with_logits(discriminator.logit(h_low, h_high), t)
        return T.sub(lc, T.scale(ld, lam))

    return T.grad_of(objective, x)[1]


def aux_aware_pgd(classifier, discriminator, x: np.ndarray, y, cfg: AttackConfig) -> np.ndarray:
    """PGD on the classifier loss minus ``lam`` times the discriminator loss.

    The discriminator term is a BCE toward ``cfg.aux_target`` (0 = clean), so
    a positive ``lam`` steers the example toward looking clean to the
    discriminator while still fooling the classifier.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = _labels(y, len(x0))
    start = _random_start(x0, cfg.epsilon, cfg.seed) if cfg.random_start else x0
    return _iterate_sign(
        x0,
        start,
        lambda xi: aux_aware_gradient(classifier, discriminator, xi, y, cfg.lam, cfg.aux_target),
        cfg.epsilon,
        cfg.step_size,
        cfg.iterations,
    )


def _logit_combo_gradient(model, x: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Logits at x and the input gradient of sum(logits * weights)."""
    holder = {}

    def f(xt):
        logits = model(xt)
        holder["z"] = logits.data
        return T.tsum(T.mul(logits, T.constant(weights)))

    _, g = T.grad_of(f, x)
    return holder["z"], g


def deepfool_perturbation(
    model,
    x: np.ndarray,
    labels: np.ndarray,
    overshoot: float = 0.02,
    candidates: int = 3,
    max_iter: int = 50,
) -> Tuple[np.ndarray, np.ndarray]:
    """Accumulated raw DeepFool perturbation per example and a success mask.

    The step toward the nearest linearised boundary among the top
    ``candidates`` competing classes is ``|f_k| w_k / ||w_k||^2`` with
    ``f_k = z_k - z_label`` and ``w_k`` its input gradient.  Iterates are
    evaluated at ``x + (1 + overshoot) * r`` and stop once the label flips.
    """
    x0 = np.asarray(x, dtype=np.float64)
    n = len(x0)
    z0 = model(T.constant(x0)).data
    k = z0.shape[1]
    candidates = min(candidates, k - 1)
    order = np.argsort(-z0, axis=1, kind="stable")
    comp = np.stack([row[row != lab][:candidates] for row, lab in zip(order, labels)])
    r_tot = np.zeros_like(x0)
    active = z0.argmax(axis=1) == labels
    rows = np.arange(n)
    axes = tuple(range(1, x0.ndim))
    for _ in range(max_iter):
        if not active.any():
            break
        xi = x0 + (1.0 + overshoot) * r_tot
        best_ratio = np.full(n, np.inf)
        best_step = np.zeros_like(x0)
        for j in range(candidates):
            wts = np.zeros((n, k))
            wts[rows, comp[:, j]] = 1.0
            wts[rows, labels] -= 1.0
            z, w = _logit_combo_gradient(model, xi, wts)
            f = z[rows, comp[:, j]] - z[rows, labels]
            wn2 = (w * w).sum(axis=axes)
            ok = wn2 > 0
            ratio = np.where(ok, np.abs(f) / np.sqrt(np.where(ok, wn2, 1.0)), np.inf)
            better = ratio < best_ratio
            best_ratio = np.where(better, ratio, best_ratio)
            coef = np.where(ok, np.abs(f) / np.where(ok, wn2, 1.0), 0.0)
            shape = (n,) + (1,) * (x0.ndim - 1)
            best_step = np.where(better.reshape(shape), coef.reshape(shape) * w, best_step)
        mask = active.reshape((n,) + (1,) * (x0.ndim - 1))
        r_tot = r_tot + np.where(mask, best_step, 0.0)
        pred = model(T.constant(x0 + (1.0 + overshoot) * r_tot)).data.argmax(axis=1)
        active = active & (pred == labels)
    return r_tot, ~active


def deepfool(model, x: np.ndarray, cfg: AttackConfig, y=None) -> np.ndarray:
    """DeepFool with a final L-infinity clip so the result shares the epsilon budget.

    Examples the model already misclassifies (relative to ``y``, when given)
    are returned unchanged.
    """
    x0 = np.asarray(x, dtype=np.float64)
    pred = model(T.constant(x0)).data.argmax(axis=1)
    labels = pred if y is None else _labels(y, len(x0))
    r_tot, _ = deepfool_perturbation(
        model, x0, labels, cfg.deepfool_overshoot, cfg.deepfool_candidates, cfg.iterations
    )
    x_adv = project(x0 + (1.0 + cfg.deepfool_overshoot) * r_tot, x0, cfg.epsilon)
    wrong = pred != labels
    x_adv[wrong] = x0[wrong]
    return x_adv


def _cw_margin(z: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rows = np.arange(len(y))
    other = z.copy()
    other[rows, y] = -np.inf
    j = other.argmax(axis=1)
    return z[rows, y] - z[rows, j], j


def cw_l2(model, x: np.ndarray, y, cfg: AttackConfig, return_success: bool = False):
    """Fixed-constant Carlini-Wagner L2 attack by plain gradient descent.

    Minimises ``||x' - x||^2 + c * max(z_y - max_{j!=y} z_j, -kappa)`` with
    box clamping after every step, keeps the smallest-distance misclassified
    iterate per example, and finally clips into the epsilon ball.  Failed
    examples come back unchanged.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = _labels(y, len(x0))
    n = len(x0)
    rows = np.arange(n)
    axes = tuple(range(1, x0.ndim))
    shape = (n,) + (1,) * (x0.ndim - 1)
    c, kappa = cfg.cw_constant, cfg.cw_kappa
    best = x0.copy()
    best_dist = np.full(n, np.inf)
    xp = x0.copy()
    for _ in range(cfg.iterations + 1):
        z = model(T.constant(xp)).data
        margin, j = _cw_margin(z, y)
        dist = ((xp - x0) ** 2).sum(axis=axes)
        improved = (z.argmax(axis=1) != y) & (dist < best_dist)
        best_dist = np.where(improved, dist, best_dist)
        best = np.where(improved.reshape(shape), xp, best)
        if _ == cfg.iterations:
            break
        wts = np.zeros_like(z)
        hinge = margin > -kappa
        wts[rows, y] = np.where(hinge, c, 0.0)
        wts[rows, j] -= np.where(hinge, c, 0.0)
        if np.any(wts):
            _, g = _logit_combo_gradient(model, xp, wts)
        else:
            g = np.zeros_like(xp)
        g = g + 2.0 * (xp - x0)
        xp = np.clip(xp - cfg.cw_lr * g, 0.0, 1.0)
    success = np.isfinite(best_dist)
    if not success.all():
        logger.info("cw_l2: %d of %d examples not misclassified", int((~success).sum()), n)
    out = project(best, x0, cfg.epsilon)
    return (out, success) if return_success else out


def run_attack(classifier, x: np.ndarray, y, cfg: AttackConfig, discriminator=None) -> np.ndarray:
    """Dispatch on ``cfg.kind``."""
    cfg.validate()
    if cfg.kind == "fgsm":
        return fgsm(classifier, x, y, cfg.epsilon)
    if cfg.kind == "pgd":
        return pgd(classifier, x, y, cfg)
    if cfg.kind == "mim":
        return mim(classifier, x, y, cfg)
    if cfg.kind == "deepfool":
        return deepfool(classifier, x, cfg, y)
    if cfg.kind == "cw_l2":
        return cw_l2(classifier, x, y, cfg)
    if discriminator is None:
        raise ConfigError("aux_aware_pgd needs a discriminator")
    return aux_aware_pgd(classifier, discriminator, x, y, cfg)
