"""Inference-time purification: sign-gradient descent on the discriminator score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from . import tensor as T
from .attacks import clip_to_ball
from .errors import ConfigError

PRESETS = {
    "svhn-paper": (12 / 255, 3 / 255, 10),
    "cifar10-paper": (8 / 255, 2 / 255, 10),
    "cifar100-paper": (16 / 255, 2 / 255, 20),
    "tinyimagenet-paper": (8 / 255, 2 / 255, 20),
    "toy": (12 / 255, 3 / 255, 10),
}


@dataclass(frozen=True)
class PurifyConfig:
    epsilon: float = 12 / 255
    alpha: float = 3 / 255
    iterations: int = 10
    use_logit: bool = False

    def validate(self) -> "PurifyConfig":
        if self.epsilon < 0 or self.alpha < 0 or self.iterations < 0:
            raise ConfigError("purification epsilon, alpha and iterations must be non-negative")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "PurifyConfig":
        eps, alpha, n = PRESETS[name]
        return cls(eps, alpha, n, **overrides).validate()


def score_gradient(classifier, discriminator, x: np.ndarray, use_logit: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example discriminator probabilities and their input gradients."""
    holder = {}

    def total(xt):
        _, h_low, h_high = classifier.forward(xt)
        z = discriminator.logit(h_low, h_high)
        p = T.sigmoid(z)
        holder["p"] = p.data
        return T.tsum(z if use_logit else p)

    _, g = T.grad_of(total, x)
    return holder["p"], g


def purification_path(classifier, discriminator, x: np.ndarray, cfg: PurifyConfig) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(pre_clip, x_pur)`` after every iteration."""
    cfg.validate()
    x0 = np.asarray(x, dtype=np.float64)
    x_pur = x0
    for _ in range(cfg.iterations):
        _, g = score_gradient(classifier, discriminator, x_pur, cfg.use_logit)
        stepped = x_pur - cfg.alpha * T.sign(g)
        x_pur = np.clip(clip_to_ball(stepped, x0, cfg.epsilon), 0.0, 1.0)
        yield stepped, x_pur


def purify(classifier, discriminator, x: np.ndarray, cfg: PurifyConfig) -> np.ndarray:
    """Move ``x`` down the discriminator score in ``cfg.iterations`` signed steps.

    Each step is followed by a clip into the epsilon ball around the original
    input and then into [0, 1]; the result is deterministic.
    """
    x_pur = np.asarray(x, dtype=np.float64)
    for _, x_pur in purification_path(classifier, discriminator, x, cfg):
        pass
    return x_pur
