import dataclasses
from typing import List, Sequence

import numpy as np

from nikrecon.utils import ConfigError


@dataclasses.dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam moment coefficients must lie in [0, 1)")


class Adam:
    """
    Adam updates applied in place to a list of real float arrays.

    Complex parameters are optimized through their float64 views, so real
    and imaginary parts get independent moments.
    """

    def __init__(self, params: Sequence[np.ndarray], cfg: AdamConfig):
        self.params: List[np.ndarray] = list(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bias1 = 1 - cfg.beta1**t
        bias2 = 1 - cfg.beta2**t

        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            p -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
