"""Training loop for the noise-prediction network."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, loss_simple
from .model import DiMConfig, ModelParams, model_forward, named_parameters
from .optim import Adam
from .rng import Stream


def predictor(params: ModelParams, cfg: DiMConfig, steps: int):
    def predict(x_t, t, y):
        return model_forward(x_t, t, y, params, cfg, steps)
    return predict


def make_optimizer(params: ModelParams, lr: float) -> Adam:
    return Adam(named_parameters(params), lr=lr)


def train(params: ModelParams, cfg: DiMConfig, points: np.ndarray, labels: np.ndarray,
          sched: NoiseSchedule, opt: Adam, steps: int, batch: int, seed: int,
          p_uncond: float = 0.1, start_step: int = 0,
          on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Run ``steps`` optimizer steps on normalized ``points`` [S, N, 3].

    Step ``s`` draws everything from the stream ("train", s), so resuming at
    ``start_step`` reproduces an uninterrupted run.
    """
    predict = predictor(params, cfg, sched.T)
    n = points.shape[0]
    losses = []
    for s in range(start_step, start_step + steps):
        rng = Stream(seed, "train", s)
        idx = rng.permutation(n)[:batch] if batch <= n else rng.integers(0, n, batch)
        opt.zero_grad()
        loss = loss_simple(predict, points[idx], labels[idx], sched, rng, p_uncond)
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(s, losses[-1])
    return losses
