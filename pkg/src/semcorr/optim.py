"""Piecewise-linear schedules, a deterministic AdamW optimizer on flat numpy
parameter vectors, and a central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteEnergy, ShapeMismatch


@dataclass(frozen=True)
class Schedule:
    """Linear interpolation over (timestep, value) knots, clamped outside."""

    timesteps: tuple
    values: tuple

    def __post_init__(self):
        ts = tuple(self.timesteps)
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ShapeMismatch("schedule timesteps must be strictly increasing")
        if len(ts) != len(self.values):
            raise ShapeMismatch("schedule timesteps/values length mismatch")

    def __call__(self, t):
        return float(np.interp(t, self.timesteps, self.values))

    @classmethod
    def constant(cls, value) -> "Schedule":
        return cls((0,), (float(value),))

    @classmethod
    def from_dict(cls, d) -> "Schedule":
        if isinstance(d, (int, float)):
            return cls.constant(d)
        return cls(tuple(d["timesteps"]), tuple(d["values"]))


def schedule_eval(schedule: Schedule, t) -> float:
    return schedule(t)


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam on a flat parameter vector."""

    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def step(self, params, grads):
        params = np.asarray(params, dtype=float)
        grads = np.asarray(grads, dtype=float)
        if params.shape != grads.shape:
            raise ShapeMismatch(f"params {params.shape} vs grads {grads.shape}")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self.m.shape != params.shape:
            raise ShapeMismatch("optimizer state shape mismatch")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        out = params - self.lr * (
            m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params
        )
        return out


def grad_check(energy_fn, params, h=1e-4):
    """Worst per-coordinate relative error between energy_fn's analytic
    gradient and central finite differences.

    energy_fn(params) must return (energy, grad).  Relative error uses
    max(|analytic|, |fd|, floor) as denominator, where the floor scales
    with the gradient's infinity norm.
    """
    params = np.asarray(params, dtype=float)
    energy, grad = energy_fn(params)
    if not np.isfinite(energy) or not np.all(np.isfinite(grad)):
        raise NonFiniteEnergy("energy or gradient not finite at base point")
    floor = 1e-6 * (1.0 + float(np.max(np.abs(grad))))
    worst = 0.0
    worst_idx = -1
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        e_plus = energy_fn(p)[0]
        p[i] -= 2 * h
        e_minus = energy_fn(p)[0]
        if not (np.isfinite(e_plus) and np.isfinite(e_minus)):
            raise NonFiniteEnergy(f"energy not finite at coordinate {i} +- h")
        fd = (e_plus - e_minus) / (2 * h)
        denom = max(abs(grad[i]), abs(fd), floor)
        err = abs(grad[i] - fd) / denom
        if err > worst:
            worst, worst_idx = err, i
    return worst, worst_idx
