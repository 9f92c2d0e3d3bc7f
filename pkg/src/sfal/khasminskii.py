"""Block-restarted auxiliary fast process and the averaged gap it controls."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import ConfigurationError, ModelSpec
from .rng import path_blocks
from .sde import PathEnsemble, fast_update, n_steps_for


@dataclass(frozen=True)
class BlockSchedule:
    delta: float
    T: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("block length must be positive")
        if self.delta > self.T * (1 + 1e-12):
            raise ConfigurationError("block length exceeds the horizon")

    @property
    def starts(self) -> np.ndarray:
        return np.arange(int(np.floor(self.T / self.delta * (1 + 1e-12))) + 1) * self.delta

    def floor(self, s):
        """s(delta) = floor(s / delta) * delta."""
        return np.floor(np.asarray(s, dtype=float) / self.delta + 1e-9) * self.delta

    def steps_per_block(self, dt: float) -> int:
        k = int(round(self.delta / dt))
        if k < 1 or abs(k * dt - self.delta) > 1e-9 * self.delta:
            raise ConfigurationError(f"block length {self.delta!r} is not a multiple of dt={dt!r}")
        return k


def default_delta(eps: float, dt: float) -> float:
    """eps^(2/3) rounded down to a multiple of dt (at least one step)."""
    return max(1, int(np.floor(eps ** (2.0 / 3.0) / dt))) * dt


@dataclass
class AuxiliaryPaths:
    times: np.ndarray       # full step grid
    y_aux: np.ndarray       # (paths, steps + 1, m)
    schedule: BlockSchedule
    eps: float
    sup_gap: np.ndarray     # per path sup |Y_aux - Y| including left limits at restarts


def _check_driving(driving: PathEnsemble):
    if driving.dW2 is None:
        raise ConfigurationError("driving ensemble has no stored fast increments (use record_increments)")
    if driving.save_every != 1:
        raise ConfigurationError("driving ensemble must store every step")


def auxiliary_path(model: ModelSpec, eps: float, schedule: BlockSchedule, driving: PathEnsemble) -> AuxiliaryPaths:
    """Reconstruct the auxiliary fast process from a recorded slow-fast run.

    On each block the process restarts from the true fast state, freezes
    the slow value at the block start and consumes the stored increments.
    Arithmetic and batch layout match the driving run, so in the degenerate
    cases the result is bit-identical to the true fast path.
    """
    _check_driving(driving)
    dt = driving.dt
    k = schedule.steps_per_block(dt)
    n_steps = driving.dW2.shape[1]
    if n_steps != n_steps_for(schedule.T, dt):
        raise ConfigurationError("schedule horizon does not match the driving run")
    out = np.empty_like(driving.fast)
    sup = np.zeros(driving.n_paths)
    for block in path_blocks(driving.n_paths):
        ys = driving.fast[block]
        xs = driving.slow[block]
        inc = driving.dW2[block]
        y = ys[:, 0].copy()
        out[block, 0] = y
        x_frozen = xs[:, 0]
        for j in range(n_steps):
            if j % k == 0:
                y = ys[:, j].copy()
                x_frozen = xs[:, j]
            fy = model.f((j * dt) / eps, x_frozen, y)
            y = fast_update(y, fy, eps, dt, inc[:, j])
            sup[block] = np.maximum(sup[block], np.linalg.norm(y - ys[:, j + 1], axis=1))
            # at a block end the next block restarts from the true state
            out[block, j + 1] = ys[:, j + 1] if (j + 1) % k == 0 else y
    return AuxiliaryPaths(times=driving.times, y_aux=out, schedule=schedule, eps=eps, sup_gap=sup)


def sup_block_gap(aux: AuxiliaryPaths):
    """E sup_t |Y_aux - Y| with stderr; left limits at block ends are included."""
    sup = aux.sup_gap
    se = float(sup.std(ddof=1) / np.sqrt(len(sup))) if len(sup) > 1 else 0.0
    return float(sup.mean()), se


# test integrands and weights -------------------------------------------------

def integrand(model: ModelSpec, name: str | Callable, component: int = 0) -> Callable:
    """Registry of Lipschitz integrands F(s, x, y) -> (N,): ``b``, ``y``, ``tanh_y``, ``x``."""
    if callable(name):
        return name
    if name == "b":
        return lambda s, x, y: model.b(s, x, y)[:, component]
    if name == "y":
        return lambda s, x, y: y[:, component]
    if name == "tanh_y":
        return lambda s, x, y: np.tanh(y[:, component])
    if name == "x":
        return lambda s, x, y: x[:, component]
    raise ConfigurationError(f"unknown integrand {name!r}")


WEIGHTS = ("one", "zero", "tanh", "clip_abs")


def weight(name: str, x_t0: np.ndarray, component: int = 0, clip: float = 5.0) -> np.ndarray:
    """Bounded weight Z measurable at t0, from a fixed registry."""
    if name == "one":
        return np.ones(len(x_t0))
    if name == "zero":
        return np.zeros(len(x_t0))
    if name == "tanh":
        return np.tanh(x_t0[:, component])
    if name == "clip_abs":
        return np.minimum(np.abs(x_t0[:, component]), clip)
    raise ConfigurationError(f"unknown weight {name!r}; choose from {WEIGHTS}")


@dataclass
class GapEstimate:
    value: float            # |E Z int (F(Y) - F(Y_aux)) ds|
    stderr: float
    delta: float
    scale: float            # delta^(1/2) (E Z^2)^(1/2)
    per_path: np.ndarray

    @property
    def calibrated_c(self) -> float:
        return self.value / self.scale if self.scale > 0 else np.nan


def gap_functional(model: ModelSpec, eps: float, schedule: BlockSchedule, driving: PathEnsemble,
                   F: str | Callable = "b", t0: float = 0.0, t: float | None = None, Z: str = "one",
                   aux: AuxiliaryPaths | None = None, component: int = 0) -> GapEstimate:
    """Monte Carlo estimate of |E int_t0^t (F(s/eps, X, Y) - F(s/eps, X, Y_aux)) Z ds|.

    Left-point Riemann sum on the driving grid; t0 and t must be grid points.
    """
    _check_driving(driving)
    dt = driving.dt
    t = schedule.T if t is None else t
    i0, i1 = n_steps_for(t0, dt), n_steps_for(t, dt)
    if i1 < i0:
        raise ConfigurationError("need t >= t0")
    aux = aux or auxiliary_path(model, eps, schedule, driving)
    Fn = integrand(model, F, component)
    z = weight(Z, driving.slow[:, i0], component)
    acc = np.zeros(driving.n_paths)
    for j in range(i0, i1):
        s = (j * dt) / eps
        x = driving.slow[:, j]
        acc += Fn(s, x, driving.fast[:, j]) - Fn(s, x, aux.y_aux[:, j])
    v = z * acc * dt
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return GapEstimate(value=float(abs(v.mean())), stderr=se, delta=schedule.delta,
                       scale=float(np.sqrt(schedule.delta * np.mean(z**2))), per_path=v)


def export_csv(path, driving: PathEnsemble, aux: AuxiliaryPaths, component: int = 0, every: int = 1) -> None:
    """Rows ``path,time,y_true,y_aux,gap`` for one fast component, every ``every`` steps."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "time", "y_true", "y_aux", "gap"])
        for p in range(driving.n_paths):
            for i in range(0, len(driving.times), every):
                yt = float(driving.fast[p, i, component])
                ya = float(aux.y_aux[p, i, component])
                w.writerow([p, repr(float(driving.times[i])), repr(yt), repr(ya), repr(abs(yt - ya))])
