"""Euler-Maruyama integration of the two-scale system and of the frozen fast SDE."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .models import ConfigurationError, ModelBlowupError, ModelSpec
from .rng import NoiseSource, map_blocks

DT_FAST_CAP = 1.0 / 50.0
EPS_MIN = 2.0**-20
INCREMENT_CAP_BYTES = 2 * 1024**3


@dataclass
class PathEnsemble:
    times: np.ndarray           # saved grid, starts at 0
    slow: np.ndarray            # (paths, len(times), n)
    fast: np.ndarray            # (paths, len(times), m)
    epsilon: float
    seed: int
    model_id: str
    dt: float
    save_every: int = 1
    dW2: Optional[np.ndarray] = None   # (paths, steps, m) when recorded
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.slow.shape[:2] != self.fast.shape[:2]:
            raise ValueError("slow and fast arrays disagree in path count or grid length")
        if self.slow.shape[1] != len(self.times):
            raise ValueError("grid length mismatch")

    @property
    def n_paths(self) -> int:
        return self.slow.shape[0]

    def to_csv(self, path) -> None:
        """Long-format export with header ``path,time,component,value``.

        Slow components are labelled ``x0, x1, ...`` and fast ones ``y0, ...``.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "time", "component", "value"])
            for p in range(self.n_paths):
                for i, t in enumerate(self.times):
                    for c in range(self.slow.shape[2]):
                        w.writerow([p, repr(float(t)), f"x{c}", repr(float(self.slow[p, i, c]))])
                    for c in range(self.fast.shape[2]):
                        w.writerow([p, repr(float(t)), f"y{c}", repr(float(self.fast[p, i, c]))])


def n_steps_for(T: float, dt: float) -> int:
    if dt <= 0 or T < 0:
        raise ConfigurationError("need dt > 0 and T >= 0")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(T, dt):
        raise ConfigurationError(f"dt={dt!r} does not divide the horizon {T!r}")
    return n


def check_resolution(eps: float, dt: float) -> None:
    if eps < EPS_MIN:
        raise ConfigurationError(f"epsilon below supported floor 2^-20: {eps!r}")
    if dt > eps * DT_FAST_CAP * (1 + 1e-12):
        raise ConfigurationError(f"dt={dt!r} violates the resolution rule dt <= eps/50 (eps={eps!r})")


def fast_update(y, fy, eps, dt, dW2):
    # Shared by the full system and the auxiliary block process so that both
    # perform bit-identical arithmetic on identical inputs.
    return y + (dt / eps) * fy + dW2 / np.sqrt(eps)


def em_step(model: ModelSpec, t: float, x, y, eps: float, dt: float, dW1, dW2):
    """One Euler-Maruyama step of the two-scale system, coefficients at the left endpoint.

    Accepts single states (``x`` of shape ``(n,)``) or batches ``(N, n)``.
    Returns the new ``(x, y)`` with the input's batch shape.
    """
    if dt <= 0 or eps <= 0:
        raise ConfigurationError("need dt > 0 and eps > 0")
    single = np.ndim(x) == 1
    x2, y2 = model._xy(x, y)
    dW1 = np.atleast_2d(dW1)
    dW2 = np.atleast_2d(dW2)
    s = t / eps
    bx = model.b(s, x2, y2)
    sx = model.sigma(s, x2, y2)
    fy = model.f(s, x2, y2)
    xn = x2 + bx * dt + np.matmul(sx, dW1[..., None])[..., 0]
    yn = fast_update(y2, fy, eps, dt, dW2)
    bad = ~(np.isfinite(xn).all(axis=1) & np.isfinite(yn).all(axis=1))
    if bad.any():
        raise ModelBlowupError(int(np.argmax(bad)), t + dt)
    if single:
        return xn[0], yn[0]
    return xn, yn


def _initial(v, n_rows: int, dim: int, default) -> np.ndarray:
    v = default if v is None else v
    a = np.asarray(v, dtype=float)
    if a.ndim <= 1:
        return np.tile(a.reshape(1, dim), (n_rows, 1))
    return a.reshape(n_rows, dim).copy()


def simulate_slow_fast(model: ModelSpec, eps: float, T: float, dt: float, n_paths: int, seed: int,
                       x0=None, y0=None, save_every: int = 1, record_increments: bool = False,
                       threads: int | None = None) -> PathEnsemble:
    """Integrate the slow-fast system for ``n_paths`` independent paths.

    Path ``p`` draws its slow noise from stream (seed, p, W1) and its fast noise
    from (seed, p, W2), so the output does not depend on block layout or thread
    count.  States are stored every ``save_every`` steps.  With
    ``record_increments`` the fast Brownian increments of every step are kept
    in ``dW2`` (needed by the auxiliary block process).
    """
    check_resolution(eps, dt)
    n_steps = n_steps_for(T, dt)
    if n_steps % save_every:
        raise ConfigurationError("save_every must divide the number of steps")
    if n_paths < 1:
        raise ConfigurationError("n_paths must be positive")
    if record_increments and n_paths * n_steps * model.m * 8 > INCREMENT_CAP_BYTES:
        raise ConfigurationError("recorded increments would exceed the 2 GiB cap; reduce paths or horizon")
    x_init = _initial(x0, n_paths, model.n, model.x0)
    y_init = _initial(y0, n_paths, model.m, model.y0)
    n_save = n_steps // save_every + 1
    sqdt = np.sqrt(dt)

    def run(block):
        P = len(block)
        w1 = NoiseSource(seed, block, "W1", model.d)
        w2 = NoiseSource(seed, block, "W2", model.m)
        x = x_init[block].copy()
        y = y_init[block].copy()
        xs = np.empty((P, n_save, model.n))
        ys = np.empty((P, n_save, model.m))
        xs[:, 0], ys[:, 0] = x, y
        inc = np.empty((P, n_steps, model.m)) if record_increments else None
        for k in range(n_steps):
            dW1 = w1.next() * sqdt
            dW2 = w2.next() * sqdt
            if inc is not None:
                inc[:, k] = dW2
            try:
                x, y = em_step(model, k * dt, x, y, eps, dt, dW1, dW2)
            except ModelBlowupError as err:
                raise ModelBlowupError(block[err.path], err.time) from None
            if (k + 1) % save_every == 0:
                j = (k + 1) // save_every
                xs[:, j], ys[:, j] = x, y
        return xs, ys, inc

    parts = map_blocks(run, n_paths, threads)
    times = np.arange(n_save) * (save_every * dt)
    return PathEnsemble(
        times=times,
        slow=np.concatenate([p[0] for p in parts]),
        fast=np.concatenate([p[1] for p in parts]),
        epsilon=eps, seed=seed, model_id=model.model_id, dt=dt, save_every=save_every,
        dW2=np.concatenate([p[2] for p in parts]) if record_increments else None,
    )


@dataclass
class FrozenPaths:
    times: np.ndarray     # saved grid, starts at s
    y: np.ndarray         # (paths, len(times), m)
    x: np.ndarray         # frozen slow value (n,)
    seed: int


def simulate_frozen(model: ModelSpec, x, s: float, t_end: float, dt: float, y0, seed: int,
                    n_paths: int = 1, save_every: int | None = None, drift=None,
                    threads: int | None = None) -> FrozenPaths:
    """Integrate dY = f(t, x, Y) dt + dW on [s, t_end] with x frozen.

    For t < 0 the drift is f(-t, x, y).  ``y0`` is one point or one point per
    path.  By default only the endpoints are stored.  ``drift`` replaces the
    time-dependent drift by a callable ``(t, x, y)``; used for the limit
    equation with f_bar.
    """
    if t_end < s:
        raise ConfigurationError("t_end must be >= s")
    n_steps = n_steps_for(t_end - s, dt) if t_end > s else 0
    if save_every is None:
        save_every = max(n_steps, 1)
    if n_steps and n_steps % save_every:
        raise ConfigurationError("save_every must divide the number of steps")
    x = np.asarray(x, dtype=float).reshape(model.n)
    y_init = _initial(y0, n_paths, model.m, model.y0)
    n_save = (n_steps // save_every if n_steps else 0) + 1
    sqdt = np.sqrt(dt)
    drift = drift or model.frozen_drift

    def run(block):
        P = len(block)
        w = NoiseSource(seed, block, "W2", model.m)
        xb = np.broadcast_to(x, (P, model.n))
        y = y_init[block].copy()
        ys = np.empty((P, n_save, model.m))
        ys[:, 0] = y
        for k in range(n_steps):
            t = s + k * dt
            y = y + drift(t, xb, y) * dt + w.next() * sqdt
            if not np.isfinite(y).all():
                bad = int(np.argmax(~np.isfinite(y).all(axis=1)))
                raise ModelBlowupError(block[bad], t + dt)
            if (k + 1) % save_every == 0:
                ys[:, (k + 1) // save_every] = y
        return ys

    parts = map_blocks(run, n_paths, threads)
    times = s + np.arange(n_save) * (save_every * dt)
    return FrozenPaths(times=times, y=np.concatenate(parts), x=x, seed=seed)


def moment_curve(ensemble: PathEnsemble, p: float, which: str = "slow"):
    """Per-time Monte Carlo estimate of E|state|^p with standard errors.

    Returns ``(times, mean, stderr)``; ``mean.max()`` is the sup-in-time moment.
    """
    if ensemble.n_paths < 1:
        raise ValueError("empty ensemble")
    arr = {"slow": ensemble.slow, "fast": ensemble.fast}[which]
    vals = np.linalg.norm(arr, axis=2) ** p
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0]) if vals.shape[0] > 1 else np.zeros_like(mean)
    return ensemble.times, mean, se
