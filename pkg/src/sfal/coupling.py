"""Reflection coupling of the frozen fast dynamics and its contraction constants."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .models import ConfigurationError, DissipativityParams, ModelBlowupError, ModelSpec
from .rng import NoiseSource, map_blocks
from .sde import n_steps_for


@dataclass(frozen=True)
class ContractionConstants:
    c1: float
    c2: float
    beta: float
    first_term: float = np.nan
    second_term: float = np.nan

    def __post_init__(self):
        if not (self.c1 > 0 and 0 < self.c2 < self.c1 and self.beta > 0):
            raise ConfigurationError("contraction constants out of range")


def h_eval(r, k: ContractionConstants):
    """Concave distance transform 1 - exp(-c1 r) + c2 r."""
    r = np.asarray(r, dtype=float)
    return -np.expm1(-k.c1 * r) + k.c2 * r


def _inf_ratio(c1: float, c2: float, r0: float) -> float:
    """inf over r >= r0 of r / h(r)."""
    def ratio(r):
        return r / (-np.expm1(-c1 * r) + c2 * r)

    grid = r0 * np.logspace(0, 3, 1000)
    vals = ratio(grid)
    diffs = np.diff(vals)
    if np.all(diffs >= -1e-15 * vals[1:]):
        return float(vals[0])
    if np.all(diffs <= 1e-15 * vals[1:]):
        # keeps falling past the scan window; its limit at infinity is 1/c2
        return float(min(vals[-1], 1.0 / c2))
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(ratio, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12 * hi})
    return float(min(res.fun, vals.min()))


def theoretical_beta(params: DissipativityParams) -> ContractionConstants:
    """Contraction rate from the dissipativity constants.

    c1 = 2 C r0, c2 = c1 exp(-c1 r0) and
    beta = min(c1^2 exp(-c1 r0) / h(r0), c2 K inf_{r >= r0} r / h(r)).
    """
    if not (params.C > 0 and params.K > 0 and params.r0 > 0):
        raise ConfigurationError("dissipativity parameters must be positive")
    c1 = 2.0 * params.C * params.r0
    c2 = c1 * np.exp(-c1 * params.r0)
    h_r0 = -np.expm1(-c1 * params.r0) + c2 * params.r0   # h increasing: sup over (0, r0]
    first = c1**2 * np.exp(-c1 * params.r0) / h_r0
    second = c2 * params.K * _inf_ratio(c1, c2, params.r0)
    return ContractionConstants(c1=c1, c2=c2, beta=float(min(first, second)),
                                first_term=float(first), second_term=float(second))


def mollifier(r, delta: float):
    """C^2 switch: 0 below delta/2, 1 above delta, quintic smoothstep between."""
    if delta <= 0:
        raise ConfigurationError("delta must be positive")
    u = np.clip(2.0 * np.asarray(r, dtype=float) / delta - 1.0, 0.0, 1.0)
    return u**3 * (u * (6.0 * u - 15.0) + 10.0)


def w1_upper_bound(k: ContractionConstants, t_minus_s, y_gap, x_gap, C_env: float):
    return C_env * np.exp(-k.beta * np.asarray(t_minus_s)) * y_gap + C_env * x_gap


@dataclass
class CouplingConfig:
    delta: float
    dt: float
    T: float
    n_paths: int
    x1: np.ndarray
    x2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    s: float = 0.0
    save_every: int = 1

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if self.dt > min(1.0 / 50.0, self.delta / 10.0) * (1 + 1e-12):
            raise ConfigurationError("coupling needs dt <= min(1/50, delta/10)")
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be positive")
        for name in ("x1", "x2", "y1", "y2"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))


@dataclass
class CouplingTrace:
    times: np.ndarray
    dist: np.ndarray            # (paths, len(times))
    h_dist: np.ndarray
    coalesced_at: np.ndarray    # first time dist < delta/2, nan if never
    delta: float
    constants: Optional[ContractionConstants] = None
    y_end: Optional[np.ndarray] = None   # (paths, m) final states of both copies
    z_end: Optional[np.ndarray] = None

    def mean_h(self):
        m = self.h_dist.mean(axis=0)
        se = self.h_dist.std(axis=0, ddof=1) / np.sqrt(self.h_dist.shape[0])
        return m, se

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "time", "dist", "h_dist"])
            for p in range(self.dist.shape[0]):
                for i, t in enumerate(self.times):
                    w.writerow([p, repr(float(t)), repr(float(self.dist[p, i])), repr(float(self.h_dist[p, i]))])


def simulate_coupled(model: ModelSpec, cfg: CouplingConfig, seed: int, constants=None,
                     threads: int | None = None) -> CouplingTrace:
    """Reflection-coupled pair (Y, Z) of frozen fast processes.

    Y sees sqrt(p) dW21 + sqrt(1-p) dW22 and Z sees the mirror image of the
    first part, sqrt(p)(dW21 - 2 e <e, dW21>), plus the same dW22, where
    p = mollifier(|Y - Z|) and e = (Y - Z)/|Y - Z|.  Explicit scheme: drifts
    and the reflection direction use the pre-step states.
    """
    k = constants or theoretical_beta(model.dissipativity)
    n_steps = n_steps_for(cfg.T, cfg.dt)
    if n_steps % cfg.save_every:
        raise ConfigurationError("save_every must divide the number of steps")
    n_save = n_steps // cfg.save_every + 1
    sqdt = np.sqrt(cfg.dt)
    m = model.m
    half = cfg.delta / 2

    def run(block):
        P = len(block)
        w21 = NoiseSource(seed, block, "W21", m)
        w22 = NoiseSource(seed, block, "W22", m)
        x1 = np.broadcast_to(cfg.x1, (P, model.n))
        x2 = np.broadcast_to(cfg.x2, (P, model.n))
        y = np.tile(cfg.y1, (P, 1))
        z = np.tile(cfg.y2, (P, 1))
        dist = np.empty((P, n_save))
        r = np.linalg.norm(y - z, axis=1)
        dist[:, 0] = r
        coal = np.where(r < half, cfg.s, np.nan)
        for step in range(n_steps):
            t = cfg.s + step * cfg.dt
            diff = y - z
            r = np.linalg.norm(diff, axis=1)
            p = mollifier(r, cfg.delta)
            a = np.sqrt(p)[:, None]
            c = np.sqrt(1.0 - p)[:, None]
            dB1 = w21.next() * sqdt
            dB2 = w22.next() * sqdt
            active = p > 0
            refl = dB1.copy()
            if active.any():
                e = diff[active] / r[active, None]
                refl[active] = dB1[active] - 2.0 * e * np.sum(e * dB1[active], axis=1, keepdims=True)
            y_new = y + model.frozen_drift(t, x1, y) * cfg.dt + a * dB1 + c * dB2
            z_new = z + model.frozen_drift(t, x2, z) * cfg.dt + a * refl + c * dB2
            y, z = y_new, z_new
            if not (np.isfinite(y).all() and np.isfinite(z).all()):
                bad = int(np.argmax(~(np.isfinite(y).all(axis=1) & np.isfinite(z).all(axis=1))))
                raise ModelBlowupError(block[bad], t + cfg.dt)
            r = np.linalg.norm(y - z, axis=1)
            newly = np.isnan(coal) & (r < half)
            coal[newly] = t + cfg.dt
            if (step + 1) % cfg.save_every == 0:
                dist[:, (step + 1) // cfg.save_every] = r
        return dist, coal, y, z

    parts = map_blocks(run, cfg.n_paths, threads)
    dist = np.concatenate([p[0] for p in parts])
    times = cfg.s + np.arange(n_save) * (cfg.save_every * cfg.dt)
    return CouplingTrace(times=times, dist=dist, h_dist=h_eval(dist, k),
                         coalesced_at=np.concatenate([p[1] for p in parts]),
                         delta=cfg.delta, constants=k, y_end=np.concatenate([p[2] for p in parts]),
                         z_end=np.concatenate([p[3] for p in parts]))


def default_delta(params: DissipativityParams) -> float:
    return 1e-3 * params.r0


def fit_decay_rate(times, values, floor: float = 0.0, rel_floor: float = 1e-3):
    """Least-squares exponential rate of a decaying positive curve.

    Uses the points with value above ``max(floor, rel_floor * values[0])``.
    Returns ``(rate, n_points_used)``; rate is ``nan`` with fewer than 3 points.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    cut = max(floor, rel_floor * values[0])
    keep = values > cut
    # only the initial run above the cut: later noise excursions are ignored
    if not keep[0]:
        return np.nan, 0
    stop = np.argmin(keep) if not keep.all() else len(keep)
    t, v = times[:stop], values[:stop]
    if len(t) < 3:
        return np.nan, len(t)
    slope = np.polyfit(t, np.log(v), 1)[0]
    return float(-slope), len(t)
