"""Sample-cloud estimates of the evolution system of measures and of the invariant measure."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .coupling import fit_decay_rate, theoretical_beta
from .models import ConfigurationError, ModelSpec
from .rng import derive_seed, aux_rng
from .sde import simulate_frozen
from .wasserstein import w1

# Caps on the beta-derived defaults.  The theoretical beta of partially
# dissipative models can be tiny (double-well: ~3e-7) while the observed
# relaxation is O(1); without a cap the defaults would be unrunnable.
LOOKBACK_CAP = 50.0
BURN_IN_CAP = 50.0


@dataclass
class EmpiricalMeasure:
    samples: np.ndarray                 # (N, m)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        if len(self.samples) < 1:
            raise ValueError("empty measure")
        if not np.isfinite(self.samples).all():
            raise ValueError("non-finite samples")

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def mean(self):
        return self.samples.mean(axis=0)

    def integrate(self, phi: Callable) -> tuple[float, float]:
        """Monte Carlo mean of phi over the cloud and its standard error."""
        v = np.asarray(phi(self.samples), dtype=float).reshape(self.n, -1)
        m = v.mean(axis=0)
        se = v.std(axis=0, ddof=1) / np.sqrt(self.n) if self.n > 1 else np.zeros_like(m)
        return (float(m[0]), float(se[0])) if v.shape[1] == 1 else (m, se)

    def to_csv(self, path, meta_path=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "component", "value"])
            for i, row in enumerate(self.samples):
                for c, v in enumerate(row):
                    w.writerow([i, c, repr(float(v))])
        if meta_path is not None:
            with open(meta_path, "w") as fh:
                json.dump(_jsonable(self.meta), fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def default_lookback(model: ModelSpec) -> float:
    return min(20.0 / theoretical_beta(model.dissipativity).beta, LOOKBACK_CAP)


def default_burn_in(model: ModelSpec) -> float:
    return min(10.0 / theoretical_beta(model.dissipativity).beta, BURN_IN_CAP)


def _round_to_grid(length: float, dt: float) -> float:
    return max(1, int(round(length / dt))) * dt


def evolution_measure(model: ModelSpec, x, t: float, lookback: float | None = None, dt: float = 0.01,
                      n_samples: int = 2000, seed: int = 0, y0=None, threads=None) -> EmpiricalMeasure:
    """Cloud approximating mu^x_t: frozen paths started at s = t - lookback.

    The start time may be negative; the drift is then evaluated through the
    symmetric extension.  Paths start from ``y0`` (default 0).
    """
    lookback = default_lookback(model) if lookback is None else lookback
    if lookback <= 0:
        raise ConfigurationError("lookback must be positive")
    lookback = _round_to_grid(lookback, dt)
    y0 = np.zeros(model.m) if y0 is None else y0
    fp = simulate_frozen(model, x, t - lookback, t, dt, y0, derive_seed(seed, "evolution", t),
                         n_paths=n_samples, threads=threads)
    return EmpiricalMeasure(fp.y[:, -1], {"x": np.asarray(x, dtype=float).reshape(-1).tolist(), "t": t,
                                          "lookback": lookback, "dt": dt, "seed": seed, "kind": "evolution"})


def _limit_drift(model: ModelSpec):
    if model.f_bar is None:
        raise ConfigurationError(f"model {model.model_id} has no f_bar")
    return lambda t, x, y: model.f_bar(x, y)


def invariant_measure(model: ModelSpec, x, burn_in: float | None = None, n_samples: int = 2000,
                      thin: int = 10, dt: float = 0.01, seed: int = 0, per_chain: int = 1,
                      y0=None, threads=None) -> EmpiricalMeasure:
    """Cloud approximating the invariant law of dY = f_bar(x, Y) dt + dW.

    Runs ``ceil(n_samples / per_chain)`` independent chains from ``y0``
    (default 0), discards ``burn_in`` time units, then keeps ``per_chain``
    states spaced ``thin`` steps apart from each chain.
    """
    drift = _limit_drift(model)
    burn_in = default_burn_in(model) if burn_in is None else burn_in
    burn_in = _round_to_grid(burn_in, dt)
    n_chains = -(-n_samples // per_chain)
    y0 = np.zeros(model.m) if y0 is None else y0
    s = derive_seed(seed, "invariant")
    if per_chain == 1:
        fp = simulate_frozen(model, x, 0.0, burn_in, dt, y0, s, n_paths=n_chains, drift=drift, threads=threads)
        samples = fp.y[:, -1]
    else:
        n_steps = int(round(burn_in / dt)) + (per_chain - 1) * thin
        fp = simulate_frozen(model, x, 0.0, n_steps * dt, dt, y0, s, n_paths=n_chains,
                             save_every=1, drift=drift, threads=threads)
        idx = int(round(burn_in / dt)) + thin * np.arange(per_chain)
        samples = fp.y[:, idx].reshape(-1, model.m)
    return EmpiricalMeasure(samples[:n_samples], {"x": np.asarray(x, dtype=float).reshape(-1).tolist(),
                                                  "burn_in": burn_in, "thin": thin, "per_chain": per_chain,
                                                  "dt": dt, "seed": seed, "kind": "invariant"})


def default_phis(m: int) -> dict[str, Callable]:
    """Lipschitz test functions: tanh of each coordinate and the clipped norm."""
    phis = {f"tanh_y{i}": (lambda y, i=i: np.tanh(y[:, i])) for i in range(m)}
    phis["min_norm_10"] = lambda y: np.minimum(np.linalg.norm(y, axis=1), 10.0)
    return phis


@dataclass
class EvolutionResidual:
    names: list
    residual: np.ndarray       # signed difference of the two integrals
    stderr: np.ndarray

    def within(self, k: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.residual) <= k * self.stderr))


def check_evolution_property(model: ModelSpec, x, s: float, t: float, phis: dict | None = None,
                             n: int = 4000, seed: int = 0, lookback: float | None = None,
                             dt: float = 0.01, threads=None) -> EvolutionResidual:
    """Compare the pushed-forward cloud mu_s P_{s,t} with an independent mu_t cloud."""
    if t < s:
        raise ConfigurationError("need s <= t")
    phis = phis or default_phis(model.m)
    mu_s = evolution_measure(model, x, s, lookback, dt, n, derive_seed(seed, "mu_s"), threads=threads)
    if t > s:
        pushed = simulate_frozen(model, x, s, t, dt, mu_s.samples, derive_seed(seed, "push"),
                                 n_paths=n, threads=threads).y[:, -1]
    else:
        pushed = mu_s.samples
    mu_t = evolution_measure(model, x, t, lookback, dt, n, derive_seed(seed, "mu_t"), threads=threads)
    res, se = [], []
    for phi in phis.values():
        a = np.asarray(phi(pushed), dtype=float)
        b = np.asarray(phi(mu_t.samples), dtype=float)
        res.append(a.mean() - b.mean())
        se.append(np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b)))
    return EvolutionResidual(list(phis), np.array(res), np.array(se))


@dataclass
class DecayCurve:
    t: np.ndarray
    w1: np.ndarray
    noise_floor: float
    rate: float
    n_fit: int


def _on_grid(times, t_grid, dt):
    idx = np.rint((np.asarray(t_grid) - times[0]) / dt).astype(int)
    if np.any(np.abs(times[idx] - t_grid) > 1e-9 * max(1.0, np.abs(t_grid).max())):
        raise ConfigurationError("t_grid points must lie on the dt grid")
    return idx


def ergodic_decay_curve(model: ModelSpec, x, y, t_grid, n: int = 2000, seed: int = 0,
                        lookback: float | None = None, dt: float = 0.01, threads=None) -> DecayCurve:
    """W1 between the law of Y_t started at (0, y) and the cloud for mu^x_t, along ``t_grid``."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ConfigurationError("t_grid must be increasing")
    if t_grid[0] < 0:
        raise ConfigurationError("t_grid must start at t >= 0")
    lookback = _round_to_grid(default_lookback(model) if lookback is None else lookback, dt)
    y = np.asarray(y, dtype=float).reshape(model.m)
    t_end = t_grid[-1]
    pts = simulate_frozen(model, x, 0.0, t_end, dt, y, derive_seed(seed, "point"), n_paths=n,
                          save_every=1, threads=threads) if t_end > 0 else None
    s0 = t_grid[0] - lookback
    ref = simulate_frozen(model, x, s0, t_end, dt, np.zeros(model.m), derive_seed(seed, "ref"), n_paths=n,
                          save_every=1, threads=threads)
    ref2 = simulate_frozen(model, x, s0, t_end, dt, np.zeros(model.m), derive_seed(seed, "ref2"), n_paths=n,
                           save_every=1, threads=threads)
    iref = _on_grid(ref.times, t_grid, dt)
    rng = aux_rng(seed, "decay")
    out = np.empty(len(t_grid))
    for j, t in enumerate(t_grid):
        if pts is None or t == 0:
            cloud = np.tile(y, (n, 1))
        else:
            cloud = pts.y[:, _on_grid(pts.times, [t], dt)[0]]
        out[j] = w1(cloud, ref.y[:, iref[j]], rng)
    floor = float(np.mean([w1(ref.y[:, i], ref2.y[:, i], rng) for i in iref]))
    rate, used = fit_decay_rate(t_grid, out, floor=2.0 * floor)
    return DecayCurve(t_grid, out, floor, rate, used)


@dataclass
class MixedDistance:
    t: np.ndarray
    distance: np.ndarray
    noise_floor: float


def mixed_system_distance(model: ModelSpec, x, t, lookback: float | None = None, n: int = 2000,
                          seed: int = 0, dt: float = 0.01, burn_in: float | None = None,
                          threads=None) -> MixedDistance:
    """W1 between the evolution-system cloud at time(s) t and the invariant cloud of the limit SDE."""
    _limit_drift(model)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lookback = _round_to_grid(default_lookback(model) if lookback is None else lookback, dt)
    s0 = t.min() - lookback
    ref = simulate_frozen(model, x, s0, t.max(), dt, np.zeros(model.m), derive_seed(seed, "evo"),
                          n_paths=n, save_every=1, threads=threads)
    idx = _on_grid(ref.times, t, dt)
    inv = invariant_measure(model, x, burn_in, n, dt=dt, seed=derive_seed(seed, "inv"), threads=threads)
    inv2 = invariant_measure(model, x, burn_in, n, dt=dt, seed=derive_seed(seed, "inv2"), threads=threads)
    rng = aux_rng(seed, "mixed")
    dist = np.array([w1(ref.y[:, i], inv.samples, rng) for i in idx])
    return MixedDistance(t, dist, w1(inv.samples, inv2.samples, rng))


def mixed_bound_profile(beta: float, phi2: Callable[[float], float], t) -> np.ndarray:
    """e^{-beta t} + int_0^t e^{-beta (t-u)} phi2(u) du, by adaptive quadrature."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        integral = quad(lambda u: np.exp(-beta * (ti - u)) * phi2(u), 0.0, ti, limit=200)[0] if ti > 0 else 0.0
        out[i] = np.exp(-beta * ti) + integral
    return out
