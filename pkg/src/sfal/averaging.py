"""Averaged coefficients, Cesaro residuals and the averaged SDEs."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .ergodics import EmpiricalMeasure, evolution_measure, invariant_measure
from .models import ConfigurationError, ModelBlowupError, ModelSpec
from .rng import NoiseSource, map_blocks, resolve_threads
from .sde import PathEnsemble, n_steps_for

PSD_CLAMP = 1e-10


class OutOfTableError(ConfigurationError):
    """Evaluation outside the tabulated region (extrapolation is refused)."""


# ---------------------------------------------------------------------------
# Cesaro averages

def _simpson(vals: np.ndarray, h: float) -> np.ndarray:
    return h / 3.0 * (vals[0] + vals[-1] + 4.0 * vals[1:-1:2].sum(axis=0) + 2.0 * vals[2:-1:2].sum(axis=0))


def cesaro_average(g: Callable, t: float, T: float, rtol: float = 1e-8, max_panels: int = 2**22):
    """(1/T) * integral of g over [t, t+T] by composite Simpson with panel doubling.

    ``g`` must accept an array of times and may return scalars or arrays per
    time (shape ``(len(s), ...)``).  Refinement stops when successive
    estimates agree to ``rtol`` relative to the integral of |g|.
    """
    if not T > 0:
        raise ConfigurationError("T must be positive")
    panels = max(16, 2 * int(np.ceil(T)))
    panels += panels % 2
    prev = None
    while True:
        s = np.linspace(t, t + T, panels + 1)
        vals = np.asarray(g(s), dtype=float)
        if not np.isfinite(vals).all():
            raise ValueError("integrand returned non-finite values")
        h = T / panels
        est = _simpson(vals, h)
        scale = _simpson(np.abs(vals), h)
        if prev is not None and np.max(np.abs(est - prev)) <= rtol * max(np.max(np.abs(scale)), 1e-300):
            return est / T
        if panels >= max_panels:
            raise RuntimeError("cesaro_average did not converge")
        prev = est
        panels *= 2


def _over_times(fn, s: np.ndarray, x: np.ndarray, y: np.ndarray, tail: tuple) -> np.ndarray:
    """Evaluate a coefficient fn(t, x, y) at many times for one (x, y)."""
    N = len(s)
    X = np.broadcast_to(x, (N, x.shape[-1]))
    Y = np.broadcast_to(y, (N, y.shape[-1]))
    try:
        out = np.asarray(fn(s[:, None], X, Y), dtype=float)
        if out.shape == (N,) + tail:
            return out
    except (ValueError, TypeError, IndexError):
        pass
    return np.concatenate([fn(float(si), x[None], y[None]) for si in s])


DEFAULT_T_GRID = np.linspace(0.0, 50.0, 101)


def b_hat_residual(model: ModelSpec, x, y, T_grid, t_grid=None) -> np.ndarray:
    """sup_t |(1/T) int_t^{t+T} (b(s,x,y) - b_hat(x,y)) ds| / (1+|x|+|y|) for each T."""
    if model.b_hat is None:
        raise ConfigurationError(f"model {model.model_id} has no b_hat")
    x = np.asarray(x, dtype=float).reshape(model.n)
    y = np.asarray(y, dtype=float).reshape(model.m)
    t_grid = DEFAULT_T_GRID if t_grid is None else np.asarray(t_grid)
    bh = model.b_hat(x[None], y[None])[0]

    def g(s):
        return _over_times(model.b, s, x, y, (model.n,)) - bh

    norm = 1.0 + np.linalg.norm(x) + np.linalg.norm(y)
    return np.array([max(np.linalg.norm(cesaro_average(g, t, T)) for t in t_grid) / norm for T in T_grid])


def sigma_bar_residual(model: ModelSpec, x, T_grid, t_grid=None) -> np.ndarray:
    """sup_t (1/T) int_t^{t+T} ||sigma(s,x) - sigma_bar(x)||^2 ds / (1+|x|^2)."""
    if not model.sigma_y_independent:
        raise ConfigurationError("sigma_bar_residual needs a y-independent sigma")
    if model.sigma_bar is None:
        raise ConfigurationError(f"model {model.model_id} has no sigma_bar")
    x = np.asarray(x, dtype=float).reshape(model.n)
    y = np.zeros(model.m)
    t_grid = DEFAULT_T_GRID if t_grid is None else np.asarray(t_grid)
    sb = model.sigma_bar(x[None])[0]

    def g(s):
        diff = _over_times(model.sigma, s, x, y, (model.n, model.d)) - sb
        return np.sum(diff**2, axis=(1, 2))

    norm = 1.0 + float(x @ x)
    return np.array([max(float(cesaro_average(g, t, T)) for t in t_grid) / norm for T in T_grid])


def Sigma_residual(model: ModelSpec, x, y, T_grid, t_grid=None) -> np.ndarray:
    """sup_t (1/T) || int_t^{t+T} (sigma sigma^T(s,x,y) - Sigma(x,y)) ds || / (1+|x|^2), spectral norm."""
    if model.Sigma is None:
        raise ConfigurationError(f"model {model.model_id} has no Sigma")
    x = np.asarray(x, dtype=float).reshape(model.n)
    y = np.asarray(y, dtype=float).reshape(model.m)
    t_grid = DEFAULT_T_GRID if t_grid is None else np.asarray(t_grid)
    Sg = model.Sigma(x[None], y[None])[0]

    def g(s):
        sg = _over_times(model.sigma, s, x, y, (model.n, model.d))
        return sg @ np.swapaxes(sg, 1, 2) - Sg

    norm = 1.0 + float(x @ x)
    return np.array([max(np.linalg.norm(cesaro_average(g, t, T), 2) for t in t_grid) / norm for T in T_grid])


# ---------------------------------------------------------------------------
# averaged coefficients from sample clouds

def _same_x(meta_x, x) -> bool:
    return meta_x is not None and np.allclose(np.asarray(meta_x, dtype=float).reshape(-1),
                                              np.asarray(x, dtype=float).reshape(-1), rtol=0, atol=1e-12)


def averaged_drift_evolution(model: ModelSpec, t: float, x, measure: EmpiricalMeasure):
    """Monte Carlo b_bar(t, x) = mean of b(t, x, .) over a mu^x_t cloud; returns (value, stderr)."""
    if not _same_x(measure.meta.get("x"), x) or abs(measure.meta.get("t", np.nan) - t) > 1e-12:
        raise ConfigurationError("measure label does not match (x, t)")
    xs = np.broadcast_to(np.asarray(x, dtype=float).reshape(model.n), (measure.n, model.n))
    v = model.b(t, xs, measure.samples)
    return v.mean(axis=0), v.std(axis=0, ddof=1) / np.sqrt(measure.n)


def averaged_drift(model: ModelSpec, x, measure: EmpiricalMeasure):
    """Monte Carlo b_bar(x) = mean of b_hat(x, .) over an invariant cloud; returns (value, stderr)."""
    if model.b_hat is None:
        raise ConfigurationError(f"model {model.model_id} has no b_hat")
    if not _same_x(measure.meta.get("x"), x):
        raise ConfigurationError("measure label does not match x")
    xs = np.broadcast_to(np.asarray(x, dtype=float).reshape(model.n), (measure.n, model.n))
    v = model.b_hat(xs, measure.samples)
    return v.mean(axis=0), v.std(axis=0, ddof=1) / np.sqrt(measure.n)


def averaged_Sigma(model: ModelSpec, x, measure: EmpiricalMeasure) -> np.ndarray:
    """Monte Carlo Sigma_bar(x), symmetrised and clamped to PSD within 1e-10."""
    if model.Sigma is None:
        raise ConfigurationError(f"model {model.model_id} has no Sigma")
    if not _same_x(measure.meta.get("x"), x):
        raise ConfigurationError("measure label does not match x")
    xs = np.broadcast_to(np.asarray(x, dtype=float).reshape(model.n), (measure.n, model.n))
    A = model.Sigma(xs, measure.samples).mean(axis=0)
    A = 0.5 * (A + A.T)
    w, Q = np.linalg.eigh(A)
    if w.min() < -PSD_CLAMP:
        raise ValueError(f"estimated Sigma_bar is indefinite (min eigenvalue {w.min():.3g})")
    if w.min() < 0:
        A = (Q * np.maximum(w, 0.0)) @ Q.T
    return A


def psd_sqrt(A) -> np.ndarray:
    """Symmetric PSD square root through the eigendecomposition."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("psd_sqrt needs a square matrix")
    scale = max(1.0, np.abs(A).max())
    if np.abs(A - A.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    w, Q = np.linalg.eigh(0.5 * (A + A.T))
    if w.min() < -1e-12 * scale:
        raise ValueError(f"matrix is indefinite (min eigenvalue {w.min():.3g})")
    return (Q * np.sqrt(np.maximum(w, 0.0))) @ Q.T


def psd_sqrt_batch(A) -> np.ndarray:
    """psd_sqrt over a stack ``(N, n, n)`` of symmetric PSD matrices."""
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 1:
        if np.any(A < -1e-12 * np.maximum(1.0, np.abs(A))):
            raise ValueError("matrix is indefinite")
        return np.sqrt(np.maximum(A, 0.0))
    w, Q = np.linalg.eigh(0.5 * (A + np.swapaxes(A, -1, -2)))
    if np.any(w < -1e-12 * np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True))):
        raise ValueError("matrix is indefinite")
    return (Q * np.sqrt(np.maximum(w, 0.0))[..., None, :]) @ np.swapaxes(Q, -1, -2)


# ---------------------------------------------------------------------------
# tabulation

class GridTable:
    """Multilinear interpolation of values on a tensor grid; no extrapolation.

    ``axes`` is a list of increasing 1-D node arrays (one per slow component),
    ``values`` has shape ``(*node_counts, *value_shape)``.
    """

    def __init__(self, axes, values, label="table"):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = np.asarray(values, dtype=float)
        self.label = label
        self.value_shape = self.values.shape[len(self.axes):]
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])
        if len(self.axes) > 1:
            flat = self.values.reshape(self.values.shape[:len(self.axes)] + (-1,))
            self._rgi = RegularGridInterpolator(self.axes, flat, bounds_error=True)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if np.any(x < self.lo - 1e-12) or np.any(x > self.hi + 1e-12):
            bad = np.where(np.any((x < self.lo) | (x > self.hi), axis=1))[0][0]
            raise OutOfTableError(f"{self.label}: point {x[bad].tolist()} outside tabulated region "
                                  f"[{self.lo.tolist()}, {self.hi.tolist()}]")
        if len(self.axes) == 1:
            flat = self.values.reshape(len(self.axes[0]), -1)
            out = np.stack([np.interp(x[:, 0], self.axes[0], flat[:, j]) for j in range(flat.shape[1])], axis=1)
        else:
            out = self._rgi(x)
        return out.reshape((len(x),) + self.value_shape)


@dataclass
class AveragedModel:
    n: int
    b_bar: Callable                       # x (N, n) -> (N, n)
    sigma_bar: Optional[Callable] = None  # x -> (N, n, d)
    Theta: Optional[Callable] = None      # x -> (N, n, n)
    Sigma_bar: Optional[Callable] = None  # x -> (N, n, n)
    b_bar_t: Optional[Callable] = None    # (t, x) -> (N, n), for the intermediate equation
    sigma_t: Optional[Callable] = None    # (t, x) -> (N, n, d)
    d: int = 1
    provenance: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def to_csv(self, path, meta_path=None) -> None:
        """Table rows ``x_node..., b_bar..., Sigma_bar flattened...`` plus a JSON sidecar."""
        if "b_bar" not in self.tables:
            raise ValueError("only tabulated averaged models can be exported")
        bt = self.tables["b_bar"]
        St = self.tables.get("Sigma_bar")
        grids = np.meshgrid(*bt.axes, indexing="ij")
        nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
        bvals = bt.values.reshape(len(nodes), -1)
        cols = [f"x{i}" for i in range(self.n)] + [f"b_bar{i}" for i in range(self.n)]
        rows = [nodes, bvals]
        if St is not None:
            cols += [f"Sigma_bar{i}{j}" for i in range(self.n) for j in range(self.n)]
            rows.append(St.values.reshape(len(nodes), -1))
        data = np.concatenate(rows, axis=1)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in data:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")
        if meta_path is not None:
            with open(meta_path, "w") as fh:
                json.dump(self.provenance, fh, indent=2, sort_keys=True)


def analytic_averaged(model: ModelSpec, b_bar: Callable, Sigma_bar: Callable | None = None) -> AveragedModel:
    """Averaged model from closed-form coefficients (used for oracles and self-tests)."""
    Theta = None
    if Sigma_bar is not None:
        def Theta(x):
            return psd_sqrt_batch(Sigma_bar(x))
    return AveragedModel(n=model.n, d=model.d, b_bar=b_bar, sigma_bar=model.sigma_bar, Theta=Theta,
                         Sigma_bar=Sigma_bar, provenance={"kind": "analytic", "model": model.model_id})


def _atomic_save(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        np.save(fh, arr)
    os.replace(tmp, path)


def cached_invariant(model: ModelSpec, x, n_samples: int, seed: int, burn_in, dt: float,
                     cache_dir=None) -> EmpiricalMeasure:
    """invariant_measure with an optional on-disk cache keyed by (model, x, seed, n, burn_in, dt)."""
    if cache_dir is None:
        return invariant_measure(model, x, burn_in, n_samples, dt=dt, seed=seed)
    key = json.dumps([model.model_id, np.asarray(x, dtype=float).reshape(-1).tolist(), seed, n_samples,
                      burn_in, dt])
    path = Path(cache_dir) / (hashlib.sha256(key.encode()).hexdigest()[:24] + ".npy")
    if path.exists():
        samples = np.load(path)
        return EmpiricalMeasure(samples, {"x": np.asarray(x, dtype=float).reshape(-1).tolist(), "seed": seed,
                                          "kind": "invariant", "cached": True, "dt": dt, "burn_in": burn_in})
    mu = invariant_measure(model, x, burn_in, n_samples, dt=dt, seed=seed)
    _atomic_save(path, mu.samples)
    return mu


def tabulate_averaged(model: ModelSpec, x_axes, n_samples: int = 4000, seed: int = 0,
                      burn_in: float | None = None, dt: float = 0.01, with_Sigma: bool | None = None,
                      cache_dir=None, threads=None) -> AveragedModel:
    """Tabulate b_bar (and Sigma_bar, Theta) on a tensor grid from invariant clouds.

    ``x_axes`` is one node array for n = 1 or a list of n node arrays.  The
    same seed is used at every node (common random numbers across x).
    """
    if model.b_hat is None or model.f_bar is None:
        raise ConfigurationError("tabulation needs b_hat and f_bar")
    axes = [np.asarray(x_axes, dtype=float)] if model.n == 1 and np.ndim(x_axes) == 1 else \
        [np.asarray(a, dtype=float) for a in x_axes]
    if len(axes) != model.n or any(np.any(np.diff(a) <= 0) for a in axes):
        raise ConfigurationError("x_axes must be n increasing node arrays")
    with_Sigma = (model.Sigma is not None) if with_Sigma is None else with_Sigma
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)

    def work(x):
        mu = cached_invariant(model, x, n_samples, seed, burn_in, dt, cache_dir)
        bb, se = averaged_drift(model, x, mu)
        S = averaged_Sigma(model, x, mu) if with_Sigma else None
        return bb, se, S

    workers = resolve_threads(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            res = list(pool.map(work, nodes))
    else:
        res = [work(x) for x in nodes]
    shape = tuple(len(a) for a in axes)
    bvals = np.stack([r[0] for r in res]).reshape(shape + (model.n,))
    bse = np.stack([r[1] for r in res]).reshape(shape + (model.n,))
    btab = GridTable(axes, bvals, "b_bar")
    tables = {"b_bar": btab, "b_bar_stderr": GridTable(axes, bse, "b_bar_stderr")}
    Sigma_bar = Theta = None
    if with_Sigma:
        Svals = np.stack([r[2] for r in res]).reshape(shape + (model.n, model.n))
        Sigma_bar = tables["Sigma_bar"] = GridTable(axes, Svals, "Sigma_bar")

        def Theta(x, _S=Sigma_bar):
            # root of the interpolated matrix, so Theta^2 = Sigma_bar off the nodes as well
            return psd_sqrt_batch(_S(x))
    prov = {"kind": "tabulated", "model": model.model_id, "seed": seed, "n_samples": n_samples,
            "burn_in": burn_in, "dt": dt, "psd_clamp": PSD_CLAMP,
            "axes": [a.tolist() for a in axes]}
    return AveragedModel(n=model.n, d=model.d, b_bar=btab, sigma_bar=model.sigma_bar, Theta=Theta,
                         Sigma_bar=Sigma_bar, provenance=prov, tables=tables)


def intermediate_averaged(model: ModelSpec, b_bar_t: Callable) -> AveragedModel:
    """Averaged model for the time-dependent equation dX = b_bar(t/eps, X) dt + sigma(t/eps, X) dW1.

    ``b_bar_t`` takes ``(t, x)``; a GridTable from tabulate_evolution_drift
    is wrapped accordingly.  sigma must not depend on y.
    """
    if not model.sigma_y_independent:
        raise ConfigurationError("the intermediate equation needs a y-independent sigma")
    y0 = np.zeros(model.m)
    if isinstance(b_bar_t, GridTable):
        table = b_bar_t

        def b_bar_t(t, x):
            x = np.atleast_2d(x)
            return table(np.column_stack([np.full(len(x), t), x]))

    def sigma_t(t, x):
        x = np.atleast_2d(x)
        return model.sigma(t, x, np.broadcast_to(y0, (len(x), model.m)))

    return AveragedModel(n=model.n, d=model.d, b_bar=lambda x: b_bar_t(0.0, x), b_bar_t=b_bar_t,
                         sigma_t=sigma_t, provenance={"kind": "intermediate", "model": model.model_id})


def tabulate_evolution_drift(model: ModelSpec, t_nodes, x_nodes, n_samples: int = 2000, seed: int = 0,
                             lookback: float | None = None, dt: float = 0.01) -> GridTable:
    """Table of b_bar(t, x) over a (t, x) grid from evolution-system clouds (n = 1 only)."""
    if model.n != 1:
        raise ConfigurationError("evolution-drift tabulation is implemented for n = 1")
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_nodes = np.asarray(x_nodes, dtype=float)
    vals = np.empty((len(t_nodes), len(x_nodes), 1))
    for i, t in enumerate(t_nodes):
        for j, x in enumerate(x_nodes):
            mu = evolution_measure(model, [x], float(t), lookback, dt, n_samples, seed)
            vals[i, j] = averaged_drift_evolution(model, float(t), [x], mu)[0]
    return GridTable([t_nodes, x_nodes], vals, "b_bar(t,x)")


# ---------------------------------------------------------------------------
# averaged SDEs

def simulate_averaged(avg: AveragedModel, kind: str, x0, T: float, dt: float, n_paths: int, seed: int,
                      eps: float | None = None, save_every: int = 1, threads=None) -> PathEnsemble:
    """Euler-Maruyama for the averaged equations.

    kind ``strong``: dX = b_bar(X) dt + sigma_bar(X) dW1, drawing W1 from the
    same (seed, path) streams as ``simulate_slow_fast`` so that a paired run
    with the same dt shares the slow noise exactly.
    kind ``weak``: dX = b_bar(X) dt + Theta(X) dWbar with independent noise.
    kind ``intermediate``: dX = b_bar_t(t/eps, X) dt + sigma_t(t/eps, X) dW1.
    """
    if kind == "strong":
        if avg.sigma_bar is None:
            raise ConfigurationError("strong kind needs sigma_bar")
        channel, dim = "W1", avg.d
    elif kind == "weak":
        if avg.Theta is None:
            raise ConfigurationError("weak kind needs Theta")
        channel, dim = "WBAR", avg.n
    elif kind == "intermediate":
        if avg.b_bar_t is None or avg.sigma_t is None or eps is None:
            raise ConfigurationError("intermediate kind needs b_bar_t, sigma_t and eps")
        channel, dim = "W1", avg.d
    else:
        raise ConfigurationError(f"unknown averaged kind {kind!r}")
    n_steps = n_steps_for(T, dt)
    if n_steps % save_every:
        raise ConfigurationError("save_every must divide the number of steps")
    n_save = n_steps // save_every + 1
    x0 = np.asarray(x0, dtype=float)
    x_init = np.tile(x0.reshape(1, avg.n), (n_paths, 1)) if x0.ndim <= 1 else x0.reshape(n_paths, avg.n)
    sqdt = np.sqrt(dt)

    def run(block):
        w = NoiseSource(seed, block, channel, dim)
        x = x_init[block].copy()
        xs = np.empty((len(block), n_save, avg.n))
        xs[:, 0] = x
        for k in range(n_steps):
            dW = w.next() * sqdt
            t = k * dt
            if kind == "strong":
                drift, diff = avg.b_bar(x), avg.sigma_bar(x)
            elif kind == "weak":
                drift, diff = avg.b_bar(x), avg.Theta(x)
            else:
                drift, diff = avg.b_bar_t(t / eps, x), avg.sigma_t(t / eps, x)
            x = x + drift * dt + np.matmul(diff, dW[..., None])[..., 0]
            if not np.isfinite(x).all():
                raise ModelBlowupError(block[int(np.argmax(~np.isfinite(x).all(axis=1)))], t + dt)
            if (k + 1) % save_every == 0:
                xs[:, (k + 1) // save_every] = x
        return xs

    slow = np.concatenate(map_blocks(run, n_paths, threads))
    return PathEnsemble(times=np.arange(n_save) * (save_every * dt), slow=slow,
                        fast=np.empty(slow.shape[:2] + (0,)), epsilon=eps if eps else 0.0,
                        seed=seed, model_id=f"averaged-{kind}", dt=dt, save_every=save_every)
