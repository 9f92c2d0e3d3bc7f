"""Convergence sweeps, martingale-problem residuals, moment and increment suites."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad

from . import __version__
from .averaging import AveragedModel, OutOfTableError, simulate_averaged
from .models import ConfigurationError, ModelSpec
from .rng import derive_seed
from .sde import PathEnsemble, moment_curve, simulate_slow_fast

N_OUTPUT_TIMES = 21
DT_RULE = 50          # full system: dt = eps / DT_RULE
DT_AVERAGED = 1e-3    # averaged equation in weak sweeps


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_plain)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def fit_loglog(grid, errors):
    """Least-squares slope of log(error) against log(grid); ``(nan, nan)`` below 3 points."""
    g = np.asarray(grid, dtype=float)
    e = np.asarray(errors, dtype=float)
    ok = (g > 0) & (e > 0)
    if ok.sum() < 3:
        return np.nan, np.nan
    A = np.column_stack([np.log(g[ok]), np.ones(ok.sum())])
    coef, res, *_ = np.linalg.lstsq(A, np.log(e[ok]), rcond=None)
    return float(coef[0]), float(res[0]) if len(res) else 0.0


@dataclass
class ConvergenceReport:
    parameter: str
    grid: np.ndarray
    errors: np.ndarray
    stderrs: np.ndarray
    config: dict
    slope: float = np.nan
    slope_residual: float = np.nan
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)
        self.stderrs = np.asarray(self.stderrs, dtype=float)
        if self.parameter not in ("eps", "delta", "h", "T"):
            raise ConfigurationError(f"unknown sweep parameter {self.parameter!r}")
        if self.parameter != "T" and np.any(np.diff(self.grid) >= 0):
            raise ConfigurationError("sweep grid must be strictly decreasing")
        if not np.isfinite(self.errors).all():
            raise ValueError("non-finite errors in report")
        if np.isnan(self.slope) and len(self.grid) >= 3:
            self.slope, self.slope_residual = fit_loglog(self.grid, self.errors)

    @property
    def slope_defined(self) -> bool:
        return bool(np.isfinite(self.slope))

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def decreasing_beyond_noise(self, k: float = 1.0) -> bool:
        """Each error exceeds the next by more than k pooled standard errors."""
        d = self.errors[:-1] - self.errors[1:]
        pooled = np.sqrt(self.stderrs[:-1] ** 2 + self.stderrs[1:] ** 2)
        return bool(np.all(d > k * pooled))


def write_report(report: ConvergenceReport, out_dir) -> tuple[Path, Path]:
    """``report.csv`` (grid,error,stderr) and ``report.meta`` (JSON); overwrites."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    csv_path, meta_path = out / "report.csv", out / "report.meta"
    with open(csv_path, "w") as fh:
        fh.write("grid,error,stderr\n")
        for g, e, s in zip(report.grid, report.errors, report.stderrs):
            fh.write(f"{float(g)!r},{float(e)!r},{float(s)!r}\n")
    meta = {
        "parameter": report.parameter,
        "fingerprint": report.fingerprint,
        "config": report.config,
        "slope": None if not report.slope_defined else report.slope,
        "slope_residual": None if not report.slope_defined else report.slope_residual,
        "extra": report.extra,
        "version": __version__,
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")
    return csv_path, meta_path


def read_report(out_dir) -> tuple[np.ndarray, dict]:
    data = np.loadtxt(Path(out_dir) / "report.csv", delimiter=",", skiprows=1, ndmin=2)
    with open(Path(out_dir) / "report.meta") as fh:
        return data, json.load(fh)


# ---------------------------------------------------------------------------
# strong and weak sweeps

def _output_stride(n_steps: int, n_out: int) -> int:
    if n_steps % (n_out - 1):
        raise ConfigurationError(f"{n_steps} steps cannot be split into {n_out - 1} output intervals")
    return n_steps // (n_out - 1)


def strong_error(a: PathEnsemble, b: PathEnsemble):
    """max over saved times of mean |a - b|^2, with the stderr at the maximising time."""
    if a.slow.shape != b.slow.shape or not np.allclose(a.times, b.times):
        raise ConfigurationError("paired ensembles must share paths and output grid")
    sq = np.sum((a.slow - b.slow) ** 2, axis=2)
    mean = sq.mean(axis=0)
    i = int(np.argmax(mean))
    se = float(sq[:, i].std(ddof=1) / np.sqrt(sq.shape[0])) if sq.shape[0] > 1 else 0.0
    return float(mean[i]), se, mean


def strong_convergence(model: ModelSpec, avg: AveragedModel, eps_grid: Sequence[float], T: float,
                       n_paths: int, seed: int, n_out: int = N_OUTPUT_TIMES, threads=None,
                       progress: Callable[[str], None] | None = None) -> ConvergenceReport:
    """Strong error of the slow component against the averaged equation.

    Both runs use dt = eps/50 and the same (seed, path) W1 streams, so the
    averaged path sees exactly the slow noise of the full system.
    """
    if not model.sigma_y_independent:
        raise ConfigurationError("strong comparison needs sigma independent of y")
    errs, ses, curves = [], [], []
    for eps in eps_grid:
        dt = eps / DT_RULE
        stride = _output_stride(int(round(T / dt)), n_out)
        full = simulate_slow_fast(model, eps, T, dt, n_paths, seed, save_every=stride, threads=threads)
        try:
            bar = simulate_averaged(avg, "strong", model.x0, T, dt, n_paths, seed, save_every=stride,
                                    threads=threads)
        except OutOfTableError as err:
            raise OutOfTableError(f"eps={eps!r}: {err}") from None
        e, se, curve = strong_error(full, bar)
        errs.append(e)
        ses.append(se)
        curves.append(curve.tolist())
        if progress:
            progress(f"strong eps={eps:.6g} error={e:.6g} se={se:.3g}")
    cfg = {"kind": "strong", "model": model.model_id, "seed": seed, "n_paths": n_paths, "T": T,
           "eps_grid": [float(e) for e in eps_grid], "dt_rule": f"eps/{DT_RULE}", "n_out": n_out,
           "averaged": avg.provenance}
    return ConvergenceReport("eps", eps_grid, errs, ses, cfg, extra={"curves": curves})


def weak_convergence(model: ModelSpec, avg: AveragedModel, phis: dict[str, Callable], eps_grid: Sequence[float],
                     T: float, n_paths: int, seed: int, dt_avg: float = DT_AVERAGED, threads=None,
                     progress: Callable[[str], None] | None = None) -> ConvergenceReport:
    """max over phi of |E phi(X^eps_T) - E phi(X_T)| with independent noise for the two laws."""
    if not phis:
        raise ConfigurationError("need at least one test function")
    try:
        lim = simulate_averaged(avg, "weak", model.x0, T, dt_avg, n_paths, derive_seed(seed, "limit"),
                                save_every=int(round(T / dt_avg)), threads=threads)
    except OutOfTableError as err:
        raise OutOfTableError(f"limit equation: {err}") from None
    xl = lim.slow[:, -1]
    lim_vals = {k: np.asarray(phi(xl), dtype=float) for k, phi in phis.items()}
    errs, ses, per_phi = [], [], []
    for i, eps in enumerate(eps_grid):
        dt = eps / DT_RULE
        full = simulate_slow_fast(model, eps, T, dt, n_paths, derive_seed(seed, "full", i),
                                  save_every=int(round(T / dt)), threads=threads)
        xf = full.slow[:, -1]
        best = (-1.0, 0.0)
        row = {}
        for k, phi in phis.items():
            a, b = np.asarray(phi(xf), dtype=float), lim_vals[k]
            d = abs(a.mean() - b.mean())
            se = float(np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b)))
            row[k] = [float(d), se]
            if d > best[0]:
                best = (float(d), se)
        errs.append(best[0])
        ses.append(best[1])
        per_phi.append(row)
        if progress:
            progress(f"weak eps={eps:.6g} error={best[0]:.6g} se={best[1]:.3g}")
    cfg = {"kind": "weak", "model": model.model_id, "seed": seed, "n_paths": n_paths, "T": T,
           "eps_grid": [float(e) for e in eps_grid], "dt_rule": f"eps/{DT_RULE}", "dt_averaged": dt_avg,
           "phis": sorted(phis), "averaged": avg.provenance}
    return ConvergenceReport("eps", eps_grid, errs, ses, cfg, extra={"per_phi": per_phi})


# ---------------------------------------------------------------------------
# martingale-problem residual

@dataclass(frozen=True)
class TestFunction:
    name: str
    value: Callable      # (N, n) -> (N,)
    grad: Callable       # (N, n) -> (N, n)
    hess: Callable       # (N, n) -> (N, n, n)


def test_function(name: str, n: int, clip: float = 25.0, component: int = 0) -> TestFunction:
    """Registry: ``quadratic`` = clip * tanh(|x|^2 / clip), ``tanh`` = tanh(x[component])."""
    if name == "quadratic":
        def value(x):
            return clip * np.tanh(np.sum(x * x, axis=1) / clip)

        def grad(x):
            q = np.sum(x * x, axis=1) / clip
            return 2.0 * x / np.cosh(q)[:, None] ** 2

        def hess(x):
            q = np.sum(x * x, axis=1) / clip
            s = 1.0 / np.cosh(q) ** 2
            eye = np.eye(x.shape[1])
            outer = x[:, :, None] * x[:, None, :]
            return 2.0 * s[:, None, None] * eye - (8.0 / clip) * (s * np.tanh(q))[:, None, None] * outer

        return TestFunction(name, value, grad, hess)
    if name == "tanh":
        if not 0 <= component < n:
            raise ConfigurationError("tanh component out of range")

        def value(x):
            return np.tanh(x[:, component])

        def grad(x):
            g = np.zeros_like(x)
            g[:, component] = 1.0 / np.cosh(x[:, component]) ** 2
            return g

        def hess(x):
            h = np.zeros(x.shape + (x.shape[1],))
            th = np.tanh(x[:, component])
            h[:, component, component] = -2.0 * th * (1.0 - th**2)
            return h

        return TestFunction(name, value, grad, hess)
    raise ConfigurationError(f"unknown test function {name!r}; registry is quadratic, tanh")


def generator(avg: AveragedModel, U: TestFunction, x: np.ndarray, Sigma_scale: float = 1.0) -> np.ndarray:
    """L U(x) = <grad U, b_bar> + 1/2 Tr(Sigma_bar Hess U)."""
    if avg.Sigma_bar is None:
        raise ConfigurationError("generator needs Sigma_bar")
    drift = np.sum(U.grad(x) * avg.b_bar(x), axis=1)
    diff = 0.5 * np.einsum("nij,nji->n", avg.Sigma_bar(x), U.hess(x))
    return drift + Sigma_scale * diff


def generator_residual(avg: AveragedModel, U: TestFunction | str, paths: PathEnsemble, t0: float, t: float,
                       Sigma_scale: float = 1.0):
    """E[U(X_t) - U(X_t0) - int_t0^t L U(X_s) ds] (left Riemann sum on the saved grid).

    ``Sigma_scale`` multiplies Sigma_bar in the generator (2.0 gives the
    doubled-Sigma negative control).  Returns ``(residual, stderr)``.
    """
    if isinstance(U, str):
        U = test_function(U, avg.n)
    times = paths.times
    i0 = int(np.argmin(np.abs(times - t0)))
    i1 = int(np.argmin(np.abs(times - t)))
    if abs(times[i0] - t0) > 1e-9 or abs(times[i1] - t) > 1e-9 or i1 < i0:
        raise ConfigurationError("t0 and t must be saved grid points with t0 <= t")
    if i1 == i0:
        return 0.0, 0.0
    integral = np.zeros(paths.n_paths)
    for j in range(i0, i1):
        integral += generator(avg, U, paths.slow[:, j], Sigma_scale) * (times[j + 1] - times[j])
    v = U.value(paths.slow[:, i1]) - U.value(paths.slow[:, i0]) - integral
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


# ---------------------------------------------------------------------------
# moments and increments

def brownian_sup_moment(p: float = 4.0) -> float:
    """E sup_{s<=1} |W_s|^p for standard one-dimensional Brownian motion.

    Uses P(sup |W| < a) = (4/pi) sum_k (-1)^k/(2k+1) exp(-(2k+1)^2 pi^2 / (8 a^2))
    and E M^p = int p a^(p-1) P(M > a) da.
    """
    def cdf(a):
        if a <= 0:
            return 0.0
        if a < 0.3:
            return 0.0 if a < 0.05 else _cdf_series(a)
        return _cdf_series(a)

    def tail(a):
        return p * a ** (p - 1) * (1.0 - cdf(a))

    return float(quad(tail, 0.0, 1.0, limit=200)[0] + quad(tail, 1.0, 12.0, limit=200)[0])


def _cdf_series(a: float) -> float:
    k = np.arange(0, 60)
    terms = (-1.0) ** k / (2 * k + 1) * np.exp(-((2 * k + 1) ** 2) * np.pi**2 / (8 * a * a))
    return float(min(1.0, max(0.0, 4.0 / np.pi * terms.sum())))


def increment_suite(model: ModelSpec, eps: float, T: float, h_grid: Sequence[float], n_paths: int, seed: int,
                    n_starts: int = 3, threads=None) -> ConvergenceReport:
    """E sup_{t<=s<=t+h} |X_s - X_t|^4 (max over start times t) for each h.

    ``extra["ratio"]`` holds error / h^2; a bounded ratio across h is the
    expected behaviour.
    """
    h_grid = [float(h) for h in h_grid]
    if any(h <= 0 or h > T for h in h_grid):
        raise ConfigurationError("h grid must lie in (0, T]")
    dt = eps / DT_RULE
    ens = simulate_slow_fast(model, eps, T, dt, n_paths, seed, threads=threads)
    x = ens.slow
    errs, ses = [], []
    for h in h_grid:
        nh = int(round(h / dt))
        last = len(ens.times) - 1 - nh
        starts = np.unique(np.linspace(0, last, n_starts).round().astype(int))
        best = (-1.0, 0.0)
        for i in starts:
            seg = x[:, i:i + nh + 1] - x[:, i:i + 1]
            v = np.max(np.sum(seg * seg, axis=2), axis=1) ** 2
            m = float(v.mean())
            if m > best[0]:
                best = (m, float(v.std(ddof=1) / np.sqrt(len(v))))
        errs.append(best[0])
        ses.append(best[1])
    ratio = [e / h**2 for e, h in zip(errs, h_grid)]
    cfg = {"kind": "increments", "model": model.model_id, "seed": seed, "n_paths": n_paths, "T": T,
           "eps": eps, "dt_rule": f"eps/{DT_RULE}", "n_starts": n_starts}
    return ConvergenceReport("h", h_grid, errs, ses, cfg,
                             extra={"ratio": ratio, "ratio_spread": max(ratio) / min(ratio) if min(ratio) > 0 else None})


def moment_suite(model: ModelSpec, eps_grid: Sequence[float], T: float, n_paths: int, seed: int,
                 p: float = 4.0, n_out: int = N_OUTPUT_TIMES, threads=None) -> dict:
    """sup_t E|X^eps_t|^p and sup_t E|Y^eps_t|^p for each eps."""
    out = {"eps": [], "slow": [], "slow_se": [], "fast": [], "fast_se": []}
    for eps in eps_grid:
        dt = eps / DT_RULE
        stride = _output_stride(int(round(T / dt)), n_out)
        ens = simulate_slow_fast(model, eps, T, dt, n_paths, seed, save_every=stride, threads=threads)
        out["eps"].append(float(eps))
        for which in ("slow", "fast"):
            _, mean, se = moment_curve(ens, p, which)
            i = int(np.argmax(mean))
            out[which].append(float(mean[i]))
            out[which + "_se"].append(float(se[i]))
    for which in ("slow", "fast"):
        v = np.array(out[which])
        out[which + "_spread"] = float(v.max() / v.min())
    return out
