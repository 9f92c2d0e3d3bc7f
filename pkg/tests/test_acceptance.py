"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import itertools
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from cli_cases import SMALL
from conftest import record_criterion
from sfal.averaging import averaged_drift, psd_sqrt, simulate_averaged, tabulate_averaged
from sfal.cli import parse_and_dispatch
from sfal.coupling import CouplingConfig, fit_decay_rate, simulate_coupled, theoretical_beta
from sfal.ergodics import check_evolution_property, invariant_measure
from sfal.experiments import generator_residual, increment_suite, moment_suite, strong_convergence, weak_convergence
from sfal.khasminskii import BlockSchedule, auxiliary_path, default_delta, gap_functional
from sfal.sde import simulate_slow_fast
from sfal.wasserstein import w1_exact_1d, w1_exact_assignment

POW2 = [2.0**-k for k in range(2, 9)]


def report(k, ok, detail):
    record_criterion(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def test_criterion_1_strong_rate(ou):
    t0 = time.perf_counter()
    avg = tabulate_averaged(ou, np.linspace(-6, 8, 29), n_samples=4000, seed=0, burn_in=20)
    rep = strong_convergence(ou, avg, POW2, 1.0, 2000, seed=0)
    elapsed = time.perf_counter() - t0
    dec = rep.decreasing_beyond_noise()
    ok = dec and rep.slope >= 0.33 and elapsed <= 300
    errs = ", ".join(f"{e:.4g}" for e in rep.errors)
    assert report(1, ok, f"strong ou-lin slope={rep.slope:.3f} (>=0.33) decreasing={dec} "
                         f"runtime={elapsed:.0f}s (<=300) errors=[{errs}]")


def test_criterion_2_coupling(ou):
    t0 = time.perf_counter()
    k = theoretical_beta(ou.dissipativity)
    cfg = CouplingConfig(delta=1e-3, dt=1e-4, T=5.0, n_paths=1000, x1=ou.x0, x2=ou.x0, y1=[2.0], y2=[-2.0],
                         save_every=100)
    tr = simulate_coupled(ou, cfg, seed=1)
    mean, _ = tr.mean_h()
    rate, n_fit = fit_decay_rate(tr.times, mean)
    rate_ok = rate >= 0.5 * k.beta

    late = {}
    for dx in (0.1, 0.2, 0.4):
        c = CouplingConfig(delta=1e-3, dt=1e-4, T=8.0, n_paths=600, x1=[-dx / 2], x2=[dx / 2], y1=[0.0],
                           y2=[0.0], save_every=100)
        t = simulate_coupled(ou, c, seed=2)
        late[dx] = t.h_dist[:, t.times >= 4.0].mean(axis=1)
    finite = all(np.isfinite(v).all() for v in late.values())
    steps = []
    for a, b in ((0.1, 0.2), (0.2, 0.4)):
        d = late[b] - late[a]
        steps.append((d.mean(), d.std(ddof=1) / np.sqrt(len(d))))
    mono = all(m > 2 * s for m, s in steps)
    elapsed = time.perf_counter() - t0
    ok = rate_ok and finite and mono and elapsed <= 120
    plateaus = ", ".join(f"{v.mean():.4f}" for v in late.values())
    assert report(2, ok, f"coupling rate={rate:.3f} >= 0.5*beta={0.5 * k.beta:.4f} ({n_fit} pts); "
                         f"plateaus dx=0.1,0.2,0.4: [{plateaus}] paired steps "
                         + ", ".join(f"{m:.4f}+-{s:.4f}" for m, s in steps)
                         + f"; runtime={elapsed:.0f}s (<=120)")


def test_criterion_3_evolution_property(ou):
    res = check_evolution_property(ou, [0.5], 1.0, 2.0, phis={"tanh": lambda y: np.tanh(y[:, 0])}, n=10000, seed=3)
    r, se = float(res.residual[0]), float(res.stderr[0])
    assert report(3, abs(r) <= 3 * se, f"evolution property tanh t-s=1 residual={r:.5f} stderr={se:.5f} (<=3 se)")


def _dw_oracle(x):
    dens = lambda y: np.exp(y * y - y**4 / 2 + 2 * x * y)
    return quad(lambda y: (y - x) * dens(y), -8, 8)[0] / quad(dens, -8, 8)[0]


def test_criterion_4_averaged_drift(ou, dw):
    lines, ok = [], True
    for x in (-1.0, 0.0, 2.0):
        mu = invariant_measure(ou, [x], burn_in=20, n_samples=4000, seed=4)
        v, se = averaged_drift(ou, [x], mu)
        good = abs(v[0] - x / 2) <= 3 * se[0]
        ok &= good
        lines.append(f"ou x={x:g}: {v[0]:.4f} vs {x / 2:g} (se {se[0]:.4f})")
    for x in (0.0, 0.5):
        mu = invariant_measure(dw, [x], n_samples=8000, seed=5)
        v, se = averaged_drift(dw, [x], mu)
        oracle = _dw_oracle(x)
        good = abs(v[0] - oracle) <= 3 * se[0]
        if x == 0.0:
            good &= abs(v[0]) <= 3 * se[0] and abs(oracle) < 1e-12
        ok &= good
        lines.append(f"dw x={x:g}: {v[0]:.4f} vs quad {oracle:.4f} (se {se[0]:.4f})")
    assert report(4, ok, "averaged drift oracles; " + "; ".join(lines))


def test_criterion_5_psd_sqrt():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        G = rng.normal(size=(4, rng.integers(1, 5)))
        S = G @ G.T
        R = psd_sqrt(S)
        worst = max(worst, np.linalg.norm(R @ R - S) / np.linalg.norm(S))
    gamma, lip = 0.5, 0.0
    for _ in range(1000):
        A = rng.normal(size=(4, 4))
        B = A + rng.normal(size=(4, 4)) * 10.0 ** rng.uniform(-4, 0)
        A, B = A @ A.T + gamma * np.eye(4), B @ B.T + gamma * np.eye(4)
        lhs = np.linalg.norm(psd_sqrt(A) - psd_sqrt(B), 2)
        lip = max(lip, lhs / (np.linalg.norm(A - B, 2) / (2 * gamma)))
    ok = worst <= 1e-10 and lip <= 1.0 + 1e-9
    assert report(5, ok, f"psd sqrt worst rel Frobenius={worst:.2e} (<=1e-10); "
                         f"max |sqrtA-sqrtB| / (|A-B|/(2 gamma))={lip:.4f} (<=1)")


def test_criterion_6_w1_solvers():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        a, b = rng.normal(size=128) * 2, rng.standard_t(3, size=128) + 1
        worst = max(worst, abs(w1_exact_assignment(a, b) - w1_exact_1d(a, b)))
    brute_ok = True
    for _ in range(100):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        brute = min(float(cost[np.arange(3), list(p)].mean()) for p in itertools.permutations(range(3)))
        brute_ok &= w1_exact_assignment(a, b) == brute
    ok = worst <= 1e-9 and brute_ok
    assert report(6, ok, f"W1 assignment vs sorted worst={worst:.2e} (<=1e-9); N=3 brute force exact={brute_ok}")


def test_criterion_7_moments(ou):
    mom = moment_suite(ou, POW2, 1.0, 2000, seed=7)
    inc = increment_suite(ou, 2.0**-6, 1.0, [0.04, 0.02, 0.01], 2000, seed=7)
    spread = inc.extra["ratio_spread"]
    ok = mom["slow_spread"] <= 3 and mom["fast_spread"] <= 3 and spread <= 5
    ratios = ", ".join(f"{r:.3f}" for r in inc.extra["ratio"])
    assert report(7, ok, f"moment spread slow={mom['slow_spread']:.3f} fast={mom['fast_spread']:.3f} (<=3); "
                         f"increment ratio error/h^2=[{ratios}] spread={spread:.3f} (<=5)")


def test_criterion_8_khasminskii(ou):
    eps, dt, T = 0.01, 2e-4, 1.0
    ens = simulate_slow_fast(ou, eps, T, dt, 500, seed=8, record_increments=True)
    d = default_delta(eps, dt)
    big = gap_functional(ou, eps, BlockSchedule(d, T), ens)
    small = gap_functional(ou, eps, BlockSchedule(d / 4, T), ens)
    ratio = big.value / small.value
    zero_y = gap_functional(ou, eps, BlockSchedule(d, T), ens, F="x").value
    step = BlockSchedule(dt, T)
    zero_dt = gap_functional(ou, eps, step, ens).value
    same = np.array_equal(auxiliary_path(ou, eps, step, ens).y_aux, ens.fast)
    ok = ratio >= 1.6 and zero_y == 0.0 and zero_dt == 0.0 and same
    assert report(8, ok, f"khasminskii gap delta={d:.4g}: {big.value:.3e}+-{big.stderr:.1e}, delta/4: "
                         f"{small.value:.3e}+-{small.stderr:.1e}, ratio={ratio:.2f} (>=1.6); "
                         f"y-free F gap={zero_y}, delta=dt gap={zero_dt}, identical paths={same}")


def test_criterion_9_weak(pw):
    avg = tabulate_averaged(pw, np.linspace(-6, 6, 25), n_samples=8000, seed=0, burn_in=20)
    rep = weak_convergence(pw, avg, {"tanh": lambda x: np.tanh(x[:, 0])}, [2.0**-2, 2.0**-8], 1.0, 20000, seed=9)
    e0, e1 = rep.errors
    pooled = float(np.hypot(*rep.stderrs))
    weak_ok = 0.5 * e0 - e1 > pooled
    lim = simulate_averaged(avg, "weak", pw.x0, 1.0, 1e-3, 20000, seed=10)
    lines, gen_ok = [], True
    for U in ("quadratic", "tanh"):
        r, se = generator_residual(avg, U, lim, 0.0, 1.0)
        gen_ok &= abs(r) <= 3 * se
        lines.append(f"{U} {r:.4f}+-{se:.4f}")
    rc, sc = generator_residual(avg, "quadratic", lim, 0.0, 1.0, Sigma_scale=2.0)
    ctrl_ok = abs(rc) >= 5 * sc
    ok = weak_ok and gen_ok and ctrl_ok
    assert report(9, ok, f"weak periodic-weak err(2^-2)={e0:.4f} err(2^-8)={e1:.4f} pooled se={pooled:.4f}; "
                         f"generator residual {', '.join(lines)} (<=3 se); "
                         f"doubled-Sigma control z={abs(rc) / sc:.1f} (>=5)")


def test_criterion_10_cli_determinism(tmp_path, monkeypatch):
    bad = []
    for name, args in SMALL.items():
        a, b = tmp_path / name / "a", tmp_path / name / "b"
        a.mkdir(parents=True)
        b.mkdir()
        monkeypatch.chdir(a)
        assert parse_and_dispatch([name, *args, "--out", "res", "--threads", "1"], {}) == 0, name
        shutil.copy(a / "res" / "manifest.json", b / "manifest.json")
        monkeypatch.chdir(b)
        assert parse_and_dispatch([name, "--config", "manifest.json", "--threads", "3"], {}) == 0, name
        files_a = sorted(p.name for p in (a / "res").iterdir())
        files_b = sorted(p.name for p in (b / "res").iterdir())
        if files_a != files_b or any((a / "res" / f).read_bytes() != (b / "res" / f).read_bytes() for f in files_a):
            bad.append(name)
    assert report(10, not bad, f"CLI manifest reruns byte-identical across thread counts for "
                               f"{len(SMALL) - len(bad)}/{len(SMALL)} subcommands"
                               + (f" (differ: {bad})" if bad else ""))
