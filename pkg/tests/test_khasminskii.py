import csv

import numpy as np
import pytest

from sfal.khasminskii import (BlockSchedule, auxiliary_path, default_delta, export_csv, gap_functional,
                              integrand, sup_block_gap, weight)
from sfal.models import ConfigurationError
from sfal.sde import fast_update, simulate_slow_fast

EPS, DT, T = 0.01, 2e-4, 0.4


@pytest.fixture(scope="module")
def driving():
    from sfal.models import ou_lin
    model = ou_lin()
    return model, simulate_slow_fast(model, EPS, T, DT, 64, seed=5, record_increments=True)


def test_schedule_floor_and_starts():
    s = BlockSchedule(0.1, 0.45)
    assert np.allclose(s.starts, [0.0, 0.1, 0.2, 0.3, 0.4])
    assert np.allclose(s.floor([0.0, 0.099, 0.1, 0.25]), [0.0, 0.0, 0.1, 0.2])
    assert s.steps_per_block(0.01) == 10
    with pytest.raises(ConfigurationError):
        s.steps_per_block(0.03)
    with pytest.raises(ConfigurationError):
        BlockSchedule(1.0, 0.5)
    with pytest.raises(ConfigurationError):
        BlockSchedule(0.0, 0.5)


def test_default_delta_is_grid_multiple():
    d = default_delta(0.01, 2e-4)
    assert d <= 0.01 ** (2 / 3) and abs(d / 2e-4 - round(d / 2e-4)) < 1e-9
    assert default_delta(1e-4, 1.0) == 1.0


def test_restart_identity_at_block_starts(driving):
    model, ens = driving
    sched = BlockSchedule(40 * DT, T)
    aux = auxiliary_path(model, EPS, sched, ens)
    idx = np.arange(0, len(ens.times), 40)
    assert np.array_equal(aux.y_aux[:, idx], ens.fast[:, idx])


def test_noise_sharing_audit(driving):
    # rebuild the first block by hand from the stored increments and frozen slow value
    model, ens = driving
    k = 25
    aux = auxiliary_path(model, EPS, BlockSchedule(k * DT, T), ens)
    y = ens.fast[:, 0].copy()
    for j in range(k - 1):
        y = fast_update(y, model.f(j * DT / EPS, ens.slow[:, 0], y), EPS, DT, ens.dW2[:, j])
        assert np.max(np.abs(y - aux.y_aux[:, j + 1])) <= 1e-12


def test_delta_equal_dt_gives_true_path(driving):
    model, ens = driving
    sched = BlockSchedule(DT, T)
    aux = auxiliary_path(model, EPS, sched, ens)
    assert np.array_equal(aux.y_aux, ens.fast)
    assert gap_functional(model, EPS, sched, ens, aux=aux).value == 0.0


def test_slow_free_fast_drift_is_exact():
    from sfal.models import ou_lin
    model = ou_lin().replace(f=lambda t, x, y: -y + 0 * x)
    ens = simulate_slow_fast(model, EPS, T, DT, 16, seed=1, record_increments=True)
    aux = auxiliary_path(model, EPS, BlockSchedule(50 * DT, T), ens)
    assert np.array_equal(aux.y_aux, ens.fast)
    assert aux.sup_gap.max() == 0.0


def test_y_free_integrand_and_zero_weight(driving):
    model, ens = driving
    sched = BlockSchedule(50 * DT, T)
    g = gap_functional(model, EPS, sched, ens, F="x")
    assert g.value == 0.0 and np.all(g.per_path == 0.0)
    assert gap_functional(model, EPS, sched, ens, Z="zero").value == 0.0


def test_sup_gap_monotone_in_delta(driving):
    model, ens = driving
    gaps = [sup_block_gap(auxiliary_path(model, EPS, BlockSchedule(k * DT, T), ens))[0] for k in (400, 100, 25)]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_gap_shrinks_with_delta(driving):
    model, ens = driving
    big = gap_functional(model, EPS, BlockSchedule(200 * DT, T), ens)
    small = gap_functional(model, EPS, BlockSchedule(25 * DT, T), ens)
    assert small.value < big.value
    assert big.scale == pytest.approx(np.sqrt(200 * DT))
    assert np.isfinite(big.calibrated_c)


def test_requires_recorded_increments(ou):
    ens = simulate_slow_fast(ou, EPS, 0.02, DT, 2, seed=0)
    with pytest.raises(ConfigurationError):
        auxiliary_path(ou, EPS, BlockSchedule(10 * DT, 0.02), ens)
    coarse = simulate_slow_fast(ou, EPS, 0.02, DT, 2, seed=0, save_every=2, record_increments=True)
    with pytest.raises(ConfigurationError):
        auxiliary_path(ou, EPS, BlockSchedule(10 * DT, 0.02), coarse)


def test_misaligned_delta_and_horizon(driving):
    model, ens = driving
    with pytest.raises(ConfigurationError):
        auxiliary_path(model, EPS, BlockSchedule(2.5 * DT, T), ens)
    with pytest.raises(ConfigurationError):
        auxiliary_path(model, EPS, BlockSchedule(10 * DT, T / 2), ens)


def test_registries(ou):
    x, y = np.array([[1.0], [7.0]]), np.array([[0.5], [2.0]])
    assert np.allclose(integrand(ou, "tanh_y")(0.0, x, y), np.tanh([0.5, 2.0]))
    assert np.allclose(weight("clip_abs", x), [1.0, 5.0])
    assert np.allclose(weight("tanh", x), np.tanh([1.0, 7.0]))
    with pytest.raises(ConfigurationError):
        weight("lambda", x)
    with pytest.raises(ConfigurationError):
        integrand(ou, "nope")


def test_export_csv(driving, tmp_path):
    model, ens = driving
    aux = auxiliary_path(model, EPS, BlockSchedule(50 * DT, T), ens)
    export_csv(tmp_path / "k.csv", ens, aux, every=500)
    rows = list(csv.reader(open(tmp_path / "k.csv")))
    assert rows[0] == ["path", "time", "y_true", "y_aux", "gap"]
    assert len(rows) == 1 + 64 * 5
    for r in rows[1:]:
        assert float(r[4]) == pytest.approx(abs(float(r[2]) - float(r[3])))
