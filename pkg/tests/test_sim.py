import math

import numpy as np
import pytest

from conftest import scaled_f_system
from oracles import var_y_constant
from qvtool.errors import ConfigurationError, DataError
from qvtool.fields import ScalarField
from qvtool.model import SystemSpec, constant_system, psi_true
from qvtool.sim import (PathPair, TimeGrid, derivative_oracle, derive_seed, load_path,
                        normal_stream, realized_qv_oracle, simulate, simulate_batch)


def test_grid_rules():
    g = TimeGrid.default(1.0, 0.01)
    assert g.N == 10000 and g.h == pytest.approx(1e-4)
    with pytest.raises(ConfigurationError):
        TimeGrid(1.0, 1)


def test_normal_stream_blocks_are_slices_of_the_full_stream():
    full = normal_stream(11, 0, 40)
    for start in (0, 1, 2, 3, 7, 13):
        assert np.array_equal(normal_stream(11, 0, 10, start), full[start:start + 10])


def test_streams_are_independent():
    v = normal_stream(3, 0, 10 ** 6)
    w = normal_stream(3, 1, 10 ** 6)
    assert abs(np.corrcoef(v, w)[0, 1]) < 0.01
    assert abs(v.std() - 1) < 0.005


def test_derive_seed_is_deterministic_and_distinct():
    assert derive_seed(5, 0, 1) == derive_seed(5, 0, 1)
    assert len({derive_seed(5, i, r) for i in range(3) for r in range(50)}) == 150


def test_zero_noise_zero_volatility_gives_zero_paths():
    pp = simulate(constant_system(b=0.0, eps=0.0), TimeGrid(1.0, 100), 1)
    assert np.all(pp.Y == 0) and np.all(pp.X == 0)


def test_noiseless_observation_is_riemann_sum():
    spec = SystemSpec(1.0, 1.0, ScalarField.linear(1.0, 2.0), 1.0, eps=0.0)
    g = TimeGrid(1.0, 500)
    pp = simulate(spec, g, 4)
    riemann = np.concatenate([[0.0], np.cumsum(spec.f(g.times[:-1]) * pp.Y[:-1] * g.h)])
    assert np.array_equal(pp.X, riemann)


def test_paths_start_at_zero_and_reproduce_bitwise():
    spec = constant_system(eps=0.1)
    g = TimeGrid(1.0, 200)
    a, b = simulate(spec, g, 99), simulate(spec, g, 99)
    assert a.Y[0] == 0 and a.X[0] == 0
    assert a.Y.tobytes() == b.Y.tobytes() and a.X.tobytes() == b.X.tobytes()


def test_batch_rows_do_not_depend_on_batch_composition():
    spec = constant_system(eps=0.1)
    g = TimeGrid(1.0, 200)
    batch = simulate_batch(spec, g, [5, 6, 7])
    assert np.array_equal(batch.X[1], simulate(spec, g, 6).X)


def test_parametric_spec_without_truth_is_rejected():
    import dataclasses
    from qvtool.model import ThetaBounds
    spec = dataclasses.replace(scaled_f_system(), theta=ThetaBounds(0.5, 2.0))
    with pytest.raises(ConfigurationError):
        simulate(spec, TimeGrid(1.0, 100), 0)


def test_terminal_variance_matches_ou_variance():
    spec = constant_system(eps=0.1)
    g = TimeGrid(1.0, 200)
    yT = simulate_batch(spec, g, range(10000)).Y[:, -1]
    v = var_y_constant(1, 1, 1.0)
    se = v * math.sqrt(2 / (len(yT) - 1))
    assert abs(yT.var(ddof=1) - v) < 3 * se + 2 * g.h  # Euler bias is O(h)


def test_strong_error_under_refinement_is_small():
    spec = constant_system(eps=0.1)
    coarse, fine = TimeGrid(1.0, 500), TimeGrid(1.0, 1000)
    seeds = range(100)
    # reuse the fine increments on the coarse grid by summing pairs
    ff = simulate_batch(spec, fine, seeds)
    from qvtool.sim import STREAM_V
    Yc = np.zeros((100, coarse.N + 1))
    for j, s in enumerate(seeds):
        dv = math.sqrt(fine.h) * normal_stream(s, STREAM_V, fine.N)
        dvc = dv[0::2] + dv[1::2]
        for k in range(coarse.N):
            Yc[j, k + 1] = (1 - coarse.h) * Yc[j, k] + dvc[k]
    rms = np.sqrt(np.mean((Yc[:, -1] - ff.Y[:, -1]) ** 2))
    assert rms < math.sqrt(coarse.h)


def test_derivative_oracle():
    g = TimeGrid(1.0, 100)
    pp = simulate(constant_system(eps=0.1), g, 2)
    assert np.array_equal(derivative_oracle(pp, constant_system()), pp.Y)
    assert np.all(derivative_oracle(pp, constant_system(f=0.0)) == 0)
    spec = SystemSpec(1.0, 1.0, ScalarField.linear(0.0, 1.0), 1.0, eps=0.1)
    pp = simulate(spec, g, 7)
    assert np.array_equal(derivative_oracle(pp, spec), g.times * pp.Y)


def test_derivative_oracle_needs_hidden_state():
    pp = PathPair(TimeGrid(1.0, 10), None, np.zeros(11))
    with pytest.raises(DataError):
        derivative_oracle(pp, constant_system())


def test_realized_qv_of_smooth_path_vanishes_with_h():
    spec = constant_system(a=0.0, b=0.0, eps=0.0)
    g = TimeGrid(1.0, 100)
    pp = PathPair(g, np.sin(g.times), np.zeros(g.N + 1))
    q1 = realized_qv_oracle(pp, spec, 0.5)
    g2 = TimeGrid(1.0, 200)
    q2 = realized_qv_oracle(PathPair(g2, np.sin(g2.times), np.zeros(g2.N + 1)), spec, 0.5)
    assert q2 / q1 == pytest.approx(0.5, rel=0.02)


def test_realized_qv_near_target():
    spec = constant_system(eps=0.01)
    g = TimeGrid(1.0, 10000)
    q = realized_qv_oracle(simulate_batch(spec, g, range(20)), spec, 0.5)
    assert abs(np.mean(q) - psi_true(spec, 0.5)) < 0.05 * 0.5


def test_csv_and_binary_round_trip(tmp_path):
    pp = simulate(constant_system(eps=0.1), TimeGrid(1.0, 50), 3)
    pp.to_csv(tmp_path / "p.csv")
    pp.to_binary(tmp_path / "p.bin")
    for name in ("p.csv", "p.bin"):
        back = load_path(tmp_path / name)
        assert np.array_equal(back.X, pp.X) and np.array_equal(back.Y, pp.Y)
        assert back.grid.N == 50
    assert (tmp_path / "p.bin").read_bytes()[:4] == b"QVP1"
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "t,Y,X"


def test_load_rejects_non_uniform_times(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,Y,X\n0,0,0\n0.1,0,0\n0.3,0,0\n")
    with pytest.raises(DataError):
        load_path(p)
