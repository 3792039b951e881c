import h5py
import numpy as np
import pytest
from scipy.linalg import expm

from pyqme.errors import ConfigurationError, NyquistError
from pyqme.sim.correlation import (
    CorrelationGrid,
    check_nyquist,
    regression_seed_propagate,
    two_time_correlator,
)
from pyqme.sim.hilbert import product_state
from pyqme.sim.lindblad import evolve, liouvillian, unvectorize, vectorize
from pyqme.sim.model import TWO_PI, PulseSchedule, SystemModel, _operators, segment_edges

MHZ = TWO_PI * 1e6
DT = 1e-9
DT_C = 10e-9
TINY = PulseSchedule(0.0, 0.2e-6, 0.0, 0.1e-6, 0.2e-6)


def _oracle_model() -> SystemModel:
    return SystemModel.create(3 * MHZ, epsilon=0.5 * MHZ, n_max=2, schedule=TINY)


def _dense_correlator(model: SystemModel, rho0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """c(t_i, t_j) from matrix exponentials of the piecewise-constant generator."""
    edges = segment_edges(model.schedule)
    gens = [
        (lo, hi, liouvillian(model, 0.5 * (lo + hi)).matrix) for lo, hi in zip(edges[:-1], edges[1:])
    ]

    def flow(v, t0, t1):
        for lo, hi, gen in gens:
            a, b = max(lo, t0), min(hi, t1)
            if b > a:
                v = expm(gen * (b - a)) @ v
        return v

    d = model.spec.dim
    ops = _operators(model.spec)
    n = times.shape[0]
    c = np.zeros((n, n), dtype=np.complex128)
    for j in range(n):
        rho_j = unvectorize(flow(vectorize(rho0), 0.0, times[j]), d)
        seed, t_prev = vectorize(ops["a"] @ rho_j), times[j]
        for i in range(j, n):
            seed, t_prev = flow(seed, t_prev, times[i]), times[i]
            c[i, j] = np.trace(ops["adag"] @ unvectorize(seed, d))
    return np.tril(c) + np.tril(c, -1).conj().T


def _correlate(model: SystemModel, label: str = "+", **kwargs) -> CorrelationGrid:
    rho0 = product_state(model.spec, label)
    stride = int(round(DT_C / DT))
    # n_max = 2 is only an oracle space, so the truncation guard is off
    traj = evolve(model, rho0, dt=DT, store_stride=stride, check_truncation=False)
    return two_time_correlator(model, rho0, dt=DT, dt_c=DT_C, trajectory=traj, **kwargs)


def _validate_grid(grid: CorrelationGrid) -> None:
    """Common assertions for any correlation grid."""
    c = grid.values
    assert c.shape == (grid.n_points, grid.n_points)
    assert np.allclose(c, c.conj().T)
    assert np.all(np.diag(c).imag == 0.0)
    assert np.all(grid.diagonal >= 0.0)
    assert grid.min_kernel_eigenvalue() > -1e-6


# ---------------------------------------------------------------------------
# Regression-theorem correlator
# ---------------------------------------------------------------------------


class TestTwoTimeCorrelator:

    def test_matches_dense_propagation(self):
        m = _oracle_model()
        grid = _correlate(m)
        _validate_grid(grid)
        expected = _dense_correlator(m, product_state(m.spec, "+").matrix, grid.times)
        assert np.max(np.abs(grid.values - expected)) < 1e-6

    def test_diagonal_is_photon_number(self):
        m = _oracle_model()
        rho0 = product_state(m.spec, "-")
        traj = evolve(m, rho0, dt=DT, store_stride=10, check_truncation=False)
        grid = two_time_correlator(m, rho0, dt=DT, dt_c=DT_C, trajectory=traj)
        assert np.allclose(grid.diagonal, traj.photon_number[::10], atol=1e-12)
        assert grid.n_points == 21
        assert grid.model_id == m.model_id

    def test_workers_match_serial(self):
        m = _oracle_model()
        serial = _correlate(m)
        pooled = _correlate(m, num_workers=2)
        assert np.allclose(serial.values, pooled.values, atol=1e-12)

    def test_no_probe_no_correlation(self):
        m = _oracle_model().with_updates(epsilon=0.0)
        grid = _correlate(m)
        assert np.max(np.abs(grid.values)) < 1e-14

    def test_dt_c_must_be_multiple_of_dt(self):
        m = _oracle_model()
        with pytest.raises(ConfigurationError, match="multiple"):
            two_time_correlator(m, product_state(m.spec, "g"), dt=DT, dt_c=2.5e-9)

    def test_dt_c_finer_than_dt(self):
        m = _oracle_model()
        with pytest.raises(ConfigurationError, match="finer"):
            two_time_correlator(m, product_state(m.spec, "g"), dt=DT, dt_c=0.5e-9)

    def test_seed_shape_checked(self):
        with pytest.raises(ValueError):
            regression_seed_propagate(_oracle_model(), np.eye(3), 0.0, 10e-9)

    def test_seed_propagation_is_linear(self):
        m = _oracle_model()
        rng = np.random.default_rng(7)
        d = m.spec.dim
        s1, s2 = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)) for _ in range(2))
        alpha = 0.3 - 1.7j
        out1 = regression_seed_propagate(m, s1, 20e-9, 150e-9)
        out2 = regression_seed_propagate(m, s2, 20e-9, 150e-9)
        combined = regression_seed_propagate(m, alpha * s1 + s2, 20e-9, 150e-9)
        assert np.max(np.abs(combined - (alpha * out1 + out2))) <= 1e-10 * np.max(np.abs(combined))


class TestNyquist:

    def test_edge_of_band_accepted(self):
        check_nyquist(25e-9, 20e6)

    def test_coarse_grid_rejected(self):
        with pytest.raises(NyquistError, match="cannot resolve"):
            check_nyquist(25e-9, 25e6)

    def test_correlator_checks_band(self):
        m = _oracle_model()
        with pytest.raises(NyquistError):
            two_time_correlator(m, product_state(m.spec, "g"), dt=DT, dt_c=DT_C, f_span=60e6)


class TestGridOutput:

    def test_frame(self):
        grid = _correlate(_oracle_model())
        frame = grid.to_frame()
        assert frame.columns == ["t1_s", "t2_s", "re_c", "im_c"]
        assert frame.shape[0] == grid.n_points**2

    def test_write_hdf(self, tmp_path):
        grid = _correlate(_oracle_model())
        path = tmp_path / "corr.h5"
        grid.write_hdf(path)
        with pytest.raises(FileExistsError):
            grid.write_hdf(path)
        with h5py.File(path, "r") as hf:
            assert hf["correlation"].attrs["dt_c"] == pytest.approx(DT_C)
            assert np.allclose(hf["correlation/values"][()], grid.values)
