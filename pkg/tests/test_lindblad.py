import math

import h5py
import numpy as np
import polars as pl
import pytest
from scipy.linalg import expm

from pyqme.errors import ConfigurationError, StateInvariantError, TruncationError
from pyqme.sim.hilbert import product_state
from pyqme.sim.lindblad import (
    CSV_COLUMNS,
    TRAJECTORY_SCHEMA,
    StateTrajectory,
    evolve,
    expectation_series,
    liouvillian,
    propagate,
    unvectorize,
    vectorize,
)
from pyqme.sim.model import TWO_PI, PulseSchedule, SystemModel, _operators

MHZ = TWO_PI * 1e6
SHORT = PulseSchedule(0.0, 0.5e-6, 0.0, 0.3e-6, 0.5e-6)


def _small_model(omega=0.0, epsilon=0.0, n_max=4, **kwargs) -> SystemModel:
    return SystemModel.create(omega, epsilon=epsilon, n_max=n_max, schedule=SHORT, **kwargs)


def _random_run(seed: int) -> StateTrajectory:
    # drive and dispersive shift up to twice the device values
    rng = np.random.default_rng(seed)
    m = SystemModel.create(
        rng.uniform(0, 14) * MHZ,
        epsilon=rng.uniform(0, 0.3) * MHZ,
        n_max=6,
        chi=-rng.uniform(2, 8) * MHZ,
        schedule=SHORT,
    )
    label = ["g", "e", "+", "-"][seed % 4]
    return evolve(m, product_state(m.spec, label), store_stride=25)


def _validate_trajectory(traj: StateTrajectory) -> None:
    """Common assertions for any trajectory."""
    assert isinstance(traj.observables, pl.DataFrame)
    assert traj.observables.columns == list(TRAJECTORY_SCHEMA)
    assert np.all(np.diff(traj.fine_times) > 0)
    assert np.allclose(traj.observables["re_tr"].to_numpy(), 1.0, atol=1e-6)
    assert traj.states.shape[1:] == (traj.model.spec.dim, traj.model.spec.dim)
    for rho in traj.states:
        assert np.allclose(rho, rho.conj().T, atol=1e-6)
        assert np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0] > -1e-6


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


class TestGenerator:

    def test_vectorize_column_major(self):
        m = np.arange(9, dtype=np.complex128).reshape(3, 3)
        v = vectorize(m)
        assert np.allclose(v[:3], m[:, 0])
        assert np.allclose(unvectorize(v, 3), m)

    def test_liouvillian_preserves_trace(self):
        m = _small_model(3 * MHZ, MHZ, n_max=2)
        gen = liouvillian(m, 0.1e-6)
        rho = product_state(m.spec, "+", 1).matrix
        assert abs(np.trace(gen.apply(rho))) < 1e-6 * np.max(np.abs(gen.matrix))

    def test_rk4_matches_matrix_exponential(self):
        m = _small_model(3 * MHZ, MHZ, n_max=2)
        rho0 = product_state(m.spec, "+", 0).matrix
        t = 0.2e-6  # probe and drive both on
        gen = liouvillian(m, 0.5 * t)
        exact = unvectorize(expm(gen.matrix * t) @ vectorize(rho0), m.spec.dim)
        assert np.max(np.abs(propagate(m, rho0, 0.0, t) - exact)) < 1e-7

    def test_propagate_rejects_backwards(self):
        m = _small_model()
        with pytest.raises(ValueError):
            propagate(m, product_state(m.spec, "g").matrix, 0.2e-6, 0.1e-6)


# ---------------------------------------------------------------------------
# Closed-form dynamics
# ---------------------------------------------------------------------------


class TestClosedForm:

    def test_rabi_oscillation(self):
        omega = 2 * MHZ
        m = _small_model(omega, decoherence_enabled=False)
        traj = evolve(m, product_state(m.spec, "g"), store_stride=0)
        _validate_trajectory(traj)
        t = traj.fine_times
        sz = traj.observables["sz_exp"].to_numpy()
        assert np.max(np.abs(sz + np.cos(omega * t))) < 1e-6

    def test_energy_relaxation(self):
        m = _small_model()
        traj = evolve(m, product_state(m.spec, "e"), store_stride=0)
        t = traj.fine_times
        p_e = 0.5 * (1.0 + traj.observables["sz_exp"].to_numpy())
        assert np.max(np.abs(p_e - np.exp(-t / m.t1))) < 1e-6

    def test_ramsey_decay(self):
        m = _small_model()
        traj = evolve(m, product_state(m.spec, "+"), store_stride=0)
        t = traj.fine_times
        coh = traj.observables["coh_ge_abs"].to_numpy()
        assert np.max(np.abs(coh - 0.5 * np.exp(-t / m.t2_star))) < 1e-6

    def test_coherent_cavity_response(self):
        eps = MHZ
        m = _small_model(0.0, eps, decoherence_enabled=False)
        traj = evolve(m, product_state(m.spec, "g"), store_stride=0)
        # qubit in |g>: H = -chi n + eps (a + a^dag)
        rate = 1j * m.chi - 0.5 * m.kappa
        t = traj.fine_times
        during = t <= SHORT.probe_end
        alpha = (1j * eps / rate) * (1.0 - np.exp(rate * t[during]))
        assert np.max(np.abs(traj.cavity_field[during] - alpha)) < 1e-6 * np.max(np.abs(alpha))
        assert np.allclose(traj.photon_number[during], np.abs(alpha) ** 2, rtol=1e-5, atol=1e-12)


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------


class TestConvergence:

    def test_halving_step_changes_observables_below_tolerance(self):
        m = _small_model(3 * MHZ, MHZ)
        rho0 = product_state(m.spec, "+")
        coarse = evolve(m, rho0, dt=1e-9, store_stride=0).observables
        fine = evolve(m, rho0, dt=0.5e-9, store_stride=0).observables
        assert 2 * (coarse.shape[0] - 1) == fine.shape[0] - 1
        for name in list(TRAJECTORY_SCHEMA)[1:]:
            gap = np.max(np.abs(coarse[name].to_numpy() - fine[name].to_numpy()[::2]))
            assert gap <= 1e-6, name

    def test_purity_without_dissipation(self):
        m = _small_model(3 * MHZ, 0.5 * MHZ, n_max=3, kappa=0.0, decoherence_enabled=False)
        traj = evolve(m, product_state(m.spec, "+"), store_stride=50, check_truncation=False)
        purity = np.einsum("kij,kji->k", traj.states, traj.states).real
        assert np.max(np.abs(purity - 1.0)) <= 1e-8


# ---------------------------------------------------------------------------
# Invariants and storage
# ---------------------------------------------------------------------------


class TestEvolve:

    @pytest.mark.parametrize("seed", range(5))
    def test_random_parameters_stay_physical(self, seed):
        _validate_trajectory(_random_run(seed))

    def test_hundred_random_scenarios(self, slow):
        for seed in range(100):
            _validate_trajectory(_random_run(seed))

    def test_store_stride(self):
        m = _small_model()
        traj = evolve(m, product_state(m.spec, "g"), store_stride=100)
        assert len(traj) == 6
        assert np.allclose(traj.times, np.arange(6) * 100e-9)
        assert traj.state_at(0.3e-6).time == pytest.approx(0.3e-6)
        with pytest.raises(ValueError):
            traj.state_at(0.25e-6)

    def test_progress_bar_advances_per_step(self):
        class Bar:
            count = 0

            def update(self, n):
                self.count += n

        m = _small_model()
        bar = Bar()
        evolve(m, product_state(m.spec, "g"), store_stride=0, progress=bar)
        assert bar.count == 500

    def test_store_stride_must_divide(self):
        m = _small_model()
        with pytest.raises(ConfigurationError, match="store_stride"):
            evolve(m, product_state(m.spec, "g"), store_stride=7)

    def test_endpoints_only(self):
        m = _small_model()
        traj = evolve(m, product_state(m.spec, "g"), store_stride=0)
        assert len(traj) == 2
        assert traj.final_state.time == pytest.approx(SHORT.record_duration)
        assert traj.observables.shape[0] == 501

    def test_shape_mismatch(self):
        m = _small_model()
        with pytest.raises(ValueError):
            evolve(m, np.eye(4) / 4)

    def test_unphysical_initial_state(self):
        m = _small_model()
        rho = product_state(m.spec, "g").matrix * 2.0
        with pytest.raises(StateInvariantError):
            evolve(m, rho)

    def test_truncation_guard(self):
        m = _small_model(0.0, 10 * MHZ, n_max=1, decoherence_enabled=False)
        with pytest.raises(TruncationError, match="n_max"):
            evolve(m, product_state(m.spec, "g"))

    def test_expectation_series_matches_observables(self):
        m = _small_model(3 * MHZ, 0.5 * MHZ)
        traj = evolve(m, product_state(m.spec, "+"), store_stride=50)
        n = expectation_series(traj, _operators(m.spec)["n"])
        assert np.allclose(n, traj.photon_number[::50])
        a = expectation_series(traj, _operators(m.spec)["a"])
        assert np.iscomplexobj(a)
        assert np.allclose(a, traj.cavity_field[::50])

    def test_write_csv(self, tmp_path):
        m = _small_model()
        traj = evolve(m, product_state(m.spec, "g"), store_stride=0)
        path = tmp_path / "traj.csv"
        traj.write_csv(path)
        frame = pl.read_csv(path)
        assert frame.columns == CSV_COLUMNS
        assert frame.shape[0] == 501

    def test_write_hdf(self, tmp_path):
        m = _small_model()
        traj = evolve(m, product_state(m.spec, "g"), store_stride=100)
        path = tmp_path / "traj.h5"
        traj.write_hdf(path)
        with pytest.raises(FileExistsError):
            traj.write_hdf(path)
        traj.write_hdf(path, overwrite=True)
        with h5py.File(path, "r") as hf:
            assert hf["trajectory"].attrs["model_id"] == m.model_id
            assert hf["trajectory/states"].shape == (6, m.spec.dim, m.spec.dim)
