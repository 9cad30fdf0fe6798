import math

from hypothesis import given, strategies as st
import numpy as np
import pytest

from cslkit.ensemble import chunk_bounds, run_ensemble
from cslkit.errors import GridMismatch, StepTooLarge
from cslkit.io import read_csv
from cslkit.lattice import (
    CslParams,
    Grid1D,
    Hamiltonian,
    Wavefunction,
    energy,
    gaussian_kernel,
    gaussian_packet,
    two_gaussian_state,
)
from cslkit.master import decay_rate
from cslkit.rng import streams, trajectory_stream
from cslkit.sde import (
    NOISE_BLOCK,
    CollapseStepper,
    NoiseField,
    TrajectoryConfig,
    collapse_drift_potential,
    csl_step,
    run_trajectory,
    sample_noise,
    smeared_noise_potential,
)
from cslkit.stats import RegionSpec, born_experiment, born_grid

GRID = Grid1D(64, 0.25)
PARAMS = CslParams.from_lambda(1.0, 1.0)


def _random_state(r, grid=GRID):
    return Wavefunction.normalized(grid, r.standard_normal(grid.n_sites)
                                   + 1j * r.standard_normal(grid.n_sites))


def _drift_bruteforce(psi, kernel, params):
    """D(q) = (gamma m^2/2 m0^2) sum_x [g(q-x) - gbar(x)]^2 dx, by explicit double sums."""
    n, dx = psi.grid.n_sites, psi.grid.dx
    rho = psi.density
    G = np.array([[kernel[(qq - x) % n] for x in range(n)] for qq in range(n)])
    gbar = np.array([sum(rho[qq] * G[qq, x] for qq in range(n)) * dx for x in range(n)])
    return 0.5 * params.gamma * params.mass_ratio**2 * np.array(
        [np.sum((G[qq] - gbar) ** 2) * dx for qq in range(n)])


class TestNoise:
    def test_deterministic(self):
        a = sample_noise(GRID, 1e-3, trajectory_stream(5, 0))
        b = sample_noise(GRID, 1e-3, trajectory_stream(5, 0))
        assert np.array_equal(a.dW, b.dW)
        c = sample_noise(GRID, 1e-3, trajectory_stream(5, 1))
        assert not np.array_equal(a.dW, c.dW)

    def test_variance_and_independence(self):
        dt = 1e-3
        r = trajectory_stream(11, 0)
        x = np.stack([sample_noise(GRID, dt, r).dW[:2] for _ in range(100_000)])
        assert x[:, 0].var() == pytest.approx(dt / GRID.dx, rel=0.05)
        cov = np.mean(x[:, 0] * x[:, 1])
        se = np.std(x[:, 0] * x[:, 1]) / math.sqrt(len(x))
        assert abs(cov) < 3 * se

    def test_block_draws_match_sequential(self):
        # The integrator draws noise in blocks; the stream must be identical.
        r1, r2 = trajectory_stream(3, 7), trajectory_stream(3, 7)
        block = r1.standard_normal((NOISE_BLOCK, 16))
        seq = np.stack([r2.standard_normal(16) for _ in range(NOISE_BLOCK)])
        assert np.array_equal(block, seq)

    def test_streams_match_single(self):
        ss = streams(9, 2, 5)
        for i, s in zip(range(2, 5), ss):
            assert np.array_equal(s.standard_normal(4), trajectory_stream(9, i).standard_normal(4))


class TestSmearedNoise:
    def test_zero_noise(self):
        psi = gaussian_packet(GRID, 0.0, 1.0)
        A, mean = smeared_noise_potential(psi, NoiseField(GRID, np.zeros(64), 1e-3),
                                          gaussian_kernel(GRID, 1.0), PARAMS)
        assert np.all(A == 0) and mean == 0

    def test_single_increment(self):
        k = 10
        dW = np.zeros(64)
        dW[k] = 1.0
        kern = gaussian_kernel(GRID, 1.0)
        A, _ = smeared_noise_potential(gaussian_packet(GRID), NoiseField(GRID, dW, 1e-3), kern, PARAMS)
        shifted = np.roll(kern, k)
        assert np.max(np.abs(A - A[k] / shifted[k] * shifted)) < 1e-14
        assert A[k] == pytest.approx(math.sqrt(PARAMS.gamma) * kern[0] * GRID.dx, rel=1e-12)

    def test_expectation_direct_sum(self, rng):
        psi = _random_state(rng)
        dW = rng.standard_normal(64)
        kern = gaussian_kernel(GRID, 1.0)
        A, mean = smeared_noise_potential(psi, NoiseField(GRID, dW, 1e-3), kern, PARAMS)
        n, dx = 64, GRID.dx
        A_ref = [math.sqrt(PARAMS.gamma) * sum(kern[(qq - i) % n] * dW[i] for i in range(n)) * dx
                 for qq in range(n)]
        mean_ref = sum(abs(psi.amps[qq]) ** 2 * A_ref[qq] for qq in range(n)) * dx
        assert np.max(np.abs(A - A_ref)) < 1e-10
        assert mean == pytest.approx(mean_ref, abs=1e-10)

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatch):
            smeared_noise_potential(gaussian_packet(GRID), NoiseField(Grid1D(32, 0.25), np.zeros(32)),
                                    gaussian_kernel(GRID, 1.0), PARAMS)


class TestDriftPotential:
    def test_position_eigenstate(self):
        q0 = 20
        amps = np.zeros(64)
        amps[q0] = 1.0
        psi = Wavefunction.normalized(GRID, amps)
        kern = gaussian_kernel(GRID, 1.0)
        D = collapse_drift_potential(psi, kern, PARAMS)
        ref = _drift_bruteforce(psi, kern, PARAMS)
        assert abs(D[q0]) < 1e-12
        assert np.max(np.abs(D - ref)) < 1e-8
        # gamma [K(0) - K(q - q0)] with K the brute-force autocorrelation
        n, dx = 64, GRID.dx
        K = np.array([sum(kern[z] * kern[(z - d) % n] for z in range(n)) * dx for d in range(n)])
        closed = PARAMS.gamma * (K[0] - K[(np.arange(n) - q0) % n])
        assert np.max(np.abs(D - closed)) < 1e-8

    def test_gamma_zero(self, rng):
        D = collapse_drift_potential(_random_state(rng), gaussian_kernel(GRID, 1.0),
                                     CslParams(gamma=0.0, r_C=1.0))
        assert np.all(D == 0)

    def test_random_state_bruteforce(self, rng):
        psi = _random_state(rng)
        kern = gaussian_kernel(GRID, 1.0)
        assert np.max(np.abs(collapse_drift_potential(psi, kern, PARAMS)
                             - _drift_bruteforce(psi, kern, PARAMS))) < 1e-8

    @given(seed=st.integers(0, 2**32 - 1), sharp=st.floats(0.0, 8.0))
    def test_nonnegative(self, seed, sharp):
        r = np.random.default_rng(seed)
        amps = r.standard_normal(64) * np.exp(sharp * r.standard_normal(64))
        psi = Wavefunction.normalized(GRID, amps + 1e-300)
        assert np.all(collapse_drift_potential(psi, gaussian_kernel(GRID, 1.0), PARAMS) >= 0)

    def test_stepper_matches_public(self, rng):
        psi = _random_state(rng)
        dW = rng.standard_normal(64) * 0.1
        st_ = CollapseStepper(GRID, PARAMS, None, 1e-3)
        A, D = st_.potentials(psi.density[None], dW[None])
        kern = gaussian_kernel(GRID, 1.0)
        A_ref, mean = smeared_noise_potential(psi, NoiseField(GRID, dW, 1e-3), kern, PARAMS)
        assert np.allclose(A[0], A_ref - mean, atol=1e-12)
        assert np.allclose(D[0], collapse_drift_potential(psi, kern, PARAMS), atol=1e-12)


class TestStep:
    def test_free_packet_dispersion(self):
        g = Grid1D(512, 0.1)
        s0 = 1.0
        psi = gaussian_packet(g, 0.0, s0)
        p0 = CslParams(gamma=0.0, r_C=1.0)
        H = Hamiltonian.free(g)
        t = 2.0
        widths = []
        for n in (200, 400):
            cfg = TrajectoryConfig(dt=t / n, n_steps=n, observables=("position-variance",))
            widths.append(run_trajectory(psi, H, p0, cfg).series["x_var"][-1])
        exact = s0**2 * (1 + (t / (2 * s0**2)) ** 2)
        for w in widths:
            assert w == pytest.approx(exact, rel=1e-3)
        assert widths[0] == pytest.approx(widths[1], rel=1e-6)

    def test_position_eigenstate_fixed(self):
        amps = np.zeros(64)
        amps[30] = 1.0
        psi = Wavefunction.normalized(GRID, amps)
        r = trajectory_stream(1, 0)
        for _ in range(20):
            psi = csl_step(psi, None, PARAMS, sample_noise(GRID, 1e-3, r), 1e-3)
        assert np.max(np.abs(np.abs(psi.amps) - np.abs(amps) / math.sqrt(GRID.dx))) < 1e-8

    def test_norm_after_step(self, rng):
        psi = _random_state(rng)
        out = csl_step(psi, Hamiltonian.free(GRID), PARAMS, sample_noise(GRID, 1e-3, rng), 1e-3)
        assert out.norm() == pytest.approx(1.0, abs=1e-12)

    def test_step_too_large(self):
        psi = two_gaussian_state(GRID, math.sqrt(0.5), math.sqrt(0.5), 6.0, 0.5)
        big = PARAMS.replace(lam=1e3)
        with pytest.raises(StepTooLarge):
            csl_step(psi, None, big, sample_noise(GRID, 1e-2, trajectory_stream(0, 0)), 1e-2)

    def test_step_error_carries_index(self):
        psi = two_gaussian_state(GRID, math.sqrt(0.5), math.sqrt(0.5), 6.0, 0.5)
        cfg = TrajectoryConfig(dt=1e-2, n_steps=10)
        with pytest.raises(StepTooLarge) as e:
            run_trajectory(psi, None, PARAMS.replace(lam=1e3), cfg)
        assert e.value.step == 0

    def test_euler_splitting_agrees(self):
        g = Grid1D(128, 0.25)
        psi = gaussian_packet(g, 0.0, 1.5, 0.5)
        H = Hamiltonian.harmonic(g, 0.5)
        out = {}
        for split in ("strang", "euler"):
            cfg = TrajectoryConfig(dt=1e-4, n_steps=2000, splitting=split, observables=("position-mean",))
            out[split] = run_trajectory(psi, H, PARAMS.replace(lam=0.1), cfg).series["x_mean"][-1]
        assert out["strang"] == pytest.approx(out["euler"], abs=2e-3)

    def test_energy_conserved_without_collapse(self):
        g = Grid1D(256, 0.1)
        H = Hamiltonian.harmonic(g, 1.0)
        psi = gaussian_packet(g, 1.0, 0.7, 0.3)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=1000, snapshot_stride=10, observables=("energy",))
        E = run_trajectory(psi, H, CslParams(gamma=0.0, r_C=1.0), cfg).series["energy"]
        assert np.max(np.abs(E - E[0])) / abs(E[0]) < 1e-6

    def test_norm_drift_is_first_order(self):
        # Pathwise, the quadratic noise term fluctuates at O(dt) around its Ito
        # mean, so halving dt halves the mean pre-renormalization drift.
        ratios = [_drift_ratio(seed) for seed in range(4)]
        assert 1.5 < np.mean(ratios) < 2.5

    @pytest.mark.xfail(strict=True, reason="Euler-Maruyama norm drift is O(dt) per step, "
                                           "not O(dt^1.5); halving gives a ratio near 2 that "
                                           "falls below 2 on most noise paths")
    def test_norm_drift_halving_at_least_two(self):
        assert all(_drift_ratio(seed) >= 2.0 for seed in range(4))


def _drift_ratio(seed, dt=4e-3, n=100):
    """Mean drift at dt over mean drift at dt/2 on a Brownian-refined noise path."""
    g = Grid1D(128, 0.25)
    psi0 = two_gaussian_state(g, math.sqrt(0.5), math.sqrt(0.5), 6.0, 0.5).amps[None]
    r = np.random.default_rng(seed)
    fine = r.standard_normal((2 * n, g.n_sites))
    coarse = (fine[0::2] + fine[1::2]) / math.sqrt(2)
    means = []
    for h, xs in ((dt, coarse), (dt / 2, fine)):
        stp = CollapseStepper(g, PARAMS, None, h)
        psi, d = psi0.copy(), []
        for x in xs:
            psi, dd = stp.step(psi, x[None])
            d.append(dd[0])
        means.append(np.mean(d))
    return means[0] / means[1]


class TestTrajectory:
    def test_zero_steps(self):
        psi = gaussian_packet(GRID, 0.0, 1.0)
        rec = run_trajectory(psi, None, PARAMS, TrajectoryConfig(dt=1e-3, n_steps=0,
                                                                 observables=("norm", "position-mean")))
        assert rec.times.tolist() == [0.0]
        assert rec.series["norm"].tolist() == pytest.approx([1.0])
        assert np.array_equal(rec.final.amps, psi.amps)

    def test_bit_identical(self):
        psi = two_gaussian_state(GRID, 0.6, 0.8, 6.0, 0.5)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=150, seed=42, snapshot_stride=7,
                               observables=("norm", "position-mean", "position-variance"))
        a = run_trajectory(psi, Hamiltonian.free(GRID), PARAMS, cfg)
        b = run_trajectory(psi, Hamiltonian.free(GRID), PARAMS, cfg)
        assert np.array_equal(a.final.amps, b.final.amps)
        for k in a.series:
            assert np.array_equal(a.series[k], b.series[k])

    def test_norm_recorded(self):
        psi = two_gaussian_state(GRID, 0.6, 0.8, 6.0, 0.5)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=200, seed=3, observables=("norm",))
        assert np.max(np.abs(run_trajectory(psi, None, PARAMS, cfg).series["norm"] - 1)) < 1e-10

    def test_sample_schedule(self):
        cfg = TrajectoryConfig(dt=0.1, n_steps=10, snapshot_stride=3)
        assert cfg.sample_steps.tolist() == [0, 3, 6, 9]

    def test_harmonic_ehrenfest(self):
        g = Grid1D(256, 0.1)
        omega = 1.3
        H = Hamiltonian.harmonic(g, omega)
        psi = gaussian_packet(g, 2.0, 1 / math.sqrt(2 * omega))
        period = 2 * math.pi / omega
        n = 2000
        cfg = TrajectoryConfig(dt=period / n, n_steps=n, snapshot_stride=10,
                               observables=("position-mean",))
        rec = run_trajectory(psi, H, CslParams(gamma=0.0, r_C=1.0), cfg)
        x = rec.series["x_mean"]
        assert np.max(np.abs(x - 2.0 * np.cos(omega * rec.times))) < 0.01 * 2.0
        # Fitted frequency from the downward zero crossing (quarter period).
        i = np.flatnonzero(np.diff(np.sign(x)) < 0)[0]
        t0 = rec.times[i] - x[i] * (rec.times[i + 1] - rec.times[i]) / (x[i + 1] - x[i])
        assert math.pi / 2 / t0 == pytest.approx(omega, rel=0.01)

    def test_csv_sidecar_round_trip(self, tmp_path):
        psi = two_gaussian_state(GRID, 0.6, 0.8, 6.0, 0.5)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=20, seed=3, snapshot_stride=5,
                               observables=("norm", "region-probabilities", "coherence"))
        rec = run_trajectory(psi, None, PARAMS, cfg, RegionSpec.halves(GRID))
        rec.to_csv(tmp_path / "t.csv", {"seed": 3})
        header, cols = read_csv(tmp_path / "t.csv")
        assert header == {"seed": 3}
        assert list(cols) == ["time", "norm", "p_left", "p_right", "coherence_re", "coherence_im"]
        assert np.array_equal(cols["p_left"], rec.series["p_left"])
        assert np.array_equal(cols["coherence_im"], rec.series["coherence"].imag)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrajectoryConfig(dt=0.0, n_steps=1)
        with pytest.raises(ValueError):
            TrajectoryConfig(dt=1e-3, n_steps=1, observables=("momentum",))
        with pytest.raises(ValueError):
            TrajectoryConfig(dt=1e-3, n_steps=1, splitting="yoshida")


class TestEnsemble:
    def test_chunking(self):
        assert chunk_bounds(70) == [(0, 32), (32, 64), (64, 70)]

    def test_matches_single_trajectories(self):
        psi = two_gaussian_state(GRID, 0.6, 0.8, 6.0, 0.5)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=70, seed=8, snapshot_stride=10,
                               observables=("position-mean",))
        ens = run_ensemble(psi, None, PARAMS, cfg, 40, workers=1)
        for i in (0, 33, 39):
            one = run_trajectory(psi, None, PARAMS, TrajectoryConfig(
                dt=1e-3, n_steps=70, seed=8, snapshot_stride=10, observables=("position-mean",),
                stream=i))
            assert np.allclose(ens.series["x_mean"][i], one.series["x_mean"], atol=1e-13, rtol=0)

    def test_worker_count_invariant(self):
        psi = two_gaussian_state(GRID, 0.6, 0.8, 6.0, 0.5)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=50, seed=8, snapshot_stride=10,
                               observables=("position-mean", "norm"))
        a = run_ensemble(psi, None, PARAMS, cfg, 70, workers=1)
        b = run_ensemble(psi, None, PARAMS, cfg, 70, workers=3)
        assert a.final.tobytes() == b.final.tobytes()
        for k in a.series:
            assert a.series[k].tobytes() == b.series[k].tobytes()

    def test_martingale_500(self):
        sep = 8.0
        g = born_grid(sep, 1.0)
        psi = two_gaussian_state(g, math.sqrt(0.4), math.sqrt(0.6), sep, 0.5)
        cfg = TrajectoryConfig(dt=1e-3, n_steps=3000, seed=31, snapshot_stride=100,
                               observables=("region-probabilities",))
        rec = run_ensemble(psi, None, PARAMS, cfg, 500, RegionSpec.halves(g))
        P = rec.series["p_left"]
        se = P.std(axis=0, ddof=1) / math.sqrt(500)
        dev = np.abs(P.mean(axis=0) - P[0, 0])
        assert np.all(dev[1:] <= 3 * se[1:])

    def test_localization_within_20_over_gamma(self):
        sep = 6.0
        t_max = 20.0 / decay_rate(sep, PARAMS)
        res = born_experiment(math.sqrt(0.5), math.sqrt(0.5), sep, PARAMS, 300, 17,
                              t_max=t_max, check_undecided=False)
        assert res.n_undecided == 0
