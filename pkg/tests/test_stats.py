import json
import math

import numpy as np
import pytest

import workloads as W
from cslkit.errors import GridMismatch, InsufficientData, Undecidable
from cslkit.io import dumps, read_csv, write_csv
from cslkit.lattice import CslParams, Grid1D, Wavefunction, two_gaussian_state
from cslkit.master import decay_rate
from cslkit.stats import (
    BornResult,
    Decision,
    RegionSpec,
    born_experiment,
    born_grid,
    classify,
    collapse_time_stats,
    first_passage_times,
    is_collapsed,
    martingale_check,
)

GRID = Grid1D(64, 0.25)


class TestRegions:
    def test_validation(self):
        with pytest.raises(ValueError):
            RegionSpec([1, 2], [2, 3])
        with pytest.raises(ValueError):
            RegionSpec([], [2, 3])
        with pytest.raises(ValueError):
            RegionSpec([1], [2], eps=0.5)

    def test_halves(self):
        r = RegionSpec.halves(GRID)
        assert len(r.left) == len(r.right) == 32
        assert r.eps == 0.01


class TestIsCollapsed:
    def test_left(self):
        amps = np.where(GRID.x < -1, 1.0, 0.0)
        assert is_collapsed(Wavefunction.normalized(GRID, amps), RegionSpec.halves(GRID)) is Decision.LEFT

    def test_equal_superposition(self):
        psi = two_gaussian_state(GRID, math.sqrt(0.5), math.sqrt(0.5), 6.0, 0.5)
        assert is_collapsed(psi, RegionSpec.halves(GRID)) is Decision.UNDECIDED

    def test_boundary_inclusive(self):
        assert classify(0.99, 0.01) is Decision.LEFT
        assert classify(0.01, 0.01) is Decision.RIGHT
        assert classify(0.5, 0.01) is Decision.UNDECIDED
        assert classify(0.75, 0.25) is Decision.LEFT

    def test_grid_mismatch(self):
        psi = two_gaussian_state(GRID, 0.6, 0.8, 6.0, 0.5)
        with pytest.raises(GridMismatch):
            is_collapsed(psi, RegionSpec.halves(Grid1D(128, 0.25)))


class TestBorn:
    def test_pure_left(self):
        res = born_experiment(1.0, 0.0, 6.0, W.PARAMS, 64, 5)
        assert res.f_left == 1.0 and res.n_undecided == 0 and res.n_right == 0

    def test_preconditions(self):
        with pytest.raises(ValueError):
            born_experiment(0.5, 0.5, 6.0, W.PARAMS, 10, 0)
        with pytest.raises(ValueError):
            born_experiment(1.0, 0.0, 5.0, W.PARAMS, 10, 0)

    def test_counts_sum(self):
        res = W.born(0.5)
        assert res.n_left + res.n_right + res.n_undecided == res.n_traj == 2000

    @pytest.mark.parametrize("alpha2, half", [(0.5, 0.0335), (0.7, 0.0307)])
    def test_born_band(self, alpha2, half):
        res = W.born(alpha2)
        lo, hi = res.born_band()
        assert (hi - lo) / 2 == pytest.approx(half, abs=1e-4)
        assert lo <= res.f_left <= hi
        assert res.undecided_fraction < 0.01

    def test_undecidable(self):
        with pytest.raises(Undecidable) as e:
            born_experiment(math.sqrt(0.5), math.sqrt(0.5), 6.0, W.PARAMS, 40, 3, t_max=0.05)
        assert e.value.result.n_undecided > 0.01 * 40

    def test_threshold_insensitive(self):
        a = W.born(0.5, n_traj=500, seed=8)
        b = W.born(0.5, n_traj=500, seed=8, eps=0.005)
        assert abs(a.f_left - b.f_left) <= 3 * math.sqrt(2 * 0.25 / 500)

    def test_decided_trajectories_stay_within_martingale_bound(self):
        # From the eps band, P_left is a bounded martingale: by optional
        # stopping it revisits 2 eps with probability at most ~1/2.
        res = W.born(0.3)
        frac = res.hysteresis_violations / res.n_traj
        assert frac <= 0.5 + 3 * math.sqrt(0.25 / res.n_traj)

    @pytest.mark.xfail(strict=True, reason="a bounded martingale that enters the eps band "
                                           "returns past 2 eps about half the time; the "
                                           "0.5% hysteresis bound cannot hold")
    def test_hysteresis_below_half_percent(self):
        res = W.born(0.3)
        assert res.hysteresis_violations < 0.005 * res.n_traj

    def test_serialization(self, tmp_path):
        res = born_experiment(math.sqrt(0.5), math.sqrt(0.5), 6.0, W.PARAMS, 40, 3)
        d = json.loads(dumps(res.to_dict()))
        assert d["n_left"] + d["n_right"] + d["n_undecided"] == 40
        write_csv(tmp_path / "log.csv", res.decision_log())
        _, cols = read_csv(tmp_path / "log.csv")
        assert cols["trajectory"].tolist() == list(range(40))
        assert set(cols["decision"]) <= {"left", "right", "undecided"}

    def test_deterministic_and_worker_invariant(self):
        a = born_experiment(math.sqrt(0.4), math.sqrt(0.6), 6.0, W.PARAMS, 70, 11, workers=1)
        b = born_experiment(math.sqrt(0.4), math.sqrt(0.6), 6.0, W.PARAMS, 70, 11, workers=3)
        assert np.array_equal(a.decisions, b.decisions)
        assert np.array_equal(a.decision_times, b.decision_times, equal_nan=True)

    def test_grid_defaults(self):
        g = born_grid(20.0, 1.0)
        assert g.dx == 0.25 and g.span >= 56.0 and g.n_sites & (g.n_sites - 1) == 0


class TestMartingale:
    def test_deterministic_zero(self):
        P = np.tile(np.linspace(0.3, 0.3, 10), (50, 1))
        assert martingale_check(P) == 0.0

    def test_injected_drift_flagged(self, rng):
        P = 0.3 + 0.05 * rng.standard_normal((400, 10))
        se = 0.05 / math.sqrt(400)
        P[:, 5] += 5 * se
        assert martingale_check(P) > 3

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            martingale_check(np.zeros((1, 5)))

    def test_csl_ensemble(self):
        assert martingale_check(W.martingale_ensemble()) <= 3

    def test_variance_grows_to_saturation(self):
        P = W.martingale_ensemble().series["p_left"]
        var = P.var(axis=0)
        assert var[0] == pytest.approx(0.0, abs=1e-20)
        assert np.all(np.diff(var) >= -5e-3)
        assert var[-1] == pytest.approx(0.21, abs=0.02)


class TestCollapseTimes:
    def test_lambda_scaling(self):
        slow = collapse_time_stats(W.born(0.5, n_traj=500, seed=21))
        fast = collapse_time_stats(W.born(0.5, n_traj=500, seed=21, lam=2.0))
        assert slow.mean / fast.mean == pytest.approx(2.0, rel=0.15)

    def test_saturated_separation(self):
        near = collapse_time_stats(W.born(0.5, n_traj=500, seed=22))
        far = collapse_time_stats(W.born(0.5, n_traj=500, seed=22, separation=20.0))
        assert far.mean == pytest.approx(near.mean, rel=0.15)

    def test_rate_constant(self):
        s = collapse_time_stats(W.born(0.5, n_traj=500, seed=21))
        assert s.rate_constant(decay_rate(W.SEP, W.PARAMS)) == pytest.approx(
            s.mean * decay_rate(W.SEP, W.PARAMS))
        assert s.q1 <= s.median <= s.q3

    def test_empty(self):
        with pytest.raises(InsufficientData):
            collapse_time_stats(np.array([]))

    def test_too_many_undecided(self):
        with pytest.raises(InsufficientData):
            collapse_time_stats(np.array([1.0, np.nan, np.nan]))

    def test_first_passage(self):
        t = np.arange(5.0)
        P = np.array([[0.5, 0.6, 0.995, 0.5, 1.0], [0.5, 0.4, 0.3, 0.2, 0.1]])
        fp = first_passage_times(t, P, 0.01)
        assert fp[0] == 2.0 and np.isnan(fp[1])

    def test_from_ensemble_record(self):
        rec = W.martingale_ensemble()
        s = collapse_time_stats(rec, RegionSpec.halves(rec.grid))
        assert s.n_decided >= 0.9 * s.n_total
