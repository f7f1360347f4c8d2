import numpy as np
import pytest

from voxmix.bandwidth import (
    BandwidthPlan,
    Pilot,
    SpeCurve,
    default_cv_schedule,
    default_reg_schedule,
    filter_size_for,
    select_bandwidth,
    select_cv,
    select_reg,
    spe,
)
from voxmix.volume import Volume3D, split_train_test


def exact_curve(chs, N, c1, c2, noise_floor=0.0):
    scale = N ** (-4.0 / 7.0)
    pilots = tuple(Pilot(c, c * N ** (-1.0 / 7.0), 3) for c in chs)
    spes = tuple(noise_floor + scale * (c**4 / 4.0 * c1 + c**-3.0 * c2) for c in chs)
    return SpeCurve(pilots, spes)


class TestSchedules:
    def test_reg_schedule_values(self):
        plan = default_reg_schedule((64, 64, 64), 10**6)
        assert plan.G == 5
        assert plan.method == "REG"
        assert [p.s for p in plan.pilots] == [3, 5, 7, 9, 11]
        assert plan.pilots[0].h == pytest.approx(3 / 512, abs=1e-12)
        assert plan.pilots[0].h == pytest.approx(0.0058594, abs=1e-7)
        assert plan.pilots[4].s == 11
        assert plan.pilots[0].Ch == pytest.approx(0.04217, abs=1e-5)

    def test_cv_schedule_values(self):
        plan = default_cv_schedule((64, 64, 64), 10**6)
        assert plan.G == 25
        assert plan.method == "CV"
        hs = [p.h for p in plan.pilots]
        assert min(hs) == pytest.approx(0.3 * 3 / 512, abs=1e-12)
        for p in plan.pilots:
            assert p.Ch == pytest.approx(p.h * (10**6) ** (1 / 7), rel=1e-12)
        # each base size appears with all five multipliers
        assert sorted({p.s for p in plan.pilots}) == [3, 5, 7, 9, 11]
        assert sum(1 for p in plan.pilots if p.s == 7) == 5

    def test_plan_validation(self):
        with pytest.raises(ValueError, match="Ch = h"):
            BandwidthPlan((Pilot(1.0, 0.5, 3),), 10**6, "CV")
        with pytest.raises(ValueError, match="method"):
            BandwidthPlan((Pilot(0.1, 0.1, 3),), 1, "BOGUS")
        with pytest.raises(ValueError, match="no pilots"):
            BandwidthPlan((), 100, "CV")


class TestSelectCv:
    def _curve(self, spes):
        N = 1000
        chs = [0.5 + 0.1 * i for i in range(len(spes))]
        pilots = tuple(Pilot(c, c * N ** (-1 / 7), 3) for c in chs)
        return SpeCurve(pilots, tuple(spes))

    def test_argmin(self):
        curve = self._curve([0.5, 0.3, 0.4])
        assert select_cv(curve) is curve.pilots[1]

    def test_single_pilot(self):
        curve = self._curve([0.9])
        assert select_cv(curve) is curve.pilots[0]

    def test_permutation_invariant(self):
        curve = self._curve([0.5, 0.2, 0.4, 0.8])
        win = select_cv(curve)
        shuffled = SpeCurve(curve.pilots[::-1], curve.spes[::-1])
        assert select_cv(shuffled).Ch == win.Ch

    def test_tie_prefers_smaller_constant(self):
        curve = self._curve([0.4, 0.2, 0.2, 0.9])
        assert select_cv(curve) is curve.pilots[1]

    def test_largest_spe_never_wins(self):
        curve = self._curve([0.9, 0.7, 0.5, 0.3, 0.1])
        assert select_cv(curve).Ch == curve.pilots[-1].Ch

    def test_empty_curve_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            SpeCurve((), ())


class TestSelectReg:
    def test_exact_recovery(self):
        curve = exact_curve([0.8, 1.0, 1.2, 1.4, 1.6], 10**6, 1.0, 3.0, noise_floor=0.01)
        ch, c1, c2 = select_reg(curve, 10**6)
        assert abs(c1 - 1.0) <= 1e-10
        assert abs(c2 - 3.0) / 3.0 <= 1e-10
        assert ch == pytest.approx(9 ** (1 / 7), rel=1e-10)
        assert ch == pytest.approx(1.3688, abs=1e-4)

    def test_constant_shift_invariance(self):
        a = exact_curve([0.7, 0.9, 1.1, 1.3], 10**5, 2.0, 1.5, noise_floor=0.0)
        b = SpeCurve(a.pilots, tuple(v + 5.0 for v in a.spes))
        _, c1a, c2a = select_reg(a, 10**5)
        _, c1b, c2b = select_reg(b, 10**5)
        assert c1a == pytest.approx(c1b, rel=1e-9)
        assert c2a == pytest.approx(c2b, rel=1e-9)

    def test_two_pilot_interpolation(self):
        N = 10**6
        curve = exact_curve([0.9, 1.4], N, 1.7, 0.8, noise_floor=0.0)
        ch, c1, c2 = select_reg(curve, N)
        # direct 2x2 solve oracle
        scale = N ** (-4 / 7)
        X = np.array([[scale * c**4 / 4, scale * c**-3] for c in (0.9, 1.4)])
        want = np.linalg.solve(X, np.array(curve.spes))
        assert c1 == pytest.approx(want[0], rel=1e-9)
        assert c2 == pytest.approx(want[1], rel=1e-9)
        assert ch == pytest.approx((3 * want[1] / want[0]) ** (1 / 7), rel=1e-9)

    def test_default_schedule_scale_recovery(self):
        # the realistic pilot grid is poorly spread; constants must still
        # come back well enough to localize the optimum
        plan = default_reg_schedule((64, 64, 64), 209715)
        chs = [p.Ch for p in plan.pilots]
        scale = plan.N ** (-4 / 7)
        spes = tuple(0.003 + scale * (c**4 / 4 + 3.0 * c**-3) for c in chs)
        ch, c1, c2 = select_reg(SpeCurve(plan.pilots, spes), plan.N)
        assert ch == pytest.approx(9 ** (1 / 7), rel=1e-6)

    def test_negative_constant_falls_back(self):
        curve = exact_curve([0.8, 1.0, 1.2, 1.4], 10**5, 1.0, -0.5, noise_floor=2.0)
        with pytest.warns(RuntimeWarning, match="falling back"):
            ch, c1, c2 = select_reg(curve, 10**5)
        assert c2 < 0
        assert ch == select_cv(curve).Ch

    def test_singular_design(self):
        N = 10**4
        p = Pilot(0.9, 0.9 * N ** (-1 / 7), 3)
        curve = SpeCurve((p, p, p), (0.5, 0.5, 0.5))
        with pytest.raises(ValueError, match="singular"):
            select_reg(curve, N)

    def test_too_few_pilots(self):
        curve = exact_curve([1.0], 10**4, 1.0, 1.0, noise_floor=0.1)
        with pytest.raises(ValueError, match="at least 2"):
            select_reg(curve, 10**4)


class TestFilterSize:
    def test_basic_mapping(self):
        assert filter_size_for(0.05, (64, 64, 64)) == 5  # 3.2 -> ceil 4 -> odd 5
        assert filter_size_for(3 / 64, (64, 64, 64)) == 3  # lands exactly on 3

    def test_clamps(self):
        assert filter_size_for(1e-6, (64, 64, 64)) == 3
        assert filter_size_for(0.9, (64, 64, 64)) == 11

    def test_uses_largest_dim(self):
        assert filter_size_for(0.1, (16, 16, 64)) == 7


class TestSpeAndSelection:
    def _data(self, seed=0, dims=(8, 8, 8)):
        rng = np.random.default_rng(seed)
        dx, dy, dz = dims
        z = rng.choice(2, size=(dz, dy, dx))
        vals = np.clip(rng.normal(np.array([0.3, 0.7])[z], 0.05), 0, 1)
        v = Volume3D(dims, vals)
        train, test = split_train_test(dims, 0.8, seed=seed + 1)
        return v, train, test

    def test_spe_positive_and_finite(self):
        v, train, test = self._data()
        N = train.n_included
        got = spe(v, train, test, Pilot(0.2 * N ** (1 / 7), 0.2, 3), M=2, max_iter=4)
        assert np.isfinite(got) and got >= 0

    def test_select_bandwidth_cv_returns_winner(self):
        v, train, test = self._data(seed=2)
        N = train.n_included
        pilots = tuple(Pilot(h * N ** (1 / 7), h, 3) for h in (0.1, 0.2, 0.4))
        plan = BandwidthPlan(pilots, N, "CV")
        sel = select_bandwidth(v, train, test, plan, M=2, max_iter=4)
        assert sel.method == "CV"
        win = select_cv(sel.curve)
        assert sel.Ch == win.Ch
        assert sel.h == win.h
        assert sel.s == win.s
        assert len(sel.curve) == 3

    def test_select_bandwidth_reg_consistency(self):
        v, train, test = self._data(seed=3)
        N = train.n_included
        pilots = tuple(Pilot(h * N ** (1 / 7), h, s) for h, s in
                       [(0.08, 3), (0.14, 3), (0.2, 5), (0.3, 5), (0.4, 7)])
        plan = BandwidthPlan(pilots, N, "REG")
        sel = select_bandwidth(v, train, test, plan, M=2, max_iter=4)
        assert sel.method == "REG"
        assert sel.h == pytest.approx(sel.Ch * N ** (-1 / 7), rel=1e-12)
        assert sel.s == filter_size_for(sel.h, v.dims)
        assert sel.C1_hat is not None

    def test_selection_serialization(self):
        v, train, test = self._data(seed=4)
        N = train.n_included
        pilots = tuple(Pilot(h * N ** (1 / 7), h, 3) for h in (0.15, 0.3))
        plan = BandwidthPlan(pilots, N, "CV")
        sel = select_bandwidth(v, train, test, plan, M=2, max_iter=3)
        d = sel.to_dict()
        assert d["method"] == "CV"
        assert len(d["pilots"]) == 2
        assert set(d["pilots"][0]) == {"Ch", "h", "s", "spe"}
        assert set(d["selected"]) >= {"Ch", "h", "s"}
