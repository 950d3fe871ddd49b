"""Fixed points, stability classification, metastable balls, drift."""

import numpy as np
import pytest

import metareduce as mr
from metareduce.dynamics import DeterministicMapModel, FixedPointRecord
from metareduce.errors import (BallConstructionFailed, DriftViolated,
                               MarginalFixedPoint, NoStableFixedPoint)
from metareduce.maps import build_map

from conftest import make_ref_model


def bisect_root(f, lo, hi, tol=1e-14):
    """Independent scalar root oracle for the fixed-point checks."""
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if flo * fm <= 0:
            hi = mid
        else:
            lo, flo = mid, fm
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def linear_model(a, box=(-1.0, 1.0), sigma=0.3):
    dim, pi, jac = build_map("linear", {"a": a})
    return DeterministicMapModel(1, pi, jac, [list(box)], [[1.0]], sigma,
                                 f"linear_{a}")


class TestFindFixedPoints:
    def test_tanh_double_well(self):
        model = make_ref_model(0.35)
        records = mr.find_fixed_points(model)
        assert len(records) == 3
        # oracle: bisection on x - tanh(2x) over [0.5, 1.5]
        x_star = bisect_root(lambda x: x - np.tanh(2 * x), 0.5, 1.5)
        stable = [r for r in records if r.is_stable]
        unstable = [r for r in records if not r.is_stable]
        assert len(stable) == 2 and len(unstable) == 1
        np.testing.assert_allclose(
            sorted(float(r.location[0]) for r in stable),
            [-x_star, x_star], atol=1e-9)
        assert abs(unstable[0].location[0]) < 1e-8
        assert unstable[0].spectral_radius == pytest.approx(2.0, abs=1e-9)
        rho = 2.0 * (1.0 - x_star ** 2)
        assert rho < 1
        for r in stable:
            assert r.spectral_radius == pytest.approx(rho, abs=1e-9)
        # indices assigned lexicographically
        assert [r.index for r in sorted(stable, key=lambda r: r.location[0])] \
            == [1, 2]

    def test_single_well_flagged_not_error(self):
        records = mr.find_fixed_points(linear_model(0.5))
        stable = [r for r in records if r.is_stable]
        assert len(stable) == 1
        assert stable[0].location == pytest.approx(0.0, abs=1e-11)
        assert stable[0].spectral_radius == pytest.approx(0.5)

    def test_identity_map_rejected(self):
        with pytest.raises(MarginalFixedPoint):
            mr.find_fixed_points(linear_model(1.0))

    def test_expanding_map_no_stable(self):
        with pytest.raises(NoStableFixedPoint):
            mr.find_fixed_points(linear_model(1.5))

    def test_indexing_independent_of_seed_lattice(self):
        model = make_ref_model(0.35)
        a = mr.find_fixed_points(model, seeds_per_axis=8)
        b = mr.find_fixed_points(model, seeds_per_axis=17)
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            np.testing.assert_allclose(ra.location, rb.location, atol=1e-9)
            assert ra.index == rb.index

    def test_newton_residual_bound(self):
        model = make_ref_model(0.35)
        for r in mr.find_fixed_points(model):
            res = np.linalg.norm(np.atleast_1d(model.pi(r.location))
                                 - r.location)
            assert res <= 1e-10 * model.diam


class TestClassifyStability:
    def test_scalar_contraction(self):
        assert mr.classify_stability([[0.5]]) == (0.5, "stable")

    def test_rotation_expansion(self):
        # eigenvalues of [[0,2],[-2,0]] are +-2i (hand characteristic poly)
        rho, tag = mr.classify_stability([[0.0, 2.0], [-2.0, 0.0]])
        assert rho == pytest.approx(2.0, abs=1e-12)
        assert tag == "unstable"

    def test_marginal(self):
        assert mr.classify_stability([[1.0]]) == (1.0, "marginal")


class TestMetastableStructure:
    def test_tanh_balls(self):
        model = make_ref_model(0.35)
        fps = mr.find_fixed_points(model)
        st = mr.build_metastable_structure(model, fps, 0.2)
        assert st.n_balls == 2
        np.testing.assert_allclose(st.radii, [0.2, 0.2])
        # numerical invariance oracle at the 1D ball endpoints
        x_star = float(st.centers[1][0])
        for e in (0.2, -0.2):
            assert abs(np.tanh(2 * (x_star + e)) - x_star) < 0.2

    def test_disjointness_forces_shrink(self):
        # identity map keeps every ball invariant, so only disjointness binds
        model = DeterministicMapModel(
            1, lambda x: x, lambda x: np.eye(1), [[-3, 3]], [[1.0]], 0.3, "id")
        fps = [FixedPointRecord(np.array([-1.0]), 0.0, "stable", 1),
               FixedPointRecord(np.array([1.0]), 0.0, "stable", 2)]
        st = mr.build_metastable_structure(model, fps, 1.5)
        assert st.radii[0] + st.radii[1] < 2.0
        np.testing.assert_allclose(st.radii, [0.75, 0.75])

    def test_single_ball(self):
        model = linear_model(0.5)
        st = mr.build_metastable_structure(
            model, mr.find_fixed_points(model), 0.1)
        assert st.n_balls == 1

    def test_floor_raises(self):
        # expanding-away map never satisfies invariance
        model = DeterministicMapModel(
            1, lambda x: 1.0 + 2.0 * (x - 1.0), lambda x: 2 * np.eye(1),
            [[-3, 3]], [[1.0]], 0.3, "expand")
        fps = [FixedPointRecord(np.array([1.0]), 2.0, "stable", 1)]
        with pytest.raises(BallConstructionFailed):
            mr.build_metastable_structure(model, fps, 0.5)

    def test_deterministic_output(self):
        model = make_ref_model(0.35)
        fps = mr.find_fixed_points(model)
        a = mr.build_metastable_structure(model, fps, 0.2)
        b = mr.build_metastable_structure(model, fps, 0.2)
        np.testing.assert_array_equal(a.radii, b.radii)
        np.testing.assert_array_equal(a.centers, b.centers)

    def test_ball_of_closed_boundary(self):
        model = make_ref_model(0.35)
        st = mr.build_metastable_structure(
            model, mr.find_fixed_points(model), 0.2)
        edge = st.centers[0] + np.array([st.radii[0]])
        assert st.ball_of(edge) == 0


class TestLyapunovDrift:
    def test_tanh_drift_negative(self):
        model = make_ref_model(0.3)
        rep = mr.check_lyapunov_drift(model)
        assert rep.max_drift < 0
        assert rep.contraction_ok
        # closed-form oracle at x = 1.5: tanh(3)^2 + 0.09 - 2.25
        drift = np.tanh(3.0) ** 2 + 0.09 - 2.25
        assert drift == pytest.approx(-1.16987, abs=1e-4)
        assert drift < 0

    def test_noiseless_contracting(self):
        dim, pi, jac = build_map("tanh", {"beta": 2.0})
        model = DeterministicMapModel(1, pi, jac, [[-2, 2]], [[1.0]], 0.0,
                                      "tanh")
        rep = mr.check_lyapunov_drift(model)
        assert rep.max_drift < 0

    def test_expanding_map_violates(self):
        model = linear_model(2.0)
        with pytest.raises(DriftViolated) as err:
            mr.check_lyapunov_drift(model)
        assert err.value.drift >= 0
        assert err.value.sample is not None


class TestModelValidation:
    def test_reference_model_validates(self):
        assert make_ref_model(0.35).validate()

    def test_jacobian_mismatch_detected(self):
        dim, pi, _ = build_map("tanh", {"beta": 2.0})
        bad = DeterministicMapModel(1, pi, lambda x: np.array([[0.0]]),
                                    [[-2, 2]], [[1.0]], 0.35, "bad")
        with pytest.raises(mr.errors.NumericError):
            bad.validate()

    def test_non_invariant_box_detected(self):
        model = linear_model(1.5, box=(-1, 1))
        with pytest.raises(mr.errors.NumericError):
            model.validate()

    def test_covariance_bounds_stored(self):
        dim, pi, jac = build_map("tanh2d", {})
        model = DeterministicMapModel(
            2, pi, jac, [[-2, 2], [-2, 2]],
            [[1.0, 0.2], [0.2, 4.0]], 0.4, "tanh2d")
        lo, hi = model.cov_bounds
        w = np.linalg.eigvalsh(np.array([[1.0, 0.2], [0.2, 4.0]]))
        assert lo == pytest.approx(w[0]) and hi == pytest.approx(w[1])
