import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from netmpc.nlp import augmented_lagrangian, project_rate_box, rate_box_violation, spg


class TestProjection:
    def test_box_only(self):
        z = np.array([[-1.0, 3.0], [0.5, 1.0]])
        np.testing.assert_array_equal(project_rate_box(z, 2.0), [[0.0, 2.0], [0.5, 1.0]])

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_qp(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-0.5, 2.5, (7, 3))
        prev = rng.uniform(0, 2, 3) if seed % 2 else None
        got = project_rate_box(z, 2.0, 0.2, prev)
        ref = oracles.rate_box_projection_qp(z, 2.0, 0.2, prev)
        np.testing.assert_allclose(got, ref, atol=1e-6)

    @settings(max_examples=80, deadline=None)
    @given(arrays(float, (6, 2), elements=st.floats(-1, 3)), st.floats(0.01, 0.8),
           st.one_of(st.none(), arrays(float, 2, elements=st.floats(0, 2))))
    def test_feasible_idempotent_and_variational(self, z, rate, prev):
        p = project_rate_box(z, 2.0, rate, prev)
        assert rate_box_violation(p, 2.0, rate, prev) <= 1e-12
        np.testing.assert_allclose(project_rate_box(p, 2.0, rate, prev), p, atol=1e-12)
        # (z - p) . (y - p) <= 0 for feasible y
        rng = np.random.default_rng(0)
        for _ in range(5):
            y = project_rate_box(rng.uniform(-1, 3, z.shape), 2.0, rate, prev)
            assert np.sum((z - p) * (y - p)) <= 1e-9

    def test_violation_measure(self):
        q = np.array([[0.0], [0.5], [0.6]])
        assert rate_box_violation(q, 2.0, 0.2) == pytest.approx(0.3)
        assert rate_box_violation(q, 2.0, 0.2, prev=np.array([-0.5])) == pytest.approx(0.3)
        assert rate_box_violation(q, 0.4, 0.0) == pytest.approx(0.2)


class TestSolvers:
    def test_spg_box_quadratic(self):
        target = np.array([-1.0, 0.5, 3.0])
        fg = lambda x: (0.5 * np.sum((x - target) ** 2), x - target)
        x, _, pg = spg(lambda x: fg(x)[0], fg, lambda x: np.clip(x, 0, 2), np.ones(3), tol=1e-12)
        np.testing.assert_allclose(x, [0.0, 0.5, 2.0], atol=1e-10)
        assert pg <= 1e-10

    def test_al_linear_constraint(self):
        # min ||x||^2 s.t. 1 - x0 - x1 <= 0, x in [0, 2]^2 -> (0.5, 0.5), multiplier 1
        def objective(z, grad=False):
            v = float(np.sum(z ** 2))
            return (v, 2 * z) if grad else v

        def constraints(z, grad=False):
            c = np.array([1.0 - z.sum()])
            return (c, -np.ones((1,) + z.shape)) if grad else c

        z, info = augmented_lagrangian(objective, constraints, lambda z: np.clip(z, 0, 2), np.full((1, 2), 2.0),
                                       tol=1e-10, ctol=1e-10)
        np.testing.assert_allclose(z, [[0.5, 0.5]], atol=1e-7)
        assert info.multipliers[0] == pytest.approx(1.0, abs=1e-5)
        assert info.max_violation <= 1e-9

    def test_al_nonlinear_constraint_callable_jacobian(self):
        # min (x0 - 2)^2 + (x1 - 2)^2 s.t. x0^2 + x1^2 <= 1 -> (1/sqrt2, 1/sqrt2)
        def objective(z, grad=False):
            v = float(np.sum((z - 2) ** 2))
            return (v, 2 * (z - 2)) if grad else v

        def constraints(z, grad=False):
            c = np.array([float(np.sum(z ** 2)) - 1.0])
            return (c, lambda w: w[0] * 2 * z) if grad else c

        z, info = augmented_lagrangian(objective, constraints, lambda z: np.clip(z, -5, 5), np.zeros((1, 2)),
                                       tol=1e-10, ctol=1e-10)
        np.testing.assert_allclose(z, np.full((1, 2), 1 / np.sqrt(2)), atol=1e-6)
