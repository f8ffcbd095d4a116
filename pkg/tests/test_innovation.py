import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdemix.bridges import MDB, BridgeProblem, ExactState, sample_bridge
from sdemix.errors import StatePathInvalid
from sdemix.innovation import (
    b_logfc,
    log_jacobian,
    log_jacobian_all,
    theta_logfc,
    x_to_z,
    x_to_z_all,
    z_to_x,
    z_to_x_all,
)
from sdemix.sde import SdeModel, TimeGrid, euler_path_loglik

EMPTY = np.zeros(0)


def scaled_bm_model():
    """d=1, zero drift, diffusion coefficient theta[0]."""
    return SdeModel(
        dim=1,
        drift=lambda x, th, b: np.zeros_like(x),
        diffusion=lambda x, th, b: np.full(x.shape[:-1] + (1, 1), th[0]),
    )


def ou_model(rho=0.6):
    """d=1 OU drift, diffusion coefficient theta[0]."""
    return SdeModel(
        dim=1,
        drift=lambda x, th, b: -rho * x,
        diffusion=lambda x, th, b: np.full(x.shape[:-1] + (1, 1), th[0]),
    )


def orange_model():
    def drift(x, th, b):
        phi1, phi2 = b[..., 0], b[..., 1]
        return x * (phi1[..., None] - x) / (phi1 * phi2)[..., None]

    def diffusion(x, th, b):
        return (th[0] ** 2 * x)[..., None]

    return SdeModel(
        dim=1, drift=drift, diffusion=diffusion, is_valid_state=lambda x: x[..., 0] > 0
    )


def random_valid_path(model, grid, theta, b, rng, x0):
    from sdemix.sde import simulate_path

    return simulate_path(model, np.atleast_1d(x0), theta, b, grid, rng).values


class TestRoundTrip:
    def test_round_trip_identity(self):
        model = ou_model()
        grid = TimeGrid([0.0, 1.0, 2.5], [4, 6])
        theta = np.array([0.8])
        rng = np.random.default_rng(0)
        values = random_valid_path(model, grid, theta, EMPTY, rng, 0.5)
        z = x_to_z(model, grid, values, theta, EMPTY)
        anchors = values[grid.anchor_indices]
        back = z_to_x(model, grid, z, anchors, theta, EMPTY)
        assert np.allclose(back, values, atol=1e-10)
        z2 = x_to_z(model, grid, back, theta, EMPTY)
        for a, b2 in zip(z.per_interval, z2.per_interval):
            assert np.allclose(a, b2, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.2, 3.0), st.integers(2, 6))
    def test_round_trip_property(self, seed, th0, m):
        model = ou_model()
        grid = TimeGrid([0.0, 1.3, 2.0], m)
        theta = np.array([th0])
        rng = np.random.default_rng(seed)
        values = random_valid_path(model, grid, theta, EMPTY, rng, 1.0)
        z = x_to_z(model, grid, values, theta, EMPTY)
        back = z_to_x(model, grid, z, values[grid.anchor_indices], theta, EMPTY)
        assert np.allclose(back, values, atol=1e-10)

    def test_mdb_mean_path_has_zero_innovations(self):
        model = ou_model()
        grid = TimeGrid([0.0, 2.0], 5)
        theta = np.array([1.0])
        # recursive MDB mean: each interior point set to the step mean
        prob = BridgeProblem(
            model, theta, EMPTY, 0.0, 2.0, np.array([1.0]), ExactState(np.array([0.2])), 5
        )
        draw = sample_bridge(prob, MDB, normals=np.zeros((4, 1)))
        z = x_to_z(model, grid, draw.states, theta, EMPTY)
        assert np.allclose(z.per_interval[0], 0.0, atol=1e-12)

    def test_zero_innovations_give_mdb_mean_path(self):
        model = ou_model()
        grid = TimeGrid([0.0, 2.0], 5)
        theta = np.array([1.0])
        anchors = np.array([[1.0], [0.2]])
        zeros = [np.zeros((4, 1))]
        values, valid = z_to_x_all(model, grid, zeros, anchors, theta, EMPTY)
        assert valid
        prob = BridgeProblem(
            model, theta, EMPTY, 0.0, 2.0, np.array([1.0]), ExactState(np.array([0.2])), 5
        )
        draw = sample_bridge(prob, MDB, normals=np.zeros((4, 1)))
        assert np.allclose(values, draw.states, atol=1e-12)

    def test_hand_computed_single_interior_innovation(self):
        beta = 1.7
        model = scaled_bm_model()
        grid = TimeGrid([0.0, 1.0], 2)
        theta = np.array([beta])
        x0, x1, x2 = 0.3, 0.9, 0.4
        values = np.array([[x0], [x1], [x2]])
        z = x_to_z(model, grid, values, theta, EMPTY)
        dtau = 0.5
        expected = (x1 - x0 - (x2 - x0) / 2.0) / np.sqrt(beta * dtau / 2.0)
        assert np.allclose(z.per_interval[0], [[expected]], rtol=1e-12)

    def test_anchors_never_move_under_parameter_changes(self):
        model = ou_model()
        grid = TimeGrid([0.0, 1.0, 2.0, 3.0], 3)
        rng = np.random.default_rng(5)
        theta = np.array([0.7])
        values = random_valid_path(model, grid, theta, EMPTY, rng, 0.3)
        z = x_to_z(model, grid, values, theta, EMPTY)
        anchors = values[grid.anchor_indices]
        for th_new in [0.1, 0.7, 2.9]:
            out = z_to_x(model, grid, z, anchors, np.array([th_new]), EMPTY)
            assert np.array_equal(out[grid.anchor_indices], anchors)
            if th_new != 0.7:
                interior = np.setdiff1d(np.arange(grid.n_fine), grid.anchor_indices)
                assert not np.allclose(out[interior], values[interior])

    def test_invalid_reconstruction_raises(self):
        model = orange_model()
        grid = TimeGrid([0.0, 100.0], 4)
        b = np.array([195.0, 350.0])
        theta = np.array([0.08])
        anchors = np.array([[30.0], [40.0]])
        z = [np.full((3, 1), -60.0)]  # huge negative innovations push x below 0
        with pytest.raises(StatePathInvalid):
            z_to_x(
                model,
                grid,
                type("Z", (), {"per_interval": z, "unit_id": "0"})(),
                anchors,
                theta,
                b,
            )


class TestLogJacobian:
    def test_m_equal_one_gives_zero(self):
        model = ou_model()
        grid = TimeGrid([0.0, 1.0, 2.0], 1)
        values = np.array([[0.1], [0.2], [0.3]])
        assert log_jacobian(model, grid, values, np.array([1.0]), EMPTY) == 0.0

    def test_constant_beta_direct_product(self):
        beta = 2.3
        model = scaled_bm_model()
        grid = TimeGrid([0.0, 1.0, 3.0], [3, 4])
        theta = np.array([beta])
        values = np.linspace(0, 1, grid.n_fine)[:, None]
        expected = 0.0
        for j in range(grid.n_intervals):
            m = grid.m_per_interval[j]
            dt = grid.dt(j)
            for k in range(1, m):
                ratio = (m - k) / (m - k + 1)
                expected += 0.5 * np.log(beta * dt * ratio)
        got = log_jacobian(model, grid, values, theta, EMPTY)
        assert np.allclose(got, expected, rtol=1e-12)

    @pytest.mark.parametrize(
        "dim,m", [(1, 3), (1, 4), (2, 2), (2, 4)]
    )
    def test_matches_finite_difference_determinant(self, dim, m):
        # the analytic value must equal log|det d x_interior / d z_interior|
        # of the z_to_x map, interval by interval
        if dim == 1:
            model = ou_model()
            theta = np.array([0.9])
            x0 = np.array([0.4])
        else:
            def drift(x, th, b):
                return np.stack([-0.5 * x[..., 0], 0.3 * x[..., 0] - 0.2 * x[..., 1]], axis=-1)

            def diffusion(x, th, b):
                base = np.array([[1.1, 0.3], [0.3, 0.8]])
                return th[0] * np.broadcast_to(base, x.shape[:-1] + (2, 2)).copy()

            model = SdeModel(dim=2, drift=drift, diffusion=diffusion)
            theta = np.array([0.7])
            x0 = np.array([0.4, -0.1])
        grid = TimeGrid([0.0, 1.0], m)
        rng = np.random.default_rng(1)
        values = random_valid_path(model, grid, theta, EMPTY, rng, x0)
        anchors = values[grid.anchor_indices]
        z0 = x_to_z(model, grid, values, theta, EMPTY).per_interval
        n_free = (m - 1) * dim
        if n_free == 0:
            return

        def flat_map(zf):
            z = [zf.reshape(m - 1, dim)]
            out, _ = z_to_x_all(model, grid, z, anchors, theta, EMPTY)
            interior = np.setdiff1d(np.arange(grid.n_fine), grid.anchor_indices)
            return out[interior].ravel()

        z_flat = z0[0].ravel()
        eps = 1e-6
        J = np.empty((n_free, n_free))
        for col in range(n_free):
            up, dn = z_flat.copy(), z_flat.copy()
            up[col] += eps
            dn[col] -= eps
            J[:, col] = (flat_map(up) - flat_map(dn)) / (2 * eps)
        fd = np.linalg.slogdet(J)[1]
        analytic = log_jacobian(model, grid, values, theta, EMPTY)
        assert np.allclose(analytic, fd, rtol=1e-4, atol=1e-5)


class TestFullConditionals:
    def test_flat_prior_m1_is_anchor_loglik(self):
        model = ou_model()
        grid = TimeGrid([0.0, 1.0, 2.0], 1)
        theta = np.array([1.3])
        anchors = np.array([[[0.5], [0.2], [-0.1]]])
        z_units = [[np.zeros((0, 1)), np.zeros((0, 1))]]
        got = theta_logfc(model, grid, theta, np.zeros((1, 0)), z_units, anchors, lambda th: 0.0)
        direct = float(euler_path_loglik(model, anchors[0], grid.fine_times, theta, EMPTY))
        assert np.allclose(got, direct, rtol=1e-12)

    def test_round_trip_invariance(self):
        model = ou_model()
        grid = TimeGrid([0.0, 1.0, 2.0], 4)
        theta = np.array([0.8])
        rng = np.random.default_rng(2)
        values = random_valid_path(model, grid, theta, EMPTY, rng, 0.2)
        z = x_to_z_all(model, grid, values, theta, EMPTY)
        anchors = values[grid.anchor_indices]
        via_z = theta_logfc(
            model, grid, theta, np.zeros((1, 0)), [z], anchors[None], lambda th: 0.0
        )
        direct = float(
            euler_path_loglik(model, values, grid.fine_times, theta, EMPTY)
        ) + float(log_jacobian_all(model, grid, values, theta, EMPTY))
        assert np.allclose(via_z, direct, rtol=1e-10)

    def test_out_of_support_is_neg_inf(self):
        model = ou_model()
        grid = TimeGrid([0.0, 1.0], 2)
        anchors = np.array([[[0.5], [0.2]]])
        z_units = [[np.zeros((1, 1))]]
        lp = theta_logfc(
            model,
            grid,
            np.array([-1.0]),
            np.zeros((1, 0)),
            z_units,
            anchors,
            lambda th: 0.0 if th[0] > 0 else -np.inf,
        )
        assert lp == -np.inf

    def test_b_logfc_m1_gaussian_prior_plus_anchor(self):
        model = orange_model()
        grid = TimeGrid([0.0, 100.0], 1)
        theta = np.array([0.08])
        b_i = np.array([195.0, 350.0])
        psi = np.array([195.0, 350.0, 25.0, 52.5])
        anchors_i = np.array([[30.0], [36.0]])

        def log_prior_b(b, ps):
            return float(
                -0.5 * ((b[0] - ps[0]) ** 2 / ps[2] ** 2 + (b[1] - ps[1]) ** 2 / ps[3] ** 2)
                - np.log(2 * np.pi * ps[2] * ps[3])
            )

        got = b_logfc(model, grid, b_i, theta, psi, [np.zeros((0, 1))], anchors_i, log_prior_b)
        direct = log_prior_b(b_i, psi) + float(
            euler_path_loglik(model, anchors_i, grid.fine_times, theta, b_i)
        )
        assert np.allclose(got, direct, rtol=1e-12)

    def test_unit_factorisation(self):
        # changing one unit's b changes the joint by exactly that
        # unit's b_logfc difference
        model = orange_model()
        grid = TimeGrid([0.0, 100.0, 200.0], 3)
        theta = np.array([0.08])
        psi = np.array([195.0, 350.0, 25.0, 52.5])
        rng = np.random.default_rng(3)
        b = np.array([[190.0, 340.0], [205.0, 365.0]])
        values = np.stack(
            [random_valid_path(model, grid, theta, b[i], rng, 30.0) for i in range(2)]
        )
        z_units = [x_to_z_all(model, grid, values[i], theta, b[i]) for i in range(2)]
        anchors = values[:, grid.anchor_indices]

        def log_prior_b(bi, ps):
            return float(
                -0.5 * ((bi[0] - ps[0]) ** 2 / ps[2] ** 2 + (bi[1] - ps[1]) ** 2 / ps[3] ** 2)
            )

        def joint(bmat):
            return sum(
                b_logfc(model, grid, bmat[i], theta, psi, z_units[i], anchors[i], log_prior_b)
                for i in range(2)
            )

        b_new = b.copy()
        b_new[1] = [210.0, 330.0]
        delta_joint = joint(b_new) - joint(b)
        delta_unit = b_logfc(
            model, grid, b_new[1], theta, psi, z_units[1], anchors[1], log_prior_b
        ) - b_logfc(model, grid, b[1], theta, psi, z_units[1], anchors[1], log_prior_b)
        assert np.allclose(delta_joint, delta_unit, rtol=1e-10)


class TestGibbsStationarity:
    def test_theta_marginal_matches_anchor_posterior(self):
        # zero drift, beta = theta, anchors fixed: interior points carry
        # no information about theta, so the Gibbs chain alternating
        # exact bridge redraws with theta | z MH must leave the anchor
        # likelihood N(x_end; x0, theta*T) as the theta marginal. A sign
        # error in the innovation Jacobian multiplies the marginal by
        # theta^{+-(m-1)/2} and fails this test decisively.
        model = scaled_bm_model()
        T, m = 1.0, 4
        grid = TimeGrid([0.0, T], m)
        x0, xe = 0.0, 0.8
        anchors = np.array([[x0], [xe]])
        prior = lambda th: 0.0 if 0.02 < th[0] < 30.0 else -np.inf

        rng = np.random.default_rng(42)
        theta = np.array([1.0])
        prob0 = BridgeProblem(
            model, theta, EMPTY, 0.0, T, np.array([x0]), ExactState(np.array([xe])), m
        )
        values = sample_bridge(prob0, MDB, rng).states
        n_sweeps, keep = 40_000, []
        for _ in range(n_sweeps):
            # exact conditioned-walk redraw (MDB is exact here)
            prob = BridgeProblem(
                model, theta, EMPTY, 0.0, T, np.array([x0]), ExactState(np.array([xe])), m
            )
            values = sample_bridge(prob, MDB, rng).states
            z = [x_to_z_all(model, grid, values, theta, EMPTY)]
            # log-scale RW on theta against the innovation full conditional
            th_new = theta * np.exp(0.5 * rng.standard_normal())
            cur = theta_logfc(model, grid, theta, np.zeros((1, 0)), z, anchors[None], prior)
            new = theta_logfc(model, grid, th_new, np.zeros((1, 0)), z, anchors[None], prior)
            if np.log(rng.uniform()) < (new + np.log(th_new[0])) - (cur + np.log(theta[0])):
                theta = th_new
            keep.append(theta[0])
        draws = np.array(keep[2000:])

        ths = np.linspace(0.02, 30.0, 4000)
        post = np.exp(-0.5 * (xe - x0) ** 2 / (ths * T)) / np.sqrt(ths * T)
        cdf = np.cumsum(post)
        cdf /= cdf[-1]
        emp = np.searchsorted(np.sort(draws), ths) / draws.size
        ks = np.max(np.abs(emp - cdf))
        assert ks < 0.05, f"KS={ks:.3f}"
