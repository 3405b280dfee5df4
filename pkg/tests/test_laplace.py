import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize, stats
from scipy.special import softmax

from llap import data as datasets
from llap import laplace, model
from llap.errors import DimensionMismatch
from llap.objectives import Dataset, Likelihood, TrainConfig, nll, train_map
from llap.precision import PrecisionSpec
from oracles import blr_problem, closed_form_alternation, linear_model

GAUSS = Likelihood("gaussian", 1.0)
CAT = Likelihood("categorical")


def dense_curv(H):
    return laplace.Curvature(dense=np.atleast_2d(np.asarray(H, dtype=float)))


def scalar_theta(values, names=None):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    names = names or [f"g{i}" for i in range(values.size)]
    groups = tuple(model.Group(n, i, 1, False, False) for i, n in enumerate(names))
    return model.GroupedParams(values, groups)


def blocked_theta(rng, sizes):
    groups, pos = [], 0
    for i, s in enumerate(sizes):
        groups.append(model.Group(f"g{i}", pos, s, False, False))
        pos += s
    return model.GroupedParams(rng.normal(size=pos), tuple(groups))


# curvature -------------------------------------------------------------

def test_ggn_outer_product_example():
    arch, params = linear_model(1, bias=True)
    lin = laplace.linearise(arch, params, np.array([[1.0]]))
    np.testing.assert_array_equal(laplace.ggn(lin, GAUSS).H, [[1.0, 1.0], [1.0, 1.0]])


def test_ggn_empty_data():
    arch, params = linear_model(3)
    lin = laplace.linearise(arch, params, np.zeros((0, 3)))
    np.testing.assert_array_equal(laplace.ggn(lin, GAUSS).H, np.zeros((3, 3)))


@pytest.mark.parametrize("lik", [Likelihood("gaussian", 0.5), CAT])
def test_ggn_matches_loop_accumulation(lik, ln_net):
    arch, params = ln_net
    X = np.random.default_rng(0).normal(size=(7, 3))
    lin = laplace.linearise(arch, params, X)
    curv = laplace.ggn(lin, lik)
    H = np.zeros((arch.n_params, arch.n_params))
    for x in X:
        J = model.jacobian(arch, params, x)
        yhat = model.forward(arch, params, x)
        if lik.kind == "gaussian":
            A = np.eye(2) / lik.noise_var
        else:
            p = softmax(yhat)
            A = np.diag(p) - np.outer(p, p)
        H += J.T @ A @ J
    np.testing.assert_allclose(curv.H, H, rtol=1e-10, atol=1e-12)
    assert curv.at == laplace.AT_LINEARISATION
    assert curv.min_eig_audit()


def test_linearisation_cache_matches_forward(ln_net):
    arch, params = ln_net
    X = np.random.default_rng(1).normal(size=(5, 3))
    lin = laplace.linearise(arch, params, X)
    np.testing.assert_allclose(lin.f0, model.forward(arch, params, X), rtol=1e-12, atol=1e-14)


# linear model ----------------------------------------------------------

def test_linear_predict_examples(ln_net):
    arch, params = ln_net
    X = np.random.default_rng(2).normal(size=(4, 3))
    full = laplace.linearise(arch, params, X, variant="full")
    simple = laplace.linearise(arch, params, X, variant="simple")
    f = model.forward(arch, params, X)
    np.testing.assert_allclose(laplace.linear_predict(full, full.theta0, X), f, rtol=1e-12, atol=1e-13)
    np.testing.assert_array_equal(laplace.linear_predict(simple, np.zeros(arch.n_params), X), 0.0)
    # fully normalised net with a dense read-out: J theta equals the network output
    np.testing.assert_allclose(laplace.linear_predict(simple, simple.theta0, X), f, atol=1e-8)
    with pytest.raises(DimensionMismatch):
        laplace.linear_predict(simple, np.zeros(3), X)


def test_linear_loss_grad_examples():
    X, y, lin, lik = blr_problem(0)
    prec = PrecisionSpec.isotropic(lin.groups, 2.0)
    theta = laplace.solve_theta_star(lin, lik, y, prec)
    assert np.linalg.norm(laplace.linear_loss_grad(lin, theta, lik, y, prec)) <= 1e-8
    v = np.arange(6.0)
    empty = laplace.linearise(lin.arch, lin.point, np.zeros((0, 6)), variant="simple")
    np.testing.assert_array_equal(laplace.linear_loss_grad(empty, v, lik, np.zeros((0, 1)), prec), 2.0 * v)


@pytest.mark.parametrize("variant", ["full", "simple"])
@pytest.mark.parametrize("lik", [Likelihood("gaussian", 0.2), CAT])
def test_linear_loss_grad_modes(ln_net, variant, lik):
    arch, params = ln_net
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, size=6) if lik.kind == "categorical" else rng.normal(size=(6, 2))
    lin = laplace.linearise(arch, params, X, variant=variant)
    prec = PrecisionSpec.isotropic(lin.groups, 0.3)
    theta = lin.theta0.values + 0.1 * rng.normal(size=lin.n_params)
    exact = laplace.linear_loss_grad(lin, theta, lik, y, prec)
    jvp = laplace.linear_loss_grad(lin, theta, lik, y, prec, mode="jvp")
    fd = laplace.linear_loss_grad(lin, theta, lik, y, prec, mode="fd")
    np.testing.assert_allclose(jvp, exact, rtol=1e-10, atol=1e-10)
    assert np.max(np.abs(fd - exact)) <= 1e-4 * np.max(np.abs(exact))
    h = 1e-6
    probe = rng.choice(lin.n_params, size=5, replace=False)
    for i in probe:
        e = np.zeros(lin.n_params)
        e[i] = h
        num = (laplace.linear_loss(lin, theta + e, lik, y, prec) - laplace.linear_loss(lin, theta - e, lik, y, prec))
        assert exact[i] == pytest.approx(num / (2 * h), abs=1e-5 * (1 + abs(exact[i])))


def test_linear_loss_grad_zero_direction_is_regulariser(ln_net):
    arch, params = ln_net
    X = np.random.default_rng(4).normal(size=(3, 3))
    lin = laplace.linearise(arch, params, X, variant="full")
    prec = PrecisionSpec.isotropic(lin.groups, 0.5)
    y = np.zeros((3, 2))
    g = laplace.linear_loss_grad(lin, lin.theta0, GAUSS, y, prec, mode="fd")
    np.testing.assert_allclose(g, laplace.linear_loss_grad(lin, lin.theta0, GAUSS, y, prec), rtol=1e-10)


def test_solve_theta_star_examples():
    arch, params = linear_model(1)
    lin = laplace.linearise(arch, params, np.array([[1.0]]), variant="simple")
    prec = PrecisionSpec.isotropic(lin.groups, 1.0)
    assert laplace.solve_theta_star(lin, GAUSS, np.array([[2.0]]), prec).values[0] == pytest.approx(1.0)
    X, y, lin, lik = blr_problem(1)
    big = PrecisionSpec.isotropic(lin.groups, 1e8)
    assert np.linalg.norm(laplace.solve_theta_star(lin, lik, y, big).values) <= 1e-6 * np.linalg.norm(y)


def test_solve_theta_star_categorical_grid():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 4))
    y = (X[:, 0] + 0.5 * rng.normal(size=20) > 0).astype(int)
    arch, params = linear_model(4, out=2)
    lin = laplace.linearise(arch, params, X, variant="simple")
    prec = PrecisionSpec.isotropic(lin.groups, 0.5)
    theta = laplace.solve_theta_star(lin, CAT, y, prec).values
    base = laplace.linear_loss(lin, theta, CAT, y, prec)
    grid = np.linspace(-0.05, 0.05, 101)
    losses = np.empty((101, 101))
    for i, a in enumerate(grid):
        for j, b in enumerate(grid):
            t = theta.copy()
            t[0] += a
            t[5] += b
            losses[i, j] = laplace.linear_loss(lin, t, CAT, y, prec)
    i, j = np.unravel_index(np.argmin(losses), losses.shape)
    assert (i, j) == (50, 50)
    assert losses.min() == base


def test_gaussian_closed_form_matches_newton():
    X, y, lin, lik = blr_problem(2)
    prec = PrecisionSpec.isotropic(lin.groups, 0.7)
    closed = laplace.solve_theta_star(lin, lik, y, prec).values
    A = laplace.ggn(lin, lik).H + 0.7 * np.eye(6)
    res = optimize.minimize(lambda t: laplace.linear_loss(lin, t, lik, y, prec), np.zeros(6),
                            jac=lambda t: laplace.linear_loss_grad(lin, t, lik, y, prec),
                            hess=lambda t: A, method="trust-exact", options={"gtol": 1e-12})
    np.testing.assert_allclose(closed, res.x, rtol=1e-6, atol=1e-9)


# evidence --------------------------------------------------------------

def test_evidence_examples():
    prec = PrecisionSpec(("g0",), (3.0,))
    assert laplace.evidence(scalar_theta(0.0), prec, dense_curv(0.0)) == pytest.approx(0.0, abs=1e-15)
    one = PrecisionSpec(("g0",), (1.0,))
    val = laplace.evidence(scalar_theta(1.0), one, dense_curv(1.0))
    assert val == pytest.approx(-0.5 * (1 + np.log(2)), abs=1e-15)
    assert val == pytest.approx(-0.846574, abs=1e-6)


def test_log_marginal_likelihood_matches_conjugate_model():
    X, y, lin, lik = blr_problem(3)
    curv = laplace.ggn(lin, lik)
    values = []
    for lam in (0.01, 0.3, 2.0, 40.0):
        prec = PrecisionSpec.isotropic(lin.groups, lam)
        theta = laplace.solve_theta_star(lin, lik, y, prec)
        ours = laplace.log_marginal_likelihood(lin, lik, y, theta, prec, curv)
        cov = lik.noise_var * np.eye(len(X)) + X @ X.T / lam
        ref = stats.multivariate_normal(np.zeros(len(X)), cov).logpdf(y[:, 0])
        assert ours == pytest.approx(ref, rel=1e-10)
        values.append((ours, ref))
    for (a, ra), (b, rb) in zip(values, values[1:]):
        assert (a - b) == pytest.approx(ra - rb, abs=1e-8)


def test_evidence_grad_zero_example():
    g = laplace.evidence_grad_loglam(scalar_theta(0.0), PrecisionSpec(("g0",), (2.5,)), dense_curv(0.0))
    assert g[0] == pytest.approx(0.0, abs=1e-15)


@given(seed=st.integers(0, 10_000))
def test_property_evidence_grad_matches_fd(seed):
    rng = np.random.default_rng(seed)
    theta = blocked_theta(rng, (2, 3, 4))
    U = rng.normal(size=(5, 9))
    lam = np.exp(rng.uniform(-2, 2, size=3))
    names = tuple(g.name for g in theta.groups)
    for curv in (laplace.Curvature(factor=U), dense_curv(U.T @ U)):
        prec = PrecisionSpec(names, lam)
        g = laplace.evidence_grad_loglam(theta, prec, curv)
        h = 1e-5
        for b in range(3):
            up, dn = np.log(lam).copy(), np.log(lam).copy()
            up[b] += h
            dn[b] -= h
            fd = (laplace.evidence(theta, PrecisionSpec(names, np.exp(up)), curv)
                  - laplace.evidence(theta, PrecisionSpec(names, np.exp(dn)), curv)) / (2 * h)
            assert g[b] == pytest.approx(fd, abs=1e-5 * (1 + abs(fd)))


def test_evidence_hessian_matches_fd():
    rng = np.random.default_rng(11)
    theta = blocked_theta(rng, (3, 2, 4))
    U = rng.normal(size=(4, 9))
    names = tuple(g.name for g in theta.groups)
    s = rng.normal(size=3)
    for curv in (laplace.Curvature(factor=U), dense_curv(U.T @ U)):
        def parts(s):
            lam = PrecisionSpec(names, np.exp(s)).diagonal(theta.groups)
            pp = laplace.PosteriorPrecision(curv, lam)
            blocks = [g.indices for g in theta.groups]
            ab = pp.absorbed_diagonal()
            return laplace._grad_blocks(theta.values, lam, ab, blocks), laplace._hess_blocks(
                theta.values, lam, ab, pp, blocks)
        _, Hs = parts(s)
        h = 1e-6
        fd = np.column_stack([(parts(s + h * e)[0] - parts(s - h * e)[0]) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(Hs, fd, atol=1e-6)


def test_posterior_precision_paths_agree():
    rng = np.random.default_rng(12)
    U = rng.normal(size=(3, 8))
    lam = np.exp(rng.normal(size=8))
    low = laplace.PosteriorPrecision(laplace.Curvature(factor=U), lam)
    dense = laplace.PosteriorPrecision(dense_curv(U.T @ U), lam)
    assert low.lowrank and not dense.lowrank
    assert low.logdet() == pytest.approx(dense.logdet(), rel=1e-12)
    np.testing.assert_allclose(low.inverse_diagonal(), dense.inverse_diagonal(), rtol=1e-10)
    np.testing.assert_allclose(low.absorbed_diagonal(), dense.absorbed_diagonal(), rtol=1e-8, atol=1e-14)
    blocks = [np.arange(3), np.arange(3, 8)]
    np.testing.assert_allclose(low.block_sq_sums(blocks), dense.block_sq_sums(blocks), rtol=1e-9)
    A = rng.normal(size=(4, 2, 8))
    np.testing.assert_allclose(low.block_sandwich(A), dense.block_sandwich(A), rtol=1e-9, atol=1e-13)


def test_mackay_scalar_fixed_point():
    rep = laplace.maximise_evidence(scalar_theta(1.0), dense_curv(1.0), PrecisionSpec(("g0",), (1e-4,)))
    assert rep.lam["g0"] == pytest.approx((np.sqrt(5) - 1) / 2, rel=1e-8)
    assert rep.lam["g0"] == pytest.approx(0.618034, abs=1e-6)
    assert rep.converged
    g = laplace.evidence_grad_loglam(scalar_theta(1.0), rep.precision, dense_curv(1.0))
    assert np.linalg.norm(g) <= 1e-6


def test_zero_curvature_hits_upper_clamp():
    theta = scalar_theta(np.zeros(3))
    rep = laplace.maximise_evidence(theta, dense_curv(np.zeros((3, 3))),
                                    PrecisionSpec(("g0", "g1", "g2"), (1e-4,) * 3))
    assert all(v == laplace.LAM_MAX for v in rep.lam.values())
    assert rep.degenerate == ["g0", "g1", "g2"]
    assert np.isfinite(rep.evidence)


@pytest.mark.parametrize("tying", ["single", "per-group"])
def test_methods_agree(tying):
    rng = np.random.default_rng(13)
    theta = blocked_theta(rng, (3, 4, 2))
    U = rng.normal(size=(5, 9))
    curv = laplace.Curvature(factor=U)
    init = PrecisionSpec.isotropic(theta.groups, 1e-2, tying)
    # the ascent's default stop (gradient norm 1e-6) leaves ~1e-6 relative error on flat blocks
    opts = {"gradient": {"tol": 1e-8, "max_iter": 50_000}}
    lams = {m: laplace.maximise_evidence(theta, curv, init, method=m, **opts.get(m, {})).precision.block_values()
            for m in laplace.EVIDENCE_METHODS}
    np.testing.assert_allclose(lams["gradient"], lams["mackay"], rtol=1e-6)
    np.testing.assert_allclose(lams["newton"], lams["mackay"], rtol=1e-6)


def test_effective_dimension_in_range():
    rng = np.random.default_rng(14)
    theta = blocked_theta(rng, (3, 4, 2))
    rep = laplace.maximise_evidence(theta, laplace.Curvature(factor=rng.normal(size=(5, 9))),
                                    PrecisionSpec.isotropic(theta.groups, 1.0, "per-group"))
    for g in theta.groups:
        assert 0.0 <= rep.gamma[g.name] <= g.length


@given(seed=st.integers(0, 10_000), a=st.floats(-6, 6), b=st.floats(-6, 6), t=st.floats(0, 1))
def test_property_evidence_concave_in_log_precision(seed, a, b, t):
    rng = np.random.default_rng(seed)
    theta = blocked_theta(rng, (3, 2))
    curv = laplace.Curvature(factor=rng.normal(size=(3, 5)))

    def M(s):
        return laplace.evidence(theta, PrecisionSpec.isotropic(theta.groups, np.exp(s)), curv)

    mid = M(t * a + (1 - t) * b)
    assert mid >= t * M(a) + (1 - t) * M(b) - 1e-10 * (1 + abs(mid))


# joint optimum ---------------------------------------------------------

@pytest.mark.parametrize("method", ["newton", "mackay"])
def test_em_alternate_matches_conjugate_oracle(method):
    X, y, lin, lik = blr_problem(4, N=40, P=8)
    w_ref, lam_ref = closed_form_alternation(X, y[:, 0], lik.noise_var, [np.arange(8)])
    curv = laplace.ggn(lin, lik)
    init = PrecisionSpec.isotropic(lin.groups, 1e-4, "single")
    theta, prec, rep = laplace.em_alternate(lin, lik, y, curv, init, method=method)
    assert rep.converged
    np.testing.assert_allclose(theta.values, w_ref, rtol=1e-6)
    assert prec.block_values()[0] == pytest.approx(lam_ref[0], rel=1e-6)


def test_em_alternate_at_fixed_point_takes_zero_rounds():
    X, y, lin, lik = blr_problem(5)
    curv = laplace.ggn(lin, lik)
    init = PrecisionSpec.isotropic(lin.groups, 1e-4, "single")
    _, prec, _ = laplace.em_alternate(lin, lik, y, curv, init)
    for method in ("newton", "mackay"):
        _, again, rep = laplace.em_alternate(lin, lik, y, curv, prec, method=method)
        assert rep.rounds == 0
        assert again.block_values()[0] == pytest.approx(prec.block_values()[0], rel=1e-6)


def test_em_alternate_categorical_methods_agree(ln_net):
    arch, params = ln_net
    rng = np.random.default_rng(6)
    X = rng.normal(size=(25, 3))
    y = rng.integers(0, 2, size=25)
    lin = laplace.linearise(arch, params, X, variant="simple")
    curv = laplace.ggn(lin, CAT)
    init = PrecisionSpec.isotropic(lin.groups, 1e-2, "single")
    _, a, _ = laplace.em_alternate(lin, CAT, y, curv, init, method="newton")
    _, b, _ = laplace.em_alternate(lin, CAT, y, curv, init, method="mackay", tol=1e-9)
    assert a.block_values()[0] == pytest.approx(b.block_values()[0], rel=1e-5)


# predictive ------------------------------------------------------------

def test_predictive_examples():
    arch, params = linear_model(3)
    lin = laplace.linearise(arch, params, np.zeros((0, 3)), variant="simple")
    x = np.array([[1.0, 0.0, 0.0]])
    post = laplace.predictive(lin, dense_curv(np.zeros((3, 3))), PrecisionSpec.isotropic(lin.groups, 4.0), x)
    assert post.cov[0, 0, 0] == pytest.approx(0.25)
    post = laplace.predictive(lin, dense_curv(np.eye(3)), PrecisionSpec.isotropic(lin.groups, 1.0), x)
    assert post.cov[0, 0, 0] == pytest.approx(0.5)


def test_predictive_matches_dense_inverse(ln_net):
    arch, params = ln_net
    rng = np.random.default_rng(7)
    X, Xs = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    lin = laplace.linearise(arch, params, X)
    curv = laplace.ggn(lin, GAUSS)
    prec = PrecisionSpec(tuple(g.name for g in lin.groups), np.exp(rng.normal(size=len(lin.groups))))
    post = laplace.predictive(lin, curv, prec, Xs)
    inv = np.linalg.inv(curv.H + np.diag(prec.diagonal(lin.groups)))
    Js = model.jacobian(arch, params, Xs)
    np.testing.assert_allclose(post.cov, np.einsum("mip,pq,mjq->mij", Js, inv, Js), rtol=1e-8, atol=1e-12)
    np.testing.assert_array_equal(post.mean, model.forward(arch, params, Xs))
    assert post.is_psd()


def test_predictive_nll_examples():
    mean = np.array([[0.3], [-1.0]])
    y = np.array([[0.5], [0.0]])
    post = laplace.PredictivePosterior(mean, np.zeros((2, 1, 1)))
    lik = Likelihood("gaussian", 0.2)
    assert laplace.predictive_nll(post, lik, y) == pytest.approx(nll(lik, mean, y) / 2)
    logits = np.array([[0.2, -1.0, 0.5], [1.0, 1.0, 0.0]])
    post = laplace.PredictivePosterior(logits, np.zeros((2, 3, 3)))
    labels = np.array([2, 0])
    for S in (1, 7):
        assert laplace.predictive_nll(post, CAT, labels, mc_samples=S) == pytest.approx(
            nll(CAT, logits, labels) / 2, rel=1e-12)


def test_predictive_nll_mc_self_consistency():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(3, 3))
    post = laplace.PredictivePosterior(np.array([[0.5, -0.2, 0.1]]), (A @ A.T)[None])
    labels = np.array([1])
    small = laplace._mc_label_probs(post, labels, 10_000, seed=1)[0]
    large = laplace._mc_label_probs(post, labels, 100_000, seed=2)[0]
    se = np.hypot(small.std() / np.sqrt(small.size), large.std() / np.sqrt(large.size))
    assert abs(small.mean() - large.mean()) <= 3 * se


def test_curvature_refresh_is_small_next_to_objective_gap():
    train, test = datasets.gen_toy_regression(0, 100, 50)
    arch = model.mlp(1, 1, (50, 50), layer_norm=True, bias=True)
    lik = Likelihood("gaussian", 0.05 ** 2)
    params = train_map(arch, lik, train, None, TrainConfig(lr=0.00025, epochs=90)).params
    lin = laplace.linearise(arch, params, train.X, variant="full")
    curv = laplace.ggn(lin, lik)
    init = PrecisionSpec.isotropic(lin.groups, 1e-4)

    def test_nll(curvature, prec):
        return laplace.predictive_nll(laplace.predictive(lin, curvature, prec, test.X), lik, test.y)

    naive = laplace.maximise_evidence(lin.theta0, curv, init, method="newton").precision
    _, star, _ = laplace.em_alternate(lin, lik, train.y, curv, init)
    theta_r, star_r, _ = laplace.em_alternate(lin, lik, train.y, curv, init, method="mackay",
                                              refresh_curvature=True)
    refreshed = laplace.ggn(lin, lik, theta_r)
    assert refreshed.at == laplace.AT_OPTIMUM
    gap = abs(test_nll(curv, star) - test_nll(curv, naive))
    assert abs(test_nll(curv, star) - test_nll(refreshed, star_r)) < gap
