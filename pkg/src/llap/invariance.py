"""Numerical certificates for the scaling theory of normalised networks.

Each ``check_*`` returns a :class:`ScalingCheckReport` whose pass flags are
decided purely by comparing measured deviations against fixed tolerances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import laplace, model
from .errors import DimensionMismatch, NegativeStdDev
from .objectives import map_loss, map_loss_grad, out_hessian_factor
from .precision import PrecisionSpec

GRADIENT_TOL = 1e-6
LEMMA_TOL = 1e-7
LEMMA_TOL_FD = 1e-4
STATIONARY_TOL = 1e-4
POSTERIOR_TOL = 1e-2
DIRECTIONAL_TOL = 1e-8


@dataclass
class ScalingCheckReport:
    name: str
    k_values: list
    deviations: dict = field(default_factory=dict)
    tolerance: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def max_deviation(self):
        return max((max(v.values(), default=0.0) for v in self.deviations.values()), default=0.0)

    @property
    def passed(self):
        return self.max_deviation <= self.tolerance

    def to_dict(self):
        return {"check": self.name, "k": list(self.k_values), "tolerance": self.tolerance,
                "max_deviation": self.max_deviation, "passed": self.passed,
                "deviations": {str(k): v for k, v in self.deviations.items()}, **self.details}


def rel_dev(a, b):
    """Max-abs deviation relative to the reference ``b``'s max-abs entry."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _fd_jacobian(arch, params, X):
    """Jacobian assembled column by column from finite-difference JVPs."""
    P = arch.n_params
    J = np.empty((len(X), arch.output_dim, P))
    e = np.zeros(P)
    for j in range(P):
        e[j] = 1.0
        J[:, :, j] = model.jvp_fd(arch, params, X, e)
        e[j] = 0.0
    return J


def _jac(arch, params, X, jvp):
    if jvp == "exact":
        return model.jacobian(arch, params, X)
    if jvp == "fd":
        return _fd_jacobian(arch, params, X)
    raise ValueError(f"unknown jvp mode {jvp!r}")


def check_scaling_lemma(arch, params, X, lik, k_set, jvp="exact", probe_seed=0, tol=None):
    """Block scaling of Jacobians and GGN blocks under ``theta' + k theta''``.

    Checks ``J'_k = J'``, ``k J''_k = J''``, ``H'_k = H'``, ``k X_k = X``,
    ``k^2 H''_k = H''`` and ``h_k(theta' + k theta'') = h(theta' + theta'')``
    for a random probe ``theta``.
    """
    tol = (LEMMA_TOL if jvp == "exact" else LEMMA_TOL_FD) if tol is None else tol
    X = np.atleast_2d(X)
    m = params.normalised_mask()
    f0 = model.forward(arch, params, X)
    J = _jac(arch, params, X, jvp)
    H = _ggn_dense(lik, f0, J)
    probe = params.values + np.random.default_rng(probe_seed).normal(size=params.values.size)
    h = f0 + np.einsum("ndp,p->nd", J, probe - params.values)
    report = ScalingCheckReport("scaling_lemma", list(k_set), tolerance=tol,
                                details={"jvp": jvp, "n_params": int(params.values.size)})
    for k in k_set:
        pk = model.scale_group(params, k)
        fk = model.forward(arch, pk, X)
        Jk = _jac(arch, pk, X, jvp)
        Hk = _ggn_dense(lik, fk, Jk)
        probe_k = np.where(m, k * probe, probe)
        hk = fk + np.einsum("ndp,p->nd", Jk, probe_k - pk.values)
        report.deviations[k] = {
            "J_prime": rel_dev(Jk[:, :, ~m], J[:, :, ~m]),
            "J_norm": rel_dev(k * Jk[:, :, m], J[:, :, m]),
            "H_prime": rel_dev(Hk[np.ix_(~m, ~m)], H[np.ix_(~m, ~m)]),
            "H_cross": rel_dev(k * Hk[np.ix_(m, ~m)], H[np.ix_(m, ~m)]),
            "H_norm": rel_dev(k * k * Hk[np.ix_(m, m)], H[np.ix_(m, m)]),
            "h": rel_dev(hk, h),
        }
    return report


def _ggn_dense(lik, outputs, J):
    U = np.einsum("nki,nip->nkp", out_hessian_factor(lik, outputs), J).reshape(-1, J.shape[2])
    return U.T @ U


@dataclass
class StationarySolution:
    lin: laplace.Linearisation
    theta: object
    precision: PrecisionSpec
    report: object = None


def solve_stationary(arch, params, X, y, lik, tying="per-group", variant="simple", include_biases=True,
                     tol=1e-10, max_rounds=500, init_lambda=laplace.INITIAL_PRECISION):
    """Joint optimum ``(theta*, Lambda*)`` with curvature fixed at the linearisation point."""
    lin = laplace.linearise(arch, params, X, variant=variant, include_biases=include_biases)
    curv = laplace.ggn(lin, lik)
    init = PrecisionSpec.isotropic(lin.groups, init_lambda, tying)
    theta, prec, report = laplace.em_alternate(lin, lik, y, curv, init, tol=tol, max_rounds=max_rounds)
    return StationarySolution(lin, theta, prec, report)


def check_stationary_scaling(base, scaled, k, tol=STATIONARY_TOL):
    """Compare a solution at ``theta' + k theta''`` with the mapped base solution."""
    m = base.theta.normalised_mask()
    theta_map = np.where(m, k * base.theta.values, base.theta.values)
    lam_base = base.precision.diagonal(base.lin.groups)
    lam_map = np.where(m, lam_base / k ** 2, lam_base)
    lam_k = scaled.precision.diagonal(scaled.lin.groups)
    # a block pinned at the upper clamp in both solutions stands for an infinite precision
    pinned = (lam_base >= laplace.LAM_MAX) & (lam_k >= laplace.LAM_MAX)
    lam_dev = np.where(pinned, 0.0, np.abs(lam_k - lam_map) / lam_map)
    report = ScalingCheckReport("stationary_scaling", [k], tolerance=tol,
                                details={"tying": base.precision.tying})
    report.deviations[k] = {
        "theta": rel_dev(scaled.theta.values, theta_map),
        "lambda": float(np.max(lam_dev, initial=0.0)),
    }
    report.details["pinned_groups"] = sorted({g.name for g in base.lin.groups if np.all(pinned[g.indices])})
    return report


def run_stationary_scaling(arch, params, X, y, lik, k_set, tying="per-group", variant="simple",
                           include_biases=True, tol=STATIONARY_TOL):
    base = solve_stationary(arch, params, X, y, lik, tying, variant, include_biases)
    report = ScalingCheckReport("stationary_scaling", list(k_set), tolerance=tol, details={"tying": tying})
    for k in k_set:
        scaled = base if k == 1 else solve_stationary(arch, model.scale_group(params, k), X, y, lik, tying,
                                                      variant, include_biases)
        report.deviations[k] = check_stationary_scaling(base, scaled, k, tol).deviations[k]
    return report


def predictive_std(arch, params, X, y, lik, Xtest, tying="per-group", variant="simple", include_biases=True):
    sol = solve_stationary(arch, params, X, y, lik, tying, variant, include_biases)
    curv = laplace.ggn(sol.lin, lik)
    return laplace.predictive(sol.lin, curv, sol.precision, Xtest).std


def check_posterior_invariance(arch, params, X, y, lik, Xtest, k_set, tying="per-group", variant="simple",
                               include_biases=True, tol=POSTERIOR_TOL):
    """Relative spread of predictive std-devs across rescaled linearisation points."""
    ref = predictive_std(arch, params, X, y, lik, Xtest, tying, variant, include_biases)
    report = ScalingCheckReport("posterior_invariance", list(k_set), tolerance=tol, details={"tying": tying})
    profiles = {}
    for k in k_set:
        std = ref if k == 1 else predictive_std(arch, model.scale_group(params, k), X, y, lik, Xtest, tying,
                                                variant, include_biases)
        profiles[k] = std
        report.deviations[k] = {"std": float(np.max(np.abs(std - ref) / ref))}
    report.details["profiles"] = {str(k): v.ravel().tolist() for k, v in profiles.items()}
    return report


def check_directional_zero(arch, params, Xtest, tol=DIRECTIONAL_TOL, direction="normalised"):
    """Derivative of the penultimate features along the normalised parameters.

    ``direction="hidden"`` probes every hidden-layer weight and bias instead,
    which is the same direction on a fully normalised net and a nonzero one
    on a net without layer norm (the negative control).
    """
    Xtest = np.atleast_2d(Xtest)
    if direction == "normalised":
        mask = params.normalised_mask()
    elif direction == "hidden":
        mask = model.hidden_mask(params)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    phi = model.penultimate(arch, params, Xtest)
    dphi = model.directional_derivative_penultimate(arch, params, Xtest, mask)
    dout = model.jvp_exact(arch, params, Xtest, np.where(mask, params.values, 0.0))
    value = float(np.max(np.abs(dphi), initial=0.0))
    bound = tol * (1.0 + float(np.max(np.abs(phi), initial=0.0)))
    report = ScalingCheckReport("directional_zero", [], tolerance=bound,
                                details={"direction": direction,
                                         "output_directional": float(np.max(np.abs(dout), initial=0.0))})
    report.deviations["phi"] = {"max_abs": value}
    return report


def check_gradient_agreement(arch, params, data, lik, prec, tol=GRADIENT_TOL):
    """Network loss and full-variant linear-model loss share their gradient at the linearisation point.

    The shared gradient is generally nonzero after truncated training, so the
    linearisation point is not a minimiser of the linear-model loss.
    """
    g_net = map_loss_grad(arch, params, lik, data, prec)
    lin = laplace.linearise(arch, params, data.X, variant="full")
    g_lin = laplace.linear_loss_grad(lin, lin.theta0, lik, data.y, prec)
    scale = 1.0 + float(np.max(np.abs(g_net), initial=0.0))
    report = ScalingCheckReport("gradient_agreement", [], tolerance=tol,
                                details={"grad_inf_norm": scale - 1.0})
    report.deviations["grad"] = {"max_abs": float(np.max(np.abs(g_net - g_lin), initial=0.0)) / scale}
    return report


def check_ray_descent(arch, params, data, lik, prec, k_values=(0.25, 0.5, 0.75, 0.9, 0.99)):
    """MAP loss strictly decreases when the normalised weights shrink by ``k < 1``.

    The deviation for each ``k`` is ``max(0, loss_k - loss_1)``, so any
    non-decrease (including a tie) fails against the zero tolerance.
    """
    if not arch.fully_normalised:
        raise ValueError("ray descent needs a fully normalised architecture")
    if any(not 0 < k < 1 for k in k_values):
        raise ValueError("probe scales must lie in (0, 1)")
    base = map_loss(arch, params, lik, data, prec)
    report = ScalingCheckReport("ray_descent", list(k_values), tolerance=0.0, details={"loss": base})
    for k in k_values:
        drop = base - map_loss(arch, model.scale_group(params, k), lik, data, prec)
        report.deviations[k] = {"descent": 0.0 if drop > 0 else float(-drop) + np.finfo(float).tiny}
        report.details[f"drop_{k}"] = drop
    return report


def wasserstein2_1d(mu1, sigma1, mu2, sigma2):
    if sigma1 < 0 or sigma2 < 0:
        raise NegativeStdDev("standard deviations must be non-negative")
    return float(np.hypot(mu1 - mu2, sigma1 - sigma2))


def posterior_distance(post_a, post_b):
    """Mean per-point 1-d Gaussian W2 distance over a shared test set (scalar outputs)."""
    if post_a.mean.shape != post_b.mean.shape or post_a.mean.shape[1] != 1:
        raise DimensionMismatch("posteriors must share a test set and have scalar outputs")
    mu_a, mu_b = post_a.mean[:, 0], post_b.mean[:, 0]
    sd_a, sd_b = post_a.std[:, 0], post_b.std[:, 0]
    return float(np.mean(np.hypot(mu_a - mu_b, sd_a - sd_b)))
