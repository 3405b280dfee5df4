"""Linearised-Laplace engine.

Builds the Jacobian-feature linear model around a trained point, its GGN
curvature, the convex linear-model solver, evidence maximisation over
per-group precisions, the alternating joint optimum and the Gaussian
predictive posterior.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg, model
from .errors import DimensionMismatch, NotConverged, ZeroDirection
from .objectives import nll, nll_grad, out_hessian_factor
from .precision import PrecisionSpec

log = logging.getLogger(__name__)

LAM_MIN, LAM_MAX = 1e-10, 1e10
DEGENERATE_SQNORM = 1e-20
INITIAL_PRECISION = 1e-4
VARIANTS = ("full", "simple")
AT_LINEARISATION, AT_OPTIMUM = "theta_tilde", "theta_star"


@dataclass(frozen=True, eq=False)
class Linearisation:
    """Affine (``full``) or purely linear (``simple``) surrogate around ``point``.

    The linear model's coordinates are ``point.select(include_biases)``;
    excluded bias entries stay frozen at their trained values.
    """

    arch: model.Architecture
    point: model.GroupedParams
    variant: str
    include_biases: bool
    X: np.ndarray
    f0: np.ndarray
    J: np.ndarray
    theta0: model.GroupedParams
    sel: np.ndarray

    @property
    def groups(self):
        return self.theta0.groups

    @property
    def n_params(self):
        return self.sel.size

    @property
    def offset(self):
        if self.variant == "simple":
            return np.zeros_like(self.f0)
        return self.f0 - np.einsum("ndp,p->nd", self.J, self.theta0.values)

    def embed(self, v):
        full = np.zeros(self.point.values.size)
        full[self.sel] = v
        return full

    def features(self, X):
        return model.jacobian(self.arch, self.point, X, include_biases=self.include_biases)

    def params(self, values):
        return self.theta0.with_values(values)


def linearise(arch, params, X, variant="full", include_biases=True):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    theta0, sel = params.select(include_biases)
    if len(X):
        f0 = model.forward(arch, params, X)
        J = model.jacobian(arch, params, X, include_biases=include_biases)
    else:
        f0 = np.zeros((0, arch.output_dim))
        J = np.zeros((0, arch.output_dim, sel.size))
    return Linearisation(arch, params, variant, include_biases, X, f0, J, theta0, sel)


def _values(theta):
    return theta.values if isinstance(theta, model.GroupedParams) else np.asarray(theta, dtype=np.float64)


def train_outputs(lin, theta):
    """Linear-model outputs on the cached training inputs."""
    v = _values(theta)
    return lin.offset + np.einsum("ndp,p->nd", lin.J, v)


def linear_predict(lin, theta, x):
    v = _values(theta)
    if v.shape != (lin.n_params,):
        raise DimensionMismatch(f"expected {lin.n_params} linear-model weights, got {v.shape}")
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    Jx = lin.features(X if not single else X[None])
    out = np.einsum("ndp,p->nd", Jx, v)
    if lin.variant == "full":
        out = out + model.forward(lin.arch, lin.point, X if not single else X[None])
        out = out - np.einsum("ndp,p->nd", Jx, lin.theta0.values)
    return out[0] if single else out


class Curvature:
    """PSD curvature ``H``, stored as ``U^T U`` when a square-root factor is known."""

    def __init__(self, factor=None, dense=None, at=AT_LINEARISATION, include_biases=True):
        if factor is None and dense is None:
            raise ValueError("need a factor or a dense matrix")
        self.factor = None if factor is None else np.asarray(factor, dtype=np.float64)
        self._dense = None if dense is None else np.asarray(dense, dtype=np.float64)
        self.at = at
        self.include_biases = include_biases

    @property
    def dim(self):
        return self.factor.shape[1] if self.factor is not None else self._dense.shape[0]

    @property
    def H(self):
        if self._dense is None:
            self._dense = self.factor.T @ self.factor
        return self._dense

    def min_eig_audit(self):
        H = self.H
        w = np.linalg.eigvalsh(0.5 * (H + H.T))
        return float(w[0]) >= -1e-8 * max(np.trace(H), 0.0) / max(self.dim, 1)


def ggn(lin, lik, theta=None):
    """``sum_i J_i^T d2l_i J_i`` at the network outputs, or at ``h(theta)`` when given."""
    if theta is None:
        outputs, at = lin.f0, AT_LINEARISATION
    else:
        outputs, at = train_outputs(lin, theta), AT_OPTIMUM
    N, d, P = lin.J.shape
    F = out_hessian_factor(lik, outputs) if N else np.zeros((0, d, d))
    U = np.einsum("nkd,ndp->nkp", F, lin.J).reshape(N * d, P)
    return Curvature(factor=U, at=at, include_biases=lin.include_biases)


class PosteriorPrecision:
    """``H + diag(lam)`` with log-det, solves, inverse diagonal and sandwiches.

    Uses the low-rank identities when ``H`` has a factor with fewer rows than
    columns, otherwise a dense Cholesky with the jitter ladder.
    """

    def __init__(self, curv, lam, max_jitter=1e-6):
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (curv.dim,):
            raise DimensionMismatch(f"precision diagonal has length {lam.shape}, curvature dimension {curv.dim}")
        self.lam = lam
        self.lowrank = curv.factor is not None and curv.factor.shape[0] < curv.dim
        if self.lowrank:
            self._op = linalg.DiagPlusLowRank(lam, curv.factor)
            self.jitter = 0.0
        else:
            self._H = curv.H
            M = curv.H.copy()
            M[np.diag_indices_from(M)] += lam
            self._chol = linalg.cholesky(0.5 * (M + M.T), max_jitter)
            self.jitter = self._chol.jitter

    def logdet(self):
        return self._op.log_det() if self.lowrank else linalg.log_det_psd(self._chol)

    def solve(self, b):
        return self._op.solve(b) if self.lowrank else linalg.solve(self._chol, b)

    def inverse_diagonal(self):
        return self._op.inverse_diagonal() if self.lowrank else linalg.inverse_diagonal(self._chol)

    def absorbed_diagonal(self):
        """``1 - lam_i ((H + Lambda)^-1)_ii``, the per-parameter share of the effective dimension."""
        if self.lowrank:
            return self._op.absorbed_diagonal()
        return np.diag(linalg.solve(self._chol, self._H)).copy()

    def block_sq_sums(self, blocks):
        """Blockwise sums of squared entries of ``(H + Lambda)^-1``."""
        if self.lowrank:
            return self._op.block_sq_sums(blocks)
        inv = linalg.solve(self._chol, np.eye(self.lam.size))
        ind = np.zeros((self.lam.size, len(blocks)))
        for i, b in enumerate(blocks):
            ind[b, i] = 1.0
        return ind.T @ (inv * inv) @ ind

    def block_sandwich(self, A):
        """``A_m M^{-1} A_m^T`` for each (d, P) slice of ``A`` (M, d, P)."""
        m, d, P = A.shape
        flat = A.reshape(m * d, P)
        if self.lowrank:
            op = self._op
            base = np.einsum("mip,mjp->mij", A, A / op.d)
            W = linalg.sla.solve_triangular(op.chol.L, op.UDinv @ flat.T, lower=True, check_finite=False)
            W = W.reshape(-1, m, d)
            S = base - np.einsum("rmi,rmj->mij", W, W)
        else:
            W = linalg.sla.solve_triangular(self._chol.L, flat.T, lower=True, check_finite=False)
            W = W.reshape(P, m, d)
            S = np.einsum("pmi,pmj->mij", W, W)
        return 0.5 * (S + np.swapaxes(S, 1, 2))


def evidence(theta, prec, curv, max_jitter=1e-6):
    """Lambda-dependent part of the log evidence; the additive constant is dropped."""
    lam = prec.diagonal(theta.groups)
    pp = PosteriorPrecision(curv, lam, max_jitter)
    return _evidence_value(theta.values, lam, pp)


def _evidence_value(v, lam, pp):
    return -0.5 * (float(np.sum(lam * v * v)) + pp.logdet() - float(np.sum(np.log(lam))))


def log_marginal_likelihood(lin, lik, y, theta, prec, curv, max_jitter=1e-6):
    """Evidence plus the data-fit term at ``theta``.

    For a Gaussian likelihood evaluated at the linear-model optimum this is
    the exact log marginal likelihood of the conjugate model.
    """
    fit = nll(lik, train_outputs(lin, theta), y) if len(y) else 0.0
    return -fit + evidence(theta, prec, curv, max_jitter)


def evidence_grad_loglam(theta, prec, curv, max_jitter=1e-6):
    """Gradient of ``evidence`` with respect to each block's log-precision."""
    lam = prec.diagonal(theta.groups)
    pp = PosteriorPrecision(curv, lam, max_jitter)
    return _grad_blocks(theta.values, lam, pp.absorbed_diagonal(), prec.blocks(theta.groups))


def _grad_blocks(v, lam, absorbed, blocks):
    # d_b - lam_b tr_b((H + Lambda)^-1) is summed from the absorbed diagonal to avoid cancellation
    out = np.empty(len(blocks))
    for i, b in enumerate(blocks):
        lb = lam[b[0]] if b.size else 1.0
        out[i] = -0.5 * (lb * np.sum(v[b] ** 2) - np.sum(absorbed[b]))
    return out


def _hess_blocks(v, lam, absorbed, pp, blocks):
    """Hessian of the evidence in block log-precisions at fixed weights."""
    lb = np.array([lam[b[0]] if b.size else 1.0 for b in blocks])
    diag = np.array([lb_ * np.sum(v[b] ** 2) + b.size - np.sum(absorbed[b]) for b, lb_ in zip(blocks, lb)])
    return -0.5 * (np.diag(diag) - np.outer(lb, lb) * pp.block_sq_sums(blocks))


@dataclass
class EvidenceReport:
    precision: PrecisionSpec
    evidence: float
    gamma: dict
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    degenerate: list = field(default_factory=list)
    jitter: float = 0.0
    method: str = "mackay"
    rounds: int = 0
    grad_norm: float = 0.0

    @property
    def lam(self):
        return self.precision.as_dict()


def _block_labels(prec):
    return ["all"] if prec.tying == "single" else list(prec.names)


EVIDENCE_METHODS = ("mackay", "gradient", "newton")


def _newton_ascent(s, fun, frozen, tol, max_iter, gtol=1e-9):
    """Clamp-aware damped Newton ascent over block log-precisions.

    ``fun(s)`` returns ``(value, grad, hess, aux)``. Blocks at a clamp whose
    gradient points outward are held fixed. Negative-curvature directions use
    the absolute eigenvalue, so the step always ascends. Steps are capped at 2
    in log space. Stops once the
    applied step is <= ``tol`` in every block or the gradient over the free
    blocks is <= ``gtol`` with a Newton step below 1e-3.
    """
    lo, hi = np.log(LAM_MIN), np.log(LAM_MAX)
    value, g, Hs, aux = fun(s)
    trace, converged = [value], False
    for it in range(max_iter):
        free = ~frozen & ~((s <= lo) & (g < 0)) & ~((s >= hi) & (g > 0))
        step = np.zeros_like(s)
        if np.any(free):
            w, V = np.linalg.eigh(-0.5 * (Hs[np.ix_(free, free)] + Hs[np.ix_(free, free)].T))
            w = np.maximum(np.abs(w), 1e-12 * max(np.max(np.abs(w)), 1e-300))
            step[free] = V @ ((V.T @ g[free]) / w)
        # round-off stationarity; blocks heading for a clamp still take O(1) steps here
        if np.max(np.abs(g[free]), initial=0.0) <= gtol and np.max(np.abs(step)) <= 1e-3:
            converged = True
            break
        step *= min(1.0, 2.0 / max(np.max(np.abs(step)), 1e-300))
        t = 1.0
        while True:
            s_new = np.clip(s + t * step, lo, hi)
            applied = s_new - s
            if np.max(np.abs(applied), initial=0.0) <= tol:
                converged = True
                break
            v_new, g_new, H_new, aux_new = fun(s_new)
            # increases below round-off are accepted so clamp-bound blocks keep moving
            if v_new >= value + 1e-4 * float(g @ applied) or v_new >= value - 1e-13 * (1.0 + abs(value)):
                break
            t *= 0.5
        if converged:
            break
        s, value, g, Hs, aux = s_new, v_new, g_new, H_new, aux_new
        trace.append(value)
    return s, aux, trace, converged


def maximise_evidence(theta, curv, init, method="mackay", tol=None, max_iter=None, max_jitter=1e-6,
                      strict=True):
    """Maximise ``evidence(theta, ., curv)`` over the blocks of ``init``.

    ``mackay``: fixed point ``lam <- gamma / |theta_b|^2`` with effective
    dimension ``gamma = d_b - lam tr_b((H + Lambda)^-1)``, stopped at relative
    change <= ``tol`` (1e-8). ``gradient``: ascent in log-precision, step 0.1
    with halving, stopped at gradient norm <= ``tol`` (1e-6) or 2000 steps.
    ``newton``: Newton ascent in log-precision with the exact Hessian, stopped
    once a step moves every block by <= ``tol`` (1e-9) in log space.
    Blocks with ``|theta_b|^2 <= 1e-20`` are pinned at the upper clamp.
    """
    if method not in EVIDENCE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    groups = theta.groups
    blocks = init.blocks(groups)
    labels = _block_labels(init)
    v = theta.values
    sq = np.array([np.sum(v[b] ** 2) for b in blocks])
    degenerate = sq <= DEGENERATE_SQNORM
    lam_b = np.clip(init.block_values().astype(float), LAM_MIN, LAM_MAX)
    lam_b[degenerate] = LAM_MAX

    def expand(lb):
        lam = np.empty(v.size)
        for b, x in zip(blocks, lb):
            lam[b] = x
        return lam

    def state(lb):
        lam = expand(lb)
        return lam, PosteriorPrecision(curv, lam, max_jitter)

    trace, converged, jitter = [], False, 0.0
    if method == "mackay":
        tol = 1e-8 if tol is None else tol
        max_iter = 10000 if max_iter is None else max_iter
        for it in range(max_iter):
            lam, pp = state(lam_b)
            jitter = max(jitter, pp.jitter)
            trace.append(_evidence_value(v, lam, pp))
            absorbed = pp.absorbed_diagonal()
            gamma = np.array([np.sum(absorbed[b]) for b in blocks])
            new = np.where(degenerate, LAM_MAX, gamma / np.where(degenerate, 1.0, sq))
            new = np.clip(new, LAM_MIN, LAM_MAX)
            change = np.max(np.abs(new - lam_b) / lam_b, initial=0.0)
            lam_b = new
            if change <= tol:
                converged = True
                break
    elif method == "gradient":
        tol = 1e-6 if tol is None else tol
        max_iter = 2000 if max_iter is None else max_iter
        s = np.log(lam_b)
        free = ~degenerate
        lo, hi = np.log(LAM_MIN), np.log(LAM_MAX)
        for it in range(max_iter):
            lam, pp = state(np.exp(s))
            jitter = max(jitter, pp.jitter)
            M = _evidence_value(v, lam, pp)
            trace.append(M)
            g = _grad_blocks(v, lam, pp.absorbed_diagonal(), blocks)
            g[~free] = 0.0
            # gradient components pushing against an active clamp do not count
            g[(s <= lo) & (g < 0)] = 0.0
            g[(s >= hi) & (g > 0)] = 0.0
            if np.linalg.norm(g) <= tol:
                converged = True
                break
            step = 0.1
            while True:
                s_new = np.clip(s + step * g, lo, hi)
                lam_new, pp_new = state(np.exp(s_new))
                M_new = _evidence_value(v, lam_new, pp_new)
                if M_new >= M + 1e-4 * g @ (s_new - s) or step < 1e-14:
                    break
                step *= 0.5
            s = s_new
        lam_b = np.exp(s)
    else:
        tol = 1e-9 if tol is None else tol
        max_iter = 200 if max_iter is None else max_iter

        def fun(s):
            lam, pp = state(np.exp(s))
            absorbed = pp.absorbed_diagonal()
            return (_evidence_value(v, lam, pp), _grad_blocks(v, lam, absorbed, blocks),
                    _hess_blocks(v, lam, absorbed, pp, blocks), pp.jitter)

        s, jitter, trace, converged = _newton_ascent(np.log(lam_b), fun, degenerate, tol, max_iter)
        lam_b = np.exp(s)

    prec = init.with_block_values(lam_b)
    lam, pp = state(lam_b)
    absorbed = pp.absorbed_diagonal()
    gamma = {lab: float(np.sum(absorbed[b])) for lab, b in zip(labels, blocks)}
    grad = _grad_blocks(v, lam, absorbed, blocks)
    grad[degenerate] = 0.0
    report = EvidenceReport(
        precision=prec,
        evidence=_evidence_value(v, lam, pp),
        gamma=gamma,
        trace=trace,
        iterations=len(trace),
        converged=converged,
        degenerate=[lab for lab, dg in zip(labels, degenerate) if dg],
        jitter=max(jitter, pp.jitter),
        method=method,
        grad_norm=float(np.linalg.norm(grad)),
    )
    if report.degenerate:
        log.info("degenerate precision blocks pinned at %g: %s", LAM_MAX, report.degenerate)
    if not converged and strict:
        raise NotConverged(f"evidence maximisation ({method}) did not converge in {max_iter} iterations",
                           best=report, info={"trace": trace})
    return report


def linear_loss(lin, theta, lik, y, prec):
    v = _values(theta)
    lam = prec.diagonal(lin.groups)
    fit = nll(lik, train_outputs(lin, v), y) if len(y) else 0.0
    return fit + 0.5 * float(np.sum(lam * v * v))


def linear_loss_grad(lin, theta, lik, y, prec, mode="exact", machine_eps=np.finfo(np.float64).eps):
    """Gradient of the linear-model loss.

    ``exact`` uses the cached Jacobians; ``jvp`` evaluates ``J v`` with a
    tangent sweep and ``fd`` with the two-sided finite differences of the
    step-size rule in ``model.fd_step``; both project the output gradient
    back with a reverse sweep at the linearisation point.
    """
    v = _values(theta)
    lam = prec.diagonal(lin.groups)
    reg = lam * v
    if len(y) == 0:
        return reg
    if mode == "exact":
        g = nll_grad(lik, train_outputs(lin, v), y)
        return np.einsum("ndp,nd->p", lin.J, g) + reg
    direction = v - lin.theta0.values if lin.variant == "full" else v
    full_dir = lin.embed(direction)
    try:
        if mode == "fd":
            jv = model.jvp_fd(lin.arch, lin.point, lin.X, full_dir, machine_eps)
        elif mode == "jvp":
            jv = model.jvp_exact(lin.arch, lin.point, lin.X, full_dir)
        else:
            raise ValueError(f"unknown gradient mode {mode!r}")
    except ZeroDirection:
        jv = np.zeros_like(lin.f0)
    out = lin.f0 + jv if lin.variant == "full" else jv
    g = nll_grad(lik, out, y)
    return model.param_grad(lin.arch, lin.point, lin.X, g)[lin.sel] + reg


def _default_start(lin, nn_init):
    if nn_init or lin.variant == "full":
        return lin.theta0.values.copy()
    return np.zeros(lin.n_params)


def solve_theta_star(lin, lik, y, prec, grad_mode="exact", init=None, nn_init=False, tol=1e-6,
                     max_iter=500, max_jitter=1e-6):
    """Minimise the convex linear-model loss.

    Gaussian: closed-form solve. Categorical: damped Newton with
    backtracking until the gradient norm is <= ``tol``.
    """
    lam = prec.diagonal(lin.groups)
    N, d, P = lin.J.shape
    if lik.kind == "gaussian":
        if N == 0:
            return lin.params(np.zeros(P))
        U = lin.J.reshape(N * d, P) / np.sqrt(lik.noise_var)
        b = np.einsum("ndp,nd->p", lin.J, (np.asarray(y, float).reshape(N, d) - lin.offset)) / lik.noise_var
        pp = PosteriorPrecision(Curvature(factor=U), lam, max_jitter)
        return lin.params(pp.solve(b))

    v = _default_start(lin, nn_init) if init is None else _values(init).copy()
    loss = linear_loss(lin, v, lik, y, prec)
    gnorm = np.inf
    for it in range(max_iter):
        g = linear_loss_grad(lin, v, lik, y, prec, mode=grad_mode)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return lin.params(v)
        F = out_hessian_factor(lik, train_outputs(lin, v))
        U = np.einsum("nkd,ndp->nkp", F, lin.J).reshape(N * d, P)
        step = PosteriorPrecision(Curvature(factor=U), lam, max_jitter).solve(g)
        t, slope = 1.0, float(g @ step)
        while True:
            cand = v - t * step
            new_loss = linear_loss(lin, cand, lik, y, prec)
            if new_loss <= loss - 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 and new_loss > loss:
            break
        v, loss = cand, new_loss
    raise NotConverged(f"Newton solve stopped with gradient norm {gnorm:.3g}", best=lin.params(v),
                       info={"grad_norm": gnorm})


def _profile_objective(lin, lik, y, curv, template, blocks, grad_mode, nn_init, max_jitter):
    """Evidence of the linear model with the weights re-optimised at each precision.

    By the envelope argument its gradient is the evidence gradient at
    ``theta*(Lambda)``; the Hessian adds ``lam_b lam_c z_b^T A^-1 z_c`` with
    ``z_b`` the weights restricted to block b and ``A`` the loss Hessian at
    ``theta*``.
    """
    warm = [None]

    def fun(s):
        prec = template.with_block_values(np.exp(s))
        theta = solve_theta_star(lin, lik, y, prec, grad_mode=grad_mode, init=warm[0], nn_init=nn_init,
                                 max_jitter=max_jitter)
        warm[0] = theta
        v, lam = theta.values, prec.diagonal(lin.groups)
        pp = PosteriorPrecision(curv, lam, max_jitter)
        absorbed = pp.absorbed_diagonal()
        fit = nll(lik, train_outputs(lin, v), y) if len(y) else 0.0
        value = -fit + _evidence_value(v, lam, pp)
        grad = _grad_blocks(v, lam, absorbed, blocks)
        hess = _hess_blocks(v, lam, absorbed, pp, blocks)
        A = pp if lik.kind == "gaussian" else PosteriorPrecision(ggn(lin, lik, theta), lam, max_jitter)
        Z = np.zeros((v.size, len(blocks)))
        for i, b in enumerate(blocks):
            Z[b, i] = v[b]
        lb = np.array([lam[b[0]] if b.size else 1.0 for b in blocks])
        hess = hess + np.outer(lb, lb) * (Z.T @ A.solve(Z))
        return value, grad, hess, (theta, max(pp.jitter, A.jitter))

    return fun


def em_alternate(lin, lik, y, curv, init=None, tol=1e-6, max_rounds=100, method="newton",
                 refresh_curvature=False, grad_mode="exact", nn_init=False, max_jitter=1e-6, strict=True):
    """Joint optimum of the linear-model loss and the evidence.

    ``method="newton"`` (default) runs Newton ascent on the evidence with the
    weights profiled out, then confirms the result with one alternation
    round. ``mackay``/``gradient`` alternate the linear-model solve with that
    evidence maximiser. Either way convergence means one further round moves
    the weights (relative) and the log-precisions by at most ``tol``.
    ``rounds`` counts outer iterations; starting at a joint optimum gives 0.
    """
    prec = init if init is not None else PrecisionSpec.isotropic(lin.groups, INITIAL_PRECISION, "per-group")
    if method not in EVIDENCE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "newton" and not refresh_curvature:
        return _em_profile(lin, lik, y, curv, prec, tol, max_rounds, grad_mode, nn_init, max_jitter, strict)
    theta, trace = None, []
    report = None
    for r in range(max_rounds + 1):
        theta_new = solve_theta_star(lin, lik, y, prec, grad_mode=grad_mode, nn_init=nn_init,
                                     init=theta, max_jitter=max_jitter)
        if refresh_curvature:
            curv = ggn(lin, lik, theta_new)
        report = maximise_evidence(theta_new, curv, prec, method=method, max_jitter=max_jitter, strict=strict)
        trace.append(report.evidence)
        dlam = _dloglam(report.precision, prec)
        dtheta = 0.0 if theta is None else _rel_change(theta_new.values, theta.values)
        theta, prec = theta_new, report.precision
        if dlam <= tol and dtheta <= tol:
            report.rounds, report.trace = r, trace
            return theta, prec, report
    report.rounds, report.trace, report.converged = max_rounds, trace, False
    if strict:
        raise NotConverged(f"alternation did not converge in {max_rounds} rounds",
                           best=(theta, prec, report), info={"trace": trace})
    return theta, prec, report


def _dloglam(a, b):
    return float(np.max(np.abs(np.log(a.block_values()) - np.log(b.block_values())), initial=0.0))


def _rel_change(new, old):
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300))


def _em_profile(lin, lik, y, curv, prec, tol, max_rounds, grad_mode, nn_init, max_jitter, strict):
    blocks = prec.blocks(lin.groups)
    fun = _profile_objective(lin, lik, y, curv, prec, blocks, grad_mode, nn_init, max_jitter)
    s0 = np.clip(np.log(prec.block_values()), np.log(LAM_MIN), np.log(LAM_MAX))
    frozen = np.zeros(len(blocks), dtype=bool)
    s, (theta, jitter), trace, converged = _newton_ascent(s0, fun, frozen, min(tol, 1e-9), max_rounds)
    # same rule as maximise_evidence: blocks whose weights vanished are pinned at the upper clamp
    sq = np.array([np.sum(theta.values[b] ** 2) for b in blocks])
    snap = (sq <= DEGENERATE_SQNORM) & (s < np.log(LAM_MAX))
    if np.any(snap):
        s = np.where(snap, np.log(LAM_MAX), s)
        theta = solve_theta_star(lin, lik, y, prec.with_block_values(np.exp(s)), grad_mode=grad_mode,
                                 init=theta, max_jitter=max_jitter)
    prec = prec.with_block_values(np.exp(s))
    # confirmation round of the plain alternation
    report = maximise_evidence(theta, curv, prec, method="newton", max_jitter=max_jitter, strict=False)
    theta_next = solve_theta_star(lin, lik, y, report.precision, grad_mode=grad_mode, init=theta,
                                  max_jitter=max_jitter)
    dlam, dtheta = _dloglam(report.precision, prec), _rel_change(theta_next.values, theta.values)
    report.precision, report.trace, report.rounds = prec, trace, len(trace) - 1
    report.jitter = max(report.jitter, jitter)
    report.converged = converged and report.converged and dlam <= tol and dtheta <= tol
    if not report.converged:
        log.warning("joint optimum not certified: newton=%s dlam=%.3g dtheta=%.3g", converged, dlam, dtheta)
        if strict:
            raise NotConverged(f"joint optimisation did not converge (dlam={dlam:.3g}, dtheta={dtheta:.3g})",
                               best=(theta, prec, report), info={"trace": trace})
    return theta, prec, report


@dataclass
class PredictivePosterior:
    mean: np.ndarray
    cov: np.ndarray
    jitter: float = 0.0

    @property
    def std(self):
        """Marginal standard deviations, shape (M, d)."""
        return np.sqrt(np.clip(np.einsum("mii->mi", self.cov), 0.0, None))

    def is_psd(self, tol=1e-10):
        if not np.allclose(self.cov, np.swapaxes(self.cov, 1, 2), atol=tol):
            return False
        w = np.linalg.eigvalsh(self.cov)
        scale = 1.0 + np.max(np.abs(self.cov), initial=0.0)
        return bool(np.min(w, initial=0.0) >= -tol * scale)


def predictive(lin, curv, prec, Xstar, max_jitter=1e-6):
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    lam = prec.diagonal(lin.groups)
    pp = PosteriorPrecision(curv, lam, max_jitter)
    mean = model.forward(lin.arch, lin.point, Xstar)
    cov = pp.block_sandwich(lin.features(Xstar))
    return PredictivePosterior(mean, cov, pp.jitter)


def predictive_nll(post, lik, y, mc_samples=100, seed=0):
    """Average test negative log-likelihood under the predictive posterior.

    Gaussian: exact with covariance ``cov + noise_var I``. Categorical:
    ``-log`` of the Monte Carlo average of softmax over Gaussian logit draws.
    """
    M, d = post.mean.shape
    if lik.kind == "gaussian":
        y = np.asarray(y, dtype=np.float64).reshape(M, d)
        V = post.cov + lik.noise_var * np.eye(d)
        r = y - post.mean
        sol = np.linalg.solve(V, r[:, :, None])[:, :, 0]
        _, logdet = np.linalg.slogdet(V)
        terms = 0.5 * np.sum(r * sol, axis=1) + 0.5 * logdet + 0.5 * d * np.log(2 * np.pi)
        return float(np.mean(terms))
    probs = _mc_label_probs(post, y, mc_samples, seed).mean(axis=1)
    return float(-np.mean(np.log(np.maximum(probs, 1e-300))))


def _mc_label_probs(post, y, mc_samples, seed):
    """Softmax probability of the observed label under each logit draw, shape (M, S)."""
    M, d = post.mean.shape
    y = np.asarray(y).astype(np.int64)
    w, Q = np.linalg.eigh(post.cov)
    root = Q * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((M, mc_samples, d))
    logits = post.mean[:, None, :] + np.einsum("mij,msj->msi", root, Z)
    logits -= logits.max(axis=2, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=2, keepdims=True)
    return p[np.arange(M), :, y]
