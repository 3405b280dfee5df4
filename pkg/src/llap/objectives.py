"""Likelihoods, the regularised MAP loss and a small stochastic trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from . import model
from .errors import DegenerateVariance, Diverged, InvalidTarget
from .precision import PrecisionSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Likelihood:
    kind: str = "gaussian"
    noise_var: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown likelihood {self.kind!r}")
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.X)

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx])


def _check_targets(lik, yhat, y):
    yhat = np.atleast_2d(np.asarray(yhat, dtype=np.float64))
    if lik.kind == "gaussian":
        y = np.asarray(y, dtype=np.float64).reshape(yhat.shape)
        return yhat, y
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (yhat.shape[0],):
        raise InvalidTarget(f"expected {yhat.shape[0]} integer labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= yhat.shape[1]) or np.any(y != np.round(y)):
        raise InvalidTarget("label out of range")
    return yhat, y.astype(np.int64)


def nll_terms(lik, yhat, y):
    """Per-example negative log-likelihoods."""
    yhat, y = _check_targets(lik, yhat, y)
    if lik.kind == "gaussian":
        r = yhat - y
        return np.sum(0.5 * r * r / lik.noise_var + 0.5 * np.log(2 * np.pi * lik.noise_var), axis=1)
    return -log_softmax(yhat, axis=1)[np.arange(len(y)), y]


def nll(lik, yhat, y):
    """Summed negative log-likelihood over the examples in ``yhat``."""
    return float(np.sum(nll_terms(lik, yhat, y)))


def nll_grad(lik, yhat, y):
    """Derivative of each example's nll with respect to its outputs."""
    yhat, y = _check_targets(lik, yhat, y)
    if lik.kind == "gaussian":
        return (yhat - y) / lik.noise_var
    g = softmax(yhat, axis=1)
    g[np.arange(len(y)), y] -= 1.0
    return g


def nll_out_hessian(lik, yhat):
    """Output-space Hessian; (d, d) for a single output vector, else (N, d, d)."""
    yhat = np.asarray(yhat, dtype=np.float64)
    single = yhat.ndim == 1
    Y = np.atleast_2d(yhat)
    N, d = Y.shape
    if lik.kind == "gaussian":
        A = np.broadcast_to(np.eye(d) / lik.noise_var, (N, d, d)).copy()
    else:
        p = softmax(Y, axis=1)
        A = np.einsum("ni,ij->nij", p, np.eye(d)) - p[:, :, None] * p[:, None, :]
    return A[0] if single else A


def out_hessian_factor(lik, yhat):
    """``F`` with ``F[n].T @ F[n]`` equal to the output Hessian of example n.

    Categorical: ``(I - u u^T) diag(u)`` with ``u = sqrt(p)``, since
    ``I - u u^T`` is a projector when ``|u| = 1``.
    """
    Y = np.atleast_2d(np.asarray(yhat, dtype=np.float64))
    N, d = Y.shape
    if lik.kind == "gaussian":
        return np.broadcast_to(np.eye(d) / np.sqrt(lik.noise_var), (N, d, d)).copy()
    u = np.sqrt(softmax(Y, axis=1))
    proj = np.eye(d)[None] - u[:, :, None] * u[:, None, :]
    return proj * u[:, None, :]


def regulariser(params, prec):
    lam = prec.diagonal(params.groups)
    return 0.5 * float(np.sum(lam * params.values ** 2))


def map_loss(arch, params, lik, data, prec):
    """``L(f(theta, .)) + 1/2 sum_g lambda_g |theta_g|^2``."""
    fit = 0.0 if len(data) == 0 else nll(lik, model.forward(arch, params, data.X), data.y)
    return fit + regulariser(params, prec)


def map_loss_grad(arch, params, lik, data, prec):
    lam = prec.diagonal(params.groups)
    grad = lam * params.values
    if len(data):
        tr = model.trace(arch, params, data.X)
        grad = grad + tr.reverse(nll_grad(lik, tr.output, data.y), per_example=False)
    return grad


@dataclass(frozen=True)
class TrainConfig:
    optimiser: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 90
    batch_size: int = 32
    seed: int = 0
    milestones: tuple = (40, 70)
    gamma: float = 0.1
    checkpoint_epochs: tuple = ()
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        object.__setattr__(self, "checkpoint_epochs", tuple(self.checkpoint_epochs))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.optimiser not in ("sgd", "adam"):
            raise ValueError(f"unknown optimiser {self.optimiser!r}")
        if not (self.lr > 0 and self.gamma > 0 and self.batch_size > 0):
            raise ValueError("learning rate, decay factor and batch size must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("momentum, weight decay and epochs must be non-negative")
        if list(self.checkpoint_epochs) != sorted(self.checkpoint_epochs):
            raise ValueError("checkpoint epochs must be sorted")

    def lr_at(self, epoch):
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)


@dataclass
class TrainResult:
    params: model.GroupedParams
    checkpoints: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)


def default_precision(params, cfg, n_data):
    """Weight decay ``w`` on the per-example loss is precision ``w * N`` on the summed loss."""
    return PrecisionSpec.isotropic(params.groups, max(cfg.weight_decay * n_data, 1e-300))


def _sgd_epoch(arch, lik, data, cfg, rng, lam, state, lr, epoch):
    theta, buf, m2, step = state
    order = rng.permutation(len(data))
    b1, b2 = cfg.betas
    for start in range(0, len(data), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        try:
            tr = model.trace(arch, theta, data.X[idx])
        except DegenerateVariance as exc:
            raise Diverged(f"training collapsed at epoch {epoch + 1}: {exc}", epoch + 1) from exc
        g = tr.reverse(nll_grad(lik, tr.output, data.y[idx]), per_example=False) / len(idx) + lam * theta
        if cfg.optimiser == "sgd":
            buf = cfg.momentum * buf + g if step else g.copy()
            theta = theta - lr * buf
        else:
            buf = b1 * buf + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            t = step + 1
            theta = theta - lr * (buf / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + cfg.adam_eps)
        step += 1
    return theta, buf, m2, step


def train_map(arch, lik, data, prec, cfg, init=None):
    """Mini-batch optimisation of ``map_loss / N``.

    ``prec=None`` uses ``cfg.weight_decay`` (see ``default_precision``).
    Returns the final parameters with checkpoints at ``cfg.checkpoint_epochs``
    (epoch 0 is the initialisation). No stationarity is claimed for the result.
    """
    n = len(data)
    if n == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    params = init if init is not None else model.init_params(arch, rng)
    if prec is None:
        prec = default_precision(params, cfg, n)
    lam = prec.diagonal(params.groups) / n
    state = (params.values.copy(), np.zeros(len(params)), np.zeros(len(params)), 0)
    result = TrainResult(params)
    if 0 in cfg.checkpoint_epochs:
        result.checkpoints[0] = params
    for epoch in range(cfg.epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            state = _sgd_epoch(arch, lik, data, cfg, rng, lam, state, cfg.lr_at(epoch), epoch)
        current = params.with_values(state[0])
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                loss = map_loss(arch, current, lik, data, prec) / n
            except DegenerateVariance:
                loss = np.nan
        if not np.isfinite(loss) or not np.all(np.isfinite(state[0])):
            raise Diverged(f"loss became non-finite at epoch {epoch + 1}", epoch + 1, current)
        result.losses.append(loss)
        if epoch + 1 in cfg.checkpoint_epochs:
            result.checkpoints[epoch + 1] = current
        log.debug("epoch %d loss %.6g", epoch + 1, loss)
    result.params = params.with_values(state[0])
    return result
