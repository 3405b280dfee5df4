"""Small MLPs with optional layer norm and a dense read-out layer.

Every sweep is written out by hand over a batch of inputs: the forward pass,
a tangent (forward-mode) sweep for Jacobian-vector products and a reverse
sweep that returns per-example parameter gradients. Parameters live in one
flat float64 vector partitioned into named groups.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVariance, DimensionMismatch, NonPositiveScale, ZeroDirection

VARIANCE_FLOOR = 1e-24


@dataclass(frozen=True)
class HiddenLayer:
    width: int
    bias: bool = True
    layer_norm: bool = False
    ln_affine: bool = False


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    output_dim: int
    hidden: tuple = ()
    activation: str = "leaky_relu"
    slope: float = 0.01
    output_bias: bool = True
    ln_eps: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be positive")
        if self.activation not in ("leaky_relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for layer in self.hidden:
            if layer.width < 1:
                raise ValueError("hidden widths must be positive")
            if layer.layer_norm and layer.width < 2:
                raise ValueError("layer norm needs width >= 2")
            if layer.ln_affine and not layer.layer_norm:
                raise ValueError("ln_affine requires layer_norm")

    @property
    def fully_normalised(self):
        """Every hidden layer is followed by a layer norm without affine parameters."""
        return bool(self.hidden) and all(l.layer_norm and not l.ln_affine for l in self.hidden)

    @property
    def penultimate_dim(self):
        return self.hidden[-1].width if self.hidden else self.input_dim

    def layout(self):
        """Ordered ``(name, shape, normalised, bias)`` for every parameter block."""
        out = []
        fan_in = self.input_dim
        for i, layer in enumerate(self.hidden):
            norm = layer.layer_norm
            out.append((f"hidden{i}.weight", (layer.width, fan_in), norm, False))
            if layer.bias:
                out.append((f"hidden{i}.bias", (layer.width,), norm, True))
            if layer.ln_affine:
                out.append((f"hidden{i}.ln_gain", (layer.width,), False, False))
                out.append((f"hidden{i}.ln_shift", (layer.width,), False, True))
            fan_in = layer.width
        out.append(("output.weight", (self.output_dim, fan_in), False, False))
        if self.output_bias:
            out.append(("output.bias", (self.output_dim,), False, True))
        return out

    @property
    def n_params(self):
        return sum(int(np.prod(shape)) for _, shape, _, _ in self.layout())


def mlp(input_dim, output_dim, widths, *, layer_norm=True, bias=False, ln_affine=False,
        activation="leaky_relu", output_bias=True, slope=0.01):
    """Convenience constructor for a uniform stack of hidden layers."""
    hidden = tuple(HiddenLayer(w, bias=bias, layer_norm=layer_norm, ln_affine=ln_affine) for w in widths)
    return Architecture(input_dim, output_dim, hidden, activation=activation, slope=slope,
                        output_bias=output_bias)


@dataclass(frozen=True)
class Group:
    name: str
    start: int
    length: int
    normalised: bool
    bias: bool

    @property
    def slice(self):
        return slice(self.start, self.start + self.length)

    @property
    def indices(self):
        return np.arange(self.start, self.start + self.length)


@dataclass(frozen=True, eq=False)
class GroupedParams:
    values: np.ndarray
    groups: tuple = field(default_factory=tuple)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "groups", tuple(self.groups))
        pos = 0
        for g in self.groups:
            if g.start != pos or g.length < 0:
                raise ValueError(f"group {g.name!r} breaks the contiguous partition")
            pos += g.length
        if pos != v.size:
            raise ValueError(f"groups cover {pos} entries but vector has {v.size}")

    def __len__(self):
        return self.values.size

    def with_values(self, values):
        return GroupedParams(values, self.groups)

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def __getitem__(self, name):
        return self.values[self.group(name).slice]

    def normalised_mask(self):
        m = np.zeros(self.values.size, dtype=bool)
        for g in self.groups:
            if g.normalised:
                m[g.slice] = True
        return m

    def bias_mask(self):
        m = np.zeros(self.values.size, dtype=bool)
        for g in self.groups:
            if g.bias:
                m[g.slice] = True
        return m

    def split(self):
        """Return ``(theta', theta'')`` with ``theta = theta' + theta''``."""
        m = self.normalised_mask()
        return np.where(m, 0.0, self.values), np.where(m, self.values, 0.0)

    def select(self, include_biases=True):
        """Sub-vector without bias groups (when excluded) and the kept indices."""
        keep = [g for g in self.groups if include_biases or not g.bias]
        groups, idx, pos = [], [], 0
        for g in keep:
            groups.append(Group(g.name, pos, g.length, g.normalised, g.bias))
            idx.append(g.indices)
            pos += g.length
        idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
        return GroupedParams(self.values[idx], groups), idx


def param_groups(arch):
    groups, pos = [], 0
    for name, shape, norm, bias in arch.layout():
        n = int(np.prod(shape))
        groups.append(Group(name, pos, n, norm, bias))
        pos += n
    return tuple(groups)


def init_params(arch, rng):
    """Uniform(+-1/sqrt(fan_in)) weights and biases, unit gains, zero shifts."""
    chunks = []
    for name, shape, _, _ in arch.layout():
        if name.endswith("ln_gain"):
            chunks.append(np.ones(shape).ravel())
        elif name.endswith("ln_shift"):
            chunks.append(np.zeros(shape).ravel())
        else:
            fan_in = _fan_in(arch, name)
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return GroupedParams(np.concatenate(chunks), param_groups(arch))


def _fan_in(arch, name):
    if name.startswith("output"):
        return arch.penultimate_dim
    i = int(name.split(".")[0][len("hidden"):])
    return arch.input_dim if i == 0 else arch.hidden[i - 1].width


def scale_group(params, k):
    """Multiply the normalised entries by ``k``; others are left bitwise unchanged."""
    if not k > 0:
        raise NonPositiveScale(f"scale must be positive, got {k}")
    v = params.values.copy()
    m = params.normalised_mask()
    v[m] = v[m] * k
    return params.with_values(v)


def _unpack(arch, vec):
    out, pos = {}, 0
    for name, shape, _, _ in arch.layout():
        n = int(np.prod(shape))
        out[name] = vec[pos:pos + n].reshape(shape)
        pos += n
    return out


def _as_batch(arch, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"expected inputs with {arch.input_dim} features, got shape {X.shape}")
    return X, single


def _values(arch, params):
    vec = params.values if isinstance(params, GroupedParams) else np.asarray(params, dtype=np.float64)
    if vec.size != arch.n_params:
        raise DimensionMismatch(f"architecture has {arch.n_params} parameters, got {vec.size}")
    return vec


def _act(arch, u):
    if arch.activation == "tanh":
        return np.tanh(u)
    return np.where(u > 0, u, arch.slope * u)


def _act_grad(arch, u):
    if arch.activation == "tanh":
        return 1.0 - np.tanh(u) ** 2
    return np.where(u > 0, 1.0, arch.slope)


class _Trace:
    """Forward-pass intermediates reused by the tangent and reverse sweeps."""

    def __init__(self, arch, p, X):
        self.arch, self.p, self.X = arch, p, X
        self.layers = []
        h = X
        for i, layer in enumerate(arch.hidden):
            a = h @ p[f"hidden{i}.weight"].T
            if layer.bias:
                a = a + p[f"hidden{i}.bias"]
            z = s = None
            if layer.layer_norm:
                c = a - a.mean(axis=1, keepdims=True)
                var = np.mean(c * c, axis=1)
                if np.any(var < VARIANCE_FLOOR):
                    raise DegenerateVariance(f"pre-norm activations of hidden layer {i} have (near) zero variance")
                s = np.sqrt(var + arch.ln_eps)[:, None]
                z = c / s
                u = z * p[f"hidden{i}.ln_gain"] + p[f"hidden{i}.ln_shift"] if layer.ln_affine else z
            else:
                u = a
            self.layers.append((h, z, s, u))
            h = _act(arch, u)
        self.penultimate = h
        out = h @ p["output.weight"].T
        if arch.output_bias:
            out = out + p["output.bias"]
        self.output = out

    def tangent(self, dp, stop_at_penultimate=False):
        arch, p = self.arch, self.p
        dh = np.zeros_like(self.X)
        for i, layer in enumerate(arch.hidden):
            h, z, s, u = self.layers[i]
            da = dh @ p[f"hidden{i}.weight"].T + h @ dp[f"hidden{i}.weight"].T
            if layer.bias:
                da = da + dp[f"hidden{i}.bias"]
            if layer.layer_norm:
                dc = da - da.mean(axis=1, keepdims=True)
                dz = (dc - z * np.mean(z * dc, axis=1, keepdims=True)) / s
                if layer.ln_affine:
                    du = dz * p[f"hidden{i}.ln_gain"] + z * dp[f"hidden{i}.ln_gain"] + dp[f"hidden{i}.ln_shift"]
                else:
                    du = dz
            else:
                du = da
            dh = _act_grad(arch, u) * du
        if stop_at_penultimate:
            return dh
        dout = dh @ p["output.weight"].T + self.penultimate @ dp["output.weight"].T
        if arch.output_bias:
            dout = dout + dp["output.bias"]
        return dout

    def reverse(self, G, per_example=True):
        """Parameter gradients of ``sum_j G[n, j] * f_j(x_n)``; shape (N, P) or (P,)."""
        arch, p = self.arch, self.p
        N = G.shape[0]
        grads = {}

        def outer(d, h):
            return d[:, :, None] * h[:, None, :] if per_example else d.T @ h

        def total(d):
            return d if per_example else d.sum(axis=0)

        grads["output.weight"] = outer(G, self.penultimate)
        if arch.output_bias:
            grads["output.bias"] = total(G)
        dh = G @ p["output.weight"]
        for i in reversed(range(len(arch.hidden))):
            layer = arch.hidden[i]
            h, z, s, u = self.layers[i]
            du = dh * _act_grad(arch, u)
            if layer.layer_norm:
                if layer.ln_affine:
                    grads[f"hidden{i}.ln_gain"] = total(du * z)
                    grads[f"hidden{i}.ln_shift"] = total(du)
                    dz = du * p[f"hidden{i}.ln_gain"]
                else:
                    dz = du
                da = (dz - dz.mean(axis=1, keepdims=True) - z * np.mean(dz * z, axis=1, keepdims=True)) / s
            else:
                da = du
            if layer.bias:
                grads[f"hidden{i}.bias"] = total(da)
            grads[f"hidden{i}.weight"] = outer(da, h)
            dh = da @ p[f"hidden{i}.weight"]
        names = [name for name, _, _, _ in arch.layout()]
        if per_example:
            return np.concatenate([grads[n].reshape(N, -1) for n in names], axis=1)
        return np.concatenate([grads[n].ravel() for n in names])


def trace(arch, params, X):
    X, _ = _as_batch(arch, X)
    vec = _values(arch, params)
    return _Trace(arch, _unpack(arch, vec), X)


def forward(arch, params, x):
    """Network output for one input (1-d) or a batch (2-d, rows are examples)."""
    X, single = _as_batch(arch, x)
    out = trace(arch, params, X).output
    return out[0] if single else out


def penultimate(arch, params, x):
    X, single = _as_batch(arch, x)
    phi = trace(arch, params, X).penultimate
    return phi[0] if single else phi


def jacobian(arch, params, x, include_biases=True):
    """Per-example Jacobians, shape (d_out, P) for one input or (N, d_out, P).

    One reverse sweep per output dimension. Bias columns are dropped when
    ``include_biases`` is false (ordering follows ``GroupedParams.select``).
    """
    X, single = _as_batch(arch, x)
    tr = trace(arch, params, X)
    N, d = X.shape[0], arch.output_dim
    J = np.empty((N, d, arch.n_params))
    for j in range(d):
        G = np.zeros((N, d))
        G[:, j] = 1.0
        J[:, j, :] = tr.reverse(G)
    if not include_biases:
        J = J[:, :, _kept_indices(arch, include_biases=False)]
    return J[0] if single else J


def _kept_indices(arch, include_biases):
    idx = [g.indices for g in param_groups(arch) if include_biases or not g.bias]
    return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)


def jvp_exact(arch, params, x, v):
    """``J(x) v`` by a dual-number (tangent) sweep."""
    X, single = _as_batch(arch, x)
    vec = _values(arch, params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != vec.shape:
        raise DimensionMismatch(f"direction has shape {v.shape}, parameters {vec.shape}")
    tr = _Trace(arch, _unpack(arch, vec), X)
    out = tr.tangent(_unpack(arch, v))
    return out[0] if single else out


def fd_step(theta, v, machine_eps=np.finfo(np.float64).eps):
    """Andrei's step: sqrt(eps) * (1 + |theta|_inf) / |v|_inf."""
    vmax = np.max(np.abs(v), initial=0.0)
    if vmax == 0:
        raise ZeroDirection("finite-difference direction is the zero vector")
    return np.sqrt(machine_eps) * (1.0 + np.max(np.abs(theta), initial=0.0)) / vmax


def jvp_fd(arch, params, x, v, machine_eps=np.finfo(np.float64).eps):
    """Two-sided finite-difference estimate of ``J(x) v``."""
    vec = _values(arch, params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != vec.shape:
        raise DimensionMismatch(f"direction has shape {v.shape}, parameters {vec.shape}")
    delta = fd_step(vec, v, machine_eps)
    return (forward(arch, vec + delta * v, x) - forward(arch, vec - delta * v, x)) / (2.0 * delta)


def vjp(arch, params, x, g):
    """``g^T J(x)``; per-example rows for a batch of inputs and cotangents."""
    X, single = _as_batch(arch, x)
    g = np.asarray(g, dtype=np.float64)
    G = g[None, :] if single else g
    if G.shape != (X.shape[0], arch.output_dim):
        raise DimensionMismatch(f"cotangent shape {g.shape} does not match outputs")
    out = trace(arch, params, X).reverse(G)
    return out[0] if single else out


def param_grad(arch, params, X, G):
    """Summed ``sum_n G[n]^T J(x_n)``; cheaper than per-example ``vjp``."""
    X, _ = _as_batch(arch, X)
    return trace(arch, params, X).reverse(np.asarray(G, dtype=np.float64), per_example=False)


def directional_derivative_penultimate(arch, params, x, mask=None):
    """Derivative of the penultimate features along the masked parameters themselves.

    ``mask`` defaults to the normalised entries, where the result vanishes.
    """
    X, single = _as_batch(arch, x)
    m = params.normalised_mask() if mask is None else np.asarray(mask, dtype=bool)
    tr = trace(arch, params, X)
    out = tr.tangent(_unpack(arch, np.where(m, params.values, 0.0)), stop_at_penultimate=True)
    return out[0] if single else out


def hidden_mask(params):
    """Hidden-layer weights and biases (the entries a layer norm would make scale-free)."""
    m = np.zeros(params.values.size, dtype=bool)
    for g in params.groups:
        if g.name.startswith("hidden") and not g.name.endswith(("ln_gain", "ln_shift")):
            m[g.slice] = True
    return m
