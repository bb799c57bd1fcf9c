"""Small dense networks with hand-written reverse-mode gradients.

Every network here is the same fixed architecture: two hidden layers of 30
units, Tanh on the first, ReLU on the second, and one of three output heads:

* ``softmax`` -- per-block softmax, for the region dispatch policy;
* ``bounded`` -- sigmoid squashed affinely into a box, for the adversary
  policy (outputs stay strictly inside the box);
* ``linear``  -- raw affine output, for the critic.

Parameters live in one flat float64 vector so optimizer state, target-network
blending and checkpointing are plain array operations.  ``backward`` returns
gradients with respect to both the parameters and the input; the input
gradient is what supplies the action-gradient of the critic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import TrainingDiverged, ValidationError

HIDDEN = 30

HEADS = ("softmax", "bounded", "linear")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_blocks(z, blocks):
    out = np.empty_like(z)
    k = 0
    for b in blocks:
        part = z[..., k:k + b]
        part = part - np.max(part, axis=-1, keepdims=True)
        ez = np.exp(part)
        out[..., k:k + b] = ez / np.sum(ez, axis=-1, keepdims=True)
        k += b
    return out


def param_count(in_dim, out_dim):
    return in_dim * HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN * out_dim + out_dim


@dataclass
class Mlp:
    """Flat-parameter MLP:  x -> tanh -> relu -> head."""

    in_dim: int
    out_dim: int
    head: str
    theta: np.ndarray
    blocks: tuple = ()          # softmax head: output block sizes
    lower: np.ndarray = None    # bounded head: box bounds
    upper: np.ndarray = None

    @classmethod
    def create(cls, in_dim, out_dim, head, seed, blocks=(), lower=None, upper=None):
        """Fresh network with uniform(+-1/sqrt(fan_in)) initialization."""
        if head not in HEADS:
            raise ValidationError(f"unknown head kind {head!r}")
        if head == "softmax":
            blocks = tuple(int(b) for b in blocks)
            if sum(blocks) != out_dim or any(b < 1 for b in blocks):
                raise ValidationError("softmax blocks must partition the output")
        if head == "bounded":
            lower = np.asarray(lower, dtype=float)
            upper = np.asarray(upper, dtype=float)
            if lower.shape != (out_dim,) or upper.shape != (out_dim,):
                raise ValidationError("bounded head needs per-output box bounds")
            if np.any(lower > upper):
                raise ValidationError("bounded head box is empty")
        rng = np.random.default_rng(seed)
        theta = np.empty(param_count(in_dim, out_dim))
        k = 0
        for fan_in, n in ((in_dim, in_dim * HIDDEN + HIDDEN),
                          (HIDDEN, HIDDEN * HIDDEN + HIDDEN),
                          (HIDDEN, HIDDEN * out_dim + out_dim)):
            bound = 1.0 / np.sqrt(fan_in)
            theta[k:k + n] = rng.uniform(-bound, bound, size=n)
            k += n
        return cls(in_dim, out_dim, head, theta, blocks=blocks, lower=lower, upper=upper)

    def _weights(self, theta=None):
        t = self.theta if theta is None else theta
        i, h, o = self.in_dim, HIDDEN, self.out_dim
        k = 0
        w1 = t[k:k + i * h].reshape(i, h); k += i * h
        b1 = t[k:k + h]; k += h
        w2 = t[k:k + h * h].reshape(h, h); k += h * h
        b2 = t[k:k + h]; k += h
        w3 = t[k:k + h * o].reshape(h, o); k += h * o
        b3 = t[k:k + o]
        return w1, b1, w2, b2, w3, b3

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise ValidationError(
                f"input of shape {x.shape} does not match in_dim={self.in_dim}"
            )
        return x

    def _head_forward(self, z):
        if self.head == "linear":
            return z
        if self.head == "softmax":
            return _softmax_blocks(z, self.blocks)
        s = _sigmoid(z)
        return self.lower + (self.upper - self.lower) * s

    def forward(self, x, want_cache=False):
        """Evaluate the network on one input vector or a batch of rows.

        ``want_cache=True`` also returns the layer activations so a
        following :meth:`backward` call can skip the recomputation.
        """
        x = self._check_input(x)
        w1, b1, w2, b2, w3, b3 = self._weights()
        z1 = x @ w1
        z1 += b1
        h1 = np.tanh(z1)
        z2 = h1 @ w2
        z2 += b2
        h2 = np.maximum(z2, 0.0)
        z3 = h2 @ w3
        z3 += b3
        out = self._head_forward(z3)
        if want_cache:
            return out, (h1, z2, h2, out)
        return out

    def backward(self, x, upstream, cache=None):
        """Gradients of ``sum(upstream * forward(x))``.

        Returns ``(dtheta, dx)`` where ``dtheta`` is flat (summed over the
        batch) and ``dx`` matches the shape of ``x``.  Pass the ``cache``
        from ``forward(x, want_cache=True)`` to reuse its activations.
        """
        x = self._check_input(x)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        up = np.asarray(upstream, dtype=float)
        if squeeze:
            up = np.atleast_2d(up)
        if up.shape != (xb.shape[0], self.out_dim):
            raise ValidationError(
                f"upstream of shape {np.shape(upstream)} does not match output"
            )
        w1, b1, w2, b2, w3, b3 = self._weights()
        if cache is None:
            z1 = xb @ w1
            z1 += b1
            h1 = np.tanh(z1)
            z2 = h1 @ w2
            z2 += b2
            h2 = np.maximum(z2, 0.0)
            z3 = h2 @ w3
            z3 += b3
            out = self._head_forward(z3)
        else:
            h1, z2, h2, out = cache
            out = np.atleast_2d(out)
        h1, z2, h2 = np.atleast_2d(h1), np.atleast_2d(z2), np.atleast_2d(h2)

        if self.head == "linear":
            dz3 = up
        elif self.head == "softmax":
            dz3 = np.empty_like(out)
            k = 0
            for b in self.blocks:
                pb = out[:, k:k + b]
                ub = up[:, k:k + b]
                dz3[:, k:k + b] = pb * (ub - np.sum(ub * pb, axis=-1, keepdims=True))
                k += b
        else:
            width = self.upper - self.lower
            dz3 = up * (out - self.lower) * (self.upper - out)
            dz3 = np.divide(dz3, width, out=np.zeros_like(dz3), where=width > 0)

        dw3 = h2.T @ dz3
        db3 = dz3.sum(axis=0)
        dh2 = dz3 @ w3.T
        dz2 = dh2 * (z2 > 0.0)
        dw2 = h1.T @ dz2
        db2 = dz2.sum(axis=0)
        dh1 = dz2 @ w2.T
        dz1 = dh1 * (1.0 - h1 * h1)
        dw1 = xb.T @ dz1
        db1 = dz1.sum(axis=0)
        dx = dz1 @ w1.T

        dtheta = np.concatenate(
            [dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3]
        )
        return dtheta, (dx[0] if squeeze else dx)

    def clone(self):
        return replace(self, theta=self.theta.copy())


@dataclass
class AdamState:
    """Bias-corrected Adam bookkeeping for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(theta, grad, state: AdamState):
    """One Adam update; returns the new parameters and optimizer state."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValidationError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradient in Adam step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_theta, replace(state, m=m, v=v, step=t)


def soft_update(target_theta, online_theta, tau):
    """Convex blend  tau * online + (1 - tau) * target."""
    if not 0.0 < tau <= 1.0:
        raise ValidationError("tau must lie in (0, 1]")
    target_theta = np.asarray(target_theta, dtype=float)
    online_theta = np.asarray(online_theta, dtype=float)
    if target_theta.shape != online_theta.shape:
        raise ValidationError("target and online parameter lengths differ")
    return tau * online_theta + (1.0 - tau) * target_theta


# --- checkpoint serialization -------------------------------------------------
#
# Checkpoints are .npz archives.  Each network `name` contributes
# `name.theta` (flat float64 parameters), `name.dims` ([in_dim, out_dim]),
# `name.head` and, depending on the head, `name.blocks` or `name.lower` /
# `name.upper`.  A single `meta` entry holds a JSON string for run-level
# metadata (scenario fingerprint, config echo, ...).


def save_mlps(path, nets, meta=None):
    payload = {"meta": np.array(json.dumps(meta or {}))}
    for name, net in nets.items():
        payload[f"{name}.theta"] = net.theta
        payload[f"{name}.dims"] = np.array([net.in_dim, net.out_dim])
        payload[f"{name}.head"] = np.array(net.head)
        if net.head == "softmax":
            payload[f"{name}.blocks"] = np.array(net.blocks)
        elif net.head == "bounded":
            payload[f"{name}.lower"] = net.lower
            payload[f"{name}.upper"] = net.upper
    np.savez(path, **payload)


def load_mlps(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        names = sorted(
            key[: -len(".theta")] for key in data.files if key.endswith(".theta")
        )
        nets = {}
        for name in names:
            head = str(data[f"{name}.head"])
            in_dim, out_dim = (int(v) for v in data[f"{name}.dims"])
            kwargs = {}
            if head == "softmax":
                kwargs["blocks"] = tuple(int(b) for b in data[f"{name}.blocks"])
            elif head == "bounded":
                kwargs["lower"] = data[f"{name}.lower"]
                kwargs["upper"] = data[f"{name}.upper"]
            nets[name] = Mlp(in_dim, out_dim, head, data[f"{name}.theta"].copy(), **kwargs)
    return nets, meta


def finite_difference_check(net, x, rng, h=1e-5):
    """Max relative error of analytic vs central-difference gradients.

    Coordinates whose finite-difference magnitude is below 1e-7 are skipped;
    they carry no signal at this step size.
    """
    x = np.asarray(x, dtype=float)
    up = rng.standard_normal((x.shape[0] if x.ndim == 2 else 1, net.out_dim))
    if x.ndim == 1:
        up = up[0]
    dtheta, dx = net.backward(x, up)

    def loss(theta_vec, x_vec):
        probe = replace(net, theta=theta_vec)
        return float(np.sum(up * probe.forward(x_vec)))

    worst = 0.0
    for flat, numeric in ((net.theta, dtheta), (x.ravel(), dx.ravel())):
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            hi = loss(net.theta, x)
            flat[k] = orig - h
            lo = loss(net.theta, x)
            flat[k] = orig
            fd = (hi - lo) / (2.0 * h)
            if abs(fd) <= 1e-7:
                continue
            worst = max(worst, abs(numeric[k] - fd) / abs(fd))
    return worst


def gradcheck_suite(cases=100, seed=0, h=1e-5):
    """Finite-difference sweep over random nets of all three head kinds.

    Returns the max relative error seen across all parameter and input
    coordinates.  Used by the ``gradcheck`` CLI subcommand and the
    acceptance tests.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        in_dim = int(rng.integers(2, 8))
        kind = HEADS[case % 3]
        if kind == "softmax":
            blocks = (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
            net = Mlp.create(in_dim, sum(blocks), "softmax",
                             seed=rng.integers(2**31), blocks=blocks)
        elif kind == "bounded":
            out = int(rng.integers(1, 4))
            lo = -rng.uniform(0.1, 0.5, size=out)
            net = Mlp.create(in_dim, out, "bounded", seed=rng.integers(2**31),
                             lower=lo, upper=-lo)
        else:
            net = Mlp.create(in_dim, 1, "linear", seed=rng.integers(2**31))
        x = rng.standard_normal(in_dim)
        worst = max(worst, finite_difference_check(net, x, rng, h=h))
    return worst
