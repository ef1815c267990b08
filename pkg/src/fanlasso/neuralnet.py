"""Bounded deep ReLU networks with a clipped-L1 sparse selection layer.

Everything here is plain numpy with hand-written reverse mode. Subgradient
conventions at kinks are fixed so gradients are deterministic:

* ``relu'(0) = 0``;
* the derivative of ``clip(z, -M, M)`` is 1 strictly inside the band, else 0;
* the clipped-L1 penalty ``min(|x|/tau, 1)`` has derivative ``sign(x)/tau``
  for ``0 < |x| < tau`` and 0 elsewhere (including ``x = 0``).

A model input row is ``[lead, clip(Theta^T x, -M, M), trail]`` where ``lead``
and ``trail`` are fixed feature blocks (surrogate factors, a frozen source
prediction, raw covariates for plain networks) and ``x`` feeds the selection
matrix. Either block may be empty, and the selection layer may be absent.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import ValidationError


def clipped_l1(x, tau: float):
    """``min(|x| / tau, 1)``, elementwise."""
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    out = np.minimum(np.abs(x) / tau, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def clipped_l1_subgrad(x, tau: float):
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where((ax > 0) & (ax < tau), np.sign(x) / tau, 0.0)
    return float(out) if out.ndim == 0 else out


def truncate(z, m: float):
    """Clamp to ``[-m, m]``."""
    if m <= 0:
        raise ValidationError(f"truncation level must be positive, got {m}")
    out = np.clip(z, -m, m)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ReluNetwork:
    """``depth`` hidden ReLU layers of ``width`` units, scalar output clipped to ``[-M, M]``.

    ``weights[l]`` has shape ``(fan_in, fan_out)`` so a batch ``z`` of shape
    ``(n, d)`` flows as ``z @ W + b``. ``weight_bound`` is ``inf`` when
    unconstrained.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_bound: float
    weight_bound: float = math.inf

    @classmethod
    def init(
        cls,
        input_dim: int,
        depth: int,
        width: int,
        output_bound: float,
        rng: np.random.Generator,
        weight_bound: float = math.inf,
    ) -> "ReluNetwork":
        """Glorot-uniform weights, zero biases."""
        if input_dim < 1 or depth < 0 or (depth > 0 and width < 1):
            raise ValidationError(f"bad architecture d={input_dim} L={depth} N={width}")
        dims = [input_dim] + [width] * depth + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_in, fan_out))
            if math.isfinite(weight_bound):
                w = np.clip(w, -weight_bound, weight_bound)
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, float(output_bound), float(weight_bound))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[1] if self.depth > 0 else 0

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.input_dim:
            raise ValidationError(f"network expects {self.input_dim} inputs, got {z.shape[1]}")
        a = z
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
        out = (a @ self.weights[-1] + self.biases[-1])[:, 0]
        out = np.clip(out, -self.output_bound, self.output_bound)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "output_bound": self.output_bound,
            "weight_bound": None if math.isinf(self.weight_bound) else self.weight_bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReluNetwork":
        wb = d.get("weight_bound")
        return cls(
            weights=[np.asarray(w, dtype=np.float64).reshape(len(w), -1) for w in d["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
            output_bound=float(d["output_bound"]),
            weight_bound=math.inf if wb is None else float(wb),
        )


def forward(net: ReluNetwork, x) -> float:
    return net.forward(x)


@dataclass
class SelectionLayer:
    """Selection matrix ``Theta`` (``p x n_sel``) with its clipped-L1 penalty."""

    theta: np.ndarray
    tau: float = 0.01
    lam: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be non-negative, got {self.lam}")

    @classmethod
    def init(cls, p: int, n_sel: int, rng: np.random.Generator, tau: float = 0.01, lam: float = 0.0,
             scale: float = 0.01) -> "SelectionLayer":
        return cls(rng.uniform(-scale, scale, size=(p, n_sel)), tau, lam)

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    @property
    def n_sel(self) -> int:
        return self.theta.shape[1]

    def penalty(self) -> float:
        return self.lam * float(np.sum(clipped_l1(self.theta, self.tau)))

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "tau": self.tau, "lam": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionLayer":
        theta = np.asarray(d["theta"], dtype=np.float64).reshape(len(d["theta"]), -1)
        return cls(theta, float(d["tau"]), float(d["lam"]))


@dataclass
class Batch:
    """Training rows: ``lead`` and ``trail`` are fixed features, ``x`` feeds ``Theta``."""

    y: np.ndarray
    lead: np.ndarray | None = None
    x: np.ndarray | None = None
    trail: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = len(self.y)
        for name in ("lead", "x", "trail"):
            v = getattr(self, name)
            if v is None:
                v = np.zeros((n, 0))
            v = np.asarray(v, dtype=np.float64)
            if v.ndim == 1:
                v = v[:, None]
            if v.shape[0] != n:
                raise ValidationError(f"{name} has {v.shape[0]} rows, labels have {n}")
            setattr(self, name, v)

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Batch":
        return Batch(self.y[idx], self.lead[idx], self.x[idx], self.trail[idx])


def model_inputs(net: ReluNetwork, sel: SelectionLayer | None, batch: Batch) -> np.ndarray:
    """Assemble the network input ``[lead, clip(x Theta), trail]``."""
    parts = [batch.lead]
    if sel is not None:
        parts.append(np.clip(batch.x @ sel.theta, -net.output_bound, net.output_bound))
    parts.append(batch.trail)
    return np.concatenate(parts, axis=1)


def predict(net: ReluNetwork, sel: SelectionLayer | None, batch: Batch) -> np.ndarray:
    return net.forward(model_inputs(net, sel, batch))


def penalized_loss(net: ReluNetwork, sel: SelectionLayer | None, batch: Batch) -> float:
    """Mean squared error plus ``lam * sum psi_tau(Theta)``."""
    if len(batch) == 0:
        raise ValidationError("empty batch")
    resid = predict(net, sel, batch) - batch.y
    loss = float(np.mean(resid * resid))
    if sel is not None:
        loss += sel.penalty()
    return loss


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    theta: np.ndarray | None = None

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.theta is not None:
            out.append(self.theta)
        return out


def backward(net: ReluNetwork, sel: SelectionLayer | None, batch: Batch) -> tuple[float, Gradients]:
    """Loss and exact (sub)gradients of :func:`penalized_loss`."""
    n = len(batch)
    if n == 0:
        raise ValidationError("empty batch")
    m = net.output_bound
    if sel is not None:
        sel_pre = batch.x @ sel.theta
        sel_out = np.clip(sel_pre, -m, m)
        z = np.concatenate([batch.lead, sel_out, batch.trail], axis=1)
    else:
        z = np.concatenate([batch.lead, batch.trail], axis=1)
    if z.shape[1] != net.input_dim:
        raise ValidationError(f"network expects {net.input_dim} inputs, got {z.shape[1]}")

    acts = [z]
    pres = []
    a = z
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        pre = a @ w + b
        pres.append(pre)
        a = np.maximum(pre, 0.0)
        acts.append(a)
    out_pre = (a @ net.weights[-1] + net.biases[-1])[:, 0]
    out = np.clip(out_pre, -m, m)
    resid = out - batch.y
    loss = float(np.mean(resid * resid))

    delta = (2.0 / n) * resid * (np.abs(out_pre) < m)
    delta = delta[:, None]
    gw = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    for layer in range(len(net.weights) - 1, -1, -1):
        gw[layer] = acts[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.weights[layer].T) * (pres[layer - 1] > 0)
        elif sel is not None:
            delta = delta @ net.weights[0].T

    gtheta = None
    if sel is not None:
        a0 = batch.lead.shape[1]
        dsel = delta[:, a0:a0 + sel.n_sel] * (np.abs(sel_pre) < m)
        gtheta = batch.x.T @ dsel + sel.lam * clipped_l1_subgrad(sel.theta, sel.tau)
        loss += sel.penalty()
    return loss, Gradients(gw, gb, gtheta)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    full_batch_mode: bool = False
    early_stop: bool = True
    penalty_warmup: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    bound: float = math.inf,
    n_bounded: int | None = None,
) -> None:
    """One bias-corrected Adam update, in place.

    The first ``n_bounded`` parameters (default: all) are then clamped to
    ``[-bound, bound]``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("parameter, gradient and state lists differ in length")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = cfg.learning_rate
    n_bounded = len(params) if n_bounded is None else n_bounded
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValidationError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if i < n_bounded and math.isfinite(bound):
            np.clip(p, -bound, bound, out=p)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)


def _all_params(net: ReluNetwork, sel: SelectionLayer | None) -> list[np.ndarray]:
    return net.params() + ([sel.theta] if sel is not None else [])


def train(
    net: ReluNetwork,
    sel: SelectionLayer | None,
    train_data: Batch,
    valid_data: Batch | None,
    cfg: TrainConfig,
) -> tuple[ReluNetwork, SelectionLayer | None, History]:
    """Minibatch Adam on :func:`penalized_loss`.

    Works on copies; the inputs are left untouched. Each epoch reshuffles
    with a generator seeded from ``cfg.seed`` and keeps the short final
    batch. With ``early_stop`` and non-empty validation data, the returned
    parameters are those of the epoch with the lowest validation loss.
    """
    if len(train_data) == 0:
        raise ValidationError("empty training data")
    net = copy.deepcopy(net)
    sel = copy.deepcopy(sel)
    params = _all_params(net, sel)
    n_net = len(net.params())
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_data)
    bs = n if cfg.full_batch_mode else min(cfg.batch_size, n)
    use_valid = cfg.early_stop and valid_data is not None and len(valid_data) > 0

    hist = History()
    best = None
    best_loss = math.inf
    lam = sel.lam if sel is not None else 0.0
    for epoch in range(cfg.max_epochs):
        if sel is not None and cfg.penalty_warmup > 0:
            sel.lam = lam * min(1.0, (epoch + 1) / (cfg.penalty_warmup + 1))
        order = np.arange(n) if cfg.full_batch_mode else rng.permutation(n)
        for start in range(0, n, bs):
            batch = train_data.take(order[start:start + bs])
            _, grads = backward(net, sel, batch)
            adam_step(params, grads.as_list(), state, cfg, net.weight_bound, n_net)
        if sel is not None:
            sel.lam = lam
        hist.train_loss.append(penalized_loss(net, sel, train_data))
        if valid_data is not None and len(valid_data) > 0:
            vloss = penalized_loss(net, sel, valid_data)
            hist.valid_loss.append(vloss)
            if use_valid and vloss < best_loss:
                best_loss = vloss
                best = [p.copy() for p in params]
                hist.best_epoch = epoch
    if use_valid and best is not None:
        for p, b in zip(params, best):
            p[...] = b
    return net, sel, hist
