"""Factor-augmented sparse-throughput networks, fine-tuning, and baselines.

Model kinds:

* :class:`FastNnModel` -- ``g([W^T x / p, clip(Theta^T x)])`` trained on source data.
* :class:`FineTunedModel` -- ``h([W_TL^T x / p, clip(Theta^T x), s(x)])`` where ``s``
  is a frozen pre-trained source model (FAN-Lasso).
* :class:`VanillaModel` -- a plain ReLU network on raw covariates, optionally
  fed a frozen source prediction as an extra column (FT-Vanilla-NN).
* :class:`OracleModel` -- a network on true factors, idiosyncratic components
  and the true source regression value (simulation benchmark).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import factor
from .factor import DiversifiedProjection, SourceTag
from .linalg import ValidationError
from .neuralnet import Batch, ReluNetwork, SelectionLayer, TrainConfig, predict, train

FORMAT = "fanlasso-model"
VERSION = 1


@dataclass
class ArchConfig:
    """Network and penalty hyperparameters.

    ``weight_bound=None`` leaves weights unconstrained. ``lam=None`` means
    ``1.3 log(p) / n_train``; ``output_bound=None`` means
    ``10 * max|y|`` over the training labels. ``warm_start_selection`` starts
    the fine-tuning ``Theta`` from the source model's fitted ``Theta`` when the
    shapes agree, instead of a fresh small uniform draw.
    """

    depth: int = 4
    width: int = 100
    n_sel: int = 50
    r_bar: int = 10
    tau: float = 0.01
    lam: float | None = None
    weight_bound: float | None = None
    output_bound: float | None = None
    warm_start_selection: bool = True

    def resolve_lam(self, p: int, n_train: int) -> float:
        if self.lam is not None:
            return float(self.lam)
        return 1.3 * math.log(p) / n_train

    @property
    def weight_limit(self) -> float:
        return math.inf if self.weight_bound is None else float(self.weight_bound)

    def resolve_bound(self, y) -> float:
        if self.output_bound is not None:
            return float(self.output_bound)
        top = float(np.max(np.abs(y))) if len(y) else 0.0
        return 10.0 * top if top > 0 else 1.0


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _as_2d(x, p: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if p is not None and x.shape[1] != p:
        raise ValidationError(f"expected {p} covariates, got {x.shape[1]}")
    return x


@dataclass
class FastNnModel:
    projection: DiversifiedProjection
    selection: SelectionLayer
    net: ReluNetwork
    role: str = "source"
    seed: int | None = None
    config_digest: str | None = None

    def __post_init__(self):
        want = self.projection.r_bar + self.selection.n_sel
        if self.net.input_dim != want:
            raise ValidationError(f"net input dim {self.net.input_dim} != r_bar + n_sel = {want}")
        if self.selection.p != self.projection.p:
            raise ValidationError("selection and projection disagree on p")

    @property
    def p(self) -> int:
        return self.projection.p

    def batch(self, x, y=None) -> Batch:
        x = _as_2d(x, self.p)
        y = np.zeros(len(x)) if y is None else y
        return Batch(y, lead=factor.surrogate_factors(self.projection, x), x=x)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = predict(self.net, self.selection, self.batch(x))
        return out[0] if x.ndim == 1 else out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION, "kind": "fast_nn", "role": self.role,
            "projection": self.projection.to_dict(), "selection": self.selection.to_dict(),
            "net": self.net.to_dict(), "seed": self.seed, "config_digest": self.config_digest,
        }


@dataclass
class VanillaModel:
    """Plain network on raw ``x`` (plus a frozen source column when ``source`` is set)."""

    net: ReluNetwork
    source: "VanillaModel | FastNnModel | None" = None
    seed: int | None = None
    config_digest: str | None = None

    @property
    def p(self) -> int:
        return self.net.input_dim - (1 if self.source is not None else 0)

    def batch(self, x, y=None) -> Batch:
        x = _as_2d(x, self.p)
        y = np.zeros(len(x)) if y is None else y
        trail = None if self.source is None else augment_target(self.source, x)
        return Batch(y, lead=x, trail=trail)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = predict(self.net, None, self.batch(x))
        return out[0] if x.ndim == 1 else out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION, "kind": "vanilla", "net": self.net.to_dict(),
            "source": None if self.source is None else self.source.to_dict(),
            "seed": self.seed, "config_digest": self.config_digest,
        }


@dataclass
class FineTunedModel:
    source: "FastNnModel | VanillaModel"
    target_projection: DiversifiedProjection
    target_selection: SelectionLayer
    target_net: ReluNetwork
    seed: int | None = None
    config_digest: str | None = None

    def __post_init__(self):
        want = self.target_projection.r_bar + self.target_selection.n_sel + 1
        if self.target_net.input_dim != want:
            raise ValidationError(f"target net input dim {self.target_net.input_dim} != {want}")

    @property
    def p(self) -> int:
        return self.target_projection.p

    def batch(self, x, y=None, s_hat=None) -> Batch:
        x = _as_2d(x, self.p)
        y = np.zeros(len(x)) if y is None else y
        if s_hat is None:
            s_hat = augment_target(self.source, x)
        return Batch(y, lead=factor.surrogate_factors(self.target_projection, x), x=x, trail=s_hat)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = predict(self.target_net, self.target_selection, self.batch(x))
        return out[0] if x.ndim == 1 else out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION, "kind": "fine_tuned",
            "source": self.source.to_dict(),
            "projection": self.target_projection.to_dict(),
            "selection": self.target_selection.to_dict(),
            "net": self.target_net.to_dict(),
            "seed": self.seed, "config_digest": self.config_digest,
        }


@dataclass
class OracleModel:
    """Network on ``[f, u_J, g_P]`` built from simulation truth."""

    net: ReluNetwork

    def predict_truth(self, f, u_j, gp) -> np.ndarray:
        return self.net.forward(_oracle_inputs(f, u_j, gp))


def _oracle_inputs(f, u_j, gp) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    n = len(f)
    u_j = np.asarray(u_j, dtype=np.float64).reshape(n, -1)
    gp = np.asarray(gp, dtype=np.float64).reshape(n, 1)
    return np.concatenate([f.reshape(n, -1), u_j, gp], axis=1)


def model_from_dict(d: dict):
    if d.get("format") != FORMAT:
        raise ValidationError("not a fanlasso model bundle")
    if d.get("version") != VERSION:
        raise ValidationError(f"unsupported bundle version {d.get('version')}")
    kind = d["kind"]
    if kind == "fast_nn":
        return FastNnModel(
            DiversifiedProjection.from_dict(d["projection"]), SelectionLayer.from_dict(d["selection"]),
            ReluNetwork.from_dict(d["net"]), d.get("role", "source"), d.get("seed"), d.get("config_digest"))
    if kind == "vanilla":
        src = d.get("source")
        return VanillaModel(ReluNetwork.from_dict(d["net"]), None if src is None else model_from_dict(src),
                            d.get("seed"), d.get("config_digest"))
    if kind == "fine_tuned":
        return FineTunedModel(
            model_from_dict(d["source"]), DiversifiedProjection.from_dict(d["projection"]),
            SelectionLayer.from_dict(d["selection"]), ReluNetwork.from_dict(d["net"]),
            d.get("seed"), d.get("config_digest"))
    raise ValidationError(f"unknown model kind {kind!r}")


def dumps_model(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True, allow_nan=False)


def loads_model(text: str):
    return model_from_dict(json.loads(text))


def model_checksum(model) -> str:
    return hashlib.sha256(dumps_model(model).encode()).hexdigest()


def fast_nn_predict(model: FastNnModel, x) -> float:
    return model.predict(x)


def augment_target(source, x) -> np.ndarray:
    """Frozen source predictions on each row of ``x`` (empty input gives an empty vector)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 0:
        return np.zeros(0)
    return np.asarray(source.predict(_as_2d(x)), dtype=np.float64).reshape(-1)


def finetune_predict(model: FineTunedModel, x) -> float:
    return model.predict(x)


def _valid_arrays(valid):
    if valid is None:
        return None, None
    xv, yv = valid
    if len(yv) == 0:
        return None, None
    return np.asarray(xv, dtype=np.float64), np.asarray(yv, dtype=np.float64)


def train_source(
    x,
    y,
    arch: ArchConfig,
    cfg: TrainConfig,
    *,
    x_unlabeled=None,
    unlabeled_fraction: float = 0.1,
    valid=None,
    x_other=None,
    delta: float | None = None,
    rng: np.random.Generator | None = None,
) -> FastNnModel:
    """Fit a FAST-NN on source data.

    The projection comes from ``x_unlabeled`` when given, else from the first
    ``ceil(unlabeled_fraction * n)`` rows of ``x`` (which are then excluded
    from supervised fitting). With ``x_other`` (target covariates) the
    projection borrows the pooled covariance under the threshold rule.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("source data must be non-empty with one label per row")
    p = x.shape[1]
    if x_unlabeled is None:
        k = math.ceil(unlabeled_fraction * len(x))
        x_unlabeled, x, y = x[:k], x[k:], y[k:]
    x_unlabeled = np.asarray(x_unlabeled, dtype=np.float64)
    if len(x_unlabeled) < arch.r_bar:
        raise ValidationError(f"need at least r_bar={arch.r_bar} unlabeled rows, got {len(x_unlabeled)}")
    if len(x) == 0:
        raise ValidationError("no rows left for supervised fitting")
    if x_other is not None and len(x_other):
        d = delta if delta is not None else factor.default_threshold(
            arch.r_bar, p, len(x_unlabeled) + len(x_other))
        proj = factor.transfer_projection(x_unlabeled, x_other, arch.r_bar, d, own_tag=SourceTag.SOURCE)
    else:
        proj = factor.diversified_projection(factor.sample_covariance(x_unlabeled), arch.r_bar, SourceTag.SOURCE)

    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    bound = arch.resolve_bound(y)
    net = ReluNetwork.init(arch.r_bar + arch.n_sel, arch.depth, arch.width, bound, rng, arch.weight_limit)
    sel = SelectionLayer.init(p, arch.n_sel, rng, arch.tau, arch.resolve_lam(p, len(x)))
    model = FastNnModel(proj, sel, net, "source", cfg.seed, _digest([asdict(arch), asdict(cfg)]))
    xv, yv = _valid_arrays(valid)
    vb = None if xv is None else model.batch(xv, yv)
    net, sel, _ = train(net, sel, model.batch(x, y), vb, cfg)
    model.net, model.selection = net, sel
    return model


def train_finetune(
    source,
    x,
    y,
    projection: DiversifiedProjection,
    arch: ArchConfig,
    cfg: TrainConfig,
    *,
    valid=None,
    rng: np.random.Generator | None = None,
) -> FineTunedModel:
    """Fit the residual network ``h`` on target data with the source frozen.

    Source predictions are computed once and held fixed as an input column;
    the source model itself is never modified.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("target data must be non-empty with one label per row")
    p = x.shape[1]
    if projection.p != p:
        raise ValidationError(f"projection has p={projection.p}, data has {p}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    bound = arch.resolve_bound(y)
    net = ReluNetwork.init(projection.r_bar + arch.n_sel + 1, arch.depth, arch.width, bound, rng,
                           arch.weight_limit)
    sel = SelectionLayer.init(p, arch.n_sel, rng, arch.tau, arch.resolve_lam(p, len(x)))
    src_sel = getattr(source, "selection", None)
    if arch.warm_start_selection and src_sel is not None and src_sel.theta.shape == sel.theta.shape:
        sel.theta = src_sel.theta.copy()
    model = FineTunedModel(source, projection, sel, net, cfg.seed, _digest([asdict(arch), asdict(cfg)]))
    xv, yv = _valid_arrays(valid)
    vb = None if xv is None else model.batch(xv, yv)
    net, sel, _ = train(net, sel, model.batch(x, y), vb, cfg)
    model.target_net, model.target_selection = net, sel
    return model


def train_vanilla(
    x,
    y,
    arch: ArchConfig,
    cfg: TrainConfig,
    *,
    source=None,
    valid=None,
    rng: np.random.Generator | None = None,
) -> VanillaModel:
    """Plain network on raw covariates; with ``source`` set, the FT-Vanilla variant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("data must be non-empty with one label per row")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    extra = 0 if source is None else 1
    net = ReluNetwork.init(x.shape[1] + extra, arch.depth, arch.width, arch.resolve_bound(y), rng,
                           arch.weight_limit)
    model = VanillaModel(net, source, cfg.seed, _digest([asdict(arch), asdict(cfg)]))
    xv, yv = _valid_arrays(valid)
    vb = None if xv is None else model.batch(xv, yv)
    model.net, _, _ = train(net, None, model.batch(x, y), vb, cfg)
    return model


def train_oracle(
    f,
    u_j,
    gp,
    y,
    arch: ArchConfig,
    cfg: TrainConfig,
    *,
    valid=None,
    rng: np.random.Generator | None = None,
) -> OracleModel:
    """Fit ``h`` on true ``[f, u_J, g_P]``; ``valid`` is ``(f, u_j, gp, y)`` or ``None``."""
    if f is None or u_j is None or gp is None:
        raise ValidationError("oracle training needs true factors, idiosyncratics and source values")
    z = _oracle_inputs(f, u_j, gp)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(z) == 0 or len(z) != len(y):
        raise ValidationError("data must be non-empty with one label per row")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    net = ReluNetwork.init(z.shape[1], arch.depth, arch.width, arch.resolve_bound(y), rng, arch.weight_limit)
    vb = None
    if valid is not None and len(valid[3]):
        vb = Batch(valid[3], lead=_oracle_inputs(*valid[:3]))
    net, _, _ = train(net, None, Batch(y, lead=z), vb, cfg)
    return OracleModel(net)


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mse: float
    n_eval: int
    excess_mse: float | None = None


def evaluate(predict_fn, x, y, truth=None) -> EvalReport:
    """Test MSE/RMSE of ``predict_fn(x)``; ``truth`` adds excess MSE against the true mean."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ValidationError("cannot evaluate on an empty set")
    pred = np.asarray(predict_fn(x), dtype=np.float64).reshape(-1)
    if pred.shape != y.shape:
        raise ValidationError(f"{len(pred)} predictions for {len(y)} labels")
    mse = float(np.mean((pred - y) ** 2))
    excess = None
    if truth is not None:
        excess = float(np.mean((pred - np.asarray(truth, dtype=np.float64).reshape(-1)) ** 2))
    return EvalReport(math.sqrt(mse), mse, len(y), excess)
