"""Synthetic factor-model data and the two Monte-Carlo experiments.

Every replication draws from its own generator, derived from
``(master_seed, replication, role)`` through ``numpy.random.SeedSequence``,
so results do not depend on execution order or on how replications are
spread over worker processes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import factor
from .factor import FactorDgpTruth, SourceTag
from .fastnn import ArchConfig, evaluate, train_finetune, train_oracle, train_source, train_vanilla
from .linalg import ValidationError
from .neuralnet import TrainConfig

log = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)

# stream roles for SeedSequence derivation
_ROLE_LOADINGS = 0
_ROLE_SOURCE = 1
_ROLE_TARGET = 2
_ROLE_TRAIN = 3

POSTERIOR_METHODS = ("FanLasso", "FtVanilla", "FastNnSourceOnly", "VanillaSourceOnly", "Oracle")
COVARIATE_METHODS = ("Transfer", "TargetOnly", "SourceOnly")


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, *key])))


def derived_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([master_seed, *key]).generate_state(1, np.uint32)[0])


def gen_loading_source(p: int, r: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-SQRT3, SQRT3, size=(p, r))


def gen_loading_target(b_p, shift_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Add ``shift_scale`` times an independent Rademacher sign to each entry."""
    if shift_scale < 0:
        raise ValidationError("shift_scale must be non-negative")
    b_p = np.asarray(b_p, dtype=np.float64)
    signs = rng.integers(0, 2, size=b_p.shape) * 2.0 - 1.0
    return b_p + shift_scale * signs


def gen_factor_data(b, n: int, rng: np.random.Generator):
    """``(X, F, U)`` with ``F``, ``U`` uniform on (-1, 1) and ``X = F B^T + U``."""
    b = np.asarray(b, dtype=np.float64)
    p, r = b.shape
    f = rng.uniform(-1.0, 1.0, size=(n, r))
    u = rng.uniform(-1.0, 1.0, size=(n, p))
    return f @ b.T + u, f, u


def gp_truth(f, u):
    """Source regression function on factors ``f`` (>= 4 columns) and ``u`` (>= 5 columns).

    Works row-wise on 2-d input or on single vectors.
    """
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if f.shape[-1] < 4 or u.shape[-1] < 5:
        raise ValidationError("need at least 4 factors and 5 idiosyncratic components")
    if np.any(u[..., 3] <= -3.0):
        raise ValidationError("log(3 + u4) undefined for u4 <= -3")
    out = (
        f[..., 0] + np.sin(f[..., 1]) + f[..., 2] * f[..., 3] ** 2
        + u[..., 0] + u[..., 1] ** 2 * u[..., 2] + np.log(3.0 + u[..., 3]) + np.tan(u[..., 4])
    )
    return float(out) if out.ndim == 0 else out


def gq_truth(f, u, gp_value):
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    out = f[..., 0] - f[..., 1] + u[..., 2] + np.asarray(gp_value, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


class ResultRow(NamedTuple):
    rep: int
    method: str
    n_p: int
    n_q: int
    metric: str
    value: float
    seed: int


CSV_HEADER = ("rep", "method", "n_p", "n_q", "metric", "value", "seed")


@dataclass
class ExperimentResult:
    rows: list[ResultRow] = field(default_factory=list)

    def sorted(self) -> "ExperimentResult":
        return ExperimentResult(sorted(self.rows, key=lambda r: (r.n_p, r.n_q, r.method, r.rep, r.metric)))

    def mean(self, method: str, metric: str, n_p: int | None = None, n_q: int | None = None) -> float:
        vals = [r.value for r in self.rows if r.method == method and r.metric == metric
                and (n_p is None or r.n_p == n_p) and (n_q is None or r.n_q == n_q)]
        if not vals:
            raise KeyError(f"no rows for {method}/{metric} at n_p={n_p}, n_q={n_q}")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)]
        for r in self.sorted().rows:
            lines.append(f"{r.rep},{r.method},{r.n_p},{r.n_q},{r.metric},{float(r.value)!r},{r.seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ExperimentResult":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or tuple(lines[0].split(",")) != CSV_HEADER:
            raise ValidationError("missing or malformed result header")
        rows = []
        for ln in lines[1:]:
            rep, method, n_p, n_q, metric, value, seed = ln.split(",")
            rows.append(ResultRow(int(rep), method, int(n_p), int(n_q), metric, float(value), int(seed)))
        return cls(rows)


@dataclass
class CovariateShiftConfig:
    p: int = 1000
    r: int = 4
    n_p_grid: tuple[int, ...] = (100, 150, 200, 250, 300)
    n_q_grid: tuple[int, ...] = (7, 10)
    loading_shift_scale: float = 0.5
    replications: int = 100
    master_seed: int = 0

    def validate(self) -> None:
        if min(self.p, self.r, self.replications) < 1:
            raise ValidationError("p, r and replications must be >= 1")
        if not self.n_p_grid or not self.n_q_grid or min(*self.n_p_grid, *self.n_q_grid) < 1:
            raise ValidationError("sample-size grids must be non-empty with positive entries")
        if self.loading_shift_scale < 0:
            raise ValidationError("loading_shift_scale must be non-negative")
        if self.r > self.p:
            raise ValidationError("r must not exceed p")


@dataclass
class PosteriorShiftConfig:
    p: int = 5000
    r: int = 4
    loading_shift_scale: float = 0.1
    n_p_train: int = 5000
    valid_fraction: float = 0.1
    n_unlabeled: int = 100
    n_test: int = 100
    n_q_grid: tuple[int, ...] = (50, 100, 200, 500, 1000, 1500, 2000, 2500, 3000, 3500, 4000, 4500, 5000)
    noise_sd: float = 0.5
    replications: int = 100
    master_seed: int = 0
    methods: tuple[str, ...] = POSTERIOR_METHODS
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    source_transfer: bool = True

    def validate(self) -> None:
        if not 0 < self.valid_fraction < 1:
            raise ValidationError("valid_fraction must lie in (0, 1)")
        if not self.n_q_grid or min(self.n_q_grid) < 1:
            raise ValidationError("n_q_grid must be non-empty with positive entries")
        if self.r < 4:
            raise ValidationError("the posterior-shift regression functions need r >= 4")
        if self.p < 5:
            raise ValidationError("the posterior-shift regression functions need p >= 5")
        bad = set(self.methods) - set(POSTERIOR_METHODS)
        if bad or not self.methods:
            raise ValidationError(f"unknown or empty method list: {sorted(bad)}")
        if min(self.n_p_train, self.n_unlabeled, self.n_test, self.replications) < 1:
            raise ValidationError("sample sizes and replications must be >= 1")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be non-negative")


def _map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def covariate_replication(cfg: CovariateShiftConfig, rep: int) -> list[ResultRow]:
    seed = derived_seed(cfg.master_seed, rep)
    rng_b = substream(cfg.master_seed, rep, _ROLE_LOADINGS)
    b_p = gen_loading_source(cfg.p, cfg.r, rng_b)
    b_q = gen_loading_target(b_p, cfg.loading_shift_scale, rng_b)
    truth = FactorDgpTruth(b_q)
    # nested prefixes of one draw per domain across the grid
    x_p_all, _, _ = gen_factor_data(b_p, max(cfg.n_p_grid), substream(cfg.master_seed, rep, _ROLE_SOURCE))
    x_q_all, _, _ = gen_factor_data(b_q, max(cfg.n_q_grid), substream(cfg.master_seed, rep, _ROLE_TARGET))

    rows = []
    for n_p in cfg.n_p_grid:
        x_p = x_p_all[:n_p]
        sigma_p = factor.sample_covariance(x_p)
        w_source = factor.diversified_projection(sigma_p, cfg.r, SourceTag.SOURCE)
        nu_source = factor.alignment_extremes(w_source, truth)[0]
        for n_q in cfg.n_q_grid:
            x_q = x_q_all[:n_q]
            sigma_q = factor.sample_covariance(x_q)
            bundle = factor.CovarianceBundle(
                sigma_p, sigma_q, factor.pooled_covariance(sigma_p, n_p, sigma_q, n_q), n_p, n_q)
            delta = factor.default_threshold(cfg.r, cfg.p, n_p + n_q)
            sigma_tl, tag = factor.select_covariance(bundle, delta)
            w_tl = factor.diversified_projection(sigma_tl, cfg.r, tag, delta)
            w_q = factor.diversified_projection(sigma_q, cfg.r, SourceTag.TARGET)
            rows += [
                ResultRow(rep, "Transfer", n_p, n_q, "nu_min", factor.alignment_extremes(w_tl, truth)[0], seed),
                ResultRow(rep, "Transfer", n_p, n_q, "pooled", float(tag is SourceTag.POOLED), seed),
                ResultRow(rep, "TargetOnly", n_p, n_q, "nu_min", factor.alignment_extremes(w_q, truth)[0], seed),
                ResultRow(rep, "SourceOnly", n_p, n_q, "nu_min", nu_source, seed),
            ]
    return rows


def _cov_job(args):
    return covariate_replication(*args)


def run_covariate_experiment(cfg: CovariateShiftConfig, threads: int = 1, reps=None) -> ExperimentResult:
    """Alignment ``nu_min(W^T B_Q / p)`` of transfer, target-only and source-only projections."""
    cfg.validate()
    reps = range(cfg.replications) if reps is None else reps
    out = _map(_cov_job, [(cfg, rep) for rep in reps], threads)
    return ExperimentResult([row for rows in out for row in rows]).sorted()


@dataclass
class Domain:
    x: np.ndarray
    f: np.ndarray
    u: np.ndarray
    y: np.ndarray
    gp: np.ndarray
    mean: np.ndarray  # true regression function values

    def __len__(self):
        return len(self.y)

    def take(self, sl) -> "Domain":
        return Domain(self.x[sl], self.f[sl], self.u[sl], self.y[sl], self.gp[sl], self.mean[sl])


def gen_source_domain(b, n: int, noise_sd: float, rng) -> Domain:
    x, f, u = gen_factor_data(b, n, rng)
    gp = gp_truth(f, u)
    return Domain(x, f, u, gp + rng.normal(0.0, noise_sd, size=n), gp, gp)


def gen_target_domain(b, n: int, noise_sd: float, rng) -> Domain:
    x, f, u = gen_factor_data(b, n, rng)
    gp = gp_truth(f, u)
    gq = gq_truth(f, u, gp)
    return Domain(x, f, u, gq + rng.normal(0.0, noise_sd, size=n), gp, gq)


ORACLE_IDIO = [2]  # the residual function uses u_3 only


def posterior_replication(cfg: PosteriorShiftConfig, rep: int) -> list[ResultRow]:
    seed = derived_seed(cfg.master_seed, rep)
    rng_b = substream(cfg.master_seed, rep, _ROLE_LOADINGS)
    b_p = gen_loading_source(cfg.p, cfg.r, rng_b)
    b_q = gen_loading_target(b_p, cfg.loading_shift_scale, rng_b)

    rng_s = substream(cfg.master_seed, rep, _ROLE_SOURCE)
    n_pv = max(1, round(cfg.valid_fraction * cfg.n_p_train))
    src = gen_source_domain(b_p, cfg.n_p_train + n_pv, cfg.noise_sd, rng_s)
    src_train, src_valid = src.take(slice(0, cfg.n_p_train)), src.take(slice(cfg.n_p_train, None))
    x_p_unl = gen_factor_data(b_p, cfg.n_unlabeled, rng_s)[0]

    rng_t = substream(cfg.master_seed, rep, _ROLE_TARGET)
    x_q_unl = gen_factor_data(b_q, cfg.n_unlabeled, rng_t)[0]
    test = gen_target_domain(b_q, cfg.n_test, cfg.noise_sd, rng_t)

    arch, methods = cfg.arch, set(cfg.methods)
    delta = factor.default_threshold(cfg.r, cfg.p, 2 * cfg.n_unlabeled)
    n_p_total = cfg.n_p_train

    def tcfg(*key):
        return TrainConfig(**{**cfg.train.__dict__, "seed": derived_seed(cfg.master_seed, rep, _ROLE_TRAIN, *key)})

    rows: list[ResultRow] = []

    def emit(method, n_q, fn):
        try:
            report = fn()
        except (ValidationError, ArithmeticError, FloatingPointError) as exc:
            log.warning("rep %d %s n_q=%d failed: %s", rep, method, n_q, exc)
            rows.append(ResultRow(rep, method, n_p_total, n_q, "failed", 1.0, seed))
            return
        rows.append(ResultRow(rep, method, n_p_total, n_q, "rmse", report.rmse, seed))
        rows.append(ResultRow(rep, method, n_p_total, n_q, "excess_mse", report.excess_mse, seed))

    fast_src = vanilla_src = None
    need_fast = methods & {"FanLasso", "FastNnSourceOnly"}
    need_vanilla = methods & {"FtVanilla", "VanillaSourceOnly"}
    if need_fast:
        fast_src = train_source(
            src_train.x, src_train.y, arch, tcfg(0), x_unlabeled=x_p_unl,
            valid=(src_valid.x, src_valid.y), x_other=x_q_unl if cfg.source_transfer else None, delta=delta)
    if need_vanilla:
        vanilla_src = train_vanilla(src_train.x, src_train.y, arch, tcfg(1), valid=(src_valid.x, src_valid.y))
    w_tl = None
    if "FanLasso" in methods:
        w_tl = factor.transfer_projection(x_q_unl, x_p_unl, arch.r_bar, delta)

    for i, n_q in enumerate(cfg.n_q_grid):
        rng_q = substream(cfg.master_seed, rep, _ROLE_TARGET, n_q)
        n_qv = max(1, round(cfg.valid_fraction * n_q))
        tgt = gen_target_domain(b_q, n_q + n_qv, cfg.noise_sd, rng_q)
        tr, va = tgt.take(slice(0, n_q)), tgt.take(slice(n_q, None))
        if "FastNnSourceOnly" in methods:
            emit("FastNnSourceOnly", n_q, lambda: evaluate(fast_src.predict, test.x, test.y, test.mean))
        if "VanillaSourceOnly" in methods:
            emit("VanillaSourceOnly", n_q, lambda: evaluate(vanilla_src.predict, test.x, test.y, test.mean))
        if "FanLasso" in methods:
            emit("FanLasso", n_q, lambda: evaluate(
                train_finetune(fast_src, tr.x, tr.y, w_tl, arch, tcfg(2, i), valid=(va.x, va.y)).predict,
                test.x, test.y, test.mean))
        if "FtVanilla" in methods:
            emit("FtVanilla", n_q, lambda: evaluate(
                train_vanilla(tr.x, tr.y, arch, tcfg(3, i), source=vanilla_src, valid=(va.x, va.y)).predict,
                test.x, test.y, test.mean))
        if "Oracle" in methods:
            def oracle_report():
                model = train_oracle(
                    tr.f, tr.u[:, ORACLE_IDIO], tr.gp, tr.y, arch, tcfg(4, i),
                    valid=(va.f, va.u[:, ORACLE_IDIO], va.gp, va.y))
                return evaluate(lambda _: model.predict_truth(test.f, test.u[:, ORACLE_IDIO], test.gp),
                                test.x, test.y, test.mean)
            emit("Oracle", n_q, oracle_report)
    return rows


def _post_job(args):
    return posterior_replication(*args)


def run_posterior_experiment(cfg: PosteriorShiftConfig, threads: int = 1, reps=None) -> ExperimentResult:
    """Target test RMSE of each method across the target sample-size grid."""
    cfg.validate()
    reps = range(cfg.replications) if reps is None else reps
    out = _map(_post_job, [(cfg, rep) for rep in reps], threads)
    return ExperimentResult([row for rows in out for row in rows]).sorted()
