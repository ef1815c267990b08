"""Source/target CSV workflow: split, grid-search, fine-tune, predict.

A *bundle* is the JSON document written by the CLI: the model itself plus
what is needed to apply it to new rows (feature columns, the normalization
fitted on the source file, and the source-side unlabeled second-moment matrix
used for the threshold rule when fine-tuning).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import factor
from .data import NORMALIZE_MODES, DataError, Normalization, TabularDataset, split_dataset
from .factor import SourceTag
from .fastnn import (
    ArchConfig, FastNnModel, evaluate, model_from_dict, train_finetune, train_source, train_vanilla,
)
from .neuralnet import TrainConfig
from .simulate import _map

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "fanlasso-bundle"


@dataclass
class PipelineConfig:
    label: str = "ViolentCrimesPerPop"
    normalize: str = "minmax"
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    unlabeled_fraction: float = 0.1
    split_seed: int = 0
    model: str = "fast_nn"
    joint: bool = True
    depth_grid: tuple[int, ...] = (4, 5, 6)
    width_grid: tuple[int, ...] = (250, 350, 450)
    delta: float | None = None
    penalty_scale: str = "label_variance"
    center: bool = False
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(r_bar=3))
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.model not in ("fast_nn", "vanilla"):
            raise DataError(f"model must be 'fast_nn' or 'vanilla', got {self.model!r}")
        if not self.depth_grid or not self.width_grid:
            raise DataError("architecture grids must be non-empty")
        if self.normalize not in NORMALIZE_MODES:
            raise DataError(f"normalize must be one of {NORMALIZE_MODES}, got {self.normalize!r}")
        if self.penalty_scale not in ("label_variance", "none"):
            raise DataError(f"penalty_scale must be 'label_variance' or 'none', got {self.penalty_scale!r}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError("fractions must sum to 1")

    def grid(self) -> list[ArchConfig]:
        """Candidate architectures, ordered so earlier wins ties (smaller depth, then width)."""
        return [replace(self.arch, depth=d, width=w)
                for d in sorted(self.depth_grid) for w in sorted(self.width_grid)]


@dataclass
class Prepared:
    ds: TabularDataset
    splits: object

    def part(self, name: str):
        idx = getattr(self.splits, name)
        return self.ds.x[idx], self.ds.y[idx]


def prepare(ds: TabularDataset, cfg: PipelineConfig) -> Prepared:
    return Prepared(ds, split_dataset(len(ds), cfg.fractions, cfg.unlabeled_fraction, cfg.split_seed))


def center_dataset(ds: TabularDataset) -> TabularDataset:
    """Fold the column means of the normalized features into the normalization shift."""
    norm = ds.normalization
    mean = ds.x.mean(axis=0)
    shift = np.where(norm.scale > 0, norm.shift + mean * norm.scale, norm.shift)
    centered = Normalization(norm.mode, shift, norm.scale.copy())
    return replace(ds, x=centered.apply(ds.raw_x), normalization=centered)


def apply_normalization(ds: TabularDataset, columns: list[str], norm: Normalization) -> TabularDataset:
    """Re-express ``ds`` in another file's feature space (column order and scaling)."""
    if list(ds.columns) != list(columns):
        missing = sorted(set(columns) - set(ds.columns))
        extra = sorted(set(ds.columns) - set(columns))
        raise DataError(f"feature columns differ from the model's (missing {missing[:5]}, extra {extra[:5]})")
    return replace(ds, x=norm.apply(ds.raw_x), normalization=norm)


def _rmse(model, x, y) -> float:
    return evaluate(model.predict, x, y).rmse if len(y) else math.nan


def _pick(cands):
    """First candidate with the smallest finite validation RMSE."""
    best = None
    for c in cands:
        if math.isfinite(c["valid_rmse"]) and (best is None or c["valid_rmse"] < best["valid_rmse"]):
            best = c
    return best if best is not None else cands[0]


def scaled_arch(arch: ArchConfig, cfg: PipelineConfig, x, y) -> ArchConfig:
    """Pin the default penalty weight, times var(y) under ``penalty_scale='label_variance'``.

    Scaling by the label variance gives the same penalized objective as
    fitting standardized labels, so the default weight keeps its meaning for
    labels squeezed into [0, 1].
    """
    if arch.lam is not None or cfg.penalty_scale == "none" or len(y) < 2:
        return arch
    return replace(arch, lam=arch.resolve_lam(x.shape[1], len(y)) * float(np.var(y)))


def fit_source(src: Prepared, cfg: PipelineConfig, x_other=None, arch: ArchConfig | None = None):
    """Train one source model (FAST-NN or plain) on the prepared split."""
    x_tr, y_tr = src.part("train")
    arch = scaled_arch(arch or cfg.arch, cfg, x_tr, y_tr)
    x_va, y_va = src.part("valid")
    x_unl, y_unl = src.part("unlabeled")
    if cfg.model == "vanilla":
        # no projection to estimate, so the reserved rows are ordinary training rows
        return train_vanilla(np.concatenate([x_unl, x_tr]), np.concatenate([y_unl, y_tr]), arch, cfg.train,
                             valid=(x_va, y_va))
    return train_source(x_tr, y_tr, arch, cfg.train, x_unlabeled=x_unl, valid=(x_va, y_va),
                        x_other=x_other, delta=cfg.delta)


def _source_job(args):
    src, cfg, x_other, arch = args
    return fit_source(src, cfg, x_other, arch)


def source_grid(src: Prepared, cfg: PipelineConfig, x_other=None, threads: int = 1):
    archs = cfg.grid()
    models = _map(_source_job, [(src, cfg, x_other, a) for a in archs], threads)
    cands = []
    for arch, model in zip(archs, models):
        cands.append({"depth": arch.depth, "width": arch.width, "model": model,
                      "valid_rmse": _rmse(model, *src.part("valid"))})
        log.info("source L=%d N=%d valid RMSE %.5f", arch.depth, arch.width, cands[-1]["valid_rmse"])
    return _pick(cands), cands


def target_projection(tgt: Prepared, cfg: PipelineConfig, source_stats: dict | None):
    """Threshold-rule projection from the target unlabeled split and source second moments."""
    x_unl, _ = tgt.part("unlabeled")
    r_bar = cfg.arch.r_bar
    sigma_q = factor.sample_covariance(x_unl)
    if not source_stats:
        return factor.diversified_projection(sigma_q, r_bar, SourceTag.TARGET)
    sigma_p = np.asarray(source_stats["sigma"], dtype=np.float64)
    n_p, n_q = int(source_stats["n"]), len(x_unl)
    bundle = factor.CovarianceBundle(sigma_p, sigma_q, factor.pooled_covariance(sigma_p, n_p, sigma_q, n_q), n_p, n_q)
    delta = cfg.delta if cfg.delta is not None else factor.default_threshold(r_bar, sigma_q.shape[0], n_p + n_q)
    sigma, tag = factor.select_covariance(bundle, delta)
    return factor.diversified_projection(sigma, r_bar, tag, delta)


def fit_target(source, tgt: Prepared, cfg: PipelineConfig, projection, arch: ArchConfig):
    x_tr, y_tr = tgt.part("train")
    x_va, y_va = tgt.part("valid")
    arch = scaled_arch(arch, cfg, x_tr, y_tr)
    if cfg.model == "fast_nn":
        return train_finetune(source, x_tr, y_tr, projection, arch, cfg.train, valid=(x_va, y_va))
    x_unl, y_unl = tgt.part("unlabeled")
    x_fit, y_fit = np.concatenate([x_unl, x_tr]), np.concatenate([y_unl, y_tr])
    return train_vanilla(x_fit, y_fit, arch, cfg.train, source=source, valid=(x_va, y_va))


def _target_job(args):
    return fit_target(*args)


def target_grid(source, tgt: Prepared, cfg: PipelineConfig, projection, threads: int = 1):
    archs = cfg.grid()
    models = _map(_target_job, [(source, tgt, cfg, projection, a) for a in archs], threads)
    cands = []
    for arch, model in zip(archs, models):
        cands.append({"depth": arch.depth, "width": arch.width, "model": model,
                      "valid_rmse": _rmse(model, *tgt.part("valid"))})
        log.info("target L=%d N=%d valid RMSE %.5f", arch.depth, arch.width, cands[-1]["valid_rmse"])
    return _pick(cands), cands


def source_stats(src: Prepared) -> dict:
    x_unl, _ = src.part("unlabeled")
    if len(x_unl) == 0:
        x_unl, _ = src.part("train")
    return {"sigma": factor.sample_covariance(x_unl).tolist(), "n": len(x_unl)}


def make_bundle(model, ds: TabularDataset, cfg: PipelineConfig, metrics: dict, stats: dict | None = None) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "model": model.to_dict(),
        "columns": list(ds.columns),
        "label": ds.label,
        "normalization": ds.normalization.to_dict(),
        "source_stats": stats,
        "metrics": metrics,
        "config": json.loads(json.dumps(asdict(cfg), default=str)),
    }


def read_bundle(text: str) -> dict:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"model bundle is not valid JSON: {exc}") from exc
    if d.get("format") != BUNDLE_FORMAT:
        raise DataError("not a fanlasso model bundle")
    return d


def bundle_model(bundle: dict):
    return model_from_dict(bundle["model"])


def bundle_normalization(bundle: dict) -> Normalization:
    n = bundle["normalization"]
    return Normalization(n["mode"], np.asarray(n["shift"], dtype=np.float64), np.asarray(n["scale"], dtype=np.float64))


def split_metrics(model, prep: Prepared) -> dict:
    return {f"{name}_rmse": _rmse(model, *prep.part(name)) for name in ("valid", "test")}


def run_source(src_ds: TabularDataset, cfg: PipelineConfig, tgt_ds: TabularDataset | None = None,
               threads: int = 1) -> dict:
    """Grid-search a source model; returns the bundle dict."""
    cfg.validate()
    if cfg.center:
        src_ds = center_dataset(src_ds)
    src = prepare(src_ds, cfg)
    x_other = None
    if tgt_ds is not None and cfg.model == "fast_nn":
        tgt = prepare(apply_normalization(tgt_ds, src_ds.columns, src_ds.normalization), cfg)
        x_other = tgt.part("unlabeled")[0]
    best, cands = source_grid(src, cfg, x_other, threads)
    metrics = {**split_metrics(best["model"], src), "depth": best["depth"], "width": best["width"],
               "grid": [{k: c[k] for k in ("depth", "width", "valid_rmse")} for c in cands]}
    return make_bundle(best["model"], src_ds, cfg, metrics, source_stats(src) if cfg.model == "fast_nn" else None)


def run_finetune(tgt_ds: TabularDataset, cfg: PipelineConfig, *, source_bundle: dict | None = None,
                 src_ds: TabularDataset | None = None, threads: int = 1) -> dict:
    """Fine-tune on target data.

    With ``source_bundle`` the source is fixed (decoupled tuning). With
    ``src_ds`` and ``cfg.joint`` every (source, target) architecture pair is
    tried and the pair with the lowest target validation RMSE wins; without
    ``joint`` the source is first tuned on its own validation split.
    """
    cfg.validate()
    if (source_bundle is None) == (src_ds is None):
        raise DataError("give exactly one of a source model bundle or source data")
    if source_bundle is not None:
        columns = source_bundle["columns"]
        norm = bundle_normalization(source_bundle)
        tgt = prepare(apply_normalization(tgt_ds, columns, norm), cfg)
        source = bundle_model(source_bundle)
        if cfg.model == "fast_nn" and not isinstance(source, FastNnModel):
            raise DataError("fine-tuning with model=fast_nn needs a FAST-NN source bundle")
        stats = source_bundle.get("source_stats")
        proj = target_projection(tgt, cfg, stats) if cfg.model == "fast_nn" else None
        _, cands = target_grid(source, tgt, cfg, proj, threads)
        pairs = [{"source": None, **c} for c in cands]
        best = _pick(pairs)
    else:
        if cfg.center:
            src_ds = center_dataset(src_ds)
        columns, norm = src_ds.columns, src_ds.normalization
        src = prepare(src_ds, cfg)
        tgt = prepare(apply_normalization(tgt_ds, columns, norm), cfg)
        stats = source_stats(src) if cfg.model == "fast_nn" else None
        proj = target_projection(tgt, cfg, stats) if cfg.model == "fast_nn" else None
        x_other = tgt.part("unlabeled")[0] if cfg.model == "fast_nn" else None
        if cfg.joint:
            archs = cfg.grid()
            sources = list(zip(archs, _map(_source_job, [(src, cfg, x_other, a) for a in archs], threads)))
        else:
            sbest, _ = source_grid(src, cfg, x_other, threads)
            sources = [(replace(cfg.arch, depth=sbest["depth"], width=sbest["width"]), sbest["model"])]
        pairs = []
        for sarch, smodel in sources:
            _, cands = target_grid(smodel, tgt, cfg, proj, threads)
            pairs += [{"source": (sarch.depth, sarch.width), **c} for c in cands]
        best = _pick(pairs)
    metrics = {**split_metrics(best["model"], tgt), "depth": best["depth"], "width": best["width"],
               "source_arch": best["source"],
               "grid": [{k: c[k] for k in ("source", "depth", "width", "valid_rmse")} for c in pairs]}
    ds_view = replace(tgt_ds, columns=list(columns), normalization=norm)
    return make_bundle(best["model"], ds_view, cfg, metrics, stats)


def predict_rows(bundle: dict, ds: TabularDataset) -> np.ndarray:
    ds = apply_normalization(ds, bundle["columns"], bundle_normalization(bundle))
    return np.asarray(bundle_model(bundle).predict(ds.x), dtype=np.float64).reshape(-1)
