"""Tabular ingestion, normalization, splitting, and result files."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulate import CSV_HEADER, ExperimentResult


class DataError(ValueError):
    """Unreadable, malformed, or inconsistent input data."""


NORMALIZE_MODES = ("minmax", "zscore", "none")

MISSING = {"", "?", "na", "nan", "null", "none"}

# Cleaned Communities & Crime attributes, in table order.
CRIME_FEATURES = (
    "population householdsize racepctblack racePctWhite racePctAsian racePctHisp agePct12t21 "
    "agePct12t29 agePct16t24 agePct65up numbUrban pctUrban medIncome pctWWage pctWFarmSelf "
    "pctWInvInc pctWSocSec pctWPubAsst pctWRetire medFamInc perCapInc whitePerCap blackPerCap "
    "indianPerCap AsianPerCap OtherPerCap HispPerCap NumUnderPov PctPopUnderPov PctLess9thGrade "
    "PctNotHSGrad PctBSorMore PctUnemployed PctEmploy PctEmplManu PctEmplProfServ PctOccupManu "
    "PctOccupMgmtProf MalePctDivorce MalePctNevMarr FemalePctDiv TotalPctDiv PersPerFam PctFam2Par "
    "PctKids2Par PctYoungKids2Par PctTeen2Par PctWorkMomYoungKids PctWorkMom NumIlleg PctIlleg "
    "NumImmig PctImmigRecent PctImmigRec5 PctImmigRec8 PctImmigRec10 PctRecentImmig PctRecImmig5 "
    "PctRecImmig8 PctRecImmig10 PctSpeakEnglOnly PctNotSpeakEnglWell PctForeignBorn "
    "PctBornSameState PctSameHouse85 PctSameCity85 PctSameState85 PctLargHouseFam "
    "PctLargHouseOccup PersPerOccupHous PersPerOwnOccHous PersPerRentOccHous PctPersOwnOccup "
    "PctPersDenseHous PctHousLess3BR MedNumBR HousVacant PctHousOccup PctHousOwnOcc "
    "PctVacantBoarded PctVacMore6Mos MedYrHousBuilt PctHousNoPhone PctWOFullPlumb OwnOccLowQuart "
    "OwnOccMedVal OwnOccHiQuart RentLowQ RentMedian RentHighQ MedRent MedRentPctHousInc "
    "MedOwnCostPctInc MedOwnCostPctIncNoMtg LemasSwornFT LemasSwFTPerPop LemasSwFTFieldOps "
    "LemasSwFTFieldPerPop LemasTotalReq LemasPctPolicOnPatr LemasGangUnitDeploy"
).split()
CRIME_LABEL = "ViolentCrimesPerPop"


@dataclass
class Normalization:
    """Per-column affine map ``(x - shift) / scale``; zero-range columns get scale 0 and map to 0."""

    mode: str
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, mode: str = "minmax") -> "Normalization":
        if mode not in NORMALIZE_MODES:
            raise DataError(f"unknown normalization mode {mode!r}; expected one of {NORMALIZE_MODES}")
        p = x.shape[1]
        if mode == "none" or len(x) == 0:
            return cls(mode, np.zeros(p), np.ones(p))
        if mode == "minmax":
            lo, hi = x.min(axis=0), x.max(axis=0)
            return cls(mode, lo, hi - lo)
        return cls(mode, x.mean(axis=0), x.std(axis=0))

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, (x - self.shift) / safe, 0.0)

    def invert(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return np.where(self.scale > 0, z * self.scale + self.shift, self.shift)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "shift": self.shift.tolist(), "scale": self.scale.tolist()}


@dataclass
class TabularDataset:
    x: np.ndarray
    y: np.ndarray
    columns: list[str]
    label: str
    normalization: Normalization
    raw_x: np.ndarray
    dropped_rows: int = 0

    def __len__(self) -> int:
        return len(self.y)


def load_csv(path, label_column: str, normalize_mode: str = "minmax",
             drop_columns: tuple[str, ...] = (), require_label: bool = True) -> TabularDataset:
    """Read a numeric CSV with a header row.

    Rows containing a missing cell are dropped and counted. Every other cell
    must parse as a finite float. Features are normalized per column
    (min-max by default); labels are left as-is. With ``require_label=False``
    a file without the label column loads with NaN labels.
    """
    path = Path(path)
    if normalize_mode not in NORMALIZE_MODES:
        raise DataError(f"unknown normalization mode {normalize_mode!r}")
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    has_label = label_column in header
    if not has_label and require_label:
        raise DataError(f"{path}: label column {label_column!r} not found")
    keep = [i for i, h in enumerate(header) if h != label_column and h not in drop_columns]
    li = [header.index(label_column)] if has_label else []

    xs, ys, dropped = [], [], 0
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        cells = [c.strip() for c in row]
        if any(cells[i].lower() in MISSING for i in keep + li):
            dropped += 1
            continue
        vals = []
        for i in keep + li:
            try:
                v = float(cells[i])
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {header[i]!r}: non-numeric value {cells[i]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: column {header[i]!r}: non-finite value {cells[i]!r}")
            vals.append(v)
        xs.append(vals[:len(keep)])
        ys.append(vals[-1] if has_label else math.nan)
    if not ys:
        raise DataError(f"{path}: no complete rows")
    raw = np.asarray(xs, dtype=np.float64).reshape(len(ys), len(keep))
    norm = Normalization.fit(raw, normalize_mode)
    return TabularDataset(norm.apply(raw), np.asarray(ys), [header[i] for i in keep], label_column,
                          norm, raw, dropped)


@dataclass
class Splits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    unlabeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "valid", "test", "unlabeled")}


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor each share, then hand the remainder to train."""
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n_valid = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    return n - n_valid - n_test, n_valid, n_test


def split_dataset(n: int, fractions=(0.8, 0.1, 0.1), unlabeled_fraction: float = 0.1,
                  seed: int = 0) -> Splits:
    """Seeded shuffle of ``range(n)`` cut into train/valid/test, with an unlabeled slice of train.

    The unlabeled slice (``floor(unlabeled_fraction * n_train)`` rows, used
    for projection estimation) is removed from ``train``.
    """
    n_train, n_valid, n_test = split_sizes(n, tuple(fractions))
    perm = np.random.default_rng(seed).permutation(n)
    train = perm[:n_train]
    valid = perm[n_train:n_train + n_valid]
    test = perm[n_train + n_valid:]
    n_unl = math.floor(unlabeled_fraction * n_train + 1e-9) if unlabeled_fraction > 0 else 0
    unlabeled, train = train[:n_unl], train[n_unl:]
    for name, part, share in (("train", train, 1), ("valid", valid, fractions[1]),
                              ("test", test, fractions[2]), ("unlabeled", unlabeled, unlabeled_fraction)):
        if share > 0 and len(part) == 0:
            raise DataError(f"{name} split is empty for n={n}")
    return Splits(train, valid, test, unlabeled)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def write_results(result: ExperimentResult, path) -> None:
    atomic_write_text(path, result.to_csv())


def read_results(path) -> ExperimentResult:
    try:
        return ExperimentResult.from_csv(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc


def summarize(result: ExperimentResult, z: float = 1.959963984540054) -> list[dict]:
    """Mean and normal-approximation 95% CI per ``(method, n_p, n_q, metric)``."""
    groups: dict[tuple, list[float]] = {}
    for r in result.rows:
        groups.setdefault((r.method, r.n_p, r.n_q, r.metric), []).append(r.value)
    out = []
    for (method, n_p, n_q, metric), vals in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0], kv[0][3])):
        v = np.asarray(vals, dtype=np.float64)
        mean = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out.append({"method": method, "n_p": n_p, "n_q": n_q, "metric": metric, "count": len(v),
                    "mean": mean, "se": se, "ci_low": mean - z * se, "ci_high": mean + z * se})
    return out


SUMMARY_HEADER = ("method", "n_p", "n_q", "metric", "count", "mean", "se", "ci_low", "ci_high")


def summary_csv(rows: list[dict]) -> str:
    lines = [",".join(SUMMARY_HEADER)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in SUMMARY_HEADER))
    return "\n".join(lines) + "\n"


def write_table(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def make_crime_like(n: int, seed: int, *, domain: str = "source", r: int = 3,
                    loading_shift: float = 0.3, noise_sd: float = 0.05) -> tuple[list[str], np.ndarray]:
    """Synthetic rows with the cleaned crime-data schema and a genuine factor structure.

    Features follow ``x = B f + u`` (``B`` shared across domains up to a
    ``loading_shift`` perturbation for the target); the label depends on the
    factors and a few idiosyncratic components, with an extra target-only
    term. Returns ``(header, table)`` with the label as the last column,
    squashed into ``[0, 1]``.
    """
    p = len(CRIME_FEATURES)
    base = np.random.default_rng([seed, 0])
    b = base.uniform(-math.sqrt(3), math.sqrt(3), size=(p, r))
    rng = np.random.default_rng([seed, 1 if domain == "source" else 2])
    if domain == "target":
        b = b + loading_shift * (base.integers(0, 2, size=b.shape) * 2.0 - 1.0)
    elif domain != "source":
        raise DataError(f"domain must be 'source' or 'target', got {domain!r}")
    f = rng.uniform(-1, 1, size=(n, r))
    u = rng.uniform(-1, 1, size=(n, p))
    x = f @ b.T + u
    g = np.sin(f[:, 0]) + f[:, 1] * f[:, 2] + 0.5 * u[:, 0] + u[:, 1] ** 2
    if domain == "target":
        g = g + 0.8 * f[:, 0] - 0.6 * f[:, 2] + 0.5 * u[:, 2]
    y = g + noise_sd * rng.standard_normal(n)
    y = 1.0 / (1.0 + np.exp(-y))
    return list(CRIME_FEATURES) + [CRIME_LABEL], np.column_stack([x, y])


def write_crime_like(path, n: int, seed: int, **kw) -> None:
    header, table = make_crime_like(n, seed, **kw)
    write_table(path, header, [list(map(float, row)) for row in table])
