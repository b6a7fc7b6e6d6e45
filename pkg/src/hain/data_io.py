"""Datasets: CSV ingestion, standardization, stratified splits, synthetic
benchmarks with planted informative features, and checkpoint persistence."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, IncompatibleVersionError, IntegrityError
from .model import HainConfig, HainParams
from .numerics import Rng

log = logging.getLogger(__name__)


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    class_names: list[str]
    standardization: Standardization | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ContractError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if len(self.feature_names) != self.X.shape[1]:
            raise ContractError("feature_names length differs from column count")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise FormatError("feature names must be unique")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise ContractError("labels out of range of class_names")
        if np.isnan(self.X).any():
            raise ContractError("dataset contains NaN")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx], report=dict(self.report))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, label_column: str | int = "label", has_header: bool = True,
             impute: bool = False, class_names: list[str] | None = None) -> Dataset:
    """Read a numeric CSV with one label column.

    Labels map to class indices in first-appearance order unless
    ``class_names`` fixes the mapping. Rows with empty cells are rejected
    (counted in ``report``) or, with ``impute=True``, filled with the column
    mean.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if has_header:
        if not rows:
            raise ContractError(f"{path}: empty file")
        header, rows = rows[0], rows[1:]
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise FormatError(f"{path}: duplicate header names {dupes}")
    else:
        width = len(rows[0]) if rows else 0
        header = [f"f{i}" for i in range(width)]
    if not rows:
        raise ContractError(f"{path}: no data rows")

    if isinstance(label_column, int) or (not has_header and str(label_column).lstrip("-").isdigit()):
        label_idx = int(label_column) % len(header)
    else:
        if label_column not in header:
            raise ContractError(f"{path}: label column {label_column!r} not in header")
        label_idx = header.index(label_column)
    feature_idx = [j for j in range(len(header)) if j != label_idx]

    values = np.full((len(rows), len(feature_idx)), np.nan)
    labels: list[str] = []
    for i, row in enumerate(rows):
        line = i + 1 + int(has_header)
        if len(row) != len(header):
            raise FormatError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        labels.append(row[label_idx].strip())
        for out_j, j in enumerate(feature_idx):
            cell = row[j].strip()
            if cell == "" or cell.lower() in {"na", "nan"}:
                continue
            try:
                values[i, out_j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: unparseable cell {cell!r} at row {line}, column {j + 1}") from None
            if not math.isfinite(values[i, out_j]):
                raise FormatError(f"{path}: non-finite cell at row {line}, column {j + 1}")

    missing = np.isnan(values).any(axis=1) | np.array([lab == "" for lab in labels])
    report = {"rows_in": len(rows), "rows_rejected": 0, "cells_imputed": 0}
    if missing.any():
        if impute:
            label_missing = np.array([lab == "" for lab in labels])
            if label_missing.any():
                raise FormatError(f"{path}: {int(label_missing.sum())} rows lack a label")
            col_mean = np.nanmean(values, axis=0)
            holes = np.isnan(values)
            values[holes] = np.take(np.nan_to_num(col_mean), np.nonzero(holes)[1])
            report["cells_imputed"] = int(holes.sum())
        else:
            report["rows_rejected"] = int(missing.sum())
            log.warning("%s: rejected %d rows with missing values", path, report["rows_rejected"])
            values = values[~missing]
            labels = [lab for lab, bad in zip(labels, missing) if not bad]
    report["rows_kept"] = len(labels)
    if not labels:
        raise ContractError(f"{path}: no complete rows")

    if class_names is None:
        class_names = list(dict.fromkeys(labels))
    lookup = {name: i for i, name in enumerate(class_names)}
    unknown = sorted(set(labels) - lookup.keys())
    if unknown:
        raise ContractError(f"{path}: labels {unknown} not among known classes {class_names}")
    y = np.array([lookup[lab] for lab in labels], dtype=np.int64)
    names = [header[j] for j in feature_idx]
    return Dataset(values, y, names, list(class_names), report=report)


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.feature_names, label_column])
        for row, label in zip(dataset.X, dataset.y):
            w.writerow([*(repr(float(v)) for v in row), dataset.class_names[label]])


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def fit_standardization(X: np.ndarray) -> Standardization:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ContractError("standardize needs at least 2 rows")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Standardization(mean, std)


def standardize(dataset: Dataset, stats: Standardization | None = None) -> Dataset:
    """Z-score features (population stddev). Fits stats unless given."""
    stats = stats if stats is not None else fit_standardization(dataset.X)
    return replace(dataset, X=stats.apply(dataset.X), standardization=stats)


def stratified_split(dataset: Dataset, test_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Per-class proportional split; test gets round(frac * n_c) of class c."""
    if not 0 < test_fraction < 1:
        raise ContractError("test_fraction must lie in (0, 1)")
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(dataset.y == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ContractError(f"class {dataset.class_names[c]!r} has a single sample")
        members = members[rng.stream("split", c).permutation(members.size)]
        n_test = int(round(test_fraction * members.size))
        n_test = min(max(n_test, 1), members.size - 1)
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def split_indices(dataset: Dataset, test_fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Index version of :func:`stratified_split` (same partition)."""
    tagged = replace(dataset, X=np.arange(dataset.n, dtype=np.float64)[:, None],
                     feature_names=["_row"])
    tr, te = stratified_split(tagged, test_fraction, rng)
    return tr.X[:, 0].astype(np.int64), te.X[:, 0].astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 2000
    d: int = 2000
    n_classes: int = 4
    n_informative: int = 20
    separation: float = 2.0
    noise: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if not 0 <= self.n_informative <= self.d:
            raise ContractError("n_informative must lie in [0, d]")
        if self.separation < 0 or self.noise < 0:
            raise ContractError("separation and noise must be nonnegative")

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls(**json.loads(text))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Gaussian classes whose means differ only on planted features.

    Class ``c`` has mean ``separation * s[c, j] / 2`` on planted feature
    ``j`` with random signs ``s in {-1, +1}``, and 0 elsewhere. Any two
    classes then differ by ``separation`` on each planted feature where
    their signs disagree; every planted column has both signs when K > 1.
    Labels are balanced.
    """
    rng = Rng(spec.seed)
    informative = np.sort(rng.stream("planted").choice(spec.d, spec.n_informative, replace=False))
    signs = rng.stream("signs").choice([-1.0, 1.0], size=(spec.n_classes, spec.n_informative))
    if spec.n_classes > 1:
        # a column with one sign for every class would carry no signal
        flat = np.flatnonzero(np.all(signs == signs[:1], axis=0))
        signs[flat % spec.n_classes, flat] *= -1.0
    y = np.arange(spec.n) % spec.n_classes
    y = y[rng.stream("labels").permutation(spec.n)]
    X = rng.stream("noise").normal(0.0, 1.0, size=(spec.n, spec.d)) * spec.noise
    X[:, informative] += 0.5 * spec.separation * signs[y]
    ds = Dataset(X, y, [f"f{i}" for i in range(spec.d)],
                 [f"class{c}" for c in range(spec.n_classes)])
    return ds, informative


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1
_MAGIC = b"HAINCKPT"


@dataclass
class Checkpoint:
    config: HainConfig
    params: HainParams
    class_names: list[str]
    feature_names: list[str]
    standardization: Standardization | None = None
    selection: dict | None = None
    prototypes: dict | None = None
    train_config: dict | None = None
    seed: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def groups(self) -> list[int]:
        return self.config.group_of().tolist()


def _encode(ckpt: Checkpoint) -> bytes:
    payload = bytearray()
    tensors = []
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload),
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        payload += raw
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "class_names": ckpt.class_names,
        "feature_names": ckpt.feature_names,
        "groups": ckpt.groups,
        "standardization": None if ckpt.standardization is None else _stats_hex(ckpt.standardization),
        "selection": ckpt.selection,
        "prototypes": ckpt.prototypes,
        "train_config": ckpt.train_config,
        "seed": ckpt.seed,
        "tensors": tensors,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    return _MAGIC + len(head).to_bytes(8, "little") + head + bytes(payload)


def _stats_hex(s: Standardization) -> dict:
    # hex floats keep the stats bit-exact inside the JSON header
    return {"mean": [float(v).hex() for v in s.mean], "std": [float(v).hex() for v in s.std]}


def _stats_unhex(d: dict) -> Standardization:
    return Standardization(np.array([float.fromhex(v) for v in d["mean"]]),
                           np.array([float.fromhex(v) for v in d["std"]]))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(_encode(ckpt))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return _encode(ckpt)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC or len(blob) < 16:
        raise IntegrityError(f"{path}: not a checkpoint file")
    head_len = int.from_bytes(blob[8:16], "little")
    try:
        header = json.loads(blob[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise IncompatibleVersionError(
            f"{path}: format version {header.get('format_version')} unsupported (expected {FORMAT_VERSION})")
    payload = blob[16 + head_len:]
    if len(payload) != header["payload_nbytes"]:
        raise IntegrityError(f"{path}: payload length {len(payload)} != {header['payload_nbytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    arrays = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise IntegrityError(f"{path}: checksum mismatch in {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
    cfg = HainConfig(**header["config"])
    params = HainParams(arrays)
    params.validate(cfg)
    stats = header["standardization"]
    return Checkpoint(
        config=cfg, params=params,
        class_names=header["class_names"], feature_names=header["feature_names"],
        standardization=None if stats is None else _stats_unhex(stats),
        selection=header["selection"], prototypes=header["prototypes"],
        train_config=header["train_config"], seed=header["seed"],
        format_version=header["format_version"],
    )


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

