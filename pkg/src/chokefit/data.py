"""Dataset handling: synthetic generation from the mechanistic model,
steady-state CSV ingestion, outlier filtering, and chronological splitting.

A dataset is columnar: one float64 array per variable, all the same length,
row order preserved everywhere. Internally pressures are Pa, temperatures K,
the choke opening is a fraction in [0, 1], and the target oil rate is m3/h.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import physics
from .exceptions import DataError, DomainError, SchemaError
from .physics import AreaSpec, ChokeInput, FluidComposition, FluidConstants, PhysicalParams

logger = logging.getLogger(__name__)

#: Logical column names of the on-disk CSV format, in file order.
CSV_COLUMNS = ("timestamp", "p1", "p2", "t1", "u", "eta_g", "eta_o", "q_o")


@dataclass(frozen=True)
class Dataset:
    """Ordered rows of explanatory variables and the target oil rate."""

    p1: np.ndarray
    p2: np.ndarray
    t1: np.ndarray
    u: np.ndarray
    eta_g: np.ndarray
    eta_o: np.ndarray
    y: np.ndarray
    timestamps: tuple | None = None  # ISO-8601 strings, or None
    provenance: str = "ingested"
    generator_truth: tuple | None = None  # (PhysicalParams, AreaSpec)

    def __post_init__(self):
        n = len(self.y)
        for name in ("p1", "p2", "t1", "u", "eta_g", "eta_o"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if self.timestamps is not None and len(self.timestamps) != n:
            raise DataError("timestamps length does not match data")
        if self.provenance not in ("synthetic", "ingested"):
            raise DataError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def eta_w(self) -> np.ndarray:
        return 1.0 - self.eta_g - self.eta_o

    def row(self, i: int):
        """(timestamp, ChokeInput, y) for row i; timestamp may be None."""
        ts = self.timestamps[i] if self.timestamps is not None else None
        x = ChokeInput(
            p1=float(self.p1[i]), p2=float(self.p2[i]), t1=float(self.t1[i]),
            u=float(self.u[i]),
            composition=FluidComposition(float(self.eta_g[i]), float(self.eta_o[i])),
        )
        return ts, x, float(self.y[i])

    def subset(self, indices) -> "Dataset":
        """Rows at the given positions, order preserved."""
        indices = np.asarray(indices)
        ts = None
        if self.timestamps is not None:
            ts = tuple(self.timestamps[int(i)] for i in indices)
        return replace(
            self,
            p1=self.p1[indices], p2=self.p2[indices], t1=self.t1[indices],
            u=self.u[indices], eta_g=self.eta_g[indices], eta_o=self.eta_o[indices],
            y=self.y[indices], timestamps=ts,
        )

    def to_csv(self, path) -> None:
        """Write the documented CSV format; floats keep full 64-bit precision."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for i in range(len(self)):
                ts = self.timestamps[i] if self.timestamps is not None else ""
                writer.writerow([ts] + [format(float(v), ".17g") for v in (
                    self.p1[i], self.p2[i], self.t1[i], self.u[i],
                    self.eta_g[i], self.eta_o[i], self.y[i])])


@dataclass(frozen=True)
class InputRanges:
    """Sampling intervals for the synthetic input distribution.

    p2 is drawn as a raw pressure ratio times p1 so both flow regimes
    (sub-critical and critical) are covered.
    """

    p1_bar: tuple = (50.0, 150.0)
    pressure_ratio: tuple = (0.3, 0.99)
    t1: tuple = (310.0, 370.0)
    u: tuple = (0.05, 1.0)
    eta_g: tuple = (0.01, 0.6)
    eta_o: tuple = (0.2, 0.9)

    def validate(self) -> None:
        for name in ("p1_bar", "pressure_ratio", "t1", "u", "eta_g", "eta_o"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise DataError(f"input range {name} is empty: ({lo}, {hi})")
        if self.p1_bar[0] <= 0.0:
            raise DataError("input range p1_bar must be positive")
        if not (0.0 < self.pressure_ratio[0] and self.pressure_ratio[1] < 1.0):
            raise DataError("input range pressure_ratio must stay inside (0, 1)")
        if self.t1[0] <= 0.0:
            raise DataError("input range t1 must be positive")
        if not (0.0 <= self.u[0] and self.u[1] <= 1.0):
            raise DataError("input range u must stay inside [0, 1]")
        for name in ("eta_g", "eta_o"):
            lo, hi = getattr(self, name)
            if lo < 0.0 or hi > 1.0:
                raise DataError(f"input range {name} must stay inside [0, 1]")
        if self.eta_g[0] + self.eta_o[0] > 1.0:
            raise DataError("input ranges eta_g and eta_o leave no feasible composition")


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration of the synthetic data generator."""

    true_params: PhysicalParams = physics.TRUE_PARAMS
    area: AreaSpec = physics.DEFAULT_AREA
    n_points: int = 2000
    input_ranges: InputRanges = field(default_factory=InputRanges)
    noise_sigma: float = 0.0
    seed: int = 0
    constants: FluidConstants = physics.DEFAULT_CONSTANTS

    def validate(self) -> None:
        if self.n_points < 1:
            raise DataError(f"n_points must be at least 1, got {self.n_points}")
        if self.noise_sigma < 0.0:
            raise DataError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        self.input_ranges.validate()


def _sample_inputs(cfg: SyntheticConfig, rng: np.random.Generator):
    r = cfg.input_ranges
    n = cfg.n_points
    p1 = rng.uniform(*r.p1_bar, size=n) * 1.0e5  # bar -> Pa
    ratio = rng.uniform(*r.pressure_ratio, size=n)
    p2 = ratio * p1
    t1 = rng.uniform(*r.t1, size=n)
    u = rng.uniform(*r.u, size=n)
    eta_g = rng.uniform(*r.eta_g, size=n)
    eta_o = rng.uniform(*r.eta_o, size=n)
    # Rejection-resample compositions whose mass fractions exceed one.
    for _ in range(1000):
        bad = eta_g + eta_o > 1.0
        if not np.any(bad):
            break
        eta_g[bad] = rng.uniform(*r.eta_g, size=int(bad.sum()))
        eta_o[bad] = rng.uniform(*r.eta_o, size=int(bad.sum()))
    else:
        raise DataError("could not sample a feasible composition; check eta ranges")
    return p1, p2, t1, u, eta_g, eta_o


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Noise-free (or Gaussian-noised) synthetic observations generated with
    the mechanistic model at the configured true parameters."""
    return _generate(cfg, cfg.area)


def generate_mismatch_synthetic(cfg: SyntheticConfig, alt_area_shape: str = "smoothstep") -> Dataset:
    """Synthetic observations whose generating area curve deliberately
    differs from the mechanistic default, so any fit with the default curve
    faces a structural model error. The sampled inputs for a given seed are
    identical to :func:`generate_synthetic`, enabling paired comparisons."""
    alt_area = AreaSpec(a_max=cfg.area.a_max, shape=alt_area_shape)
    return _generate(cfg, alt_area)


def _generate(cfg: SyntheticConfig, area: AreaSpec) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    p1, p2, t1, u, eta_g, eta_o = _sample_inputs(cfg, rng)
    q_o, ok = physics.batch_oil_rate(
        p1, p2, t1, eta_g, eta_o, area.area(u),
        cfg.true_params.to_vector(), cfg.true_params.hm_mode, cfg.constants)
    if not np.all(ok):
        raise DataError("true parameters are not evaluable over the sampled inputs")
    if cfg.noise_sigma > 0.0:
        q_o = q_o + rng.normal(0.0, cfg.noise_sigma, size=len(q_o))
    return Dataset(
        p1=p1, p2=p2, t1=t1, u=u, eta_g=eta_g, eta_o=eta_o, y=q_o,
        provenance="synthetic", generator_truth=(cfg.true_params, area),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SchemaConfig:
    """Column naming and unit conversions of an input CSV.

    ``columns`` maps logical names (see CSV_COLUMNS) to the file's header
    names. Unit factors multiply raw values into internal units: pressures to
    Pa, opening to a [0, 1] fraction (use 0.01 for percent files), flow to
    m3/h. The timestamp column is optional.
    """

    columns: dict = field(default_factory=dict)
    pressure_factor: float = 1.0
    u_factor: float = 1.0
    q_o_factor: float = 1.0

    def column(self, logical: str) -> str:
        return self.columns.get(logical, logical)


def load_csv(path, schema: SchemaConfig = SchemaConfig()) -> Dataset:
    """Parse a steady-state CSV into a Dataset.

    Rows stay in file order. Unparsable cells produce row-level errors that
    are collected and reported; more than 50% bad rows is a hard error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        index = {}
        for logical in CSV_COLUMNS:
            name = schema.column(logical)
            if name in header:
                index[logical] = header.index(name)
            elif logical != "timestamp":  # timestamp is optional
                raise SchemaError(f"{path}: missing column {logical!r} (header name {name!r})")

        rows, timestamps, bad_rows = [], [], []
        has_ts = "timestamp" in index
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(row[index[c]]) for c in CSV_COLUMNS[1:]]
            except (ValueError, IndexError) as exc:
                bad_rows.append((line_no, str(exc)))
                continue
            rows.append(values)
            timestamps.append(row[index["timestamp"]].strip() if has_ts else "")

    n_total = len(rows) + len(bad_rows)
    if n_total == 0:
        raise DataError(f"{path}: no data rows")
    if len(bad_rows) > 0.5 * n_total:
        raise DataError(
            f"{path}: {len(bad_rows)} of {n_total} rows unparsable; "
            f"first: line {bad_rows[0][0]}: {bad_rows[0][1]}"
        )

    for line_no, msg in bad_rows:
        logger.warning("%s: skipped line %d: %s", path, line_no, msg)

    arr = np.asarray(rows, dtype=float)
    ts = tuple(timestamps) if has_ts and any(timestamps) else None
    return Dataset(
        p1=arr[:, 0] * schema.pressure_factor,
        p2=arr[:, 1] * schema.pressure_factor,
        t1=arr[:, 2],
        u=arr[:, 3] * schema.u_factor,
        eta_g=arr[:, 4],
        eta_o=arr[:, 5],
        y=arr[:, 6] * schema.q_o_factor,
        timestamps=ts,
        provenance="ingested",
    )


# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------

#: Filter reasons in the order they are checked; a row is charged to the
#: first reason it violates.
FILTER_REASONS = (
    "non_finite",
    "non_positive_pressure",
    "negative_flow",
    "opening_out_of_range",
    "bad_composition",
    "p2_not_below_p1",
)


@dataclass(frozen=True)
class FilterReport:
    """Counts of removed rows per reason."""

    n_input: int
    n_kept: int
    removed: dict

    @property
    def n_removed(self) -> int:
        return self.n_input - self.n_kept


def filter_outliers(ds: Dataset, drop_p2_ge_p1: bool = False):
    """Remove physically inconsistent rows (negative pressures or flow rates,
    openings outside [0, 1], bad compositions, non-finite values).

    Returns ``(filtered, FilterReport)``. Raises if nothing survives.
    """
    cols = np.column_stack([ds.p1, ds.p2, ds.t1, ds.u, ds.eta_g, ds.eta_o, ds.y])
    eta_w = ds.eta_w

    checks = {
        "non_finite": ~np.all(np.isfinite(cols), axis=1),
        "non_positive_pressure": (ds.p1 <= 0.0) | (ds.p2 <= 0.0) | (ds.t1 <= 0.0),
        "negative_flow": ds.y < 0.0,
        "opening_out_of_range": (ds.u < 0.0) | (ds.u > 1.0),
        "bad_composition": (ds.eta_g < 0.0) | (ds.eta_g > 1.0)
                           | (ds.eta_o < 0.0) | (ds.eta_o > 1.0) | (eta_w < 0.0),
        "p2_not_below_p1": (ds.p2 >= ds.p1) if drop_p2_ge_p1
                           else np.zeros(len(ds), dtype=bool),
    }
    # A row violating several checks is charged to the first reason only.
    removed = {}
    charged = np.zeros(len(ds), dtype=bool)
    for reason in FILTER_REASONS:
        mask = checks[reason] & ~charged
        count = int(mask.sum())
        if count:
            removed[reason] = count
        charged |= mask
    keep = ~charged
    if not np.any(keep):
        raise DataError("all rows removed by outlier filtering")
    report = FilterReport(n_input=len(ds), n_kept=int(keep.sum()), removed=removed)
    return ds.subset(np.flatnonzero(keep)), report


def _parse_timestamp(value: str) -> datetime:
    try:
        return datetime.fromisoformat(value)
    except ValueError as exc:
        raise DataError(f"unparsable timestamp {value!r}") from exc


def chronological_split(ds: Dataset, test_fraction: float | None = None,
                        cutoff: str | None = None):
    """Split into past (train) and latest (test) spans.

    Exactly one of ``test_fraction`` and ``cutoff`` must be given. With a
    fraction, the last round(fraction * n) rows are the test side; with an
    ISO-8601 cutoff, rows strictly after the cutoff are. Datasets without
    timestamps use row order as pseudo-time (fraction mode only). Rows are
    sorted by timestamp first if they arrive out of order.
    """
    if (test_fraction is None) == (cutoff is None):
        raise DataError("specify exactly one of test_fraction and cutoff")

    order = np.arange(len(ds))
    if ds.timestamps is not None:
        stamps = [_parse_timestamp(t) for t in ds.timestamps]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            order = np.argsort(np.asarray(stamps), kind="stable")
            stamps = [stamps[int(i)] for i in order]
        ds = ds.subset(order) if not np.array_equal(order, np.arange(len(ds))) else ds

    if test_fraction is not None:
        if not (0.0 < test_fraction < 1.0):
            raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
        n_test = int(round(test_fraction * len(ds)))
        n_train = len(ds) - n_test
    else:
        if ds.timestamps is None:
            raise DataError("cutoff split requires timestamps")
        cut = _parse_timestamp(cutoff)
        n_train = sum(1 for t in stamps if t <= cut)
        n_test = len(ds) - n_train

    if n_train < 1:
        raise DataError("chronological split leaves an empty training side")
    if n_test < 1:
        raise DataError("chronological split leaves an empty test side")
    return ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, len(ds)))
