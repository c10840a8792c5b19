"""Multi-stage process data handling.

Everything between a raw per-observation CSV export and the inputs of the
estimation pipeline lives here: cleaning of faulty measurements, aggregation
of part measurements into one scalar quality score per observation,
partitioning of feature columns into per-actor private views, and a
synthetic generator with known per-actor signal strengths used to validate
the whole pipeline end to end.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

# Actor id reserved for the coordinator's pure-noise reference run.
NOISE_ACTOR_ID = "noise-baseline"


class ParseError(ValueError):
    """An input file violates the expected layout."""


def _parse_cell(text: str, row_index: int, column: str) -> float:
    s = text.strip()
    if s == "" or s.lower() == "nan":
        return float("nan")
    try:
        return float(s)
    except ValueError:
        raise ParseError(
            f"row {row_index}, column {column!r}: cannot parse {text!r} as a number"
        ) from None


@dataclass(frozen=True)
class RawTable:
    """Column-oriented view of one CSV export.

    Row order is chronological observation order and is preserved by every
    operation. Missing cells are NaN; ids are opaque strings kept apart
    from the numeric payload.
    """

    id_column: str
    ids: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray  # (n_rows, n_columns), NaN marks a missing cell

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        if values.shape != (len(self.ids), len(self.columns)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{len(self.ids)} rows x {len(self.columns)} columns"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_rows(self) -> int:
        return len(self.ids)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def missing_fraction(self, name: str) -> float:
        col = self.column(name)
        if col.size == 0:
            return 0.0
        return float(np.isnan(col).mean())


def load_csv(path: str | Path, id_column: str) -> RawTable:
    """Read a UTF-8 CSV with a header row into a RawTable.

    The designated id column is split off as the row ids; every other
    column must parse as a number, an empty cell, or the literal "NaN".
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if id_column not in header:
            raise ParseError(f"{path}: id column {id_column!r} not in header {header}")
        id_pos = header.index(id_column)
        columns = tuple(c for i, c in enumerate(header) if i != id_pos)

        ids: list[str] = []
        rows: list[list[float]] = []
        for row_index, row in enumerate(reader):
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {row_index} has {len(row)} fields, "
                    f"expected {len(header)}"
                )
            part_id = row[id_pos].strip()
            if not part_id:
                raise ParseError(f"{path}: row {row_index} has an empty id")
            ids.append(part_id)
            rows.append(
                [
                    _parse_cell(cell, row_index, header[i])
                    for i, cell in enumerate(row)
                    if i != id_pos
                ]
            )

    seen: set[str] = set()
    for part_id in ids:
        if part_id in seen:
            raise ParseError(f"{path}: duplicate id {part_id!r}")
        seen.add(part_id)

    values = np.asarray(rows, dtype=float).reshape(len(ids), len(columns))
    return RawTable(id_column=id_column, ids=tuple(ids), columns=columns, values=values)


def clean_measurements(
    table: RawTable,
    column_missing_threshold: float = 0.5,
    drop_rows_with_missing_targets: bool = True,
    measurement_columns: Sequence[str] | None = None,
) -> RawTable:
    """Drop unreliable measurement columns, then rows with missing targets.

    A measurement column whose missing fraction exceeds the threshold is
    removed entirely (a mostly-dead column indicates a faulty device, not
    recoverable data). Rows still missing one of the surviving measurement
    values are dropped, never imputed. When ``measurement_columns`` is None
    every column is treated as a measurement, which makes this a
    whole-table cleaning pass.
    """
    if not 0.0 < column_missing_threshold <= 1.0:
        raise ValueError("column_missing_threshold must be in (0, 1]")
    if measurement_columns is None:
        considered = list(table.columns)
    else:
        considered = list(measurement_columns)
        unknown = [c for c in considered if c not in table.columns]
        if unknown:
            raise ValueError(f"measurement columns not in table: {unknown}")

    dropped_cols = {
        c for c in considered if table.missing_fraction(c) > column_missing_threshold
    }
    kept_considered = [c for c in considered if c not in dropped_cols]
    if considered and not kept_considered:
        raise ValueError(
            "all measurement columns exceeded the missing-value threshold"
        )

    keep_idx = [i for i, c in enumerate(table.columns) if c not in dropped_cols]
    columns = tuple(table.columns[i] for i in keep_idx)
    values = table.values[:, keep_idx]

    if drop_rows_with_missing_targets and kept_considered:
        target_idx = [columns.index(c) for c in kept_considered]
        row_mask = ~np.isnan(values[:, target_idx]).any(axis=1)
    else:
        row_mask = np.ones(table.n_rows, dtype=bool)

    ids = tuple(pid for pid, keep in zip(table.ids, row_mask) if keep)
    return RawTable(
        id_column=table.id_column,
        ids=ids,
        columns=columns,
        values=values[row_mask],
    )


@dataclass(frozen=True)
class MeasurementBlock:
    """All measurements taken during one observation.

    ``actuals`` has one row per measured part and one column per
    measurement type; ``setpoints`` holds the target value per type,
    either shared across parts (1-d) or given per part (same shape as
    ``actuals``).
    """

    actuals: np.ndarray
    setpoints: np.ndarray

    def __post_init__(self) -> None:
        actuals = np.atleast_2d(np.asarray(self.actuals, dtype=float))
        setpoints = np.asarray(self.setpoints, dtype=float)
        if actuals.size == 0:
            raise ValueError("measurement block must not be empty")
        if setpoints.ndim == 1:
            if setpoints.shape[0] != actuals.shape[1]:
                raise ValueError("one setpoint per measurement type required")
        elif setpoints.shape != actuals.shape:
            raise ValueError("per-part setpoints must match the actuals shape")
        object.__setattr__(self, "actuals", actuals)
        object.__setattr__(self, "setpoints", setpoints)

    @property
    def n_parts(self) -> int:
        return self.actuals.shape[0]

    @property
    def n_measurement_types(self) -> int:
        return self.actuals.shape[1]


def aggregate_quality(block: MeasurementBlock) -> float:
    """Collapse one observation's measurements into a scalar quality score.

    The score is the sum of absolute relative deviations from the setpoint
    over all measured values, divided by the number of measurement types.
    Zero means every part hit its setpoints exactly; the score grows
    linearly with the relative deviations and is never negative.
    """
    if np.any(block.setpoints <= 0):
        raise ValueError("setpoints must be strictly positive")
    if np.any(np.isnan(block.actuals)) or np.any(np.isnan(block.setpoints)):
        raise ValueError("measurement block contains missing values")
    deviations = np.abs(block.actuals - block.setpoints) / block.setpoints
    return float(deviations.sum() / block.n_measurement_types)


@dataclass(frozen=True, eq=False)
class MetricSeries:
    """(part id, metric value) pairs; the only payload a coordinator shares."""

    part_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(self.part_ids) != values.shape[0]:
            raise ValueError("part_ids and values must have equal length")
        if len(set(self.part_ids)) != len(self.part_ids):
            raise ValueError("part_ids must be unique")
        if values.size and not np.all(np.isfinite(values)):
            raise ValueError("metric values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetricSeries):
            return NotImplemented
        return self.part_ids == other.part_ids and np.array_equal(
            self.values, other.values
        )

    def __len__(self) -> int:
        return len(self.part_ids)

    def entries(self) -> Iterator[tuple[str, float]]:
        for pid, value in zip(self.part_ids, self.values):
            yield pid, float(value)

    def as_mapping(self) -> dict[str, float]:
        return {pid: float(v) for pid, v in zip(self.part_ids, self.values)}

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["part_id", "value"])
            for pid, value in self.entries():
                writer.writerow([pid, repr(value)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricSeries":
        table = load_csv(path, id_column="part_id")
        if table.columns != ("value",):
            raise ParseError(f"{path}: expected columns (part_id, value)")
        return cls(part_ids=table.ids, values=table.values[:, 0])


def build_metric_series(
    table: RawTable,
    measurement_columns: Sequence[str],
    setpoints: Mapping[str, float] | None = None,
) -> MetricSeries:
    """Aggregate each observation's measurements into one metric value.

    Setpoints come either from the given mapping (one target per
    measurement name) or, when the mapping is None, from companion columns
    following the ``<name>.Setpoint`` convention. The table must already
    be cleaned; a missing measurement here is a contract violation.
    """
    if table.n_rows == 0:
        raise ValueError("cannot build a metric series from an empty table")
    measurement_columns = list(measurement_columns)
    if not measurement_columns:
        raise ValueError("at least one measurement column required")
    for c in measurement_columns:
        if c not in table.columns:
            raise ValueError(f"measurement column {c!r} not in table")

    actuals = np.column_stack([table.column(c) for c in measurement_columns])
    if setpoints is not None:
        missing = [c for c in measurement_columns if c not in setpoints]
        if missing:
            raise ValueError(f"no setpoint supplied for columns: {missing}")
        setpoint_rows = np.broadcast_to(
            np.array([setpoints[c] for c in measurement_columns], dtype=float),
            actuals.shape,
        )
    else:
        companions = [f"{c}.Setpoint" for c in measurement_columns]
        absent = [c for c in companions if c not in table.columns]
        if absent:
            raise ValueError(f"missing setpoint companion columns: {absent}")
        setpoint_rows = np.column_stack([table.column(c) for c in companions])

    if np.any(np.isnan(actuals)) or np.any(np.isnan(setpoint_rows)):
        raise ValueError(
            "missing measurement or setpoint value: cleaning contract violated"
        )

    values = [
        aggregate_quality(MeasurementBlock(actuals[i : i + 1], setpoint_rows[i]))
        for i in range(table.n_rows)
    ]
    return MetricSeries(part_ids=table.ids, values=np.asarray(values))


@dataclass(frozen=True)
class ActorDataset:
    """One actor's private feature view, rows keyed by part id."""

    actor_id: str
    part_ids: tuple[str, ...]
    columns: tuple[str, ...]
    features: np.ndarray  # (n_rows, n_columns)
    shared_flags: tuple[bool, ...]

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if len(self.columns) == 0:
            raise ValueError("an actor dataset needs at least one feature column")
        if features.shape != (len(self.part_ids), len(self.columns)):
            raise ValueError("features shape does not match ids x columns")
        if len(self.shared_flags) != len(self.columns):
            raise ValueError("one shared flag per column required")
        if len(set(self.part_ids)) != len(self.part_ids):
            raise ValueError("part_ids must be unique")
        if features.size and np.any(np.isnan(features)):
            raise ValueError(f"actor {self.actor_id!r}: features contain missing values")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)

    @property
    def n_rows(self) -> int:
        return len(self.part_ids)

    def rows_for(self, part_ids: Sequence[str]) -> np.ndarray:
        """Feature rows for the given part ids, in the given order."""
        index = {pid: i for i, pid in enumerate(self.part_ids)}
        try:
            positions = [index[pid] for pid in part_ids]
        except KeyError as exc:
            raise KeyError(f"part id {exc.args[0]!r} not in actor {self.actor_id!r}")
        return self.features[positions]

    def align(self, metric: MetricSeries) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
        """Inner-join rows with a metric series by part id.

        Returns (features, targets, part_ids) in this dataset's own row
        order, covering exactly the ids present on both sides.
        """
        metric_map = metric.as_mapping()
        keep = [i for i, pid in enumerate(self.part_ids) if pid in metric_map]
        ids = tuple(self.part_ids[i] for i in keep)
        features = self.features[keep]
        targets = np.array([metric_map[pid] for pid in ids], dtype=float)
        return features, targets, ids


def partition_actors(
    table: RawTable,
    actor_schema: Mapping[str, str],
    shared_columns: Sequence[str] = (),
) -> list[ActorDataset]:
    """Split feature columns into per-actor private views.

    Every table column must belong to exactly one actor or be marked
    shared; shared columns are copied into every actor's view and flagged.
    """
    shared = list(dict.fromkeys(shared_columns))
    for c in shared:
        if c not in table.columns:
            raise ValueError(f"shared column {c!r} not in table")
        if c in actor_schema:
            raise ValueError(f"column {c!r} is both shared and assigned to an actor")
    for c in actor_schema:
        if c not in table.columns:
            raise ValueError(f"assigned column {c!r} not in table")
    unassigned = [
        c for c in table.columns if c not in actor_schema and c not in shared
    ]
    if unassigned:
        raise ValueError(f"columns not assigned to any actor: {unassigned}")
    if table.values.size and np.any(np.isnan(table.values)):
        raise ValueError("table contains missing values; clean before partitioning")

    actor_order: list[str] = []
    for c in table.columns:
        actor = actor_schema.get(c)
        if actor is not None and actor not in actor_order:
            actor_order.append(actor)

    datasets = []
    for actor in actor_order:
        columns = [
            c for c in table.columns if actor_schema.get(c) == actor or c in shared
        ]
        flags = tuple(c in shared for c in columns)
        features = np.column_stack([table.column(c) for c in columns])
        datasets.append(
            ActorDataset(
                actor_id=actor,
                part_ids=table.ids,
                columns=tuple(columns),
                features=features,
                shared_flags=flags,
            )
        )
    return datasets


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic multi-actor dataset with known contributions."""

    actor_count: int
    features_per_actor: int
    signal_weights: tuple[float, ...]
    noise_std: float
    row_count: int
    cross_correlation: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "signal_weights", tuple(float(w) for w in self.signal_weights))
        if self.actor_count < 2:
            raise ValueError("at least 2 actors required")
        if self.row_count < 200:
            raise ValueError("row_count must be at least 200")
        if self.features_per_actor < 1:
            raise ValueError("features_per_actor must be positive")
        if len(self.signal_weights) != self.actor_count:
            raise ValueError("one signal weight per actor required")
        if any(w < 0 for w in self.signal_weights):
            raise ValueError("signal weights must be non-negative")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if not 0.0 <= self.cross_correlation < 1.0:
            raise ValueError("cross_correlation must be in [0, 1)")


def _nonlinear_signal(features: np.ndarray) -> np.ndarray:
    """Fixed nonlinear response of one actor's feature block.

    Sum of per-feature sinusoids plus, when available, the product of the
    first two features. Nonlinear enough that plain linear fits cannot
    fully explain it, while each feature still carries a linear component.
    """
    signal = np.sin(features).sum(axis=1)
    if features.shape[1] >= 2:
        signal = signal + features[:, 0] * features[:, 1]
    return signal


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[ActorDataset], MetricSeries, dict[str, float]]:
    """Generate per-actor features and a metric with known contributions.

    The metric is the weighted sum of a fixed nonlinear response of each
    actor's features plus Gaussian noise, so the ground-truth contribution
    strength of each actor is its signal weight. A positive
    ``cross_correlation`` mixes the first (most upstream) actor's features
    into the last (most downstream) actor's features, emulating the
    feature collinearity that sequential processes accumulate.
    """
    rng = np.random.default_rng(spec.seed)
    n, k = spec.row_count, spec.features_per_actor
    part_ids = tuple(f"part-{i:05d}" for i in range(n))

    blocks = [rng.standard_normal((n, k)) for _ in range(spec.actor_count)]
    rho = spec.cross_correlation
    if rho > 0.0:
        # Mixing preserves unit marginal variance of the downstream block.
        blocks[-1] = np.sqrt(1.0 - rho * rho) * blocks[-1] + rho * blocks[0]

    metric = rng.normal(0.0, spec.noise_std, size=n)
    for weight, block in zip(spec.signal_weights, blocks):
        if weight > 0.0:
            metric = metric + weight * _nonlinear_signal(block)

    datasets = []
    for a, block in enumerate(blocks):
        columns = tuple(f"x{j}" for j in range(k))
        datasets.append(
            ActorDataset(
                actor_id=f"actor-{a + 1}",
                part_ids=part_ids,
                columns=columns,
                features=block,
                shared_flags=(False,) * k,
            )
        )
    series = MetricSeries(part_ids=part_ids, values=metric)
    truth = {d.actor_id: w for d, w in zip(datasets, spec.signal_weights)}
    return datasets, series, truth


def make_noise_actor(
    row_count: int,
    feature_count: int,
    part_ids: Sequence[str],
    seed: int,
) -> ActorDataset:
    """Pure-noise feature block used as the no-knowledge reference."""
    part_ids = tuple(part_ids)
    if len(part_ids) != row_count:
        raise ValueError("part_ids length must equal row_count")
    if feature_count < 1:
        raise ValueError("feature_count must be positive")
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((row_count, feature_count))
    return ActorDataset(
        actor_id=NOISE_ACTOR_ID,
        part_ids=part_ids,
        columns=tuple(f"noise{j}" for j in range(feature_count)),
        features=features,
        shared_flags=(False,) * feature_count,
    )


def save_actor_datasets(datasets: Sequence[ActorDataset], out_dir: str | Path) -> None:
    """Write one CSV per actor plus a manifest describing shared columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for ds in datasets:
        filename = f"{ds.actor_id}.csv"
        with (out_dir / filename).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["part_id", *ds.columns])
            for i, pid in enumerate(ds.part_ids):
                writer.writerow([pid, *(repr(float(v)) for v in ds.features[i])])
        manifest.append(
            {
                "actor_id": ds.actor_id,
                "file": filename,
                "columns": list(ds.columns),
                "shared_flags": list(ds.shared_flags),
            }
        )
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump({"actors": manifest}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_actor_datasets(in_dir: str | Path) -> list[ActorDataset]:
    """Read back the datasets written by :func:`save_actor_datasets`."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {in_dir}")
    with manifest_path.open(encoding="utf-8") as fh:
        manifest = json.load(fh)
    datasets = []
    for entry in manifest["actors"]:
        table = load_csv(in_dir / entry["file"], id_column="part_id")
        if list(table.columns) != entry["columns"]:
            raise ParseError(
                f"{entry['file']}: columns do not match the manifest"
            )
        datasets.append(
            ActorDataset(
                actor_id=entry["actor_id"],
                part_ids=table.ids,
                columns=table.columns,
                features=table.values,
                shared_flags=tuple(bool(f) for f in entry["shared_flags"]),
            )
        )
    return datasets
