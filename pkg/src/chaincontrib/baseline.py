"""Centralised benchmark: one model on pooled features, game-theoretic
feature attribution aggregated per actor.

This is the privacy-free reference point the decentralised protocol is
measured against. All actors' features are concatenated (shared columns
deduplicated), a single two-headed network is trained with the same
recipe as an ensemble member, and each feature's contribution to each
prediction is attributed with Shapley values estimated by the kernel
weighted-least-squares method, with a brute-force enumeration oracle for
validation at small widths.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import comb, factorial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from chaincontrib.dataset import ActorDataset, MetricSeries
from chaincontrib.ensemble import (
    EnsembleHyper,
    Member,
    MemberLayout,
    Normaliser,
    _chronological_split,
    forward,
    init_member,
    train_member,
)

# Columns observable by every actor are attributed to this pseudo-actor
# instead of being double-counted.
SHARED_ACTOR_ID = "shared"


@dataclass(frozen=True)
class CentralModel:
    """Single pooled-feature regressor; the mean head is the prediction.

    The target is standardised for training and predictions are mapped
    back, so `predict` speaks raw metric units.
    """

    member: Member
    normaliser: Normaliser
    log_variance_clamp: tuple[float, float]
    target_center: float
    target_scale: float
    feature_index: tuple[tuple[str, str], ...]  # per column: (actor_id, column)
    training_features: np.ndarray  # raw feature rows of the training split
    validation_features: np.ndarray
    validation_part_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        width = self.member.w1.shape[0]
        if len(self.feature_index) != width:
            raise ValueError(
                f"feature_index covers {len(self.feature_index)} columns, "
                f"model takes {width}"
            )

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f"{actor}.{column}" for actor, column in self.feature_index)

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        mean, _ = forward(
            self.member,
            self.normaliser.transform(features),
            training_mode=False,
            clamp=self.log_variance_clamp,
        )
        return mean * self.target_scale + self.target_center


def pool_features(
    actors: Sequence[ActorDataset], metric: MetricSeries
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...], tuple[tuple[str, str], ...]]:
    """Inner-join all actors with the metric; deduplicate shared columns.

    Row order follows the metric series (chronological). A column flagged
    shared enters once, attributed to the shared pseudo-actor; the first
    actor carrying it supplies the values.
    """
    if not actors:
        raise ValueError("at least one actor dataset required")
    ids = [
        pid
        for pid in metric.part_ids
        if all(pid in set(a.part_ids) for a in actors)
    ]
    if not ids:
        raise ValueError("no part ids shared by every actor and the metric")

    columns: list[np.ndarray] = []
    index: list[tuple[str, str]] = []
    seen_shared: set[str] = set()
    for actor in actors:
        rows = actor.rows_for(ids)
        for j, (column, shared) in enumerate(zip(actor.columns, actor.shared_flags)):
            if shared:
                if column in seen_shared:
                    continue
                seen_shared.add(column)
                index.append((SHARED_ACTOR_ID, column))
            else:
                index.append((actor.actor_id, column))
            columns.append(rows[:, j])

    metric_map = metric.as_mapping()
    targets = np.array([metric_map[pid] for pid in ids], dtype=float)
    return np.column_stack(columns), targets, tuple(ids), tuple(index)


def train_central(
    actors: Sequence[ActorDataset],
    metric: MetricSeries,
    hyper: EnsembleHyper,
    seed: int = 0,
) -> CentralModel:
    """Train the pooled model with the same recipe as one ensemble member."""
    features, targets, ids, index = pool_features(actors, metric)
    train_slice, val_slice = _chronological_split(
        features.shape[0], hyper.validation_fraction
    )
    normaliser = Normaliser.fit(features[train_slice])
    center = float(targets[train_slice].mean())
    spread = float(targets[train_slice].std())
    scale = spread if spread > 0.0 else 1.0

    member = init_member(MemberLayout(features.shape[1], hyper.hidden_size), seed)
    trained = train_member(
        member,
        normaliser.transform(features),
        (targets - center) / scale,
        hyper,
    )
    return CentralModel(
        member=trained,
        normaliser=normaliser,
        log_variance_clamp=hyper.log_variance_clamp,
        target_center=center,
        target_scale=scale,
        feature_index=index,
        training_features=features[train_slice],
        validation_features=features[val_slice],
        validation_part_ids=tuple(ids[val_slice.start : val_slice.stop]),
    )


def _as_function(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, CentralModel):
        return model.predict
    if callable(model):
        return lambda rows: np.asarray(model(np.atleast_2d(rows)), dtype=float).reshape(-1)
    raise TypeError("model must be a CentralModel or a callable on feature rows")


def _coalition_values(
    fn: Callable[[np.ndarray], np.ndarray],
    masks: np.ndarray,
    instance: np.ndarray,
    background_mean: np.ndarray,
) -> np.ndarray:
    # Features outside the coalition are replaced by the background mean.
    rows = np.where(masks, instance, background_mean)
    return fn(rows)


def shapley_kernel_weight(d: int, size: int) -> float:
    """Weight of one coalition of the given size in the kernel regression."""
    if not 0 < size < d:
        raise ValueError("kernel weight is defined for proper non-empty coalitions")
    return (d - 1) / (comb(d, size) * size * (d - size))


def _solve_attribution(
    masks: np.ndarray,
    weights: np.ndarray,
    values: np.ndarray,
    base: float,
    full: float,
) -> np.ndarray:
    """Weighted least squares with the additivity constraint enforced exactly.

    The last feature's attribution is eliminated through the constraint
    sum(phi) = full - base, which the returned vector therefore satisfies
    to machine precision.
    """
    d = masks.shape[1]
    gap = full - base
    if d == 1:
        return np.array([gap])
    design = masks[:, :-1].astype(float) - masks[:, -1:].astype(float)
    response = values - base - masks[:, -1].astype(float) * gap
    sqrt_w = np.sqrt(weights)[:, None]
    head, _, rank, _ = np.linalg.lstsq(
        design * sqrt_w, response * sqrt_w[:, 0], rcond=None
    )
    if rank < d - 1:
        raise ValueError(
            "coalition system is singular; increase sample_count to cover "
            "more coalitions"
        )
    return np.append(head, gap - head.sum())


def kernel_shap(
    model,
    instance: np.ndarray,
    background: np.ndarray,
    sample_count: int = 2048,
    seed: int = 0,
) -> np.ndarray:
    """Per-feature attribution of f(instance) - f(background mean).

    Coalitions are enumerated completely when the budget covers all
    2^d - 2 proper subsets, otherwise sampled by coalition size with
    probabilities proportional to the total kernel mass of each size.
    Deterministic for a fixed seed.
    """
    instance = np.asarray(instance, dtype=float).reshape(-1)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    d = instance.shape[0]
    if background.shape[1] != d:
        raise ValueError("background width does not match the instance")
    if sample_count < 2 * d + 2:
        raise ValueError(
            f"sample_count {sample_count} too small; need at least {2 * d + 2}"
        )
    fn = _as_function(model)
    background_mean = background.mean(axis=0)
    base = float(fn(background_mean[None, :])[0])
    full = float(fn(instance[None, :])[0])
    if d == 1:
        return np.array([full - base])

    if 2**d - 2 <= sample_count:
        masks = np.array(
            [
                [(bits >> j) & 1 == 1 for j in range(d)]
                for bits in range(1, 2**d - 1)
            ],
            dtype=bool,
        )
        sizes = masks.sum(axis=1)
        weights = np.array([shapley_kernel_weight(d, int(s)) for s in sizes])
    else:
        rng = np.random.default_rng(seed)
        size_mass = np.array([(d - 1) / (s * (d - s)) for s in range(1, d)])
        size_prob = size_mass / size_mass.sum()
        counts: dict[tuple[bool, ...], int] = {}
        sizes_drawn = rng.choice(np.arange(1, d), size=sample_count, p=size_prob)
        for s in sizes_drawn:
            members = rng.choice(d, size=int(s), replace=False)
            mask = np.zeros(d, dtype=bool)
            mask[members] = True
            key = tuple(mask.tolist())
            counts[key] = counts.get(key, 0) + 1
        masks = np.array(sorted(counts), dtype=bool)
        weights = np.array([counts[tuple(m.tolist())] for m in masks], dtype=float)

    values = _coalition_values(fn, masks, instance, background_mean)
    return _solve_attribution(masks, weights, values, base, full)


def exact_shapley(model, instance: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Brute-force attribution over all 2^d coalitions; the oracle."""
    instance = np.asarray(instance, dtype=float).reshape(-1)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    d = instance.shape[0]
    if d > 12:
        raise ValueError(f"exact enumeration infeasible for {d} features (max 12)")
    if background.shape[1] != d:
        raise ValueError("background width does not match the instance")
    fn = _as_function(model)
    background_mean = background.mean(axis=0)

    masks = np.array(
        [[(bits >> j) & 1 == 1 for j in range(d)] for bits in range(2**d)],
        dtype=bool,
    )
    values = _coalition_values(fn, masks, instance, background_mean)
    value_of = {int(bits): values[bits] for bits in range(2**d)}

    phi = np.zeros(d)
    for j in range(d):
        for bits in range(2**d):
            if bits & (1 << j):
                continue
            s = bin(bits).count("1")
            weight = factorial(s) * factorial(d - s - 1) / factorial(d)
            phi[j] += weight * (value_of[bits | (1 << j)] - value_of[bits])
    return phi


@dataclass(frozen=True)
class ShapReport:
    """Attributions for a set of explained instances."""

    instance_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    feature_index: tuple[tuple[str, str], ...]
    values: np.ndarray  # (instances, features)
    base_value: float
    predictions: np.ndarray  # model predictions per instance
    background: np.ndarray

    def __post_init__(self) -> None:
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        predictions = np.asarray(self.predictions, dtype=float).reshape(-1)
        if values.shape != (len(self.instance_ids), len(self.feature_names)):
            raise ValueError("values shape must be instances x features")
        if len(self.feature_index) != len(self.feature_names):
            raise ValueError("one feature_index entry per feature required")
        if predictions.shape[0] != len(self.instance_ids):
            raise ValueError("one prediction per instance required")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "predictions", predictions)

    def additivity_gaps(self) -> np.ndarray:
        return self.values.sum(axis=1) + self.base_value - self.predictions


ADDITIVITY_TOLERANCE = 1e-3


def explain_central(
    model: CentralModel,
    sample_count: int = 2048,
    seed: int = 0,
    background_size: int = 100,
    max_instances: int | None = None,
) -> ShapReport:
    """Attribute the model's validation-split predictions feature by feature.

    Background rows are subsampled from the training split with a fixed
    seed; explained instances are the validation rows (optionally capped).
    """
    rng = np.random.default_rng(seed)
    train = model.training_features
    take = min(background_size, train.shape[0])
    background = train[rng.choice(train.shape[0], size=take, replace=False)]

    instances = model.validation_features
    ids = model.validation_part_ids
    if max_instances is not None:
        instances = instances[:max_instances]
        ids = ids[:max_instances]
    if instances.shape[0] == 0:
        raise ValueError("no validation instances to explain")

    rows = []
    for i in range(instances.shape[0]):
        rows.append(
            kernel_shap(
                model,
                instances[i],
                background,
                sample_count=sample_count,
                seed=seed,
            )
        )
    values = np.vstack(rows)
    predictions = model.predict(instances)
    base = float(model.predict(background.mean(axis=0)[None, :])[0])

    report = ShapReport(
        instance_ids=ids,
        feature_names=model.feature_names,
        feature_index=model.feature_index,
        values=values,
        base_value=base,
        predictions=predictions,
        background=background,
    )
    gaps = np.abs(report.additivity_gaps())
    if gaps.max() > ADDITIVITY_TOLERANCE:
        raise AssertionError(
            f"local accuracy violated: worst additivity gap {gaps.max():.2e}"
        )
    return report


def aggregate_company(
    report: ShapReport,
    feature_index: Sequence[tuple[str, str]] | None = None,
) -> dict[str, float]:
    """Mean over instances of the summed |attribution| per actor.

    Shared columns contribute to the shared pseudo-actor only.
    """
    index = tuple(feature_index) if feature_index is not None else report.feature_index
    if len(index) != report.values.shape[1]:
        raise ValueError(
            f"feature_index covers {len(index)} features, report has "
            f"{report.values.shape[1]}"
        )
    actors: dict[str, float] = {}
    absolute = np.abs(report.values)
    for j, (actor_id, _) in enumerate(index):
        actors[actor_id] = actors.get(actor_id, 0.0) + float(absolute[:, j].mean())
    return actors


def write_shap_csvs(report: ShapReport, out_dir: str | Path) -> tuple[Path, Path]:
    """One row per (instance, feature, attribution), plus the actor summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values_path = out_dir / "shap_values.csv"
    with values_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "feature", "attribution"])
        for i, pid in enumerate(report.instance_ids):
            for j, name in enumerate(report.feature_names):
                writer.writerow([pid, name, repr(float(report.values[i, j]))])

    summary_path = out_dir / "shap_summary.csv"
    aggregated = aggregate_company(report)
    with summary_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actor_id", "mean_abs_attribution"])
        for actor_id in sorted(aggregated):
            writer.writerow([actor_id, repr(aggregated[actor_id])])
    return values_path, summary_path
