"""Deep-ensemble uncertainty estimation on a scalar quality metric.

Each ensemble member is a one-hidden-layer network with two output heads,
a predicted mean and a predicted log-variance, trained on the Gaussian
negative log-likelihood so that the variance head learns the noise level
of the data. Ensemble spread over the mean head measures what the model
does not know; the averaged variance head measures what the data itself
hides. Their sum is the scalar each actor reports.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from chaincontrib.dataset import ActorDataset, MetricSeries


class TrainingError(RuntimeError):
    """Training aborted, typically on a non-finite loss."""


@dataclass(frozen=True)
class EnsembleHyper:
    """Training configuration shared by every member of an ensemble."""

    member_count: int = 5
    hidden_size: int = 50
    activation: str = "relu"
    dropout_rate: float = 0.5
    batch_size: int = 128
    patience_epochs: int = 100
    max_epochs: int = 2000
    learning_rate: float = 1e-3
    validation_fraction: float = 0.2
    log_variance_clamp: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "log_variance_clamp",
            (float(self.log_variance_clamp[0]), float(self.log_variance_clamp[1])),
        )
        if self.member_count < 2:
            raise ValueError("member_count must be at least 2")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        lo, hi = self.log_variance_clamp
        if not lo < hi:
            raise ValueError("log_variance_clamp must satisfy lo < hi")

    def to_dict(self) -> dict:
        return {
            "member_count": self.member_count,
            "hidden_size": self.hidden_size,
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
            "batch_size": self.batch_size,
            "patience_epochs": self.patience_epochs,
            "max_epochs": self.max_epochs,
            "learning_rate": self.learning_rate,
            "validation_fraction": self.validation_fraction,
            "log_variance_clamp": list(self.log_variance_clamp),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleHyper":
        known = {
            "member_count",
            "hidden_size",
            "activation",
            "dropout_rate",
            "batch_size",
            "patience_epochs",
            "max_epochs",
            "learning_rate",
            "validation_fraction",
            "log_variance_clamp",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "log_variance_clamp" in kwargs:
            kwargs["log_variance_clamp"] = tuple(kwargs["log_variance_clamp"])
        return cls(**kwargs)


@dataclass(frozen=True)
class MemberLayout:
    input_size: int
    hidden_size: int

    def __post_init__(self) -> None:
        if self.input_size < 1 or self.hidden_size < 1:
            raise ValueError("layout sizes must be positive")


def _rng(seed: int, stream: int) -> np.random.Generator:
    # Separate deterministic streams for initialisation and training.
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


@dataclass(frozen=True)
class Member:
    """Parameters of one two-headed network: input -> hidden -> (mean, log-variance)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    rng_seed: int

    def __post_init__(self) -> None:
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("weight matrices must be 2-d")
        if self.w2.shape[1] != 2 or self.b2.shape != (2,):
            raise ValueError("a member emits exactly two outputs per row")
        if self.b1.shape != (self.w1.shape[1],) or self.w2.shape[0] != self.w1.shape[1]:
            raise ValueError("inconsistent layer shapes")

    @property
    def layout(self) -> MemberLayout:
        return MemberLayout(self.w1.shape[0], self.w1.shape[1])

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )


def init_member(layout: MemberLayout, seed: int) -> Member:
    """Randomly initialise one member; the seed fully determines the draw.

    Weights are zero-centred Gaussians scaled by fan-in (suited to the
    rectified-linear hidden layer); biases get a small random offset so
    that two members never start identical.
    """
    rng = _rng(seed, 0)
    w1 = rng.normal(0.0, np.sqrt(2.0 / layout.input_size), (layout.input_size, layout.hidden_size))
    b1 = rng.normal(0.0, 0.1, layout.hidden_size)
    w2 = rng.normal(0.0, np.sqrt(2.0 / layout.hidden_size), (layout.hidden_size, 2))
    b2 = rng.normal(0.0, 0.1, 2)
    return Member(w1=w1, b1=b1, w2=w2, b2=b2, rng_seed=seed)


def forward(
    member: Member,
    x: np.ndarray,
    training_mode: bool = False,
    *,
    dropout_rate: float = 0.0,
    clamp: tuple[float, float] = (-10.0, 10.0),
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One forward pass; returns (mean, clamped log-variance).

    Accepts a single feature row or a stacked matrix. Dropout applies only
    in training mode; evaluation mode is deterministic.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.shape[1] != member.w1.shape[0]:
        raise ValueError(
            f"input arity {batch.shape[1]} does not match layout {member.w1.shape[0]}"
        )
    hidden = np.maximum(batch @ member.w1 + member.b1, 0.0)
    if training_mode and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = 1.0 - dropout_rate
        hidden = hidden * (rng.random(hidden.shape) < keep) / keep
    out = hidden @ member.w2 + member.b2
    mean = out[:, 0]
    log_var = np.clip(out[:, 1], clamp[0], clamp[1])
    if single:
        return float(mean[0]), float(log_var[0])
    return mean, log_var


def nll_loss(mean, log_var, target):
    """Gaussian negative log-likelihood, additive constant dropped.

    log(variance)/2 + squared error scaled by the precision; elementwise
    over arrays.
    """
    mean = np.asarray(mean, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    target = np.asarray(target, dtype=float)
    value = 0.5 * log_var + 0.5 * (target - mean) ** 2 * np.exp(-log_var)
    if value.ndim == 0:
        return float(value)
    return value


def loss_and_gradients(
    member: Member,
    features: np.ndarray,
    targets: np.ndarray,
    clamp: tuple[float, float] = (-10.0, 10.0),
    dropout_mask: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL over a batch and its analytic parameter gradients.

    A dropout mask (already scaled by the keep probability) may be passed
    explicitly so the same mask can be reused when checking gradients.
    """
    batch = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    n = batch.shape[0]
    if y.shape[0] != n:
        raise ValueError("features and targets disagree on row count")

    pre = batch @ member.w1 + member.b1
    hidden = np.maximum(pre, 0.0)
    if dropout_mask is not None:
        hidden = hidden * dropout_mask
    out = hidden @ member.w2 + member.b2
    mean = out[:, 0]
    raw_log_var = out[:, 1]
    log_var = np.clip(raw_log_var, clamp[0], clamp[1])
    inv_var = np.exp(-log_var)
    residual = mean - y
    loss = float(np.mean(0.5 * log_var + 0.5 * residual**2 * inv_var))

    d_out = np.empty_like(out)
    d_out[:, 0] = residual * inv_var / n
    inside = (raw_log_var > clamp[0]) & (raw_log_var < clamp[1])
    d_out[:, 1] = np.where(inside, (0.5 - 0.5 * residual**2 * inv_var) / n, 0.0)

    grad_w2 = hidden.T @ d_out
    grad_b2 = d_out.sum(axis=0)
    d_hidden = d_out @ member.w2.T
    if dropout_mask is not None:
        d_hidden = d_hidden * dropout_mask
    d_pre = d_hidden * (pre > 0.0)
    grad_w1 = batch.T @ d_pre
    grad_b1 = d_pre.sum(axis=0)
    return loss, {"w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2}


def _chronological_split(row_count: int, validation_fraction: float) -> tuple[slice, slice]:
    # Validation = most recent tail, keeping the observations time-ordered.
    n_val = max(1, int(row_count * validation_fraction))
    n_train = row_count - n_val
    return slice(0, n_train), slice(n_train, row_count)


def _eval_nll(member: Member, features: np.ndarray, targets: np.ndarray, clamp) -> float:
    mean, log_var = forward(member, features, training_mode=False, clamp=clamp)
    return float(np.mean(nll_loss(mean, log_var, targets)))


def train_member(
    member: Member,
    features: np.ndarray,
    targets: np.ndarray,
    hyper: EnsembleHyper,
    with_log: bool = False,
):
    """Train one member with minibatch adaptive-moment descent.

    The last ``validation_fraction`` of the rows (chronological order) is
    held out; training stops once the validation NLL has not strictly
    improved for ``patience_epochs`` epochs, and the parameters from the
    best validation epoch are returned. Fully deterministic given
    (member seed, data, hyper).
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    n = features.shape[0]
    if targets.shape[0] != n:
        raise ValueError("features and targets disagree on row count")
    train_slice, val_slice = _chronological_split(n, hyper.validation_fraction)
    x_train, y_train = features[train_slice], targets[train_slice]
    x_val, y_val = features[val_slice], targets[val_slice]
    if x_train.shape[0] < 2 * hyper.batch_size:
        raise ValueError(
            f"{x_train.shape[0]} training rows after the validation split; "
            f"need at least 2 x batch_size = {2 * hyper.batch_size}"
        )

    clamp = hyper.log_variance_clamp
    rng = _rng(member.rng_seed, 1)
    params = {
        "w1": member.w1.copy(),
        "b1": member.b1.copy(),
        "w2": member.w2.copy(),
        "b2": member.b2.copy(),
    }
    moment1 = {k: np.zeros_like(v) for k, v in params.items()}
    moment2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    def current() -> Member:
        return Member(
            w1=params["w1"].copy(),
            b1=params["b1"].copy(),
            w2=params["w2"].copy(),
            b2=params["b2"].copy(),
            rng_seed=member.rng_seed,
        )

    best = current()
    best_val = _eval_nll(best, x_val, y_val, clamp)
    best_epoch = 0
    log: list[tuple[int, float]] = []
    keep = 1.0 - hyper.dropout_rate

    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(x_train.shape[0])
        for start in range(0, x_train.shape[0], hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            snapshot = current()
            mask = None
            if hyper.dropout_rate > 0.0:
                mask = (rng.random((idx.size, hyper.hidden_size)) < keep) / keep
            loss, grads = loss_and_gradients(
                snapshot, x_train[idx], y_train[idx], clamp, dropout_mask=mask
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch} (seed {member.rng_seed})"
                )
            step += 1
            scale = (
                hyper.learning_rate
                * np.sqrt(1.0 - beta2**step)
                / (1.0 - beta1**step)
            )
            for key, grad in grads.items():
                moment1[key] = beta1 * moment1[key] + (1.0 - beta1) * grad
                moment2[key] = beta2 * moment2[key] + (1.0 - beta2) * grad**2
                params[key] -= scale * moment1[key] / (np.sqrt(moment2[key]) + eps)

        val_nll = _eval_nll(current(), x_val, y_val, clamp)
        if not np.isfinite(val_nll):
            raise TrainingError(
                f"non-finite validation loss at epoch {epoch} (seed {member.rng_seed})"
            )
        log.append((epoch, val_nll))
        if val_nll < best_val:
            best_val = val_nll
            best = current()
            best_epoch = epoch
        if epoch - best_epoch >= hyper.patience_epochs:
            break

    if with_log:
        return best, log
    return best


@dataclass(frozen=True)
class Normaliser:
    """Per-column z-scoring fitted on the training split only."""

    mean: np.ndarray
    scale: np.ndarray
    zero_variance: np.ndarray

    def __post_init__(self) -> None:
        for name in ("mean", "scale", "zero_variance"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normaliser":
        features = np.atleast_2d(features)
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        zero = std == 0.0
        return cls(mean=mean, scale=np.where(zero, 1.0, std), zero_variance=zero)

    @classmethod
    def identity(cls, width: int) -> "Normaliser":
        return cls(
            mean=np.zeros(width),
            scale=np.ones(width),
            zero_variance=np.zeros(width, dtype=bool),
        )

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        single = features.ndim == 1
        batch = np.atleast_2d(features)
        if batch.shape[1] != self.mean.shape[0]:
            raise ValueError("feature arity does not match the normaliser")
        out = (batch - self.mean) / self.scale
        # A column constant in training carries no signal; pin it to zero.
        out[:, self.zero_variance] = 0.0
        return out[0] if single else out


@dataclass(frozen=True)
class Ensemble:
    """Trained members plus everything needed to reproduce their predictions."""

    members: tuple[Member, ...]
    normaliser: Normaliser
    log_variance_clamp: tuple[float, float]
    training_log: tuple[tuple[tuple[int, float], ...], ...]
    validation_part_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least 2 members")
        layouts = {m.layout for m in self.members}
        if len(layouts) != 1:
            raise ValueError("members must share one layout")
        seeds = [m.rng_seed for m in self.members]
        if len(set(seeds)) != len(seeds):
            raise ValueError("member seeds must be pairwise distinct")
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(
            self,
            "log_variance_clamp",
            (float(self.log_variance_clamp[0]), float(self.log_variance_clamp[1])),
        )

    @property
    def member_count(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PredictiveSummary:
    """Ensemble prediction for one input, variance split by source.

    ``knowledge_variance`` is the spread of the member means (what more
    training data could remove); ``data_variance`` is the average
    predicted noise level (what no model could remove). Their sum is the
    total predictive variance.
    """

    mean: float
    knowledge_variance: float
    data_variance: float
    total_variance: float = field(init=False)

    def __post_init__(self) -> None:
        if self.knowledge_variance < 0.0 or self.data_variance < 0.0:
            raise ValueError("variance components must be non-negative")
        object.__setattr__(
            self, "total_variance", self.knowledge_variance + self.data_variance
        )


def train_ensemble(
    dataset: ActorDataset,
    targets: MetricSeries,
    hyper: EnsembleHyper,
    base_seed: int,
    parallel: bool = False,
) -> Ensemble:
    """Train all members on the identical aligned split; seeds base_seed+m.

    Diversity comes purely from member initialisation: every member sees
    the full training split (no bagging). Member training is independent,
    so the parallel path must produce bit-identical results.
    """
    features, y, ids = dataset.align(targets)
    if features.shape[0] == 0:
        raise ValueError(
            f"no part ids shared between actor {dataset.actor_id!r} and the metric"
        )
    train_slice, val_slice = _chronological_split(
        features.shape[0], hyper.validation_fraction
    )
    normaliser = Normaliser.fit(features[train_slice])
    normalised = normaliser.transform(features)
    layout = MemberLayout(features.shape[1], hyper.hidden_size)

    def build(m: int) -> tuple[Member, list[tuple[int, float]]]:
        seed = base_seed + m
        return train_member(
            init_member(layout, seed), normalised, y, hyper, with_log=True
        )

    if parallel:
        with ThreadPoolExecutor(max_workers=hyper.member_count) as pool:
            results = list(pool.map(build, range(hyper.member_count)))
    else:
        results = [build(m) for m in range(hyper.member_count)]

    return Ensemble(
        members=tuple(member for member, _ in results),
        normaliser=normaliser,
        log_variance_clamp=hyper.log_variance_clamp,
        training_log=tuple(tuple(log) for _, log in results),
        validation_part_ids=tuple(ids[val_slice]),
    )


def _member_outputs(ensemble: Ensemble, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode (means, variances) stacked as (member, row)."""
    normalised = np.atleast_2d(ensemble.normaliser.transform(features))
    means, variances = [], []
    for member in ensemble.members:
        mean, log_var = forward(
            member, normalised, training_mode=False, clamp=ensemble.log_variance_clamp
        )
        means.append(mean)
        variances.append(np.exp(log_var))
    return np.stack(means), np.stack(variances)


def predict(ensemble: Ensemble, x: np.ndarray) -> PredictiveSummary:
    """Combine member predictions for one input row.

    The total predictive variance equals the variance of the equal-weight
    Gaussian mixture over the members: spread of member means plus the
    average predicted noise variance.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict takes a single feature row")
    means, variances = _member_outputs(ensemble, x)
    mean = float(means.mean())
    knowledge = float(np.mean((means - mean) ** 2))
    data = float(variances.mean())
    return PredictiveSummary(mean=mean, knowledge_variance=knowledge, data_variance=data)


def total_uncertainty(
    ensemble: Ensemble,
    dataset: ActorDataset,
    targets: MetricSeries | None = None,
) -> float:
    """Scalar uncertainty an actor reports: mean total predictive variance
    over the held-out validation rows.

    Reads feature rows only. The optional metric series is used purely to
    assert that the validation part ids are still present; its values
    never enter the computation, so the report leaks no label information.
    """
    if not ensemble.validation_part_ids:
        raise ValueError("ensemble has an empty validation set")
    if targets is not None:
        known = set(targets.part_ids)
        missing = [pid for pid in ensemble.validation_part_ids if pid not in known]
        if missing:
            raise ValueError(f"validation part ids missing from metric: {missing[:3]}")
    rows = dataset.rows_for(ensemble.validation_part_ids)
    means, variances = _member_outputs(ensemble, rows)
    ensemble_mean = means.mean(axis=0)
    knowledge = np.mean((means - ensemble_mean) ** 2, axis=0)
    data = variances.mean(axis=0)
    return float(np.mean(knowledge + data))


def save_ensemble(ensemble: Ensemble, path: str | Path) -> None:
    """Checkpoint to a single self-describing binary file."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for i, member in enumerate(ensemble.members):
        arrays[f"member{i}_w1"] = member.w1
        arrays[f"member{i}_b1"] = member.b1
        arrays[f"member{i}_w2"] = member.w2
        arrays[f"member{i}_b2"] = member.b2
    arrays["normaliser_mean"] = ensemble.normaliser.mean
    arrays["normaliser_scale"] = ensemble.normaliser.scale
    arrays["normaliser_zero_variance"] = ensemble.normaliser.zero_variance
    meta = {
        "member_seeds": [m.rng_seed for m in ensemble.members],
        "log_variance_clamp": list(ensemble.log_variance_clamp),
        "training_log": [[[e, v] for e, v in log] for log in ensemble.training_log],
        "validation_part_ids": list(ensemble.validation_part_ids),
    }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_ensemble(path: str | Path) -> Ensemble:
    """Load a checkpoint; predictions must match the saved ensemble exactly."""
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        members = tuple(
            Member(
                w1=data[f"member{i}_w1"],
                b1=data[f"member{i}_b1"],
                w2=data[f"member{i}_w2"],
                b2=data[f"member{i}_b2"],
                rng_seed=seed,
            )
            for i, seed in enumerate(meta["member_seeds"])
        )
        normaliser = Normaliser(
            mean=data["normaliser_mean"],
            scale=data["normaliser_scale"],
            zero_variance=data["normaliser_zero_variance"],
        )
    return Ensemble(
        members=members,
        normaliser=normaliser,
        log_variance_clamp=tuple(meta["log_variance_clamp"]),
        training_log=tuple(
            tuple((int(e), float(v)) for e, v in log) for log in meta["training_log"]
        ),
        validation_part_ids=tuple(meta["validation_part_ids"]),
    )
