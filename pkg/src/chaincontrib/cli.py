"""Command-line orchestration: ingest, synthesise, run both estimation
routes, and compare them.

One JSON config file drives every command; unknown keys anywhere in it
are rejected before any computation starts, and a handful of flags
(--seed, --transport, --out) override the corresponding config values.

Exit codes: 0 success, 2 config or validation failure, 3 campaign
failure (every actor declined, unreachable endpoints, wire errors).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from chaincontrib.baseline import explain_central, train_central, write_shap_csvs
from chaincontrib.dataset import (
    NOISE_ACTOR_ID,
    MetricSeries,
    ParseError,
    RawTable,
    SyntheticSpec,
    build_metric_series,
    clean_measurements,
    generate_synthetic,
    load_actor_datasets,
    load_csv,
    make_noise_actor,
    partition_actors,
    save_actor_datasets,
)
from chaincontrib.ensemble import EnsembleHyper
from chaincontrib.evaluation import build_comparison, emit_report
from chaincontrib.protocol import (
    ActorServer,
    CampaignError,
    ContributionRanking,
    DecodeError,
    InProcessTransport,
    LocalActor,
    MetricTransform,
    RankEntry,
    SocketTransport,
    derive_seed,
    run_campaign,
)


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _check_keys(section: str, raw: Mapping, allowed: set[str]) -> None:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {', '.join(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    input_csv: Path | None = None
    id_column: str = "part_id"
    actor_schema: dict[str, str] = field(default_factory=dict)
    shared_columns: tuple[str, ...] = ()
    measurement_columns: tuple[str, ...] = ()
    setpoints: dict[str, float] | None = None
    column_missing_threshold: float = 0.5
    actor_dir: Path | None = None
    metric_csv: Path | None = None

    _KEYS = {
        "input_csv",
        "id_column",
        "actor_schema",
        "shared_columns",
        "measurement_columns",
        "setpoints",
        "column_missing_threshold",
        "actor_dir",
        "metric_csv",
    }

    @classmethod
    def from_raw(cls, raw: Mapping) -> "DataConfig":
        _check_keys("data", raw, cls._KEYS)
        return cls(
            input_csv=Path(raw["input_csv"]) if "input_csv" in raw else None,
            id_column=str(raw.get("id_column", "part_id")),
            actor_schema={str(k): str(v) for k, v in raw.get("actor_schema", {}).items()},
            shared_columns=tuple(raw.get("shared_columns", ())),
            measurement_columns=tuple(raw.get("measurement_columns", ())),
            setpoints=(
                {str(k): float(v) for k, v in raw["setpoints"].items()}
                if raw.get("setpoints") is not None
                else None
            ),
            column_missing_threshold=float(raw.get("column_missing_threshold", 0.5)),
            actor_dir=Path(raw["actor_dir"]) if "actor_dir" in raw else None,
            metric_csv=Path(raw["metric_csv"]) if "metric_csv" in raw else None,
        )


@dataclass(frozen=True)
class CampaignConfig:
    deadline: float = 120.0
    noise_feature_count: int = 5
    slack: float = 1.0
    min_overlap: int = 50
    decliners: tuple[str, ...] = ()

    _KEYS = {"deadline", "noise_feature_count", "slack", "min_overlap", "decliners"}

    @classmethod
    def from_raw(cls, raw: Mapping) -> "CampaignConfig":
        _check_keys("campaign", raw, cls._KEYS)
        return cls(
            deadline=float(raw.get("deadline", 120.0)),
            noise_feature_count=int(raw.get("noise_feature_count", 5)),
            slack=float(raw.get("slack", 1.0)),
            min_overlap=int(raw.get("min_overlap", 50)),
            decliners=tuple(raw.get("decliners", ())),
        )


@dataclass(frozen=True)
class CentralConfig:
    sample_count: int = 2048
    background_size: int = 100
    max_instances: int | None = None
    include_noise: bool = False

    _KEYS = {"sample_count", "background_size", "max_instances", "include_noise"}

    @classmethod
    def from_raw(cls, raw: Mapping) -> "CentralConfig":
        _check_keys("central", raw, cls._KEYS)
        max_instances = raw.get("max_instances")
        return cls(
            sample_count=int(raw.get("sample_count", 2048)),
            background_size=int(raw.get("background_size", 100)),
            max_instances=int(max_instances) if max_instances is not None else None,
            include_noise=bool(raw.get("include_noise", False)),
        )


@dataclass(frozen=True)
class CompareConfig:
    ranking: Path | None = None
    shap_summary: Path | None = None

    _KEYS = {"ranking", "shap_summary"}

    @classmethod
    def from_raw(cls, raw: Mapping) -> "CompareConfig":
        _check_keys("compare", raw, cls._KEYS)
        return cls(
            ranking=Path(raw["ranking"]) if "ranking" in raw else None,
            shap_summary=Path(raw["shap_summary"]) if "shap_summary" in raw else None,
        )


TRANSPORTS = ("in-process", "sockets")


@dataclass(frozen=True)
class RunConfig:
    """All knobs for one experiment, resolved and validated."""

    seed: int = 0
    out: Path = Path("runs/latest")
    transport: str = "in-process"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SyntheticSpec | None = None
    hyper: EnsembleHyper = field(default_factory=EnsembleHyper)
    transform: MetricTransform | None = None
    standardise: bool = True
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    central: CentralConfig = field(default_factory=CentralConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def __post_init__(self) -> None:
        if self.transport not in TRANSPORTS:
            raise ConfigError(
                f"transport must be one of {TRANSPORTS}, got {self.transport!r}"
            )

    @property
    def actor_dir(self) -> Path:
        return self.data.actor_dir or self.out / "data"

    @property
    def metric_path(self) -> Path:
        return self.data.metric_csv or self.actor_dir / "metric.csv"

    def resolve_transform(self, metric: MetricSeries) -> MetricTransform | None:
        """Explicit scale/offset wins; otherwise standardise to unit spread.

        Standardising by default keeps the reported uncertainties on a
        comparable scale regardless of the metric's units, which the
        small per-actor networks need to train reliably.
        """
        if self.transform is not None:
            return self.transform
        if not self.standardise:
            return None
        spread = float(np.std(metric.values))
        center = float(np.mean(metric.values))
        if spread == 0.0:
            raise ConfigError("metric is constant; nothing to estimate")
        return MetricTransform(scale=1.0 / spread, offset=-center / spread)


_TOP_KEYS = {
    "seed",
    "out",
    "transport",
    "data",
    "synth",
    "hyper",
    "transform",
    "standardise",
    "campaign",
    "central",
    "compare",
}

_SYNTH_KEYS = {
    "actor_count",
    "features_per_actor",
    "signal_weights",
    "noise_std",
    "row_count",
    "cross_correlation",
    "seed",
}


def parse_config(raw: Mapping, args: argparse.Namespace | None = None) -> RunConfig:
    _check_keys("top level", raw, _TOP_KEYS)

    synth = None
    if "synth" in raw:
        _check_keys("synth", raw["synth"], _SYNTH_KEYS)
        synth_raw = dict(raw["synth"])
        synth_raw.setdefault("seed", int(raw.get("seed", 0)))
        if "signal_weights" in synth_raw:
            synth_raw["signal_weights"] = tuple(
                float(w) for w in synth_raw["signal_weights"]
            )
        try:
            synth = SyntheticSpec(**synth_raw)
        except TypeError as exc:  # missing required fields
            raise ConfigError(f"synth section invalid: {exc}") from exc

    hyper_raw = EnsembleHyper().to_dict()
    if "hyper" in raw:
        _check_keys("hyper", raw["hyper"], set(hyper_raw))
        overrides = dict(raw["hyper"])
        if "log_variance_clamp" in overrides:
            overrides["log_variance_clamp"] = tuple(overrides["log_variance_clamp"])
        hyper_raw.update(overrides)
    hyper = EnsembleHyper.from_dict(hyper_raw)

    transform = None
    standardise = bool(raw.get("standardise", True))
    if "transform" in raw:
        _check_keys("transform", raw["transform"], {"scale", "offset"})
        t = raw["transform"]
        if "scale" not in t:
            raise ConfigError("transform section needs a scale")
        transform = MetricTransform(
            scale=float(t["scale"]), offset=float(t.get("offset", 0.0))
        )

    config = RunConfig(
        seed=int(raw.get("seed", 0)),
        out=Path(raw.get("out", "runs/latest")),
        transport=str(raw.get("transport", "in-process")),
        data=DataConfig.from_raw(raw.get("data", {})),
        synth=synth,
        hyper=hyper,
        transform=transform,
        standardise=standardise,
        campaign=CampaignConfig.from_raw(raw.get("campaign", {})),
        central=CentralConfig.from_raw(raw.get("central", {})),
        compare=CompareConfig.from_raw(raw.get("compare", {})),
    )

    if args is not None:
        replacements = {}
        if getattr(args, "seed", None) is not None:
            replacements["seed"] = args.seed
        if getattr(args, "out", None) is not None:
            replacements["out"] = Path(args.out)
        if getattr(args, "transport", None) is not None:
            replacements["transport"] = args.transport
        if replacements:
            config = dataclasses.replace(config, **replacements)
    return config


def load_config(path: str | Path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a JSON object")
    return raw


# -------------------------------------------------------------------- commands


def cmd_synth(config: RunConfig) -> int:
    if config.synth is None:
        raise ConfigError("synth command requires a synth section in the config")
    datasets, series, truth = generate_synthetic(config.synth)
    save_actor_datasets(datasets, config.actor_dir)
    config.metric_path.parent.mkdir(parents=True, exist_ok=True)
    series.to_csv(config.metric_path)
    truth_path = config.actor_dir / "truth.json"
    truth_path.write_text(
        json.dumps({k: float(v) for k, v in truth.items()}, sort_keys=True, indent=2)
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote {len(datasets)} actor datasets to {config.actor_dir}")
    print(f"wrote metric series ({len(series)} rows) to {config.metric_path}")
    print(f"wrote ground truth to {truth_path}")
    return 0


def _feature_subtable(table: RawTable, feature_columns: Sequence[str]) -> RawTable:
    idx = [table.columns.index(c) for c in feature_columns]
    return RawTable(
        id_column=table.id_column,
        ids=table.ids,
        columns=tuple(feature_columns),
        values=table.values[:, idx],
    )


def cmd_ingest(config: RunConfig) -> int:
    data = config.data
    if data.input_csv is None:
        raise ConfigError("ingest requires data.input_csv")
    if not data.actor_schema:
        raise ConfigError("ingest requires data.actor_schema")
    if not data.measurement_columns:
        raise ConfigError("ingest requires data.measurement_columns")

    table = load_csv(data.input_csv, data.id_column)
    cleaned = clean_measurements(
        table,
        column_missing_threshold=data.column_missing_threshold,
        drop_rows_with_missing_targets=True,
        measurement_columns=list(data.measurement_columns),
    )
    dropped_columns = [c for c in table.columns if c not in cleaned.columns]
    dropped_rows = table.n_rows - cleaned.n_rows
    print(f"dropped measurement columns: {len(dropped_columns)}")
    for c in dropped_columns:
        missing = int(round(table.missing_fraction(c) * table.n_rows))
        print(f"  {c}: {missing} of {table.n_rows} values missing")
    print(f"dropped rows with missing measurements: {dropped_rows}")

    kept_measurements = [c for c in data.measurement_columns if c in cleaned.columns]
    series = build_metric_series(cleaned, kept_measurements, data.setpoints)

    feature_columns = [
        c
        for c in cleaned.columns
        if c in data.actor_schema or c in data.shared_columns
    ]
    if not feature_columns:
        raise ConfigError("actor_schema matches no columns in the cleaned table")
    features = _feature_subtable(cleaned, feature_columns)

    # Rows with missing feature values leave both sides, keeping the
    # datasets and the metric aligned on the same part ids.
    row_ok = ~np.isnan(features.values).any(axis=1)
    dropped_feature_rows = int((~row_ok).sum())
    if dropped_feature_rows:
        print(f"dropped rows with missing feature values: {dropped_feature_rows}")
        features = RawTable(
            id_column=features.id_column,
            ids=tuple(pid for pid, ok in zip(features.ids, row_ok) if ok),
            columns=features.columns,
            values=features.values[row_ok],
        )
        keep = set(features.ids)
        series = MetricSeries(
            part_ids=tuple(p for p in series.part_ids if p in keep),
            values=np.array([v for p, v in series.entries() if p in keep]),
        )

    datasets = partition_actors(features, data.actor_schema, data.shared_columns)
    save_actor_datasets(datasets, config.actor_dir)
    config.metric_path.parent.mkdir(parents=True, exist_ok=True)
    series.to_csv(config.metric_path)
    print(f"wrote {len(datasets)} actor datasets to {config.actor_dir}")
    print(f"wrote metric series ({len(series)} rows) to {config.metric_path}")
    return 0


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.lstrip("-").isdigit():
        raise ConfigError(f"--listen expects host:port, got {value!r}")
    return host, int(port)


def _spawn_actor(
    actor_dir: Path,
    actor_id: str,
    seed: int,
    min_overlap: int,
    decline: bool,
) -> tuple[subprocess.Popen, tuple[str, int]]:
    command = [
        sys.executable,
        "-m",
        "chaincontrib",
        "actor",
        "--data",
        str(actor_dir),
        "--actor-id",
        actor_id,
        "--seed",
        str(seed),
        "--listen",
        "127.0.0.1:0",
        "--min-overlap",
        str(min_overlap),
    ]
    if decline:
        command.append("--always-decline")
    proc = subprocess.Popen(command, stdout=subprocess.PIPE, text=True)
    line = proc.stdout.readline().strip()
    if not line.startswith("LISTENING "):
        proc.terminate()
        proc.wait(timeout=10)
        raise CampaignError(f"actor {actor_id} failed to start (got {line!r})")
    _, host, port = line.split()
    return proc, (host, int(port))


def cmd_run_decentralised(config: RunConfig) -> int:
    datasets = load_actor_datasets(config.actor_dir)
    metric = MetricSeries.from_csv(config.metric_path)
    transform = config.resolve_transform(metric)
    out = config.out / "decentralised"
    out.mkdir(parents=True, exist_ok=True)
    cc = config.campaign

    processes: list[subprocess.Popen] = []
    try:
        if config.transport == "in-process":
            actors = [
                LocalActor(
                    dataset=ds,
                    base_seed=config.seed,
                    min_overlap=cc.min_overlap,
                    always_decline=ds.actor_id in cc.decliners,
                )
                for ds in datasets
            ]
            transport = InProcessTransport(actors)
        else:
            endpoints = []
            for ds in datasets:
                proc, endpoint = _spawn_actor(
                    config.actor_dir,
                    ds.actor_id,
                    config.seed,
                    cc.min_overlap,
                    ds.actor_id in cc.decliners,
                )
                processes.append(proc)
                endpoints.append(endpoint)
            transport = SocketTransport(endpoints)

        ranking, log = run_campaign(
            transport,
            metric,
            transform,
            config.hyper,
            config.seed,
            deadline=cc.deadline,
            noise_feature_count=cc.noise_feature_count,
            slack=cc.slack,
        )
    finally:
        for proc in processes:
            proc.terminate()
        for proc in processes:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()

    ranking_path = out / "ranking.csv"
    ranking.to_csv(ranking_path)
    log_path = out / "campaign_log.json"
    log_path.write_text(json.dumps(log, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"ranked {len(ranking.entries)} actors (noise floor {ranking.noise_floor:.6g})")
    if log["declines"]:
        print(f"declined: {', '.join(log['declines'])}")
    if log["timeouts"]:
        print(f"timeouts: {len(log['timeouts'])}")
    print(f"wrote {ranking_path}")
    print(f"wrote {log_path}")
    return 0


def cmd_run_central(config: RunConfig) -> int:
    datasets = load_actor_datasets(config.actor_dir)
    metric = MetricSeries.from_csv(config.metric_path)
    if config.central.include_noise:
        # Mirror the campaign's noise reference so both estimation routes
        # cover the same actor set: same seed derivation, same shape.
        datasets = list(datasets) + [
            make_noise_actor(
                row_count=len(metric),
                feature_count=config.campaign.noise_feature_count,
                part_ids=metric.part_ids,
                seed=derive_seed(config.seed, NOISE_ACTOR_ID),
            )
        ]
    model = train_central(datasets, metric, config.hyper, seed=config.seed)
    report = explain_central(
        model,
        sample_count=config.central.sample_count,
        seed=config.seed,
        background_size=config.central.background_size,
        max_instances=config.central.max_instances,
    )
    out = config.out / "central"
    values_path, summary_path = write_shap_csvs(report, out)
    print(
        f"explained {len(report.instance_ids)} validation rows over "
        f"{len(report.feature_names)} features"
    )
    print(f"wrote {values_path}")
    print(f"wrote {summary_path}")
    return 0


def _load_ranking_csv(path: Path) -> ContributionRanking:
    entries = []
    flags = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["rank", "actor_id", "total_uncertainty", "below_noise_floor"]
        if reader.fieldnames != expected:
            raise ConfigError(f"{path} is not a ranking file (columns {reader.fieldnames})")
        for row in reader:
            entries.append(
                RankEntry(
                    actor_id=row["actor_id"],
                    total_uncertainty=float(row["total_uncertainty"]),
                    estimated_rank=int(row["rank"]),
                )
            )
            flags.append((row["actor_id"], row["below_noise_floor"] == "true"))
    if not entries:
        raise ConfigError(f"{path} contains no ranked actors")
    entries.sort(key=lambda e: e.estimated_rank)
    by_actor = {e.actor_id: e.total_uncertainty for e in entries}
    noise_floor = by_actor.get(NOISE_ACTOR_ID, math.nan)
    return ContributionRanking(
        entries=tuple(entries),
        noise_floor=noise_floor,
        below_floor_flags=tuple(flags),
    )


def _load_shap_summary(path: Path) -> dict[str, float]:
    scores: dict[str, float] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["actor_id", "mean_abs_attribution"]:
            raise ConfigError(
                f"{path} is not an attribution summary (columns {reader.fieldnames})"
            )
        for row in reader:
            scores[row["actor_id"]] = float(row["mean_abs_attribution"])
    if not scores:
        raise ConfigError(f"{path} contains no actors")
    return scores


def cmd_compare(config: RunConfig) -> int:
    ranking_path = config.compare.ranking or config.out / "decentralised" / "ranking.csv"
    summary_path = config.compare.shap_summary or config.out / "central" / "shap_summary.csv"
    ranking = _load_ranking_csv(ranking_path)
    shap_scores = _load_shap_summary(summary_path)
    report = build_comparison(ranking, shap_scores)
    out = config.out / "comparison"
    paths = emit_report(report, out)
    print(f"kendall_tau={report.kendall:.4f} spearman_rho={report.spearman:.4f}")
    print(f"noise_contrast={report.noise_contrast:.4f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_actor(args: argparse.Namespace) -> int:
    host, port = _parse_listen(args.listen)
    datasets = load_actor_datasets(Path(args.data))
    matches = [ds for ds in datasets if ds.actor_id == args.actor_id]
    if not matches:
        raise ConfigError(
            f"actor {args.actor_id!r} not found in {args.data} "
            f"(available: {', '.join(ds.actor_id for ds in datasets)})"
        )
    server = ActorServer(
        matches[0],
        base_seed=args.seed,
        host=host,
        port=port,
        min_overlap=args.min_overlap,
        always_decline=args.always_decline,
    )
    server.start()
    bound_host, bound_port = server.address
    print(f"LISTENING {bound_host} {bound_port}", flush=True)
    try:
        while True:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


# ------------------------------------------------------------------ interface


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chaincontrib",
        description=(
            "Estimate per-actor contributions to an end-of-line quality "
            "metric, without pooling raw data, and benchmark the result "
            "against a centralised attribution model."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--transport",
            choices=TRANSPORTS,
            default=None,
            help="override config transport",
        )
        p.add_argument("--out", default=None, help="override config output directory")

    add_common(sub.add_parser("ingest", help="clean a raw CSV into per-actor datasets"))
    add_common(sub.add_parser("synth", help="generate a synthetic multi-actor dataset"))
    add_common(
        sub.add_parser(
            "run-decentralised", help="run an uncertainty campaign and rank actors"
        )
    )
    add_common(
        sub.add_parser(
            "run-central", help="train the pooled model and attribute features"
        )
    )
    add_common(sub.add_parser("compare", help="compare the two contribution rankings"))

    actor = sub.add_parser("actor", help="serve one actor dataset over a socket")
    actor.add_argument("--data", required=True, help="directory of actor datasets")
    actor.add_argument("--actor-id", required=True)
    actor.add_argument("--seed", type=int, required=True)
    actor.add_argument("--listen", required=True, help="host:port (port 0 = ephemeral)")
    actor.add_argument("--min-overlap", type=int, default=50)
    actor.add_argument("--always-decline", action="store_true")
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "run-decentralised": cmd_run_decentralised,
    "run-central": cmd_run_central,
    "compare": cmd_compare,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "actor":
            return cmd_actor(args)
        config = parse_config(load_config(args.config), args)
        return COMMANDS[args.command](config)
    except CampaignError as exc:
        print(f"campaign failed: {exc}", file=sys.stderr)
        return 3
    except DecodeError as exc:
        print(f"wire protocol failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ParseError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
