"""Coordinator/actor message flow for decentralised contribution estimation.

The coordinator broadcasts the metric of interest (optionally passed
through an invertible affine transform so the raw values stay private)
as a call for uncertainty. Each actor trains its local ensemble and
replies with exactly one scalar, or declines. The coordinator runs the
same pipeline on pure-noise features for a no-knowledge floor and ranks
all scalars ascending: the lower an actor's uncertainty, the higher its
estimated contribution.

Messages travel as newline-delimited UTF-8 JSON frames. The in-process
transport routes through the very same codec as the socket transport,
so transport independence is structural, not incidental.
"""

from __future__ import annotations

import hashlib
import json
import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from chaincontrib.dataset import (
    NOISE_ACTOR_ID,
    ActorDataset,
    MetricSeries,
    make_noise_actor,
)
from chaincontrib.ensemble import (
    EnsembleHyper,
    TrainingError,
    total_uncertainty,
    train_ensemble,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_MIN_OVERLAP = 50
DEFAULT_NOISE_FEATURES = 5


class DecodeError(ValueError):
    """A frame failed to decode; `reason` says how."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class CampaignError(RuntimeError):
    """A campaign could not produce a ranking."""


def derive_seed(base_seed: int, label: str) -> int:
    """Stable per-actor seed; depends only on (base_seed, actor id).

    Hash-derived so that results are independent of actor arrival or
    enumeration order and of which other actors participate.
    """
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class MetricTransform:
    """Invertible affine map a coordinator may apply before sharing."""

    scale: float
    offset: float = 0.0

    def __post_init__(self) -> None:
        if self.scale == 0.0:
            raise ValueError("scale must be non-zero")

    def inverse(self) -> "MetricTransform":
        return MetricTransform(scale=1.0 / self.scale, offset=-self.offset / self.scale)


def apply_transform(series: MetricSeries, transform: MetricTransform) -> MetricSeries:
    """value -> scale * value + offset, part ids untouched."""
    return MetricSeries(
        part_ids=series.part_ids,
        values=transform.scale * series.values + transform.offset,
    )


@dataclass(frozen=True)
class CallForUncertainty:
    call_id: str
    metric: MetricSeries
    hyper: EnsembleHyper
    response_deadline: float

    def __post_init__(self) -> None:
        if len(self.metric) == 0:
            raise ValueError("a call must carry a non-empty metric")
        if self.response_deadline <= 0:
            raise ValueError("response_deadline must be positive")


@dataclass(frozen=True)
class UncertaintyResponse:
    actor_id: str
    call_id: str
    total_uncertainty: float

    def __post_init__(self) -> None:
        value = float(self.total_uncertainty)
        if not np.isfinite(value) or value < 0.0:
            raise ValueError("total_uncertainty must be finite and non-negative")
        object.__setattr__(self, "total_uncertainty", value)


@dataclass(frozen=True)
class Decline:
    actor_id: str
    call_id: str


Message = Union[CallForUncertainty, UncertaintyResponse, Decline]

_HYPER_FIELDS = frozenset(EnsembleHyper().to_dict())


def encode_message(message: Message) -> bytes:
    """One message per UTF-8 text line, terminated by a newline."""
    if isinstance(message, CallForUncertainty):
        frame = {
            "kind": "call",
            "schema_version": SCHEMA_VERSION,
            "call_id": message.call_id,
            "part_ids": list(message.metric.part_ids),
            "values": [float(v) for v in message.metric.values],
            "hyper": message.hyper.to_dict(),
            "response_deadline": message.response_deadline,
        }
    elif isinstance(message, UncertaintyResponse):
        frame = {
            "kind": "response",
            "schema_version": SCHEMA_VERSION,
            "call_id": message.call_id,
            "actor_id": message.actor_id,
            "total_uncertainty": message.total_uncertainty,
        }
    elif isinstance(message, Decline):
        frame = {
            "kind": "decline",
            "schema_version": SCHEMA_VERSION,
            "call_id": message.call_id,
            "actor_id": message.actor_id,
        }
    else:
        raise TypeError(f"not a protocol message: {type(message).__name__}")
    return (json.dumps(frame, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def _require(frame: dict, key: str):
    if key not in frame:
        raise DecodeError("malformed", f"missing field {key!r}")
    return frame[key]


def decode_message(data: bytes) -> Message:
    """Inverse of encode_message; unknown fields are ignored."""
    if not data or not data.endswith(b"\n"):
        raise DecodeError("truncated", "frame must end with a newline")
    try:
        frame = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError("malformed", str(exc)) from None
    if not isinstance(frame, dict):
        raise DecodeError("malformed", "frame is not an object")
    version = _require(frame, "schema_version")
    if version != SCHEMA_VERSION:
        raise DecodeError(
            "version-mismatch", f"got {version!r}, speak {SCHEMA_VERSION}"
        )
    kind = _require(frame, "kind")
    call_id = str(_require(frame, "call_id"))
    if kind == "call":
        hyper_raw = _require(frame, "hyper")
        if not isinstance(hyper_raw, dict):
            raise DecodeError("malformed", "hyper must be an object")
        hyper = EnsembleHyper.from_dict(
            {k: v for k, v in hyper_raw.items() if k in _HYPER_FIELDS}
        )
        try:
            metric = MetricSeries(
                part_ids=tuple(str(p) for p in _require(frame, "part_ids")),
                values=np.asarray(_require(frame, "values"), dtype=float),
            )
            return CallForUncertainty(
                call_id=call_id,
                metric=metric,
                hyper=hyper,
                response_deadline=float(_require(frame, "response_deadline")),
            )
        except (TypeError, ValueError) as exc:
            raise DecodeError("malformed", str(exc)) from None
    if kind == "response":
        value = _require(frame, "total_uncertainty")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise DecodeError("malformed", "total_uncertainty must be one number")
        try:
            return UncertaintyResponse(
                actor_id=str(_require(frame, "actor_id")),
                call_id=call_id,
                total_uncertainty=float(value),
            )
        except ValueError as exc:
            raise DecodeError("malformed", str(exc)) from None
    if kind == "decline":
        return Decline(actor_id=str(_require(frame, "actor_id")), call_id=call_id)
    raise DecodeError("unknown-kind", repr(kind))


class Coordinator:
    """Issues calls and remembers them for response matching."""

    def __init__(self) -> None:
        self._counter = 0
        self._calls: dict[str, MetricTransform | None] = {}

    def issue_call(
        self,
        metric: MetricSeries,
        transform: MetricTransform | None,
        hyper: EnsembleHyper,
        deadline: float,
    ) -> CallForUncertainty:
        if len(metric) == 0:
            raise ValueError("cannot issue a call on an empty metric")
        if transform is not None:
            metric = apply_transform(metric, transform)
        self._counter += 1
        call_id = f"call-{self._counter:06d}"
        self._calls[call_id] = transform
        return CallForUncertainty(
            call_id=call_id,
            metric=metric,
            hyper=hyper,
            response_deadline=deadline,
        )

    def knows(self, call_id: str) -> bool:
        return call_id in self._calls


def handle_call(
    actor: ActorDataset,
    call: CallForUncertainty,
    base_seed: int,
    min_overlap: int = DEFAULT_MIN_OVERLAP,
) -> UncertaintyResponse | Decline:
    """An actor's local computation: train, then report one scalar.

    Only the scalar (or a decline) ever leaves this function; feature
    data, model parameters, row counts, and failure diagnostics stay on
    the actor's side.
    """
    overlap = set(actor.part_ids) & set(call.metric.part_ids)
    if len(overlap) < min_overlap:
        logger.info(
            "actor %s declining call %s: overlap %d below minimum %d",
            actor.actor_id, call.call_id, len(overlap), min_overlap,
        )
        return Decline(actor_id=actor.actor_id, call_id=call.call_id)
    seed = derive_seed(base_seed, actor.actor_id)
    try:
        ensemble = train_ensemble(actor, call.metric, call.hyper, base_seed=seed)
        scalar = total_uncertainty(ensemble, actor, call.metric)
    except (TrainingError, ValueError) as exc:
        logger.warning(
            "actor %s declining call %s after local failure: %s",
            actor.actor_id, call.call_id, exc,
        )
        return Decline(actor_id=actor.actor_id, call_id=call.call_id)
    return UncertaintyResponse(
        actor_id=actor.actor_id, call_id=call.call_id, total_uncertainty=scalar
    )


def run_noise_baseline(
    call: CallForUncertainty,
    feature_count: int = DEFAULT_NOISE_FEATURES,
    seed: int = 0,
    min_overlap: int = DEFAULT_MIN_OVERLAP,
) -> UncertaintyResponse:
    """The coordinator's no-knowledge reference: identical pipeline, noise features."""
    noise = make_noise_actor(
        row_count=len(call.metric),
        feature_count=feature_count,
        part_ids=call.metric.part_ids,
        seed=seed,
    )
    result = handle_call(noise, call, base_seed=seed, min_overlap=min_overlap)
    if isinstance(result, Decline):
        raise CampaignError("the noise baseline itself failed to train")
    return result


@dataclass(frozen=True)
class RankEntry:
    actor_id: str
    total_uncertainty: float
    estimated_rank: int


@dataclass(frozen=True)
class ContributionRanking:
    """Actors ordered by ascending uncertainty; rank 1 = highest contribution."""

    entries: tuple[RankEntry, ...]
    noise_floor: float
    below_floor_flags: tuple[tuple[str, bool], ...]

    def flag_for(self, actor_id: str) -> bool:
        for aid, flagged in self.below_floor_flags:
            if aid == actor_id:
                return flagged
        raise KeyError(actor_id)

    def actor_order(self) -> tuple[str, ...]:
        return tuple(entry.actor_id for entry in self.entries)

    def uncertainty_of(self, actor_id: str) -> float:
        for entry in self.entries:
            if entry.actor_id == actor_id:
                return entry.total_uncertainty
        raise KeyError(actor_id)

    def to_csv(self, path) -> None:
        import csv
        from pathlib import Path

        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["rank", "actor_id", "total_uncertainty", "below_noise_floor"]
            )
            for entry in self.entries:
                writer.writerow(
                    [
                        entry.estimated_rank,
                        entry.actor_id,
                        repr(entry.total_uncertainty),
                        str(self.flag_for(entry.actor_id)).lower(),
                    ]
                )


def rank_contributions(
    responses: Sequence[UncertaintyResponse],
    noise: UncertaintyResponse,
    slack: float = 1.0,
) -> ContributionRanking:
    """Ascending sort of all reported scalars, noise included.

    An actor whose uncertainty reaches ``slack`` times the noise floor is
    flagged as showing no significant contribution; the noise baseline
    itself is never flagged. Ties break lexicographically by actor id.
    """
    if not responses:
        raise CampaignError("no responses to rank")
    if slack <= 0:
        raise ValueError("slack must be positive")
    call_ids = {r.call_id for r in responses} | {noise.call_id}
    if len(call_ids) != 1:
        raise ValueError(f"responses mix call_ids: {sorted(call_ids)}")
    seen = [r.actor_id for r in responses] + [noise.actor_id]
    if len(set(seen)) != len(seen):
        raise ValueError("duplicate actor_id among responses")

    everyone = sorted(
        [*responses, noise], key=lambda r: (r.total_uncertainty, r.actor_id)
    )
    entries = tuple(
        RankEntry(
            actor_id=r.actor_id,
            total_uncertainty=r.total_uncertainty,
            estimated_rank=i + 1,
        )
        for i, r in enumerate(everyone)
    )
    floor = noise.total_uncertainty
    flags = tuple(
        (
            r.actor_id,
            r.actor_id != noise.actor_id and r.total_uncertainty >= slack * floor,
        )
        for r in everyone
    )
    return ContributionRanking(
        entries=entries, noise_floor=floor, below_floor_flags=flags
    )


@dataclass(frozen=True)
class TranscriptEntry:
    """One captured frame: who it went to or came from, and its raw bytes."""

    direction: str  # "sent" or "received"
    peer: str
    data: bytes


@dataclass
class ActorOutcome:
    """What the transport observed for one endpoint during a call."""

    peer: str
    message: UncertaintyResponse | Decline | None  # None = timeout/unreachable
    detail: str = ""


@dataclass
class LocalActor:
    """In-process actor endpoint."""

    dataset: ActorDataset
    base_seed: int
    min_overlap: int = DEFAULT_MIN_OVERLAP
    always_decline: bool = False

    def respond(self, call_frame: bytes) -> bytes:
        call = decode_message(call_frame)
        if not isinstance(call, CallForUncertainty):
            raise DecodeError("unknown-kind", "actor expected a call frame")
        if self.always_decline:
            reply: Message = Decline(
                actor_id=self.dataset.actor_id, call_id=call.call_id
            )
        else:
            reply = handle_call(
                self.dataset, call, self.base_seed, min_overlap=self.min_overlap
            )
        return encode_message(reply)


class InProcessTransport:
    """Routes frames through the codec without touching the network."""

    def __init__(self, actors: Sequence[LocalActor]):
        self.actors = list(actors)
        self.transcript: list[TranscriptEntry] = []

    def request(self, call: CallForUncertainty) -> list[ActorOutcome]:
        outcomes = []
        for actor in self.actors:
            peer = actor.dataset.actor_id
            frame = encode_message(call)
            self.transcript.append(TranscriptEntry("sent", peer, frame))
            reply_frame = actor.respond(frame)
            self.transcript.append(TranscriptEntry("received", peer, reply_frame))
            reply = decode_message(reply_frame)
            if not isinstance(reply, (UncertaintyResponse, Decline)):
                raise DecodeError("unknown-kind", "actor sent a non-reply frame")
            outcomes.append(ActorOutcome(peer=peer, message=reply))
        return outcomes


class SocketTransport:
    """Connects to already-listening actor processes, one frame each way."""

    def __init__(self, endpoints: Sequence[tuple[str, int]]):
        if not endpoints:
            raise ValueError("at least one endpoint required")
        self.endpoints = list(endpoints)
        self.transcript: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def _record(self, direction: str, peer: str, data: bytes) -> None:
        with self._lock:
            self.transcript.append(TranscriptEntry(direction, peer, data))

    def _query_one(
        self, endpoint: tuple[str, int], call: CallForUncertainty
    ) -> ActorOutcome:
        host, port = endpoint
        peer = f"{host}:{port}"
        frame = encode_message(call)
        try:
            with socket.create_connection(
                (host, port), timeout=call.response_deadline
            ) as conn:
                conn.settimeout(call.response_deadline)
                self._record("sent", peer, frame)
                conn.sendall(frame)
                with conn.makefile("rb") as stream:
                    reply_frame = stream.readline()
        except (OSError, TimeoutError) as exc:
            return ActorOutcome(peer=peer, message=None, detail=str(exc))
        self._record("received", peer, reply_frame)
        try:
            reply = decode_message(reply_frame)
        except DecodeError as exc:
            return ActorOutcome(peer=peer, message=None, detail=str(exc))
        if not isinstance(reply, (UncertaintyResponse, Decline)):
            return ActorOutcome(peer=peer, message=None, detail="non-reply frame")
        return ActorOutcome(peer=peer, message=reply)

    def request(self, call: CallForUncertainty) -> list[ActorOutcome]:
        with ThreadPoolExecutor(max_workers=len(self.endpoints)) as pool:
            outcomes = list(
                pool.map(lambda ep: self._query_one(ep, call), self.endpoints)
            )
        return outcomes


class ActorServer:
    """Serves one actor's dataset over a stream socket, one call per connection."""

    def __init__(
        self,
        dataset: ActorDataset,
        base_seed: int,
        host: str = "127.0.0.1",
        port: int = 0,
        min_overlap: int = DEFAULT_MIN_OVERLAP,
        always_decline: bool = False,
    ):
        self.actor = LocalActor(
            dataset=dataset,
            base_seed=base_seed,
            min_overlap=min_overlap,
            always_decline=always_decline,
        )
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(10.0)
            with conn.makefile("rb") as stream:
                frame = stream.readline()
            if not frame:
                return
            try:
                reply = self.actor.respond(frame)
            except DecodeError as exc:
                logger.warning(
                    "actor %s dropping undecodable frame: %s",
                    self.actor.dataset.actor_id, exc,
                )
                return
            conn.sendall(reply)

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            self._serve_connection(conn)

    def start(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._sock.close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def __enter__(self) -> "ActorServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def run_campaign(
    transport,
    metric: MetricSeries,
    transform: MetricTransform | None,
    hyper: EnsembleHyper,
    base_seed: int,
    deadline: float = 120.0,
    noise_feature_count: int = DEFAULT_NOISE_FEATURES,
    slack: float = 1.0,
) -> tuple[ContributionRanking, dict]:
    """One full call-and-rank round over the given transport.

    Timeouts and unreachable endpoints count as declines. The result is a
    pure function of (metric, actor membership, hyper, seeds): per-actor
    seeds are derived from actor ids, and outcomes are sorted before
    ranking, so arrival order cannot matter.
    """
    coordinator = Coordinator()
    call = coordinator.issue_call(metric, transform, hyper, deadline)
    outcomes = transport.request(call)

    responses: list[UncertaintyResponse] = []
    log: dict = {
        "call_id": call.call_id,
        "transformed": transform is not None,
        "responses": [],
        "declines": [],
        "timeouts": [],
    }
    for outcome in sorted(outcomes, key=lambda o: o.peer):
        if isinstance(outcome.message, UncertaintyResponse):
            if outcome.message.call_id != call.call_id:
                raise CampaignError(
                    f"response from {outcome.peer} answers a different call"
                )
            responses.append(outcome.message)
        elif isinstance(outcome.message, Decline):
            log["declines"].append(outcome.message.actor_id)
        else:
            log["timeouts"].append({"peer": outcome.peer, "detail": outcome.detail})
    if not responses:
        raise CampaignError("every actor declined or timed out; nothing to rank")

    responses.sort(key=lambda r: r.actor_id)
    noise = run_noise_baseline(
        call,
        feature_count=noise_feature_count,
        seed=derive_seed(base_seed, NOISE_ACTOR_ID),
    )
    ranking = rank_contributions(responses, noise, slack=slack)
    log["responses"] = [
        {"actor_id": r.actor_id, "total_uncertainty": r.total_uncertainty}
        for r in responses
    ]
    log["noise_floor"] = noise.total_uncertainty
    log["ranking"] = [
        {
            "rank": e.estimated_rank,
            "actor_id": e.actor_id,
            "total_uncertainty": e.total_uncertainty,
            "below_noise_floor": ranking.flag_for(e.actor_id),
        }
        for e in ranking.entries
    ]
    return ranking, log
