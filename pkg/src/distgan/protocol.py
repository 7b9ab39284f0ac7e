"""Selective gradient exchange between simulated users and a parameter server,
plus the typed, auditable message channel every strategy talks through.

There is deliberately no message kind that can carry a user's real samples.
"""
from __future__ import annotations

import enum
import json
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nn import LayoutError, Network, NetworkSpec, ParamVector

VALUE_BYTES = 8
ENTRY_HEADER_BYTES = 12
SERVER = "server"
GENERATOR = "generator"


class ProtocolError(ValueError):
    pass


# ------------------------------------------------------------------ payloads


@dataclass(frozen=True)
class GradUpdate:
    """The coordinates of a local gradient a user chose to upload."""

    user_id: int
    epoch: int
    indices: np.ndarray
    values: np.ndarray
    param_count: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise ProtocolError("indices and values must be equal-length vectors")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.param_count):
            raise ProtocolError("upload indices must be strictly increasing and within the parameter count")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))


@dataclass(frozen=True)
class GlobalGrad:
    """Aggregated server update, shipped sparsely (non-zero coordinates)."""

    indices: np.ndarray
    values: np.ndarray
    param_count: int

    @classmethod
    def from_dense(cls, vec: np.ndarray) -> "GlobalGrad":
        idx = np.flatnonzero(vec)
        return cls(idx, vec[idx].copy(), vec.shape[0])

    def dense(self) -> np.ndarray:
        out = np.zeros(self.param_count)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class FakeSamples:
    """Generator output sent to users; never derived from real data."""

    samples: np.ndarray
    origin: str = GENERATOR


@dataclass(frozen=True)
class ScoreReport:
    """A user's discriminator scores on received fakes, with d score / d sample."""

    scores: np.ndarray
    input_grads: np.ndarray


@dataclass(frozen=True)
class WeightSnapshot:
    values: np.ndarray


class MessageKind(enum.Enum):
    GradUpload = "GradUpload"
    GlobalGradBroadcast = "GlobalGradBroadcast"
    FakeSampleBatch = "FakeSampleBatch"
    ScalarScores = "ScalarScores"
    WeightSnapshot = "WeightSnapshot"


PAYLOAD_TYPES = {
    MessageKind.GradUpload: GradUpdate,
    MessageKind.GlobalGradBroadcast: GlobalGrad,
    MessageKind.FakeSampleBatch: FakeSamples,
    MessageKind.ScalarScores: ScoreReport,
    MessageKind.WeightSnapshot: WeightSnapshot,
}


def payload_bytes(payload) -> int:
    """8 bytes per real plus a 12-byte header per entry (sparse coordinate or matrix row)."""
    if isinstance(payload, (GradUpdate, GlobalGrad)):
        return (VALUE_BYTES + ENTRY_HEADER_BYTES) * int(payload.indices.size)
    if isinstance(payload, FakeSamples):
        s = payload.samples
        return VALUE_BYTES * s.size + ENTRY_HEADER_BYTES * s.shape[0]
    if isinstance(payload, ScoreReport):
        n = payload.scores.size
        return VALUE_BYTES * (n + payload.input_grads.size) + ENTRY_HEADER_BYTES * n
    if isinstance(payload, WeightSnapshot):
        return VALUE_BYTES * payload.values.size + ENTRY_HEADER_BYTES
    raise ProtocolError(f"unsupported payload type {type(payload).__name__}")


@dataclass(frozen=True)
class ChannelMessage:
    kind: MessageKind
    epoch: int
    sender: str
    receiver: str
    payload: object
    byte_size: int = -1

    def __post_init__(self):
        expected = PAYLOAD_TYPES[self.kind]
        if not isinstance(self.payload, expected):
            raise ProtocolError(f"{self.kind.value} must carry {expected.__name__}, got {type(self.payload).__name__}")
        if self.byte_size < 0:
            object.__setattr__(self, "byte_size", payload_bytes(self.payload))

    def record(self) -> dict:
        return {"epoch": self.epoch, "from": self.sender, "to": self.receiver,
                "kind": self.kind.value, "bytes": self.byte_size}


def user_name(user_id: int) -> str:
    return f"user{user_id}"


class MessageLog:
    """Append-only, lock-protected record of every message sent."""

    def __init__(self):
        self._messages: list[ChannelMessage] = []
        self._lock = threading.Lock()

    def send(self, kind: MessageKind, epoch: int, sender: str, receiver: str, payload) -> ChannelMessage:
        msg = ChannelMessage(kind, epoch, sender, receiver, payload)
        with self._lock:
            if self._messages and epoch < self._messages[-1].epoch:
                raise ProtocolError("message epochs must be non-decreasing")
            self._messages.append(msg)
        return msg

    def __iter__(self):
        return iter(list(self._messages))

    def __len__(self):
        return len(self._messages)

    @property
    def messages(self) -> list[ChannelMessage]:
        return list(self._messages)

    def to_text(self) -> str:
        lines = ["epoch,from,to,kind,bytes"]
        for m in self._messages:
            lines.append(f"{m.epoch},{m.sender},{m.receiver},{m.kind.value},{m.byte_size}")
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ policies


@dataclass(frozen=True)
class RandomFraction:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ProtocolError("RandomFraction fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Threshold:
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ProtocolError("Threshold tau must be positive")


@dataclass(frozen=True)
class MaxMagnitude:
    pass


SelectionPolicy = RandomFraction | Threshold | MaxMagnitude


def policy_from_dict(d: dict) -> SelectionPolicy:
    kind = d.get("kind", "max_magnitude")
    if kind == "max_magnitude":
        return MaxMagnitude()
    if kind == "threshold":
        return Threshold(float(d["tau"]))
    if kind == "random_fraction":
        return RandomFraction(float(d["fraction"]), int(d.get("seed", 0)))
    raise ProtocolError(f"unknown selection policy {kind!r}")


def policy_to_dict(p: SelectionPolicy) -> dict:
    if isinstance(p, MaxMagnitude):
        return {"kind": "max_magnitude"}
    if isinstance(p, Threshold):
        return {"kind": "threshold", "tau": p.tau}
    return {"kind": "random_fraction", "fraction": p.fraction, "seed": p.seed}


# -------------------------------------------------------------------- server


@dataclass
class ServerState:
    spec: NetworkSpec
    w_s: ParamVector
    policy: SelectionPolicy = field(default_factory=MaxMagnitude)
    lr_server: float = 0.05
    epoch: int = 0

    def __post_init__(self):
        if self.w_s.layout.spec != self.spec:
            raise LayoutError("server weights do not match the agreed spec")
        if not self.lr_server > 0:
            raise ProtocolError("lr_server must be positive")


def upload_count(fraction: float, n: int) -> int:
    return min(n, math.ceil(fraction * n))


def select_upload(local_grad, fraction: float, seed=None, user_id: int = 0, epoch: int = 0) -> GradUpdate:
    """Keep the ``ceil(fraction * n)`` largest-magnitude coordinates.

    Ties go to the lower flat index. ``seed`` is accepted for interface
    symmetry with random policies; the choice itself is deterministic.
    """
    g = np.asarray(getattr(local_grad, "values", local_grad), dtype=np.float64)
    if g.size == 0:
        raise ProtocolError("cannot select from an empty gradient")
    if not 0.0 < fraction <= 1.0:
        raise ProtocolError("upload fraction must lie in (0, 1]")
    k = upload_count(fraction, g.size)
    order = np.argsort(-np.abs(g), kind="stable")
    idx = np.sort(order[:k])
    return GradUpdate(user_id, epoch, idx, g[idx], g.size)


def _check_uploads(server: ServerState, uploads: Sequence[GradUpdate]) -> list[GradUpdate]:
    n = server.w_s.layout.size
    for u in uploads:
        if u.epoch != server.epoch:
            raise ProtocolError(f"upload from user {u.user_id} is for epoch {u.epoch}, server is at {server.epoch}")
        if u.param_count != n or (u.indices.size and u.indices[-1] >= n):
            raise ProtocolError(f"upload from user {u.user_id} indexes outside the agreed parameter count {n}")
    return sorted(uploads, key=lambda u: u.user_id)


def _mean_contributions(n: int, uploads: Sequence[GradUpdate]) -> tuple[np.ndarray, np.ndarray]:
    total = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for u in uploads:
        total[u.indices] += u.values
        count[u.indices] += 1
    mean = np.zeros(n)
    hit = count > 0
    mean[hit] = total[hit] / count[hit]
    return mean, count


def aggregate(server: ServerState, uploads: Sequence[GradUpdate]) -> np.ndarray:
    """Combine this round's uploads into one dense update under the server policy."""
    ups = _check_uploads(server, uploads)
    n = server.w_s.layout.size
    policy = server.policy
    if isinstance(policy, MaxMagnitude):
        out = np.zeros(n)
        best = np.full(n, -1.0)
        for u in ups:  # ascending user id; strict '>' keeps the lowest id on ties
            mag = np.abs(u.values)
            win = mag > best[u.indices]
            out[u.indices[win]] = u.values[win]
            best[u.indices[win]] = mag[win]
        return out
    mean, count = _mean_contributions(n, ups)
    if isinstance(policy, Threshold):
        mean[np.abs(mean) <= policy.tau] = 0.0
        return mean
    contributed = np.flatnonzero(count)
    k = upload_count(policy.fraction, contributed.size) if contributed.size else 0
    rng = np.random.default_rng([policy.seed, server.epoch])
    keep = rng.choice(contributed, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    out = np.zeros(n)
    out[keep] = mean[keep]
    return out


def apply_global(server: ServerState, agg: np.ndarray) -> None:
    agg = np.asarray(getattr(agg, "values", agg), dtype=np.float64)
    if agg.shape != server.w_s.values.shape:
        raise LayoutError("aggregate does not match the server layout")
    server.w_s.values -= server.lr_server * agg
    server.epoch += 1


def broadcast(server: ServerState, users: Iterable, agg: np.ndarray, log: MessageLog,
              epoch: int | None = None) -> None:
    """Deliver the identical aggregate to every user, who applies it with its own lr.

    ``epoch`` labels the log records; it defaults to the server's round counter.
    """
    if np.shape(agg) != server.w_s.values.shape:
        raise LayoutError("aggregate does not match the server layout")
    msg_payload = GlobalGrad.from_dense(np.asarray(agg, dtype=np.float64))
    epoch = server.epoch if epoch is None else epoch
    for user in users:
        msg = log.send(MessageKind.GlobalGradBroadcast, epoch, SERVER, user_name(user.user_id), msg_payload)
        user.receive_global(msg.payload)


# --------------------------------------------------------------------- audit

ALLOWED_KINDS = frozenset(MessageKind)


@dataclass
class AuditReport:
    counts: dict[str, int]
    bytes: dict[str, int]
    flags: list[str]

    @property
    def kinds(self) -> set[str]:
        return set(self.counts)

    def table(self) -> str:
        rows = [f"{'kind':<22}{'count':>10}{'bytes':>14}"]
        for k in sorted(self.counts):
            rows.append(f"{k:<22}{self.counts[k]:>10}{self.bytes[k]:>14}")
        rows.append(f"privacy flags: {len(self.flags)}")
        rows.extend(f"  {f}" for f in self.flags)
        return "\n".join(rows) + "\n"

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts, "bytes": self.bytes, "flags": self.flags},
                          indent=2, sort_keys=True) + "\n"


def _sample_arrays(payload) -> list[np.ndarray]:
    if isinstance(payload, FakeSamples):
        return [payload.samples]
    if isinstance(payload, ScoreReport):
        return [payload.input_grads]
    return []


def audit_channel(log: Iterable[ChannelMessage], raw_data: Sequence[np.ndarray] | None = None) -> AuditReport:
    """Tally messages per kind and flag anything that looks like leaked data.

    A message is flagged when its payload is not one of the five allowed
    types, when a user claims to send generator samples, when a sample-shaped
    payload is not generator-originated, or (if ``raw_data`` is given) when any
    payload row coincides exactly with a user's real sample.
    """
    counts: dict[str, int] = defaultdict(int)
    sizes: dict[str, int] = defaultdict(int)
    flags: list[str] = []
    raw_rows = set()
    for arr in raw_data or ():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw_rows.update(row.tobytes() for row in arr)
    for i, msg in enumerate(log):
        counts[msg.kind.value] += 1
        sizes[msg.kind.value] += msg.byte_size
        where = f"message {i} (epoch {msg.epoch}, {msg.sender}->{msg.receiver}, {msg.kind.value})"
        if msg.kind not in ALLOWED_KINDS or not isinstance(msg.payload, PAYLOAD_TYPES[msg.kind]):
            flags.append(f"{where}: unexpected payload type")
            continue
        if isinstance(msg.payload, FakeSamples):
            if msg.payload.origin != GENERATOR or msg.sender.startswith("user"):
                flags.append(f"{where}: sample batch not produced by the generator")
        if raw_rows:
            for arr in _sample_arrays(msg.payload):
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                if any(row.tobytes() in raw_rows for row in arr):
                    flags.append(f"{where}: payload row equals a real training sample")
                    break
    return AuditReport(dict(counts), dict(sizes), flags)


def replay_user_params(initial: np.ndarray, log: Iterable[ChannelMessage], user_id: int, lr: float) -> np.ndarray:
    """Reconstruct a user's parameters from its received broadcasts alone."""
    w = np.array(initial, dtype=np.float64)
    name = user_name(user_id)
    for m in log:
        if m.kind is MessageKind.GlobalGradBroadcast and m.receiver == name:
            w -= lr * m.payload.dense()
    return w


def network_of(server: ServerState) -> Network:
    """A network view sharing the server's weight buffer."""
    return Network(server.spec, server.w_s)
