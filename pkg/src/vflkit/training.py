"""Lock-step split-network training.

Per batch: every owner forwards its feature slice and sends the activations;
the scientist concatenates them (ascending owner order), finishes the forward
pass, computes softmax cross entropy against its labels, backpropagates,
steps its own segment, and sends each owner its gradient slice; owners finish
backpropagation locally and step with their own learning rate.

The scientist drives everything: it broadcasts a seeded permutation per
epoch, then batch requests as (start, end) ranges into that permutation, and
finally a metrics mirror and the end-of-training signal.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import FeaturePartition, LabeledSet
from .errors import LinkageError, ProtocolError, ShapeError
from .nn import ModelSegment, SegmentSpec, matrix_from_bytes, matrix_to_bytes, softmax_cross_entropy
from .transport import Channel, Envelope, MsgType, PARTY_SCIENTIST, owner_party_code

__all__ = [
    "TrainingConfig",
    "ForwardMsg",
    "GradMsg",
    "EpochMetrics",
    "OwnerState",
    "concat_activations",
    "slice_gradient",
    "run_scientist",
    "run_owner",
    "evaluate",
    "metrics_to_csv",
    "CSV_HEADER",
]

CSV_HEADER = "epoch,train_loss,train_acc,val_acc"


@dataclass
class TrainingConfig:
    """Hyperparameters and per-party architecture for one training run."""

    epochs: int
    batch_size: int
    owner_lr: float
    scientist_lr: float
    shuffle_seed: int
    owner_specs: list[SegmentSpec]
    scientist_spec: SegmentSpec
    owner_order: list[int] | None = None
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not self.owner_specs:
            raise ValueError("at least one owner spec required")
        if self.owner_order is None:
            self.owner_order = list(range(len(self.owner_specs)))
        if sorted(self.owner_order) != list(range(len(self.owner_specs))):
            raise ValueError("owner_order must be a permutation of the connected owners")
        total = sum(s.output_width for s in self.owner_specs)
        if total != self.scientist_spec.input_width:
            raise ValueError(
                f"owner output widths sum to {total}, scientist expects "
                f"{self.scientist_spec.input_width}"
            )

    @property
    def owner_widths(self) -> list[int]:
        return [s.output_width for s in self.owner_specs]


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    validation_accuracy: float  # NaN when the run has no evaluation set

    def __post_init__(self):
        if not (0.0 <= self.train_accuracy <= 1.0):
            raise ValueError("train accuracy out of [0, 1]")
        if not math.isnan(self.validation_accuracy) and not (
            0.0 <= self.validation_accuracy <= 1.0
        ):
            raise ValueError("validation accuracy out of [0, 1]")


def metrics_to_csv(metrics: list[EpochMetrics]) -> str:
    lines = [CSV_HEADER]
    for m in metrics:
        lines.append(
            f"{m.epoch},{m.train_loss!r},{m.train_accuracy!r},{m.validation_accuracy!r}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Message payloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForwardMsg:
    owner_index: int
    epoch: int
    batch_index: int
    activations: np.ndarray

    def encode(self) -> bytes:
        return struct.pack(">III", self.owner_index, self.epoch, self.batch_index) + (
            matrix_to_bytes(self.activations)
        )

    @classmethod
    def decode(cls, payload: bytes) -> "ForwardMsg":
        owner, epoch, batch = struct.unpack_from(">III", payload)
        return cls(owner, epoch, batch, matrix_from_bytes(payload[12:]))


@dataclass(frozen=True)
class GradMsg:
    owner_index: int
    epoch: int
    batch_index: int
    grad: np.ndarray

    def encode(self) -> bytes:
        return struct.pack(">III", self.owner_index, self.epoch, self.batch_index) + (
            matrix_to_bytes(self.grad)
        )

    @classmethod
    def decode(cls, payload: bytes) -> "GradMsg":
        owner, epoch, batch = struct.unpack_from(">III", payload)
        return cls(owner, epoch, batch, matrix_from_bytes(payload[12:]))


def _encode_permutation(epoch: int, perm: np.ndarray) -> bytes:
    return struct.pack(">II", epoch, len(perm)) + np.asarray(perm, dtype=">u4").tobytes()


def _decode_permutation(payload: bytes) -> tuple[int, np.ndarray]:
    epoch, count = struct.unpack_from(">II", payload)
    if len(payload) != 8 + 4 * count:
        raise ProtocolError("permutation payload length mismatch")
    perm = np.frombuffer(payload, dtype=">u4", offset=8).astype(np.int64)
    return epoch, perm


# ---------------------------------------------------------------------------
# Concatenation algebra
# ---------------------------------------------------------------------------


def concat_activations(parts: list[np.ndarray], order: list[int]) -> np.ndarray:
    """Column-concatenate per-owner activations in the given owner order."""
    if sorted(order) != list(range(len(parts))):
        raise ValueError("order must cover every part exactly once")
    batch_sizes = {p.shape[0] for p in parts}
    if len(batch_sizes) != 1:
        raise ProtocolError(f"parts disagree on batch size: {sorted(batch_sizes)}")
    return np.hstack([parts[i] for i in order])


def slice_gradient(grad: np.ndarray, widths: list[int], order: list[int]) -> list[np.ndarray]:
    """Exact columnwise inverse of concat_activations; result is indexed by owner."""
    if sorted(order) != list(range(len(widths))):
        raise ValueError("order must cover every width exactly once")
    if sum(widths) != grad.shape[1]:
        raise ProtocolError(f"widths sum to {sum(widths)}, gradient has {grad.shape[1]} columns")
    slices: list[np.ndarray] = [None] * len(widths)  # type: ignore[list-item]
    offset = 0
    for owner in order:
        w = widths[owner]
        slices[owner] = grad[:, offset : offset + w]
        offset += w
    return slices


def _batch_ranges(n: int, batch_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# Scientist side
# ---------------------------------------------------------------------------


def _recv_forward(
    channel: Channel, owner_index: int, epoch: int, batch: int, rows: int, width: int,
    msg_type: MsgType = MsgType.FORWARD,
) -> np.ndarray:
    env = channel.recv()
    if env.msg_type != msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got {env.msg_type.name}")
    if env.sender != owner_party_code(owner_index):
        raise ProtocolError(f"activations from unexpected sender {env.sender}")
    if msg_type == MsgType.FORWARD:
        msg = ForwardMsg.decode(env.payload)
        if (msg.owner_index, msg.epoch, msg.batch_index) != (owner_index, epoch, batch):
            raise ProtocolError(
                f"forward message for owner {msg.owner_index} epoch {msg.epoch} "
                f"batch {msg.batch_index}; expected ({owner_index}, {epoch}, {batch})"
            )
        acts = msg.activations
    else:
        owner, msg_epoch = struct.unpack_from(">II", env.payload)
        if (owner, msg_epoch) != (owner_index, epoch):
            raise ProtocolError("evaluation activations out of step")
        acts = matrix_from_bytes(env.payload[8:])
    if acts.shape != (rows, width):
        raise ProtocolError(f"activation shape {acts.shape} != expected {(rows, width)}")
    return acts


def _distributed_eval(
    segment: ModelSegment,
    channels: list[Channel],
    config: TrainingConfig,
    eval_labels: LabeledSet,
    epoch: int,
    session_id: bytes,
) -> float:
    n = len(eval_labels)
    correct = 0
    for start, end in _batch_ranges(n, config.batch_size):
        payload = struct.pack(">III", epoch, start, end)
        for channel in channels:
            channel.send(Envelope(session_id, PARTY_SCIENTIST, MsgType.EVAL_REQUEST, payload))
        parts = [
            _recv_forward(
                channels[i], i, epoch, 0, end - start, config.owner_widths[i],
                msg_type=MsgType.EVAL_FORWARD,
            )
            for i in range(len(channels))
        ]
        logits = segment.predict(concat_activations(parts, config.owner_order))
        y = eval_labels.labels[start:end]
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / n


def run_scientist(
    segment: ModelSegment,
    config: TrainingConfig,
    channels: list[Channel],
    labels: LabeledSet,
    eval_labels: LabeledSet | None = None,
    session_id: bytes = b"\x00" * 8,
) -> list[EpochMetrics]:
    """Drive the whole training run; returns one metrics row per epoch.

    ``labels`` (and ``eval_labels`` if given) must already be aligned to the
    canonical order agreed during linkage.
    """
    if len(channels) != len(config.owner_specs):
        raise ValueError(f"{len(channels)} channels for {len(config.owner_specs)} owner specs")
    n = len(labels)
    metrics: list[EpochMetrics] = []

    for epoch in range(config.epochs):
        if config.shuffle_each_epoch:
            perm = np.random.default_rng(config.shuffle_seed + epoch).permutation(n)
        else:
            perm = np.arange(n)
        perm_payload = _encode_permutation(epoch, perm)
        for channel in channels:
            channel.send(Envelope(session_id, PARTY_SCIENTIST, MsgType.PERMUTATION, perm_payload))

        loss_sum = 0.0
        correct = 0
        for batch, (start, end) in enumerate(_batch_ranges(n, config.batch_size)):
            request = struct.pack(">IIII", epoch, batch, start, end)
            for channel in channels:
                channel.send(
                    Envelope(session_id, PARTY_SCIENTIST, MsgType.BATCH_REQUEST, request)
                )
            parts = [
                _recv_forward(channels[i], i, epoch, batch, end - start, config.owner_widths[i])
                for i in range(len(channels))
            ]
            combined = concat_activations(parts, config.owner_order)
            logits = segment.forward(combined)
            y = labels.labels[perm[start:end]]
            loss, grad_logits = softmax_cross_entropy(logits, y)
            grad_input = segment.backward(grad_logits)
            segment.sgd_step(config.scientist_lr)
            for i, piece in enumerate(slice_gradient(grad_input, config.owner_widths, config.owner_order)):
                msg = GradMsg(i, epoch, batch, piece)
                channels[i].send(
                    Envelope(session_id, PARTY_SCIENTIST, MsgType.GRAD, msg.encode())
                )
            loss_sum += loss * (end - start)
            correct += int((logits.argmax(axis=1) == y).sum())

        val_acc = (
            _distributed_eval(segment, channels, config, eval_labels, epoch, session_id)
            if eval_labels is not None
            else float("nan")
        )
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / n,
                train_accuracy=correct / n,
                validation_accuracy=val_acc,
            )
        )

    csv_text = metrics_to_csv(metrics)
    for channel in channels:
        channel.send(
            Envelope(session_id, PARTY_SCIENTIST, MsgType.METRICS, csv_text.encode("utf-8"))
        )
        channel.send(Envelope(session_id, PARTY_SCIENTIST, MsgType.END_TRAINING, b""))
    return metrics


# ---------------------------------------------------------------------------
# Owner side
# ---------------------------------------------------------------------------


@dataclass
class OwnerState:
    """Everything one owner brings to training: its segment and aligned rows."""

    segment: ModelSegment
    partition: FeaturePartition
    eval_partition: FeaturePartition | None = None
    metrics_csv: str | None = field(default=None)


def run_owner(channel: Channel, state: OwnerState, owner_lr: float, owner_index: int = 0) -> ModelSegment:
    """Serve forward passes and apply returned gradients until END_TRAINING."""
    segment = state.segment
    features = state.partition.features
    n = len(state.partition)
    code = owner_party_code(owner_index)
    perm: np.ndarray | None = None
    perm_epoch = -1
    outstanding: tuple[int, int, tuple[int, int]] | None = None  # (epoch, batch, shape)

    while True:
        env = channel.recv()
        if env.sender != PARTY_SCIENTIST:
            raise ProtocolError(f"unexpected sender {env.sender}")

        if env.msg_type == MsgType.PERMUTATION:
            epoch, candidate = _decode_permutation(env.payload)
            if len(candidate) != n or not np.array_equal(np.sort(candidate), np.arange(n)):
                raise ProtocolError("received index list is not a permutation of my rows")
            perm, perm_epoch = candidate, epoch

        elif env.msg_type == MsgType.BATCH_REQUEST:
            if outstanding is not None:
                raise ProtocolError("new batch requested while a gradient is pending")
            epoch, batch, start, end = struct.unpack(">IIII", env.payload)
            if perm is None or epoch != perm_epoch:
                raise ProtocolError("batch request before this epoch's permutation")
            if not (0 <= start < end <= n):
                raise ProtocolError(f"batch range [{start}, {end}) out of bounds for {n} rows")
            acts = segment.forward(features[perm[start:end]])
            channel.send(
                Envelope(
                    env.session_id, code, MsgType.FORWARD,
                    ForwardMsg(owner_index, epoch, batch, acts).encode(),
                )
            )
            outstanding = (epoch, batch, acts.shape)

        elif env.msg_type == MsgType.GRAD:
            msg = GradMsg.decode(env.payload)
            if outstanding is None or (msg.epoch, msg.batch_index) != outstanding[:2]:
                raise ProtocolError(
                    f"gradient for unknown batch (epoch {msg.epoch}, batch {msg.batch_index})"
                )
            if msg.owner_index != owner_index or msg.grad.shape != outstanding[2]:
                raise ProtocolError("gradient does not match the sent activations")
            segment.backward(msg.grad)
            segment.sgd_step(owner_lr)
            outstanding = None

        elif env.msg_type == MsgType.EVAL_REQUEST:
            if state.eval_partition is None:
                raise ProtocolError("evaluation requested but no evaluation rows are loaded")
            epoch, start, end = struct.unpack(">III", env.payload)
            n_eval = len(state.eval_partition)
            if not (0 <= start < end <= n_eval):
                raise ProtocolError(f"eval range [{start}, {end}) out of bounds for {n_eval} rows")
            acts = segment.predict(state.eval_partition.features[start:end])
            payload = struct.pack(">II", owner_index, epoch) + matrix_to_bytes(acts)
            channel.send(Envelope(env.session_id, code, MsgType.EVAL_FORWARD, payload))

        elif env.msg_type == MsgType.METRICS:
            state.metrics_csv = env.payload.decode("utf-8")

        elif env.msg_type == MsgType.END_TRAINING:
            return segment

        else:
            raise ProtocolError(f"unexpected message {env.msg_type.name} during training")


# ---------------------------------------------------------------------------
# Local (in-process) evaluation, used by tests and oracles
# ---------------------------------------------------------------------------


def evaluate(
    scientist_segment: ModelSegment,
    owner_segments: list[ModelSegment],
    owner_features: list[np.ndarray],
    labels,
    owner_order: list[int] | None = None,
) -> float:
    """Forward-only accuracy of the assembled split model; mutates nothing."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    counts = {f.shape[0] for f in owner_features} | {y.shape[0]}
    if len(counts) != 1:
        raise LinkageError("evaluation inputs are misaligned across parties")
    order = owner_order if owner_order is not None else list(range(len(owner_segments)))
    parts = [seg.predict(x) for seg, x in zip(owner_segments, owner_features)]
    logits = scientist_segment.predict(concat_activations(parts, order))
    return float((logits.argmax(axis=1) == y).mean())
