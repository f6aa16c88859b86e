"""Three-party data resolution.

The scientist runs PSI independently with each owner (as the client, so only
it learns the per-pair intersections), intersects the results with its label
ids, and distributes the sorted global intersection. Owners never talk to
each other and receive nothing but the global list.
"""

from __future__ import annotations

import struct
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from random import Random

from . import psi
from .data import FeaturePartition, align_to
from .errors import (
    EmptyIntersectionError,
    FormatError,
    LinkageError,
    ProtocolError,
    PsiError,
)
from .transport import (
    Channel,
    Envelope,
    MsgType,
    PARTY_SCIENTIST,
    owner_party_code,
)

__all__ = [
    "GlobalIntersection",
    "LinkRole",
    "LinkState",
    "LinkageSession",
    "scientist_link",
    "owner_link",
    "encode_global_ids",
    "decode_global_ids",
]

_EMPTY_MARKER = "empty-intersection"


@dataclass(frozen=True)
class GlobalIntersection:
    """IDs shared by every party, in canonical (lexicographic) order."""

    ids: tuple[uuid.UUID, ...]

    def __post_init__(self):
        canon = [str(u) for u in self.ids]
        if canon != sorted(canon):
            raise ValueError("global intersection must be sorted by canonical form")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("global intersection must be duplicate-free")

    def __len__(self) -> int:
        return len(self.ids)


class LinkRole(Enum):
    SCIENTIST = "scientist"
    OWNER = "owner"


class LinkState(Enum):
    INIT = 0
    PSI_DONE = 1
    GLOBAL_EXCHANGED = 2
    ALIGNED = 3


@dataclass
class LinkageSession:
    """Per-party linkage progress; transitions are strictly forward."""

    role: LinkRole
    state: LinkState = field(default=LinkState.INIT)

    def advance(self, new_state: LinkState) -> None:
        if new_state.value <= self.state.value:
            raise ProtocolError(f"linkage state may not move {self.state} -> {new_state}")
        self.state = new_state


def encode_global_ids(ids) -> bytes:
    return struct.pack(">I", len(ids)) + b"".join(u.bytes for u in ids)


def decode_global_ids(payload: bytes) -> list[uuid.UUID]:
    if len(payload) < 4:
        raise FormatError("global id list shorter than its header")
    (count,) = struct.unpack_from(">I", payload)
    if len(payload) != 4 + 16 * count:
        raise FormatError("global id list length mismatch")
    return [uuid.UUID(bytes=payload[4 + 16 * i : 20 + 16 * i]) for i in range(count)]


def _expect(channel: Channel, wanted: MsgType, session_id: bytes | None, sender: int | None) -> Envelope:
    env = channel.recv()
    if env.msg_type == MsgType.LINK_ERROR and wanted != MsgType.LINK_ERROR:
        message = env.payload.decode("utf-8", errors="replace")
        if message.startswith(_EMPTY_MARKER):
            raise EmptyIntersectionError(message)
        raise LinkageError(f"peer reported: {message}")
    if env.msg_type != wanted:
        raise ProtocolError(f"expected {wanted.name}, got {env.msg_type.name}")
    if session_id is not None and env.session_id != session_id:
        raise ProtocolError("session id mismatch")
    if sender is not None and env.sender != sender:
        raise ProtocolError(f"expected sender {sender}, got {env.sender}")
    return env


def _client_psi_session(
    channel: Channel,
    id_bytes: list[bytes],
    scalar: psi.SecretScalar,
    params: psi.GroupParams,
    session_id: bytes,
    expected_sender: int,
) -> list[int]:
    """Scientist-side PSI with one owner; returns matching positions."""
    blinded = psi.blind(id_bytes, scalar, params)
    channel.send(
        Envelope(session_id, PARTY_SCIENTIST, MsgType.PSI_BLIND, psi.encode_elements(blinded))
    )
    env = _expect(channel, MsgType.PSI_EVAL, session_id, expected_sender)
    doubly_blinded = psi.decode_elements(env.payload)
    if len(doubly_blinded) != len(id_bytes):
        raise ProtocolError(
            f"server returned {len(doubly_blinded)} elements for {len(id_bytes)} sent"
        )
    env = _expect(channel, MsgType.PSI_DIGEST, session_id, expected_sender)
    digest = psi.BloomFilter.from_bytes(env.payload)
    return psi.unblind_match(doubly_blinded, scalar, digest, params)


def scientist_link(
    label_ids: list[uuid.UUID],
    owner_channels: list[Channel],
    params: psi.GroupParams,
    fpr: float = 1e-6,
    seed: int | None = None,
    session_id: bytes = b"\x00" * 8,
    scalar_bits: int = 256,
    parallel: bool = True,
) -> GlobalIntersection:
    """Run PSI with every owner, intersect, sort, and distribute the result.

    With a seed the client scalars are reproducible; the sessions themselves
    may run concurrently (scalars are drawn up front in owner order, so the
    seed fully determines them either way).
    """
    if not owner_channels:
        raise ValueError("at least one owner channel is required")
    if not label_ids:
        raise ValueError("label id list must be non-empty")
    session = LinkageSession(LinkRole.SCIENTIST)
    rng = Random(seed) if seed is not None else None
    scalars = [psi.SecretScalar.generate(params, rng, scalar_bits) for _ in owner_channels]
    id_bytes = [u.bytes for u in label_ids]

    results: list[list[int] | None] = [None] * len(owner_channels)
    errors: list[Exception] = []

    def run_session(j: int) -> None:
        try:
            results[j] = _client_psi_session(
                owner_channels[j], id_bytes, scalars[j], params, session_id,
                owner_party_code(j),
            )
        except Exception as exc:  # noqa: BLE001 - surfaced to the caller below
            errors.append(exc)

    if parallel and len(owner_channels) > 1:
        threads = [
            threading.Thread(target=run_session, args=(j,), daemon=True)
            for j in range(len(owner_channels))
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    else:
        for j in range(len(owner_channels)):
            run_session(j)

    if errors:
        _abort(owner_channels, session_id, f"linkage aborted: {errors[0]}")
        raise errors[0]
    session.advance(LinkState.PSI_DONE)

    shared = set(range(len(label_ids)))
    for matched in results:
        shared &= set(matched)  # type: ignore[arg-type]
    global_ids = sorted((label_ids[i] for i in shared), key=str)

    if not global_ids:
        _abort(owner_channels, session_id, f"{_EMPTY_MARKER}: no ids shared by all parties")
        raise EmptyIntersectionError("global intersection is empty; training impossible")

    payload = encode_global_ids(global_ids)
    for channel in owner_channels:
        channel.send(Envelope(session_id, PARTY_SCIENTIST, MsgType.GLOBAL_IDS, payload))
    session.advance(LinkState.GLOBAL_EXCHANGED)
    return GlobalIntersection(ids=tuple(global_ids))


def _abort(channels: list[Channel], session_id: bytes, message: str) -> None:
    for channel in channels:
        try:
            channel.send(
                Envelope(session_id, PARTY_SCIENTIST, MsgType.LINK_ERROR, message.encode("utf-8"))
            )
        except Exception:  # noqa: BLE001 - best effort while aborting
            pass


def owner_link(
    channel: Channel,
    partition: FeaturePartition,
    params: psi.GroupParams,
    fpr: float = 1e-6,
    seed: int | None = None,
    owner_code: int = 1,
    scalar_bits: int = 256,
) -> FeaturePartition:
    """Serve one PSI session, receive the global intersection, align rows to it."""
    session = LinkageSession(LinkRole.OWNER)
    rng = Random(seed) if seed is not None else None
    scalar = psi.SecretScalar.generate(params, rng, scalar_bits)

    env = _expect(channel, MsgType.PSI_BLIND, None, PARTY_SCIENTIST)
    session_id = env.session_id
    blinded = psi.decode_elements(env.payload)
    try:
        evaluated = psi.evaluate(blinded, scalar, params)
    except PsiError as exc:
        raise ProtocolError(str(exc)) from exc
    channel.send(
        Envelope(session_id, owner_code, MsgType.PSI_EVAL, psi.encode_elements(evaluated))
    )
    digest = psi.build_server_digest(partition.id_bytes(), scalar, fpr, params)
    channel.send(Envelope(session_id, owner_code, MsgType.PSI_DIGEST, digest.to_bytes()))
    session.advance(LinkState.PSI_DONE)

    env = _expect(channel, MsgType.GLOBAL_IDS, session_id, PARTY_SCIENTIST)
    global_ids = decode_global_ids(env.payload)
    session.advance(LinkState.GLOBAL_EXCHANGED)

    aligned = align_to(partition, global_ids)
    session.advance(LinkState.ALIGNED)
    return aligned
