"""A software stand-in for a trusted execution boundary.

Nothing here gives real isolation.  It reproduces the observable contract:
every byte that leaves the boundary is authenticated-encrypted (AES-256-GCM),
snapshots at rest are sealed, resident state is held under a byte budget with
sealed eviction, and attestation compares a measurement of the loaded logic.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .event_core import Event, EventDecodeError
from .operator_runtime import StateSnapshot, _HEADER as SNAPSHOT_HEADER, OperatorError

EPC_BYTES = 128 * 1024 * 1024
EPC_PAGE_SIZE = 4096
KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16

_U32 = struct.Struct(">I")
_WIRE_HEAD = struct.Struct(">QQ")


class EnclaveError(Exception):
    pass


class AuthenticationFailure(EnclaveError):
    pass


class ReplayDetected(EnclaveError):
    pass


class PageTooLarge(EnclaveError):
    pass


class AttestationFailure(EnclaveError):
    pass


def derive_key(secret: bytes, *labels: object) -> bytes:
    info = b"/".join(str(label).encode() for label in labels)
    return hmac.new(secret, info, hashlib.sha256).digest()


def measure(code_identity: str, params: Mapping[str, str]) -> bytes:
    canonical = code_identity + "\n" + "\n".join(f"{k}={params[k]}" for k in sorted(params))
    return hashlib.sha256(canonical.encode()).digest()


@dataclass
class EnclaveContext:
    enclave_id: int
    sealing_key: bytes
    measurement: bytes
    channel_keys: dict[int, bytes] = field(default_factory=dict, repr=False)
    memory_budget_bytes: int = EPC_BYTES
    nonce_source: Callable[[int], bytes] = field(default=os.urandom, repr=False)
    _send_counter: dict[int, int] = field(default_factory=dict, repr=False)
    _recv_counter: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if len(self.sealing_key) != KEY_BYTES:
            raise ValueError("sealing key must be 32 bytes")
        if self.memory_budget_bytes <= 0:
            raise ValueError("memory budget must be positive")

    def __repr__(self) -> str:
        return f"EnclaveContext(enclave_id={self.enclave_id}, budget={self.memory_budget_bytes})"


@dataclass(frozen=True)
class SealedBlob:
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes
    associated_data: bytes

    def encode(self) -> bytes:
        return b"".join(
            (
                self.nonce,
                _U32.pack(len(self.associated_data)),
                self.associated_data,
                _U32.pack(len(self.ciphertext)),
                self.ciphertext,
                self.auth_tag,
            )
        )

    @classmethod
    def decode(cls, data: bytes) -> SealedBlob:
        # a malformed layout is indistinguishable from tampering
        try:
            nonce = data[:NONCE_BYTES]
            pos = NONCE_BYTES
            (ad_len,) = _U32.unpack_from(data, pos)
            pos += _U32.size
            ad = data[pos : pos + ad_len]
            pos += ad_len
            (ct_len,) = _U32.unpack_from(data, pos)
            pos += _U32.size
            ciphertext = data[pos : pos + ct_len]
            pos += ct_len
            tag = data[pos:]
        except struct.error as exc:
            raise AuthenticationFailure(f"malformed sealed blob: {exc}") from exc
        if len(nonce) != NONCE_BYTES or len(ad) != ad_len or len(ciphertext) != ct_len or len(tag) != TAG_BYTES:
            raise AuthenticationFailure("malformed sealed blob")
        return cls(bytes(nonce), bytes(ciphertext), bytes(tag), bytes(ad))


def _seal_bytes(key: bytes, plaintext: bytes, ad: bytes, nonce: bytes) -> SealedBlob:
    sealed = AESGCM(key).encrypt(nonce, plaintext, ad)
    return SealedBlob(nonce, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:], ad)


def _open_bytes(key: bytes, blob: SealedBlob) -> bytes:
    try:
        return AESGCM(key).decrypt(blob.nonce, blob.ciphertext + blob.auth_tag, blob.associated_data)
    except (InvalidTag, ValueError) as exc:
        raise AuthenticationFailure("sealed data failed authentication") from exc


def seal(snapshot: StateSnapshot, ctx: EnclaveContext) -> SealedBlob:
    return _seal_bytes(ctx.sealing_key, snapshot.encode(), snapshot.header(),
                       ctx.nonce_source(NONCE_BYTES))


def unseal(blob: SealedBlob | bytes, ctx: EnclaveContext,
           expect: tuple[int, int] | None = None) -> StateSnapshot:
    """Authenticate and decrypt a sealed snapshot.

    ``expect`` is the ``(op_id, partition)`` the caller is restoring; a blob
    bound to any other partition is rejected.
    """
    if isinstance(blob, (bytes, bytearray)):
        blob = SealedBlob.decode(bytes(blob))
    plaintext = _open_bytes(ctx.sealing_key, blob)
    header = blob.associated_data
    if len(header) != SNAPSHOT_HEADER.size or not plaintext.startswith(header):
        raise AuthenticationFailure("sealed snapshot header does not match its binding")
    if expect is not None:
        _, _, op_id, partition, _ = SNAPSHOT_HEADER.unpack(header)
        if (op_id, partition) != tuple(expect):
            raise AuthenticationFailure(
                f"blob is bound to {op_id}/{partition}, not {expect[0]}/{expect[1]}"
            )
    try:
        return StateSnapshot.decode(plaintext)
    except OperatorError as exc:
        raise AuthenticationFailure(f"sealed snapshot is corrupt: {exc}") from exc


def channel_key(secret: bytes, a: int, b: int) -> bytes:
    lo, hi = sorted((a, b))
    return derive_key(secret, "channel", lo, hi)


def encrypt_event(event: Event, peer: int, ctx: EnclaveContext) -> bytes:
    """Wire form: sender id (8) ‖ counter (8) ‖ AES-GCM ciphertext ‖ tag.

    The nonce is four zero bytes followed by the counter; sender and receiver
    ids are bound as associated data.
    """
    try:
        key = ctx.channel_keys[peer]
    except KeyError:
        raise EnclaveError(f"no channel key for peer {peer}") from None
    counter = ctx._send_counter.get(peer, 0) + 1
    ctx._send_counter[peer] = counter
    head = _WIRE_HEAD.pack(ctx.enclave_id, counter)
    nonce = b"\x00\x00\x00\x00" + head[8:]
    ad = head[:8] + peer.to_bytes(8, "big")
    return head + AESGCM(key).encrypt(nonce, event.encode(), ad)


def decrypt_event(wire: bytes, peer: int, ctx: EnclaveContext) -> Event:
    """Inverse of :func:`encrypt_event` on the receiving side; ``peer`` is the sender.

    Authentication is checked before the replay counter, so tampering always
    reports as AuthenticationFailure.
    """
    if len(wire) < _WIRE_HEAD.size + TAG_BYTES:
        raise AuthenticationFailure("wire message too short")
    sender, counter = _WIRE_HEAD.unpack_from(wire, 0)
    if sender != peer:
        raise AuthenticationFailure(f"message claims sender {sender}, expected {peer}")
    key = ctx.channel_keys.get(peer)
    if key is None:
        raise AuthenticationFailure(f"no channel key for peer {peer}")
    nonce = b"\x00\x00\x00\x00" + wire[8:16]
    ad = wire[:8] + ctx.enclave_id.to_bytes(8, "big")
    try:
        plaintext = AESGCM(key).decrypt(nonce, wire[_WIRE_HEAD.size :], ad)
    except InvalidTag as exc:
        raise AuthenticationFailure("wire message failed authentication") from exc
    if counter <= ctx._recv_counter.get(peer, 0):
        raise ReplayDetected(f"counter {counter} from {peer} already seen")
    ctx._recv_counter[peer] = counter
    try:
        return Event.decode(plaintext)
    except EventDecodeError as exc:
        raise AuthenticationFailure(f"authenticated payload is not an event: {exc}") from exc


def attest(ctx: EnclaveContext, expected_measurement: bytes) -> bool:
    return hmac.compare_digest(ctx.measurement, expected_measurement)


def lru_victim(order: OrderedDict[bytes, None]) -> bytes:
    return next(iter(order))


class PagedStateStore:
    """Key/value state under a resident byte budget, evicting sealed pages.

    Each value is a page.  A page costs its length rounded up to
    ``page_size`` (pass ``page_size=1`` for exact accounting).  Evicted pages
    are sealed under the enclave key with the page key as associated data.
    ``policy`` picks the victim from the recency order, oldest first.
    """

    def __init__(self, ctx: EnclaveContext, page_size: int = EPC_PAGE_SIZE,
                 policy: Callable[[OrderedDict[bytes, None]], bytes] = lru_victim):
        self.ctx = ctx
        self.page_size = page_size
        self.policy = policy
        self.resident: dict[bytes, bytes] = {}
        self.backing: dict[bytes, SealedBlob] = {}
        self.resident_bytes = 0
        self.max_resident_bytes = 0
        self.evictions = 0
        self.faults = 0
        self._order: OrderedDict[bytes, None] = OrderedDict()

    @property
    def budget(self) -> int:
        return self.ctx.memory_budget_bytes

    def cost(self, value: bytes) -> int:
        pages = max(1, -(-len(value) // self.page_size))
        return pages * self.page_size

    def _ad(self, key: bytes) -> bytes:
        return self.ctx.enclave_id.to_bytes(8, "big") + key

    def _make_room(self, needed: int, keep: bytes) -> None:
        while self.resident_bytes + needed > self.budget:
            candidates = OrderedDict((k, None) for k in self._order if k != keep)
            victim = self.policy(candidates)
            value = self.resident.pop(victim)
            del self._order[victim]
            self.resident_bytes -= self.cost(value)
            self.backing[victim] = _seal_bytes(self.ctx.sealing_key, value, self._ad(victim),
                                               self.ctx.nonce_source(NONCE_BYTES))
            self.evictions += 1

    def _admit(self, key: bytes, value: bytes) -> None:
        size = self.cost(value)
        if size > self.budget:
            raise PageTooLarge(f"page of {len(value)} bytes exceeds budget {self.budget}")
        old = self.resident.pop(key, None)
        if old is not None:
            self.resident_bytes -= self.cost(old)
            del self._order[key]
        self._make_room(size, key)
        self.resident[key] = value
        self._order[key] = None
        self.resident_bytes += size
        self.max_resident_bytes = max(self.max_resident_bytes, self.resident_bytes)

    def get(self, key: bytes) -> bytes | None:
        if key in self.resident:
            self._order.move_to_end(key)
            return self.resident[key]
        blob = self.backing.get(key)
        if blob is None:
            return None
        if blob.associated_data != self._ad(key):
            raise AuthenticationFailure(f"backing page {key!r} is bound elsewhere")
        value = _open_bytes(self.ctx.sealing_key, blob)
        self.faults += 1
        self._admit(key, value)
        del self.backing[key]
        return value

    def put(self, key: bytes, value: bytes) -> None:
        value = bytes(value)
        if self.cost(value) > self.budget:
            raise PageTooLarge(f"page of {len(value)} bytes exceeds budget {self.budget}")
        self.backing.pop(key, None)
        self._admit(key, value)

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        """All pages in key order; backing pages are unsealed without being faulted in."""
        keys = sorted(set(self.resident) | set(self.backing))
        for key in keys:
            if key in self.resident:
                yield key, self.resident[key]
            else:
                blob = self.backing[key]
                if blob.associated_data != self._ad(key):
                    raise AuthenticationFailure(f"backing page {key!r} is bound elsewhere")
                yield key, _open_bytes(self.ctx.sealing_key, blob)

    def __len__(self) -> int:
        return len(self.resident) + len(self.backing)


def page_get(store: PagedStateStore, key: bytes, ctx: EnclaveContext | None = None) -> bytes | None:
    return store.get(key)


def page_put(store: PagedStateStore, key: bytes, value: bytes, ctx: EnclaveContext | None = None) -> None:
    store.put(key, value)
