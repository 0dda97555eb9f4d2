"""
Preprocessing stage: signaling buffer, message hashing, nonce source and
token assembly.

Wire layout of a token (normative, consumed by watermark_channel):

    digest (D bits, most significant bit first) || nonce (32 bits, big-endian)

The digest is

    H( H(payload) || enc(options) || nonce || [voice features] )

where enc(options) is a tag-length-value run in the fixed order TS, PASS, ID
(tag byte, 2-byte big-endian length, value). A missing tag means the option
is disabled.
"""

import hashlib
import logging
import secrets
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from config import Tokens
from errors import (ContractError, EmptyBufferError, FramingError,
                    NonceExhaustedError, OrderingError)
from voice_features import VoiceFeature, encode_features

logger = logging.getLogger(__name__)

NONCE_SPACE = 1 << Tokens.NONCE_BITS


def _hash_factory(name: str) -> Callable:
    """Resolve a primitive name to a hashlib constructor."""
    base, sep, width = name.partition('-')
    if sep and base in ('blake2b', 'blake2s'):
        try:
            bits = int(width)
        except ValueError:
            raise ContractError(f"Invalid digest width in hash name: {name}")
        constructor = getattr(hashlib, base)
        if bits <= 0 or bits % 8 or bits // 8 > constructor.MAX_DIGEST_SIZE:
            raise ContractError(f"Unsupported digest width {bits} for {base}")
        return lambda: constructor(digest_size=bits // 8)
    if name.startswith('shake'):
        raise ContractError(f"Variable-length hash {name} needs an explicit width")
    try:
        hashlib.new(name)
    except ValueError:
        raise ContractError(f"Unknown hash primitive: {name}")
    return lambda: hashlib.new(name)


@dataclass(frozen=True)
class DigestPrimitive:
    """Named cryptographic hash both endpoints agree on."""

    name: str = Tokens.DEFAULT_HASH
    _factory: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, '_factory', _hash_factory(self.name))

    @property
    def bits(self) -> int:
        return self._factory().digest_size * 8

    def digest(self, data: bytes) -> bytes:
        h = self._factory()
        h.update(data)
        return h.digest()


DEFAULT_PRIMITIVE = DigestPrimitive()


# -- SB: signaling message buffer ------------------------------------------

class Direction(Enum):
    SENT = 'sent'
    RECEIVED = 'received'


@dataclass(frozen=True)
class SignalingMessage:
    seq: int
    direction: Direction
    payload: bytes
    captured_at: int = 0  # ms since session start

    def __post_init__(self):
        if self.seq < 0:
            raise ContractError(f"seq must be non-negative, got {self.seq}")
        if not self.payload:
            raise ContractError("Signaling payload must be non-empty")
        if self.captured_at < 0:
            raise ContractError(f"captured_at must be non-negative, got {self.captured_at}")


@dataclass(frozen=True)
class SignalingBuffer:
    messages: Tuple[SignalingMessage, ...] = ()
    cursor: int = 0  # index of next unverified message

    def __len__(self):
        return len(self.messages)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.messages)


def buffer_push(buf: SignalingBuffer, msg: SignalingMessage) -> SignalingBuffer:
    """Append a message; same-direction seq values must strictly increase."""
    for held in reversed(buf.messages):
        if held.direction == msg.direction:
            if msg.seq <= held.seq:
                raise OrderingError(
                    f"seq {msg.seq} ({msg.direction.value}) not after buffered seq {held.seq}")
            break
    return replace(buf, messages=buf.messages + (msg,))


def buffer_peek(buf: SignalingBuffer) -> SignalingMessage:
    """Message buffer_next would return, cursor untouched."""
    if not buf.messages:
        raise EmptyBufferError("Signaling buffer is empty")
    if buf.cursor < len(buf.messages):
        return buf.messages[buf.cursor]
    return buf.messages[-1]


def buffer_next(buf: SignalingBuffer) -> Tuple[SignalingMessage, SignalingBuffer]:
    """Return the next unverified message; once consumed, keep returning the last one."""
    msg = buffer_peek(buf)
    if buf.cursor < len(buf.messages):
        buf = replace(buf, cursor=buf.cursor + 1)
    return msg, buf


# -- SP: signaling processing ---------------------------------------------

def hash_message(msg: SignalingMessage, primitive: DigestPrimitive = DEFAULT_PRIMITIVE) -> bytes:
    return primitive.digest(msg.payload)


# -- RNG: nonce source ------------------------------------------------------

@dataclass(frozen=True, order=True)
class Nonce:
    value: int

    def __post_init__(self):
        if not 0 <= self.value < NONCE_SPACE:
            raise ContractError(f"Nonce out of {Tokens.NONCE_BITS}-bit range: {self.value}")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(Tokens.NONCE_BITS // 8, 'big')


@dataclass(frozen=True)
class NonceGenerator:
    """Counter with a per-session random offset: unique until the space is exhausted."""

    offset: int
    issued: int = 0

    @classmethod
    def seeded(cls, seed: int) -> 'NonceGenerator':
        rng = np.random.default_rng(seed)
        return cls(offset=int(rng.integers(0, NONCE_SPACE)))

    @classmethod
    def fresh(cls) -> 'NonceGenerator':
        return cls(offset=secrets.randbits(Tokens.NONCE_BITS))


def next_nonce(gen: NonceGenerator) -> Tuple[Nonce, NonceGenerator]:
    if gen.issued >= NONCE_SPACE:
        raise NonceExhaustedError(f"All {NONCE_SPACE} nonces issued; aborting session")
    nonce = Nonce((gen.offset + gen.issued) % NONCE_SPACE)
    return nonce, replace(gen, issued=gen.issued + 1)


# -- WD: token assembly -----------------------------------------------------

@dataclass(frozen=True)
class TokenOptions:
    use_ts: bool = False
    ts: Optional[int] = None
    use_pass: bool = False
    password: Optional[bytes] = None
    use_id: bool = False
    id: Optional[bytes] = None
    protect_voice: bool = False
    protect_signaling: bool = True

    def __post_init__(self):
        for flag, value, label in ((self.use_ts, self.ts, 'ts'),
                                   (self.use_pass, self.password, 'password'),
                                   (self.use_id, self.id, 'id')):
            if flag != (value is not None):
                raise ContractError(f"Option {label} must be present iff enabled")
        if self.use_ts and not 0 <= self.ts < (1 << 64):
            raise ContractError(f"Timestamp out of range: {self.ts}")
        if not (self.protect_signaling or self.protect_voice):
            raise ContractError("Tokens must protect signaling, voice, or both")

    def with_id(self, identity: bytes) -> 'TokenOptions':
        """Same options keyed to another party's ID (no-op when ID is disabled)."""
        if not self.use_id:
            return self
        return replace(self, id=identity)


def _tlv(tag: int, value: bytes) -> bytes:
    if len(value) > Tokens.MAX_OPTION_LENGTH:
        raise ContractError(f"Option value too long: {len(value)} bytes")
    return bytes([tag]) + len(value).to_bytes(2, 'big') + value


def encode_options(opts: TokenOptions) -> bytes:
    out = b''
    if opts.use_ts:
        out += _tlv(Tokens.TAG_TS, opts.ts.to_bytes(8, 'big'))
    if opts.use_pass:
        out += _tlv(Tokens.TAG_PASS, opts.password)
    if opts.use_id:
        out += _tlv(Tokens.TAG_ID, opts.id)
    return out


@dataclass(frozen=True)
class Token:
    digest: bytes
    nonce: Nonce

    @property
    def width(self) -> int:
        return len(self.digest) * 8 + Tokens.NONCE_BITS

    def describe(self) -> str:
        return f"{self.digest.hex()} {self.nonce.value:08x}"


def build_token(msg_digest: Optional[bytes], opts: TokenOptions, nonce: Nonce,
                vf: Optional[VoiceFeature] = None,
                primitive: DigestPrimitive = DEFAULT_PRIMITIVE) -> Token:
    if (vf is not None) != opts.protect_voice:
        raise ContractError("Voice feature must be given iff protect_voice is enabled")
    if (msg_digest is not None) != opts.protect_signaling:
        raise ContractError("Message digest must be given iff protect_signaling is enabled")

    material = msg_digest or b''
    material += encode_options(opts) + nonce.to_bytes()
    if vf is not None:
        material += encode_features(vf)
    return Token(digest=primitive.digest(material), nonce=nonce)


def expected_token(local_msg: Optional[SignalingMessage], opts: TokenOptions,
                   received_nonce: Nonce, local_vf: Optional[VoiceFeature] = None,
                   primitive: DigestPrimitive = DEFAULT_PRIMITIVE) -> Token:
    """Receiver-side recomputation from the locally observed message.

    `opts.id` has to carry the sender's identity when ID is enabled.
    """
    msg_digest = None
    if opts.protect_signaling:
        if local_msg is None:
            raise ContractError("No local message to verify against")
        msg_digest = hash_message(local_msg, primitive)
    return build_token(msg_digest, opts, received_nonce, local_vf, primitive)


def serialize_token(t: Token) -> np.ndarray:
    raw = np.frombuffer(t.digest + t.nonce.to_bytes(), dtype=np.uint8)
    return np.unpackbits(raw)


def deserialize_token(bits, digest_bits: int = 256) -> Token:
    bits = np.asarray(bits, dtype=np.uint8)
    expected = digest_bits + Tokens.NONCE_BITS
    if bits.ndim != 1 or bits.size != expected:
        raise FramingError(f"Token needs {expected} bits, got {bits.size}")
    if digest_bits % 8:
        raise FramingError(f"Digest width must be a whole number of bytes: {digest_bits}")
    raw = np.packbits(bits).tobytes()
    split = digest_bits // 8
    return Token(digest=raw[:split], nonce=Nonce(int.from_bytes(raw[split:], 'big')))
