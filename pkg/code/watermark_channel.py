"""
Watermark channel: embeds token frames into PCM audio and recovers them.

Frame layout (normative):

    sync 0xA55A (16 bits) || serialized token (D + 32 bits) || CRC-8 (8 bits)

CRC-8 uses polynomial 0x07, initial value 0x00, no reflection, no final XOR,
computed over the serialized token bytes. Bits travel most significant first.

Reference LSB codec: carrier j of a segment is sample j * floor(sample_rate /
capacity); the carried bit is replicated into the low `embed_depth` bits and
read back from the highest of them. Carriers left over when no frame bits are
pending carry the idle pattern 1, 0, 1, 0, ... (by carrier index).
"""

import logging
import math
import wave
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Tuple, Union

import numpy as np

from config import Channel, Tokens, Voice
from errors import ChannelConfigError, ContractError, FramingError, WavFormatError
from token_core import Token, deserialize_token, serialize_token
from voice_features import AudioSegment

logger = logging.getLogger(__name__)

SYNC_PATTERN = np.unpackbits(np.frombuffer(Channel.SYNC_WORD.to_bytes(2, 'big'), dtype=np.uint8))


def _crc8_table(poly: int) -> List[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ poly) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table.append(crc)
    return table


_CRC8_TABLE = _crc8_table(Channel.CRC_POLYNOMIAL)


def crc8(data: bytes) -> int:
    crc = Channel.CRC_INIT
    for byte in data:
        crc = _CRC8_TABLE[crc ^ byte]
    return crc


def frame_width(digest_bits: int) -> int:
    return Channel.SYNC_BITS + digest_bits + Tokens.NONCE_BITS + Channel.CRC_BITS


def resolve_capacity(capacity: Union[int, float, str]) -> float:
    """Accept a number of bits per second or a named regime."""
    if isinstance(capacity, str):
        try:
            return float(Channel.CAPACITY_REGIMES[capacity])
        except KeyError:
            raise ChannelConfigError(
                f"Unknown capacity regime {capacity!r}; choose from {list(Channel.CAPACITY_REGIMES)}")
    return float(capacity)


@dataclass(frozen=True)
class ChannelConfig:
    capacity: float = Channel.DEFAULT_CAPACITY
    embed_depth: int = Channel.DEFAULT_EMBED_DEPTH
    sample_rate: int = Voice.DEFAULT_SAMPLE_RATE
    codec_id: str = Channel.DEFAULT_CODEC
    segment_duration: float = Channel.DEFAULT_SEGMENT_SECONDS

    def __post_init__(self):
        object.__setattr__(self, 'capacity', resolve_capacity(self.capacity))
        if self.codec_id not in Channel.CODECS:
            raise ChannelConfigError(f"Unknown codec {self.codec_id!r}; choose from {Channel.CODECS}")
        if not 1 <= self.embed_depth <= Channel.MAX_EMBED_DEPTH:
            raise ChannelConfigError(
                f"embed_depth must be in [1, {Channel.MAX_EMBED_DEPTH}], got {self.embed_depth}")
        if self.sample_rate <= 0 or self.segment_duration <= 0 or self.capacity <= 0:
            raise ChannelConfigError("sample_rate, segment_duration and capacity must be positive")
        if self.capacity > self.sample_rate:
            raise ChannelConfigError(
                f"capacity {self.capacity} bit/s exceeds one bit per sample at {self.sample_rate} Hz")
        samples = self.sample_rate * self.segment_duration
        if not math.isclose(samples, round(samples), abs_tol=1e-9):
            raise ChannelConfigError(f"Segment of {self.segment_duration} s is not a whole number of samples")
        bits = self.capacity * self.segment_duration
        if bits < 1 or not math.isclose(bits, round(bits), abs_tol=1e-9):
            raise ChannelConfigError(
                f"capacity x segment duration must be a whole number >= 1, got {bits}")

    @property
    def bits_per_segment(self) -> int:
        return int(round(self.capacity * self.segment_duration))

    @property
    def segment_length(self) -> int:
        return int(round(self.sample_rate * self.segment_duration))

    @property
    def carrier_spacing(self) -> int:
        return int(self.sample_rate // self.capacity)

    def carrier_positions(self) -> np.ndarray:
        return np.arange(self.bits_per_segment) * self.carrier_spacing

    def slot_duration(self, digest_bits: int) -> float:
        """Seconds needed to carry one complete token frame."""
        return frame_width(digest_bits) / self.capacity

    def check_segment(self, seg: AudioSegment):
        if len(seg) != self.segment_length or seg.sample_rate != self.sample_rate:
            raise ContractError(
                f"Segment of {len(seg)} samples at {seg.sample_rate} Hz does not match "
                f"{self.segment_length} samples at {self.sample_rate} Hz")


# -- Codecs ----------------------------------------------------------------

class WatermarkCodec(ABC):
    """Embedding/retrieval stage of a watermarking scheme."""

    codec_id = None

    @abstractmethod
    def write_bits(self, samples: np.ndarray, bits: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
        """Return marked samples carrying `bits` (fewer than capacity allowed)."""

    @abstractmethod
    def read_bits(self, samples: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
        """Return the carrier bits of one segment."""


class LsbReferenceCodec(WatermarkCodec):
    codec_id = 'lsb_reference'

    def write_bits(self, samples, bits, cfg):
        positions = cfg.carrier_positions()
        carried = np.arange(positions.size, dtype=np.uint8)
        carried = (1 - (carried % 2)).astype(np.uint8)  # idle pattern
        carried[:len(bits)] = bits
        mask = (1 << cfg.embed_depth) - 1
        marked = samples.astype(np.int32)
        marked[positions] = (marked[positions] & ~mask) | (carried.astype(np.int32) * mask)
        return marked.astype(np.int16)

    def read_bits(self, samples, cfg):
        positions = cfg.carrier_positions()
        values = samples[positions].astype(np.int32)
        return ((values >> (cfg.embed_depth - 1)) & 1).astype(np.uint8)


class NullPassthroughCodec(WatermarkCodec):
    codec_id = 'null_passthrough'

    def write_bits(self, samples, bits, cfg):
        return samples.copy()

    def read_bits(self, samples, cfg):
        return np.zeros(0, dtype=np.uint8)


CODECS: Dict[str, WatermarkCodec] = {
    codec.codec_id: codec for codec in (LsbReferenceCodec(), NullPassthroughCodec())
}


def get_codec(codec_id: str) -> WatermarkCodec:
    try:
        return CODECS[codec_id]
    except KeyError:
        raise ChannelConfigError(f"Unknown codec {codec_id!r}")


# -- Framing ---------------------------------------------------------------

@dataclass(frozen=True)
class TokenFrame:
    payload: np.ndarray
    crc: int
    sync: int = Channel.SYNC_WORD

    def bits(self) -> np.ndarray:
        sync_bits = np.unpackbits(np.frombuffer(self.sync.to_bytes(2, 'big'), dtype=np.uint8))
        crc_bits = np.unpackbits(np.array([self.crc], dtype=np.uint8))
        return np.concatenate([sync_bits, self.payload, crc_bits]).astype(np.uint8)

    @property
    def width(self) -> int:
        return Channel.SYNC_BITS + int(self.payload.size) + Channel.CRC_BITS


def frame_token(t: Token) -> TokenFrame:
    payload = serialize_token(t)
    return TokenFrame(payload=payload, crc=crc8(np.packbits(payload).tobytes()))


@dataclass(frozen=True)
class ExtractedToken:
    token: Token
    start_bit: int  # stream position of the frame's first sync bit

    def end_bit(self, digest_bits: int) -> int:
        return self.start_bit + frame_width(digest_bits)


@dataclass
class BitstreamCursor:
    """FIFO state of one embedder or one extractor."""

    digest_bits: int = 256
    pending_bits: Deque[int] = field(default_factory=deque)
    collected_bits: List[int] = field(default_factory=list)
    collected_offset: int = 0  # stream position of collected_bits[0]
    bits_embedded: int = 0
    frames_queued: int = 0
    crc_failures: int = 0

    @property
    def frame_bits(self) -> int:
        return frame_width(self.digest_bits)

    @property
    def stream_position(self) -> int:
        """Number of carrier bits read so far."""
        return self.collected_offset + len(self.collected_bits)

    def queue_token(self, t: Token):
        if t.width != self.digest_bits + Tokens.NONCE_BITS:
            raise FramingError(f"Token of {t.width} bits does not fit a D={self.digest_bits} stream")
        self.pending_bits.extend(int(b) for b in frame_token(t).bits())
        self.frames_queued += 1

    def feed(self, bits):
        self.collected_bits.extend(int(b) for b in bits)

    def scan(self) -> List[ExtractedToken]:
        """Pull every complete, CRC-valid frame out of the collected bits."""
        bits = self.collected_bits
        width = self.frame_bits
        sync = SYNC_PATTERN.tolist()
        payload_end = Channel.SYNC_BITS + self.digest_bits + Tokens.NONCE_BITS
        found = []
        pos = 0
        while len(bits) - pos >= width:
            if bits[pos:pos + Channel.SYNC_BITS] != sync:
                pos += 1
                continue
            payload = np.array(bits[pos + Channel.SYNC_BITS:pos + payload_end], dtype=np.uint8)
            crc_bits = np.array(bits[pos + payload_end:pos + width], dtype=np.uint8)
            if crc8(np.packbits(payload).tobytes()) != int(np.packbits(crc_bits)[0]):
                self.crc_failures += 1
                logger.debug(f"CRC mismatch at stream bit {self.collected_offset + pos}")
                pos += 1
                continue
            token = deserialize_token(payload, self.digest_bits)
            found.append(ExtractedToken(token, self.collected_offset + pos))
            pos += width
        del bits[:pos]
        self.collected_offset += pos
        return found


def embed(seg: AudioSegment, cursor: BitstreamCursor,
          cfg: ChannelConfig) -> Tuple[AudioSegment, BitstreamCursor]:
    cfg.check_segment(seg)
    take = min(len(cursor.pending_bits), cfg.bits_per_segment)
    bits = np.array([cursor.pending_bits.popleft() for _ in range(take)], dtype=np.uint8)
    marked = get_codec(cfg.codec_id).write_bits(seg.samples, bits, cfg)
    cursor.bits_embedded += take
    return seg.with_samples(marked), cursor


def extract(seg: AudioSegment, cursor: BitstreamCursor,
            cfg: ChannelConfig) -> Tuple[List[ExtractedToken], BitstreamCursor]:
    cfg.check_segment(seg)
    cursor.feed(get_codec(cfg.codec_id).read_bits(seg.samples, cfg))
    return cursor.scan(), cursor


@dataclass(frozen=True)
class TransparencyReport:
    max_sample_delta: int
    snr_db: float  # +inf when the segments are identical


def transparency_report(original: AudioSegment, marked: AudioSegment) -> TransparencyReport:
    if len(original) != len(marked):
        raise ContractError(f"Length mismatch: {len(original)} vs {len(marked)} samples")
    ref = original.samples.astype(np.float64)
    diff = marked.samples.astype(np.float64) - ref
    noise = float(np.sum(diff * diff))
    max_delta = int(np.max(np.abs(diff))) if diff.size else 0
    if noise == 0.0:
        return TransparencyReport(max_delta, math.inf)
    signal = float(np.sum(ref * ref))
    snr = 10.0 * math.log10(signal / noise) if signal > 0 else -math.inf
    return TransparencyReport(max_delta, snr)


# -- WAV I/O ---------------------------------------------------------------

def read_wav(path: str) -> Tuple[np.ndarray, int]:
    """Read a 16-bit mono PCM WAV file into int16 samples."""
    try:
        with wave.open(str(path), 'rb') as wf:
            if wf.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit samples, got {8 * wf.getsampwidth()}-bit")
            if wf.getcomptype() != 'NONE':
                raise WavFormatError(f"{path}: compressed WAV ({wf.getcomptype()}) is not supported")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as e:
        raise WavFormatError(f"{path}: not a PCM WAV file ({e})")
    return np.frombuffer(raw, dtype='<i2').astype(np.int16), rate


def write_wav(path: str, samples: np.ndarray, sample_rate: int):
    data = np.asarray(samples, dtype=np.int16).astype('<i2')
    with wave.open(str(path), 'wb') as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(data.tobytes())


def split_segments(samples: np.ndarray, cfg: ChannelConfig) -> Tuple[List[AudioSegment], np.ndarray]:
    """Cut audio into whole segments; returns the segments and the leftover tail."""
    n = cfg.segment_length
    count = len(samples) // n
    segments = [AudioSegment(samples[i * n:(i + 1) * n], cfg.sample_rate, i) for i in range(count)]
    return segments, np.asarray(samples[count * n:], dtype=np.int16)
