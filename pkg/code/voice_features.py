"""
Voice feature extractor (VFE).

A feature is one 4-bit log-RMS code per 20 ms frame, computed after zeroing
the low `embed_depth` bits of every sample. Embedding only touches those
bits, so features of original and watermarked audio are identical.

Encoding (normative input to token assembly): codes packed two per byte,
first code in the high nibble, frame order preserved; an odd count leaves
the final low nibble zero.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from config import Voice
from errors import ContractError, TooShortError


@dataclass(frozen=True)
class AudioSegment:
    """A fixed-duration run of 16-bit PCM samples."""

    samples: np.ndarray
    sample_rate: int = Voice.DEFAULT_SAMPLE_RATE
    seg_index: int = 0

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ContractError("Audio segment must be mono (1-D samples)")
        if samples.dtype != np.int16:
            if samples.size and (samples.min() < -32768 or samples.max() > 32767):
                raise ContractError("Sample values outside the 16-bit signed range")
            samples = samples.astype(np.int16)
        else:
            samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, 'samples', samples)
        if self.sample_rate <= 0:
            raise ContractError(f"Invalid sample rate: {self.sample_rate}")
        if self.seg_index < 0:
            raise ContractError(f"Invalid segment index: {self.seg_index}")

    def __len__(self):
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> 'AudioSegment':
        return AudioSegment(samples, self.sample_rate, self.seg_index)


@dataclass(frozen=True)
class VoiceFeature:
    frame_energies: Tuple[int, ...] = ()

    def __post_init__(self):
        codes = tuple(int(c) for c in self.frame_energies)
        for code in codes:
            if not 0 <= code < Voice.CODE_LEVELS:
                raise ContractError(f"Feature code out of range: {code}")
        object.__setattr__(self, 'frame_energies', codes)

    def __len__(self):
        return len(self.frame_energies)


EMPTY_FEATURE = VoiceFeature()


def frame_length(sample_rate: int) -> int:
    return int(round(sample_rate * Voice.FRAME_SECONDS))


def _energy_code(rms: float) -> int:
    if rms < 1.0:
        return 0
    dbfs = 20.0 * math.log10(rms / Voice.FULL_SCALE)
    code = Voice.CODE_LEVELS + math.floor(dbfs / Voice.STEP_DB)
    return max(1, min(Voice.CODE_LEVELS - 1, code))


def extract_features(seg: AudioSegment, embed_depth: int) -> VoiceFeature:
    if not 0 <= embed_depth < 8:
        raise ContractError(f"embed_depth must be in [0, 8), got {embed_depth}")
    flen = frame_length(seg.sample_rate)
    count = len(seg) // flen
    if count == 0:
        raise TooShortError(f"Segment of {len(seg)} samples is shorter than one {flen}-sample frame")

    mask = ~((1 << embed_depth) - 1)
    coarse = (seg.samples[:count * flen].astype(np.int32) & mask).astype(np.float64)
    frames = coarse.reshape(count, flen)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    return VoiceFeature(tuple(_energy_code(float(r)) for r in rms))


def encode_features(vf: VoiceFeature) -> bytes:
    codes = list(vf.frame_energies)
    if len(codes) % 2:
        codes.append(0)
    return bytes((codes[i] << 4) | codes[i + 1] for i in range(0, len(codes), 2))
