"""
Voice sources feeding the simulated call: synthetic talkers and WAV files.
"""

import logging
from typing import Optional

import numpy as np

from config import Voice
from errors import ContractError
from voice_features import AudioSegment
from watermark_channel import read_wav


class VoiceSynth:
    """Deterministic synthetic voice, generated segment by segment."""

    def __init__(self, seed: int, sample_rate: int = Voice.DEFAULT_SAMPLE_RATE,
                 segment_duration: float = 1.0, profile: str = Voice.DEFAULT_PROFILE,
                 pitch_hz: float = Voice.CALLER_PITCH_HZ, level: float = Voice.DEFAULT_LEVEL):
        if profile not in Voice.PROFILES:
            raise ValueError(f"Invalid profile: {profile}. Choose from {Voice.PROFILES}")
        if not 0.0 <= level <= 1.0:
            raise ValueError(f"Level must be between 0.0 and 1.0, got {level}")
        self.seed = seed
        self.sample_rate = sample_rate
        self.segment_duration = segment_duration
        self.profile = profile
        self.pitch_hz = pitch_hz
        self.level = level
        self.logger = logging.getLogger(__name__)

    def segment(self, seg_index: int) -> AudioSegment:
        """Audio of segment `seg_index`; depends only on (seed, index)."""
        n = int(round(self.sample_rate * self.segment_duration))
        rng = np.random.default_rng([self.seed, seg_index])
        t = (np.arange(n) + seg_index * n) / self.sample_rate

        if self.profile == 'silence':
            wave = np.zeros(n)
        elif self.profile == 'tone':
            wave = np.sin(2 * np.pi * self.pitch_hz * t)
        elif self.profile == 'noise':
            wave = rng.uniform(-1.0, 1.0, n)
        else:
            wave = self._speech(t, rng)

        pcm = np.clip(np.round(wave * self.level * 32767), -32768, 32767)
        return AudioSegment(pcm.astype(np.int16), self.sample_rate, seg_index)

    def _speech(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        # Voiced harmonics with slight vibrato
        vibrato = 1 + 0.02 * np.sin(2 * np.pi * 5.5 * t)
        phase = 2 * np.pi * self.pitch_hz * t * vibrato
        wave = np.sin(phase)
        wave += 0.6 * np.sin(2 * phase)
        wave += 0.4 * np.sin(3 * phase)
        wave += 0.25 * np.sin(5 * phase)

        # Breath noise
        wave += 0.05 * rng.normal(0.0, 1.0, t.size)

        # Syllabic envelope, never fully silent
        envelope = 0.6 + 0.4 * np.sin(2 * np.pi * Voice.SYLLABLE_RATE_HZ * t + rng.uniform(0, 2 * np.pi))
        wave = wave * envelope

        peak = np.max(np.abs(wave))
        if peak > 0:
            wave = wave / peak
        return wave


class WavVoiceSource:
    """Serves fixed-length segments from a 16-bit mono WAV file, zero-padded past its end."""

    def __init__(self, path: str, segment_duration: float = 1.0,
                 expected_rate: Optional[int] = None):
        self.path = path
        self.samples, self.sample_rate = read_wav(path)
        if expected_rate is not None and self.sample_rate != expected_rate:
            raise ContractError(
                f"{path}: sample rate {self.sample_rate} Hz, scenario expects {expected_rate} Hz")
        self.segment_duration = segment_duration
        self.segment_length = int(round(self.sample_rate * segment_duration))
        logging.getLogger(__name__).info(
            f"Voice source {path}: {len(self.samples) / self.sample_rate:.1f} s at {self.sample_rate} Hz")

    def segment(self, seg_index: int) -> AudioSegment:
        start = seg_index * self.segment_length
        chunk = self.samples[start:start + self.segment_length]
        if len(chunk) < self.segment_length:
            chunk = np.concatenate([chunk, np.zeros(self.segment_length - len(chunk), dtype=np.int16)])
        return AudioSegment(chunk, self.sample_rate, seg_index)
