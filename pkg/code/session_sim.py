"""
Deterministic two-endpoint call simulator.

The clock is segment-granular. Every tick, each direction runs

    sender:   queue token frames, embed into the outgoing segment
    network:  attacker actions, then channel impairments
    receiver: extract frames, remember received-audio features

and afterwards every slot whose frame has fully arrived is scored by the
receiving endpoint's LoT verifier. Time 0 is the first media segment
(pre-conversation included).
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np

from config import Channel, Session, Voice
from errors import ContractError, SessionSetupError
from lot_verifier import (LotConfig, LotState, LotStatus, SlotEvent, SlotOutcome,
                          TraceRow, lot_finish, lot_init, lot_step, trace_rows)
from token_core import (DigestPrimitive, Direction, NonceGenerator, SignalingBuffer,
                        SignalingMessage, Token, TokenOptions, buffer_next,
                        buffer_push, build_token, expected_token, hash_message, next_nonce)
from voice_features import EMPTY_FEATURE, AudioSegment, VoiceFeature, extract_features
from voice_source import VoiceSynth
from watermark_channel import (BitstreamCursor, ChannelConfig, ExtractedToken, embed,
                               extract, frame_token, frame_width, get_codec)

logger = logging.getLogger(__name__)

CALLER_TO_CALLEE, CALLEE_TO_CALLER = Session.DIRECTIONS
BOTH = 'both'


class Role(Enum):
    CALLER = 'caller'
    CALLEE = 'callee'


@dataclass(frozen=True)
class EndpointConfig:
    token_options: TokenOptions
    channel: ChannelConfig
    lot: LotConfig
    primitive: DigestPrimitive = field(default_factory=DigestPrimitive)

    @classmethod
    def build(cls, token_options: TokenOptions, channel: ChannelConfig,
              primitive: DigestPrimitive = None, initial_x: int = None,
              critical_a: int = None, timer_limit_k: float = None) -> 'EndpointConfig':
        """Derive the slot duration (one frame at channel capacity) for the verifier."""
        primitive = primitive or DigestPrimitive()
        lot_kwargs = {'slot_duration': channel.slot_duration(primitive.bits),
                      'timer_limit_k': timer_limit_k}
        if initial_x is not None:
            lot_kwargs['initial_x'] = initial_x
        if critical_a is not None:
            lot_kwargs['critical_a'] = critical_a
        return cls(token_options, channel, LotConfig(**lot_kwargs), primitive)

    @property
    def frame_bits(self) -> int:
        return frame_width(self.primitive.bits)


@dataclass
class Endpoint:
    id: bytes
    role: Role
    cfg: EndpointConfig
    nonce_gen: NonceGenerator
    sent: SignalingBuffer = field(default_factory=SignalingBuffer)
    received: SignalingBuffer = field(default_factory=SignalingBuffer)
    lot: Optional[LotState] = None
    peer_id: Optional[bytes] = None
    seen_nonces: Set[int] = field(default_factory=set)

    def __post_init__(self):
        if isinstance(self.id, str):
            self.id = self.id.encode('utf-8')
        if self.lot is None:
            self.lot = lot_init(self.cfg.lot)

    @property
    def verify_options(self) -> TokenOptions:
        """Options the sender used: own options keyed to the peer's ID."""
        return self.cfg.token_options.with_id(self.peer_id or b'')


def make_endpoint(identity: Union[str, bytes], role: Role, cfg: EndpointConfig,
                  seed: Optional[int] = None) -> Endpoint:
    if isinstance(identity, str):
        identity = identity.encode('utf-8')
    opts = cfg.token_options
    if opts.use_id and opts.id != identity:
        cfg = EndpointConfig(opts.with_id(identity), cfg.channel, cfg.lot, cfg.primitive)
    gen = NonceGenerator.fresh() if seed is None else NonceGenerator.seeded(seed)
    return Endpoint(id=identity, role=role, cfg=cfg, nonce_gen=gen)


def check_compatible(caller: Endpoint, callee: Endpoint):
    a, b = caller.cfg, callee.cfg
    problems = []
    if a.channel != b.channel:
        problems.append("channel configurations differ")
    if a.lot != b.lot:
        problems.append("LoT configurations differ")
    if a.primitive.name != b.primitive.name:
        problems.append(f"hash primitives differ ({a.primitive.name} vs {b.primitive.name})")
    oa, ob = a.token_options, b.token_options
    for attr in ('use_ts', 'ts', 'use_pass', 'password', 'use_id', 'protect_voice', 'protect_signaling'):
        if getattr(oa, attr) != getattr(ob, attr):
            problems.append(f"token option {attr} differs")
    if caller.id == callee.id:
        problems.append("endpoints share one identity")
    if problems:
        raise SessionSetupError("Endpoint configuration mismatch: " + "; ".join(problems))


# -- Channel model and attacks --------------------------------------------

@dataclass(frozen=True)
class ChannelModel:
    ber: float = 0.0
    segment_loss: float = 0.0
    seed: int = Session.DEFAULT_SEED

    def __post_init__(self):
        for name in ('ber', 'segment_loss'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must be a probability, got {value}")
        if not 0 <= self.seed < (1 << 64):
            raise ContractError(f"seed must fit in 64 bits, got {self.seed}")

    def flip_bits(self, bits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        flips = rng.random(len(bits)) < self.ber
        return (np.asarray(bits, dtype=np.uint8) ^ flips.astype(np.uint8))

    def impair(self, samples: np.ndarray, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
        """Segment loss (zero-filled) then bit errors on carrier symbols."""
        lost = rng.random() < self.segment_loss
        flips = rng.random(cfg.bits_per_segment) < self.ber
        if lost:
            return np.zeros_like(samples)
        if flips.any():
            mask = (1 << cfg.embed_depth) - 1
            positions = cfg.carrier_positions()[flips]
            samples = samples.copy()
            samples[positions] ^= mask
        return samples


@dataclass(frozen=True)
class TamperSignaling:
    seq: int
    byte_index: int = 0
    xor_mask: int = 0x01

    def __post_init__(self):
        if not 1 <= self.xor_mask <= 0xFF:
            raise ContractError(f"xor_mask must be in [1, 255], got {self.xor_mask}")


@dataclass(frozen=True)
class StripWatermark:
    from_segment: int
    to_segment: Optional[int] = None  # inclusive; None = to the end
    direction: str = BOTH

    def covers(self, seg_index: int) -> bool:
        return seg_index >= self.from_segment and (self.to_segment is None or seg_index <= self.to_segment)


@dataclass(frozen=True)
class SubstituteVoice:
    from_segment: int
    to_segment: Optional[int] = None
    direction: str = BOTH

    def covers(self, seg_index: int) -> bool:
        return seg_index >= self.from_segment and (self.to_segment is None or seg_index <= self.to_segment)


@dataclass(frozen=True)
class ReplayTokens:
    from_slot: int
    direction: str = BOTH


AttackAction = Union[TamperSignaling, StripWatermark, SubstituteVoice, ReplayTokens]


@dataclass(frozen=True)
class AttackScript:
    actions: Tuple[AttackAction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'actions', tuple(self.actions))
        for action in self.actions:
            direction = getattr(action, 'direction', BOTH)
            if direction not in (BOTH, CALLER_TO_CALLEE, CALLEE_TO_CALLER):
                raise ContractError(f"Unknown attack direction {direction!r}")
            if isinstance(action, ReplayTokens) and action.from_slot < 1:
                raise ContractError("replay_tokens needs at least one captured slot (from_slot >= 1)")
            if isinstance(action, (StripWatermark, SubstituteVoice)):
                if action.from_segment < 0 or (action.to_segment is not None
                                               and action.to_segment < action.from_segment):
                    raise ContractError(f"Bad segment range in {action}")
            if isinstance(action, TamperSignaling) and (action.seq < 0 or action.byte_index < 0):
                raise ContractError(f"Bad indices in {action}")

    def media_actions(self, direction: str) -> List[AttackAction]:
        return [a for a in self.actions
                if not isinstance(a, TamperSignaling) and a.direction in (BOTH, direction)]

    def tampers(self) -> Dict[int, TamperSignaling]:
        return {a.seq: a for a in self.actions if isinstance(a, TamperSignaling)}


def replay_guard(seen_nonces: Set[int], token: Token, outcome: SlotOutcome) -> SlotOutcome:
    """A valid token whose nonce was already accepted this session scores as mismatch."""
    if outcome == SlotOutcome.MATCH and token.nonce.value in seen_nonces:
        return SlotOutcome.MISMATCH
    return outcome


# -- Reporting ---------------------------------------------------------------

@dataclass
class TokenCounts:
    sent: int = 0
    recovered: int = 0
    matched: int = 0
    mismatched: int = 0


@dataclass
class DirectionReport:
    direction: str
    verifier: str
    status: str
    final_lot: int
    tokens: TokenCounts
    no_token_slots: int
    first_verification_s: Optional[float]
    all_messages_verified_s: Optional[float]
    trace: List[TraceRow]

    def to_dict(self) -> dict:
        return {
            'verifier': self.verifier,
            'status': self.status,
            'final_lot': self.final_lot,
            'tokens': vars(self.tokens).copy(),
            'no_token_slots': self.no_token_slots,
            'first_verification_s': self.first_verification_s,
            'all_messages_verified_s': self.all_messages_verified_s,
            'trace': [[r.slot_index, r.outcome, r.lot, r.timer, r.status] for r in self.trace],
        }


@dataclass
class SessionReport:
    termination: str
    stopped_at_s: Optional[float]
    attack_injection_s: Optional[float]
    detection_latency_s: Optional[float]
    slot_duration_s: float
    frame_bits: int
    segments: int
    warmup_segments: int
    seed: int
    directions: Dict[str, DirectionReport]

    def to_dict(self) -> dict:
        return {
            'termination': self.termination,
            'stopped_at_s': self.stopped_at_s,
            'attack_injection_s': self.attack_injection_s,
            'detection_latency_s': self.detection_latency_s,
            'slot_duration_s': self.slot_duration_s,
            'frame_bits': self.frame_bits,
            'segments': self.segments,
            'warmup_segments': self.warmup_segments,
            'seed': self.seed,
            'directions': {name: d.to_dict() for name, d in self.directions.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- Simulator ---------------------------------------------------------------

@dataclass
class _Link:
    """Media state of one direction."""

    direction: str
    sender: Endpoint
    receiver: Endpoint
    tx: BitstreamCursor
    rx: BitstreamCursor
    channel_rng: np.random.Generator
    attack_rng: np.random.Generator
    attacker_voice: VoiceSynth
    tx_features: Dict[int, VoiceFeature] = field(default_factory=dict)
    rx_features: Dict[int, VoiceFeature] = field(default_factory=dict)
    captured_bits: List[int] = field(default_factory=list)
    pending_tokens: deque = field(default_factory=deque)
    states: List[LotState] = field(default_factory=list)
    outcomes: List[SlotOutcome] = field(default_factory=list)
    counts: TokenCounts = field(default_factory=TokenCounts)
    first_verification_s: Optional[float] = None
    all_verified_s: Optional[float] = None
    verified: Set[int] = field(default_factory=set)  # received message indices that matched
    failed_index: Optional[int] = None  # message whose token mismatched; demanded from then on


class SessionSimulator:
    """Runs one call: signaling phase, optional warm-up, conversation."""

    def __init__(self, caller: Endpoint, callee: Endpoint,
                 channel: Optional[ChannelModel] = None,
                 script: Optional[AttackScript] = None):
        check_compatible(caller, callee)
        self.logger = logging.getLogger(__name__)
        self.caller = caller
        self.callee = callee
        self.caller.peer_id = callee.id
        self.callee.peer_id = caller.id
        self.channel = channel or ChannelModel()
        self.script = script or AttackScript()
        self.cfg = caller.cfg
        self.ch = self.cfg.channel
        self.frame_bits = self.cfg.frame_bits
        self.slot_duration = self.cfg.lot.slot_duration

        self.phase = 'created'
        self.segment_index = 0
        self.warmup_segments = 0
        self.stopped = False
        self.stop_slot = None
        self.termination = None
        self.tamper_slots: Dict[int, int] = {}  # seq -> slot whose token first covers it

        streams = np.random.SeedSequence(self.channel.seed).spawn(4)
        self.links = {}
        for i, (direction, sender, receiver) in enumerate((
                (CALLER_TO_CALLEE, caller, callee), (CALLEE_TO_CALLER, callee, caller))):
            sender.lot = lot_init(sender.cfg.lot)
            self.links[direction] = _Link(
                direction=direction, sender=sender, receiver=receiver,
                tx=BitstreamCursor(self.cfg.primitive.bits),
                rx=BitstreamCursor(self.cfg.primitive.bits),
                channel_rng=np.random.default_rng(streams[i]),
                attack_rng=np.random.default_rng(streams[i + 2]),
                attacker_voice=VoiceSynth(seed=int(streams[i + 2].generate_state(1)[0]),
                                          sample_rate=self.ch.sample_rate,
                                          segment_duration=self.ch.segment_duration,
                                          profile=Voice.ATTACKER_PROFILE,
                                          level=Voice.ATTACKER_LEVEL),
            )
        for link in self.links.values():
            link.states.append(link.receiver.lot)

    # -- phases ----------------------------------------------------------

    def run_signaling_phase(self, message_count: int = Session.DEFAULT_MESSAGE_COUNT,
                            seed: int = Session.DEFAULT_SEED) -> Tuple[Endpoint, Endpoint]:
        """Scripted exchange of opaque messages, alternating caller/callee."""
        if self.phase != 'created':
            raise SessionSetupError(f"Signaling phase cannot run in phase {self.phase!r}")
        if message_count < 0:
            raise SessionSetupError(f"message_count must be non-negative, got {message_count}")
        for endpoint in (self.caller, self.callee):
            if endpoint.sent.messages or endpoint.received.messages:
                raise SessionSetupError(f"Endpoint {endpoint.role.value} buffers are not empty")

        tampers = self.script.tampers()
        for seq in tampers:
            if seq >= message_count:
                raise SessionSetupError(f"tamper_signaling seq {seq} beyond {message_count} messages")

        rng = np.random.default_rng([seed, message_count])
        sent_index = {Role.CALLER: 0, Role.CALLEE: 0}
        for seq in range(message_count):
            sender, receiver = (self.caller, self.callee) if seq % 2 == 0 else (self.callee, self.caller)
            method = Session.SIGNALING_SCRIPT[seq % len(Session.SIGNALING_SCRIPT)]
            text = (f"{method} seq={seq} from={sender.id.decode('utf-8', 'replace')} "
                    f"to={receiver.id.decode('utf-8', 'replace')}\r\n")
            payload = text.encode('utf-8') + rng.bytes(16)
            captured_at = seq * 40

            sender.sent = buffer_push(sender.sent, SignalingMessage(seq, Direction.SENT, payload, captured_at))
            received = payload
            if seq in tampers:
                edit = tampers[seq]
                if edit.byte_index >= len(payload):
                    raise SessionSetupError(f"tamper byte {edit.byte_index} beyond {len(payload)}-byte message")
                received = bytearray(payload)
                received[edit.byte_index] ^= edit.xor_mask
                received = bytes(received)
                self.tamper_slots[seq] = sent_index[sender.role]
                self.logger.info(f"Attacker edited byte {edit.byte_index} of message seq={seq}")
            receiver.received = buffer_push(
                receiver.received, SignalingMessage(seq, Direction.RECEIVED, received, captured_at))
            sent_index[sender.role] += 1

        self.phase = 'signaled'
        self.logger.info(f"Signaling phase: {message_count} messages exchanged")
        return self.caller, self.callee

    def run_preconversation(self, warmup_seconds: float) -> Tuple[Endpoint, Endpoint]:
        """Silent media exchange carrying tokens before the conversation."""
        if self.phase != 'signaled':
            raise SessionSetupError(f"Pre-conversation cannot run in phase {self.phase!r}")
        self._check_material()
        segments = self._segments_for(warmup_seconds)
        silence = VoiceSynth(seed=0, sample_rate=self.ch.sample_rate,
                             segment_duration=self.ch.segment_duration, profile='silence')
        voices = {Role.CALLER: silence, Role.CALLEE: silence}
        for _ in range(segments):
            if self.stopped:
                break
            self._tick(voices, self.segment_index)
        self.warmup_segments = segments
        self.phase = 'warmed'
        if segments:
            self.logger.info(f"Pre-conversation: {segments} silent segments exchanged")
        return self.caller, self.callee

    def run_conversation(self, caller_voice=None, callee_voice=None,
                         duration_s: float = Session.DEFAULT_CONVERSATION_SECONDS) -> SessionReport:
        if self.phase not in ('signaled', 'warmed'):
            raise SessionSetupError(f"Conversation cannot run in phase {self.phase!r}")
        self._check_material()
        voices = {
            Role.CALLER: caller_voice or VoiceSynth(seed=self.channel.seed, sample_rate=self.ch.sample_rate,
                                                    segment_duration=self.ch.segment_duration,
                                                    pitch_hz=Voice.CALLER_PITCH_HZ),
            Role.CALLEE: callee_voice or VoiceSynth(seed=self.channel.seed + 1, sample_rate=self.ch.sample_rate,
                                                    segment_duration=self.ch.segment_duration,
                                                    pitch_hz=Voice.CALLEE_PITCH_HZ),
        }
        segments = self._segments_for(duration_s)
        self.logger.info(f"Conversation: {segments} segments, slot {self.slot_duration:g} s, "
                         f"frame {self.frame_bits} bits")
        for n in range(segments):
            if self.stopped:
                break
            self._tick(voices, n)
        self.phase = 'finished'
        return self._finish()

    # -- internals -------------------------------------------------------

    def _check_material(self):
        if not self.cfg.token_options.protect_signaling:
            return
        for endpoint in (self.caller, self.callee):
            if not endpoint.sent.messages or not endpoint.received.messages:
                raise SessionSetupError(
                    f"{endpoint.role.value} has no signaling messages to protect")

    def _segments_for(self, seconds: float) -> int:
        if seconds < 0:
            raise SessionSetupError(f"Duration must be non-negative, got {seconds}")
        return int(math.ceil(seconds / self.ch.segment_duration - 1e-9))

    def _tick(self, voices, voice_index: int):
        s = self.segment_index
        for link in self.links.values():
            original = voices[link.sender.role].segment(voice_index)
            original = AudioSegment(original.samples, self.ch.sample_rate, s)
            self._queue_frames(link, s)
            marked, _ = embed(original, link.tx, self.ch)
            if self.cfg.token_options.protect_voice:
                link.tx_features[s] = extract_features(original, self.ch.embed_depth)
            delivered = self._network(link, marked)
            tokens, _ = extract(delivered, link.rx, self.ch)
            link.pending_tokens.extend(tokens)
            link.counts.recovered += len(tokens)
            if self.cfg.token_options.protect_voice:
                link.rx_features[s] = extract_features(delivered, self.ch.embed_depth)
        self.segment_index += 1
        self._evaluate_slots((s + 1) * self.ch.bits_per_segment)

    def _queue_frames(self, link: _Link, s: int):
        sender = link.sender
        opts = sender.cfg.token_options
        primitive = sender.cfg.primitive
        while len(link.tx.pending_bits) < self.ch.bits_per_segment:
            msg_digest = None
            if opts.protect_signaling:
                msg, sender.sent = buffer_next(sender.sent)
                msg_digest = hash_message(msg, primitive)
            nonce, sender.nonce_gen = next_nonce(sender.nonce_gen)
            vf = None
            if opts.protect_voice:
                start_segment = link.tx.frames_queued * self.frame_bits // self.ch.bits_per_segment
                vf = link.tx_features.get(start_segment - 1, EMPTY_FEATURE)
            link.tx.queue_token(build_token(msg_digest, opts, nonce, vf, primitive))

    def _network(self, link: _Link, marked: AudioSegment) -> AudioSegment:
        s = marked.seg_index
        samples = marked.samples.astype(np.int32)
        mask = (1 << self.ch.embed_depth) - 1
        positions = self.ch.carrier_positions()
        bps = self.ch.bits_per_segment
        link.captured_bits.extend(int(b) for b in get_codec(self.ch.codec_id).read_bits(marked.samples, self.ch))

        for action in self.script.media_actions(link.direction):
            if isinstance(action, StripWatermark) and action.covers(s):
                noise = link.attack_rng.integers(0, mask + 1, samples.size)
                samples = (samples & ~mask) | noise
            elif isinstance(action, SubstituteVoice) and action.covers(s):
                fake = link.attacker_voice.segment(s).samples.astype(np.int32)
                samples = (fake & ~mask) | (samples & mask)
            elif isinstance(action, ReplayTokens):
                F, first = self.frame_bits, action.from_slot
                for j in range(bps):
                    p = s * bps + j
                    frame = p // F
                    if frame < first:
                        continue
                    src = ((frame - first) % first) * F + p % F
                    if src < len(link.captured_bits):
                        samples[positions[j]] = (samples[positions[j]] & ~mask) | (link.captured_bits[src] * mask)

        samples = self.channel.impair(samples, self.ch, link.channel_rng)
        return marked.with_samples(samples.astype(np.int16))

    def _evaluate_slots(self, end_bit: int):
        while not self.stopped:
            ready = [link for link in self.links.values()
                     if link.receiver.lot.running
                     and (link.receiver.lot.slot_index + 1) * self.frame_bits <= end_bit]
            if not ready:
                return
            for link in ready:
                self._score_slot(link)
            stopped = [link for link in ready if not link.receiver.lot.running]
            if stopped:
                first = stopped[0]
                self.stopped = True
                self.stop_slot = first.receiver.lot.slot_index - 1
                self.termination = first.receiver.lot.status
                self.logger.warning(
                    f"{first.receiver.role.value} stopped the call ({self.termination.value}) "
                    f"at slot {self.stop_slot}, t={self._slot_end(self.stop_slot):g} s")

    def _slot_end(self, slot: int) -> float:
        return (slot + 1) * self.slot_duration

    def _score_slot(self, link: _Link):
        receiver = link.receiver
        slot = receiver.lot.slot_index
        window_end = (slot + 1) * self.frame_bits
        arrived = []
        while link.pending_tokens and link.pending_tokens[0].end_bit(self.cfg.primitive.bits) <= window_end:
            arrived.append(link.pending_tokens.popleft())

        if not arrived:
            outcome = SlotOutcome.NO_TOKEN
        else:
            if len(arrived) > 1:
                self.logger.debug(f"{len(arrived) - 1} extra token(s) in slot {slot} ignored")
            outcome = self._verify(link, arrived[0])

        receiver.lot = lot_step(receiver.lot, SlotEvent(slot, outcome), receiver.cfg.lot)
        link.states.append(receiver.lot)
        link.outcomes.append(outcome)
        self.logger.debug(f"{link.direction} slot {slot}: {outcome.value} -> LoT {receiver.lot.lot}")

    def _expected_index(self, link: _Link, found: ExtractedToken) -> int:
        """Received message the token must cover.

        Frames sit back to back from bit 0, so the frame index follows from the
        stream position and lost frames do not shift later ones. Once a message
        failed, it stays demanded: the sender never covers it again.
        """
        if link.failed_index is not None:
            return link.failed_index
        count = len(link.receiver.received)
        return min(found.start_bit // self.frame_bits, count - 1)

    def _verify(self, link: _Link, found: ExtractedToken) -> SlotOutcome:
        receiver = link.receiver
        opts = receiver.verify_options
        local_msg, index = None, None
        if opts.protect_signaling:
            index = self._expected_index(link, found)
            local_msg = receiver.received.messages[index]
        vf = None
        if opts.protect_voice:
            start_segment = found.start_bit // self.ch.bits_per_segment
            vf = link.rx_features.get(start_segment - 1, EMPTY_FEATURE)
        expected = expected_token(local_msg, opts, found.token.nonce, vf, receiver.cfg.primitive)
        outcome = SlotOutcome.MATCH if expected == found.token else SlotOutcome.MISMATCH
        outcome = replay_guard(receiver.seen_nonces, found.token, outcome)

        if outcome == SlotOutcome.MATCH:
            link.counts.matched += 1
            receiver.seen_nonces.add(found.token.nonce.value)
            slot_end = self._slot_end(receiver.lot.slot_index)
            if link.first_verification_s is None:
                link.first_verification_s = slot_end
            if opts.protect_signaling:
                while receiver.received.cursor <= index and not receiver.received.exhausted:
                    _, receiver.received = buffer_next(receiver.received)
                link.verified.add(index)
                if len(link.verified) == len(receiver.received) and link.all_verified_s is None:
                    link.all_verified_s = slot_end
        else:
            link.counts.mismatched += 1
            if opts.protect_signaling and link.failed_index is None:
                link.failed_index = index
                self.logger.info(f"{link.direction}: token for message seq="
                                 f"{receiver.received.messages[index].seq} failed verification")
        return outcome

    def _injection_time(self) -> Optional[float]:
        times = []
        for action in self.script.actions:
            if isinstance(action, TamperSignaling):
                if action.seq in self.tamper_slots and self.cfg.token_options.protect_signaling:
                    times.append(self.tamper_slots[action.seq] * self.slot_duration)
            elif isinstance(action, ReplayTokens):
                times.append(action.from_slot * self.slot_duration)
            else:
                times.append(action.from_segment * self.ch.segment_duration)
        return min(times) if times else None

    def _finish(self) -> SessionReport:
        directions = {}
        for name, link in self.links.items():
            if link.receiver.lot.running:
                link.receiver.lot = lot_finish(link.receiver.lot)
                link.states[-1] = link.receiver.lot
            link.counts.sent = link.tx.bits_embedded // self.frame_bits
            directions[name] = DirectionReport(
                direction=name,
                verifier=link.receiver.role.value,
                status=link.receiver.lot.status.value,
                final_lot=link.receiver.lot.lot,
                tokens=link.counts,
                no_token_slots=sum(1 for o in link.outcomes if o == SlotOutcome.NO_TOKEN),
                first_verification_s=link.first_verification_s,
                all_messages_verified_s=link.all_verified_s,
                trace=trace_rows(link.states, link.outcomes),
            )

        stopped_at = self._slot_end(self.stop_slot) if self.stopped else None
        injection = self._injection_time()
        latency = None
        if stopped_at is not None and injection is not None and stopped_at >= injection:
            latency = stopped_at - injection
        termination = self.termination.value if self.stopped else LotStatus.COMPLETED.value
        self.logger.info(f"Session {termination}; "
                         + ", ".join(f"{n}: {d.tokens.matched}/{d.tokens.sent} matched"
                                     for n, d in directions.items()))
        return SessionReport(
            termination=termination,
            stopped_at_s=stopped_at,
            attack_injection_s=injection,
            detection_latency_s=latency,
            slot_duration_s=self.slot_duration,
            frame_bits=self.frame_bits,
            segments=self.segment_index,
            warmup_segments=self.warmup_segments,
            seed=self.channel.seed,
            directions=directions,
        )


# -- Frame survival experiment ------------------------------------------------

@dataclass(frozen=True)
class FrameSurvival:
    trials: int
    survived: int
    expected_rate: float

    @property
    def observed_rate(self) -> float:
        return self.survived / self.trials if self.trials else 0.0


def measure_frame_survival(channel: ChannelModel, digest_bits: int = 256,
                           trials: int = 1000, seed: Optional[int] = None) -> FrameSurvival:
    """Monte Carlo: frames through a BER channel, counted when recovered intact."""
    rng = np.random.default_rng(channel.seed if seed is None else seed)
    gen = NonceGenerator.seeded(channel.seed if seed is None else seed)
    width = frame_width(digest_bits)
    survived = 0
    for _ in range(trials):
        nonce, gen = next_nonce(gen)
        token = Token(digest=rng.bytes(digest_bits // 8), nonce=nonce)
        received = channel.flip_bits(frame_token(token).bits(), rng)
        cursor = BitstreamCursor(digest_bits)
        cursor.feed(received)
        if any(found.token == token for found in cursor.scan()):
            survived += 1
    return FrameSurvival(trials, survived, (1.0 - channel.ber) ** width)
