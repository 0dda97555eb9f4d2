"""
Scenario files: flat JSON objects describing one simulated call.

Every key is optional; `config/example_scenario.json` lists all of them with
their defaults. Attacks are a list of objects with an `action` key
(`tamper_signaling`, `strip_watermark`, `substitute_voice`, `replay_tokens`)
plus that action's parameters.
"""

import json
import logging
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from config import Channel, Lot, Session, Tokens, Voice, config_manager
from errors import ChannelConfigError, ContractError, LotConfigError, ScenarioError
from session_sim import (AttackScript, ChannelModel, EndpointConfig, ReplayTokens, Role,
                         SessionReport, SessionSimulator, StripWatermark, SubstituteVoice,
                         TamperSignaling, make_endpoint)
from token_core import DigestPrimitive, TokenOptions
from voice_source import VoiceSynth, WavVoiceSource
from watermark_channel import ChannelConfig

logger = logging.getLogger(__name__)

ATTACK_TYPES = {
    'tamper_signaling': TamperSignaling,
    'strip_watermark': StripWatermark,
    'substitute_voice': SubstituteVoice,
    'replay_tokens': ReplayTokens,
}


@dataclass
class Scenario:
    title: str = "Untitled scenario"
    description: str = ""
    expected_exit_code: Optional[int] = None
    seed: Optional[int] = None

    # Session
    message_count: int = Session.DEFAULT_MESSAGE_COUNT
    warmup_seconds: float = Session.DEFAULT_WARMUP_SECONDS
    conversation_seconds: float = Session.DEFAULT_CONVERSATION_SECONDS
    session_epoch_ms: int = Session.DEFAULT_SESSION_EPOCH_MS
    caller_id: str = Session.DEFAULT_CALLER_ID
    callee_id: str = Session.DEFAULT_CALLEE_ID

    # Token options
    hash_name: str = Tokens.DEFAULT_HASH
    use_ts: bool = False
    use_pass: bool = False
    password: Optional[str] = None
    use_id: bool = False
    protect_voice: bool = False
    protect_signaling: bool = True

    # Channel
    capacity: Any = Channel.DEFAULT_CAPACITY
    embed_depth: int = Channel.DEFAULT_EMBED_DEPTH
    sample_rate: int = Voice.DEFAULT_SAMPLE_RATE
    segment_duration: float = Channel.DEFAULT_SEGMENT_SECONDS
    codec_id: str = Channel.DEFAULT_CODEC

    # LoT
    initial_x: int = Lot.DEFAULT_INITIAL_X
    critical_a: int = Lot.DEFAULT_CRITICAL_A
    timer_limit_k: Optional[float] = None

    # Network
    ber: float = 0.0
    segment_loss: float = 0.0
    attacks: List[dict] = field(default_factory=list)

    # Voice
    voice_profile: str = Voice.DEFAULT_PROFILE
    caller_voice_wav: Optional[str] = None
    callee_voice_wav: Optional[str] = None

    output_dir: str = Session.DEFAULT_OUTPUT_DIR

    path: Optional[Path] = field(default=None, repr=False)
    _lines: Dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def stem(self) -> str:
        return self.path.stem if self.path else 'scenario'

    def error(self, message: str, key: Optional[str] = None) -> ScenarioError:
        return ScenarioError(message, str(self.path) if self.path else None, self._lines.get(key))

    # -- builders ------------------------------------------------------------

    def resolved_seed(self) -> int:
        return self.seed if self.seed is not None else config_manager.get_default_seed()

    def token_options(self) -> TokenOptions:
        return TokenOptions(
            use_ts=self.use_ts,
            ts=self.session_epoch_ms if self.use_ts else None,
            use_pass=self.use_pass,
            password=self.password.encode('utf-8') if self.use_pass else None,
            use_id=self.use_id,
            id=self.caller_id.encode('utf-8') if self.use_id else None,
            protect_voice=self.protect_voice,
            protect_signaling=self.protect_signaling,
        )

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(capacity=self.capacity, embed_depth=self.embed_depth,
                             sample_rate=self.sample_rate, codec_id=self.codec_id,
                             segment_duration=self.segment_duration)

    def endpoint_config(self) -> EndpointConfig:
        return EndpointConfig.build(self.token_options(), self.channel_config(),
                                    DigestPrimitive(self.hash_name), self.initial_x,
                                    self.critical_a, self.timer_limit_k)

    def channel_model(self) -> ChannelModel:
        return ChannelModel(ber=self.ber, segment_loss=self.segment_loss, seed=self.resolved_seed())

    def attack_script(self) -> AttackScript:
        actions = []
        for i, spec in enumerate(self.attacks):
            spec = dict(spec)
            kind = spec.pop('action', None)
            if kind not in ATTACK_TYPES:
                raise self.error(f"attacks[{i}]: unknown action {kind!r}; choose from {list(ATTACK_TYPES)}",
                                 'attacks')
            try:
                actions.append(ATTACK_TYPES[kind](**spec))
            except TypeError as e:
                raise self.error(f"attacks[{i}] ({kind}): {e}", 'attacks')
            except ContractError as e:
                raise self.error(f"attacks[{i}] ({kind}): {e}", 'attacks')
        try:
            return AttackScript(tuple(actions))
        except ContractError as e:
            raise self.error(str(e), 'attacks')

    def voice_sources(self) -> Tuple[object, object]:
        base = self.path.parent if self.path else Path('.')
        sources = []
        for role, wav, pitch, offset in ((Role.CALLER, self.caller_voice_wav, Voice.CALLER_PITCH_HZ, 0),
                                         (Role.CALLEE, self.callee_voice_wav, Voice.CALLEE_PITCH_HZ, 1)):
            if wav:
                sources.append(WavVoiceSource(str(base / wav), self.segment_duration, self.sample_rate))
            else:
                sources.append(VoiceSynth(seed=self.resolved_seed() + offset, sample_rate=self.sample_rate,
                                          segment_duration=self.segment_duration,
                                          profile=self.voice_profile, pitch_hz=pitch))
        return sources[0], sources[1]

    def validate(self):
        """Build every configuration object once so problems surface before the run."""
        if self.use_pass and not self.password:
            raise self.error("use_pass needs a non-empty password", 'password')
        checks = (
            (('use_ts', 'use_pass', 'password', 'use_id', 'protect_voice', 'protect_signaling'), self.token_options),
            (('capacity', 'embed_depth', 'sample_rate', 'segment_duration', 'codec_id'), self.channel_config),
            (('hash_name',), lambda: DigestPrimitive(self.hash_name)),
            (('initial_x', 'critical_a', 'timer_limit_k'), self.endpoint_config),
            (('ber', 'segment_loss'), self.channel_model),
        )
        for keys, build in checks:
            try:
                build()
            except (ContractError, ChannelConfigError, LotConfigError) as e:
                key = next((k for k in keys if k in self._lines), keys[0])
                raise self.error(str(e), key)
        if self.voice_profile not in Voice.PROFILES:
            raise self.error(f"voice_profile must be one of {Voice.PROFILES}", 'voice_profile')
        for key in ('message_count', 'warmup_seconds', 'conversation_seconds'):
            if getattr(self, key) < 0:
                raise self.error(f"{key} must be non-negative", key)
        self.attack_script()


_SCENARIO_KEYS = {f.name: f for f in fields(Scenario) if not f.name.startswith('_') and f.name != 'path'}
_ALIASES = {'pass': 'password'}
_TYPES = {
    'int': (int,), 'float': (int, float), 'bool': (bool,), 'str': (str,),
}
_EXPECTED = {
    'expected_exit_code': 'int', 'seed': 'int', 'message_count': 'int', 'session_epoch_ms': 'int',
    'embed_depth': 'int', 'sample_rate': 'int', 'initial_x': 'int', 'critical_a': 'int',
    'warmup_seconds': 'float', 'conversation_seconds': 'float', 'segment_duration': 'float',
    'timer_limit_k': 'float', 'ber': 'float', 'segment_loss': 'float',
    'use_ts': 'bool', 'use_pass': 'bool', 'use_id': 'bool', 'protect_voice': 'bool',
    'protect_signaling': 'bool',
    'title': 'str', 'description': 'str', 'caller_id': 'str', 'callee_id': 'str', 'hash_name': 'str',
    'password': 'str', 'codec_id': 'str', 'voice_profile': 'str', 'caller_voice_wav': 'str',
    'callee_voice_wav': 'str', 'output_dir': 'str',
}


def _key_lines(text: str) -> Dict[str, int]:
    """Line number of each top-level-looking key (first occurrence)."""
    lines = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        for key in re.findall(r'"([A-Za-z_]+)"\s*:', line):
            lines.setdefault(_ALIASES.get(key, key), lineno)
    return lines


def _check_type(key: str, value: Any) -> bool:
    if value is None:
        return _SCENARIO_KEYS[key].default is None
    if key == 'capacity':
        return isinstance(value, str) or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if key == 'attacks':
        return isinstance(value, list) and all(isinstance(a, dict) for a in value)
    kind = _EXPECTED.get(key)
    if kind is None:
        return True
    if kind in ('int', 'float') and isinstance(value, bool):
        return False
    return isinstance(value, _TYPES[kind])


def parse_scenario(text: str, path: Optional[Path] = None) -> Scenario:
    where = str(path) if path else None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"Invalid JSON: {e.msg}", where, e.lineno)
    if not isinstance(data, dict):
        raise ScenarioError("Scenario must be a JSON object", where, 1)

    lines = _key_lines(text)
    values = {}
    for raw_key, value in data.items():
        key = _ALIASES.get(raw_key, raw_key)
        if key not in _SCENARIO_KEYS:
            raise ScenarioError(f"Unknown key {raw_key!r}", where, lines.get(key))
        if not _check_type(key, value):
            raise ScenarioError(f"Bad value for {raw_key!r}: {value!r}", where, lines.get(key))
        values[key] = value

    scenario = Scenario(**values, path=path, _lines=lines)
    scenario.validate()
    return scenario


def resolve_scenario_path(path) -> Path:
    """A bare name that is not a local file falls back to the bundled scenarios."""
    path = Path(path)
    if path.exists() or path.parent != Path('.'):
        return path
    bundled = config_manager.get_config_file_path(path.name if path.suffix else f"{path.name}.json")
    if bundled.exists():
        logger.debug(f"Using bundled scenario {bundled}")
        return bundled
    return path


def load_scenario(path) -> Scenario:
    path = resolve_scenario_path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ScenarioError(f"Cannot read scenario: {e.strerror}", str(path))
    scenario = parse_scenario(text, path)
    logger.info(f"Loaded scenario '{scenario.title}' from {path}")
    return scenario


def simulate(scenario: Scenario) -> Tuple[SessionReport, SessionSimulator]:
    """Run every phase of the scenario's call."""
    seed = scenario.resolved_seed()
    cfg = scenario.endpoint_config()
    caller = make_endpoint(scenario.caller_id, Role.CALLER, cfg, seed=seed + 1)
    callee = make_endpoint(scenario.callee_id, Role.CALLEE, cfg, seed=seed + 2)
    sim = SessionSimulator(caller, callee, scenario.channel_model(), scenario.attack_script())
    sim.run_signaling_phase(scenario.message_count, seed)
    sim.run_preconversation(scenario.warmup_seconds)
    caller_voice, callee_voice = scenario.voice_sources()
    report = sim.run_conversation(caller_voice, callee_voice, scenario.conversation_seconds)
    return report, sim
