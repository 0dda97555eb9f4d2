"""
Command-line front end.

    run <scenario.json>                     simulate a call, write report + traces
    embed <in.wav> <tokens.json> <out.wav>  watermark a WAV file with token frames
    extract <in.wav> [--spec tokens.json]   list the token frames found in a WAV file
    report <trace.csv>                      summarize a LoT trace
"""

import argparse
import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import Logging, Session, Tokens, config_manager
from errors import (ChannelConfigError, ContractError, FramingError, LotConfigError,
                    PostFactumError, ScenarioError, SessionSetupError, WavFormatError)
from lot_verifier import LotStatus, read_trace, write_trace
from scenario import load_scenario, simulate
from token_core import (DigestPrimitive, Direction, Nonce, NonceGenerator, SignalingMessage,
                        Token, TokenOptions, build_token, hash_message, next_nonce)
from watermark_channel import (BitstreamCursor, ChannelConfig, embed, extract, read_wav,
                               split_segments, write_wav)

logger = logging.getLogger(__name__)

EXIT_BY_STATUS = {
    LotStatus.COMPLETED.value: Session.EXIT_COMPLETED,
    LotStatus.STOPPED_CRITICAL.value: Session.EXIT_STOPPED_CRITICAL,
    LotStatus.STOPPED_TIMEOUT.value: Session.EXIT_STOPPED_TIMEOUT,
}

_CHANNEL_KEYS = ('capacity', 'embed_depth', 'segment_duration', 'codec_id')


# -- run -------------------------------------------------------------------

def cmd_run(scenario_path, output_dir: Optional[str] = None) -> int:
    scenario = load_scenario(scenario_path)
    print(f"📞 {scenario.title}")
    report, sim = simulate(scenario)

    out = Path(output_dir or scenario.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"{scenario.stem}_report.json"
    report_path.write_text(report.to_json())
    for name, direction in report.directions.items():
        write_trace(out / f"{scenario.stem}_trace_{name}.csv", direction.trace, sim.cfg.lot)

    for name, direction in report.directions.items():
        t = direction.tokens
        print(f"  {name:<17} {direction.status:<17} LoT {direction.final_lot:>3}  "
              f"sent {t.sent}  recovered {t.recovered}  matched {t.matched}  mismatched {t.mismatched}")
    if report.termination == LotStatus.COMPLETED.value:
        print(f"✅ Call completed ({report.segments} segments)")
    else:
        latency = (f", detection latency {report.detection_latency_s:g} s"
                   if report.detection_latency_s is not None else "")
        print(f"🚨 Call broken: {report.termination} at {report.stopped_at_s:g} s{latency}")
    print(f"📄 Report written to {report_path}")

    code = EXIT_BY_STATUS[report.termination]
    if scenario.expected_exit_code is not None and code != scenario.expected_exit_code:
        logger.warning(f"Scenario documents exit code {scenario.expected_exit_code}, run produced {code}")
    return code


# -- embed / extract -----------------------------------------------------------

def load_token_spec(path, sample_rate: int):
    """Channel settings and tokens from a JSON spec file; returns (cfg, primitive, tokens)."""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
        data = json.loads(text)
    except OSError as e:
        raise ScenarioError(f"Cannot read token spec: {e.strerror}", str(path))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"Invalid JSON: {e.msg}", str(path), e.lineno)
    if not isinstance(data, dict):
        raise ScenarioError("Token spec must be a JSON object", str(path), 1)

    def line_of(key):
        match = re.search(rf'"{key}"\s*:', text)
        return text.count('\n', 0, match.start()) + 1 if match else None

    try:
        cfg = ChannelConfig(sample_rate=sample_rate, **{k: data[k] for k in _CHANNEL_KEYS if k in data})
        primitive = DigestPrimitive(data.get('hash_name', Tokens.DEFAULT_HASH))
    except (ChannelConfigError, ContractError, TypeError) as e:
        raise ScenarioError(str(e), str(path))

    tokens = []
    try:
        if 'tokens' in data:
            for entry in data['tokens']:
                nonce = entry['nonce']
                nonce = int(nonce, 16) if isinstance(nonce, str) else int(nonce)
                digest = bytes.fromhex(entry['digest'])
                if len(digest) * 8 != primitive.bits:
                    raise ContractError(f"digest has {len(digest) * 8} bits, {primitive.name} needs {primitive.bits}")
                tokens.append(Token(digest, Nonce(nonce)))
        else:
            gen = NonceGenerator.seeded(int(data.get('seed', config_manager.get_default_seed())))
            for seq, text_msg in enumerate(data.get('messages', [])):
                msg = SignalingMessage(seq, Direction.SENT, text_msg.encode('utf-8'))
                nonce, gen = next_nonce(gen)
                tokens.append(build_token(hash_message(msg, primitive), TokenOptions(), nonce, None, primitive))
    except (KeyError, ValueError, TypeError, ContractError) as e:
        key = 'tokens' if 'tokens' in data else 'messages'
        raise ScenarioError(f"Bad {key} entry: {e}", str(path), line_of(key))
    return cfg, primitive, tokens


def cmd_embed(wav_in, tokens_spec, wav_out) -> int:
    samples, rate = read_wav(wav_in)
    cfg, primitive, tokens = load_token_spec(tokens_spec, rate)
    segments, tail = split_segments(samples, cfg)

    cursor = BitstreamCursor(primitive.bits)
    for t in tokens:
        cursor.queue_token(t)
    marked = [embed(seg, cursor, cfg)[0].samples for seg in segments]
    write_wav(wav_out, np.concatenate(marked + [tail]), rate)

    carried = cursor.bits_embedded // cursor.frame_bits
    if carried < len(tokens):
        logger.warning(f"Audio holds {carried} of {len(tokens)} frames; the rest were not embedded")
    print(f"💧 Embedded {carried} token frame(s) into {wav_out} "
          f"({len(segments)} segments, {cfg.capacity:g} bit/s)")
    return Session.EXIT_COMPLETED


def cmd_extract(wav_in, spec_path=None) -> int:
    samples, rate = read_wav(wav_in)
    if spec_path:
        cfg, primitive, _ = load_token_spec(spec_path, rate)
    else:
        cfg, primitive = ChannelConfig(sample_rate=rate), DigestPrimitive()
    segments, _ = split_segments(samples, cfg)

    cursor = BitstreamCursor(primitive.bits)
    found = []
    for seg in segments:
        tokens, cursor = extract(seg, cursor, cfg)
        found.extend(tokens)
    for item in found:
        print(item.token.describe())
    print(f"dropped frames: {cursor.crc_failures}")
    return Session.EXIT_COMPLETED


# -- report ----------------------------------------------------------------

def cmd_report(trace_path) -> int:
    meta, rows = read_trace(trace_path)
    if meta:
        print("  ".join(f"{k}={v}" for k, v in meta.items()))
    print(f"{'slot':>5}  {'outcome':<9} {'LoT':>4} {'timer':>8}  status")
    for row in rows:
        print(f"{row.slot_index:>5}  {row.outcome:<9} {row.lot:>4} {row.timer:>8g}  {row.status}")

    counts = Counter(row.outcome for row in rows[1:])
    final = rows[-1].status if rows else LotStatus.RUNNING.value
    print(f"\nTermination: {final}")
    print(f"Slots: {max(len(rows) - 1, 0)}  match: {counts['match']}  mismatch: {counts['mismatch']}  "
          f"no_token: {counts['no_token']}")
    return Session.EXIT_COMPLETED


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='postfactum',
        description="Post factum watermark security for IP telephony: simulate, embed, extract, report")
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('--log-file', action='store_true', help=f"also log to logs/{Logging.LOG_FILE}")
    sub = parser.add_subparsers(dest='cmd', required=True)

    run = sub.add_parser('run', help='run a scenario file')
    run.add_argument('scenario', help='scenario JSON file')
    run.add_argument('-o', '--output-dir', default=None, help='override the scenario output_dir')

    emb = sub.add_parser('embed', help='embed token frames into a 16-bit mono WAV')
    emb.add_argument('wav_in')
    emb.add_argument('tokens_spec', help='JSON with channel keys and tokens or messages')
    emb.add_argument('wav_out')

    ext = sub.add_parser('extract', help='list token frames found in a WAV')
    ext.add_argument('wav_in')
    ext.add_argument('--spec', default=None, help='token spec JSON supplying channel keys')

    rep = sub.add_parser('report', help='summarize a LoT trace CSV')
    rep.add_argument('trace')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    config_manager.setup_logging(level, console_only=not args.log_file)

    try:
        if args.cmd == 'run':
            return cmd_run(args.scenario, args.output_dir)
        if args.cmd == 'embed':
            return cmd_embed(args.wav_in, args.tokens_spec, args.wav_out)
        if args.cmd == 'extract':
            return cmd_extract(args.wav_in, args.spec)
        return cmd_report(args.trace)
    except WavFormatError as e:
        logger.error(f"❌ {e}")
        return Session.EXIT_FORMAT_ERROR
    except (ScenarioError, ChannelConfigError, LotConfigError, SessionSetupError,
            ContractError, FramingError) as e:
        logger.error(f"❌ {e}")
        return Session.EXIT_CONFIG_ERROR
    except OSError as e:
        logger.error(f"❌ {e}")
        return Session.EXIT_CONFIG_ERROR
    except PostFactumError as e:
        logger.error(f"❌ Session aborted: {e}")
        return Session.EXIT_UNEXPECTED
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        return Session.EXIT_UNEXPECTED
