import contextlib
import io
import json
import os
import sys
import tempfile
import unittest
import wave
import numpy as np
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'code'))

from cli import load_token_spec, main
from config import Session
from voice_source import VoiceSynth
from watermark_channel import ChannelConfig, read_wav, write_wav

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')


def bundled_scenarios():
    """Config files that document an expected exit code."""
    found = []
    for name in sorted(os.listdir(CONFIG_DIR)):
        if not name.endswith('.json'):
            continue
        with open(os.path.join(CONFIG_DIR, name)) as f:
            data = json.load(f)
        if isinstance(data, dict) and 'expected_exit_code' in data:
            found.append((name, data['expected_exit_code']))
    return found


def run_cli(*argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(list(argv))
    return code, out.getvalue()


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.dir, name)

    def write_json(self, name, data):
        with open(self.path(name), 'w') as f:
            json.dump(data, f, indent=2)
        return self.path(name)

    def write_voice(self, name, seconds=20):
        voice = VoiceSynth(seed=8)
        samples = np.concatenate([voice.segment(i).samples for i in range(seconds)])
        write_wav(self.path(name), samples, 8000)
        return self.path(name)


class TestRunCommand(CliTestCase):

    def test_bundled_scenarios_exit_as_documented(self):
        scenarios = bundled_scenarios()
        self.assertGreaterEqual(len(scenarios), 9)
        for name, expected in scenarios:
            with self.subTest(scenario=name):
                code, out = run_cli('run', os.path.join(CONFIG_DIR, name), '-o', self.dir)
                self.assertEqual(code, expected, out)
                stem = name[:-len('.json')]
                self.assertTrue(os.path.exists(self.path(f"{stem}_report.json")))
                for direction in Session.DIRECTIONS:
                    self.assertTrue(os.path.exists(self.path(f"{stem}_trace_{direction}.csv")))

    def test_report_file_contents(self):
        code, _ = run_cli('run', os.path.join(CONFIG_DIR, 'tamper.json'), '-o', self.dir)
        self.assertEqual(code, Session.EXIT_STOPPED_CRITICAL)
        with open(self.path('tamper_report.json')) as f:
            report = json.load(f)
        self.assertEqual(report['termination'], 'stopped_critical')
        self.assertEqual(report['stopped_at_s'], 26.0)
        self.assertEqual(report['detection_latency_s'], 26.0)
        self.assertEqual(report['directions']['caller_to_callee']['tokens']['mismatched'], 4)

    def test_bundled_scenario_by_name(self):
        for name in ('tamper', 'tamper.json'):
            with self.subTest(name=name):
                code, _ = run_cli('run', name, '-o', self.dir)
                self.assertEqual(code, Session.EXIT_STOPPED_CRITICAL)
                self.assertTrue(os.path.exists(self.path('tamper_report.json')))
        self.assertEqual(run_cli('run', 'no_such_scenario', '-o', self.dir)[0], Session.EXIT_CONFIG_ERROR)

    def test_unknown_key(self):
        path = self.path('bad.json')
        with open(path, 'w') as f:
            f.write('{\n  "capacity": 48,\n  "bogus_key": 1\n}\n')
        code, _ = run_cli('run', path, '-o', self.dir)
        self.assertEqual(code, Session.EXIT_CONFIG_ERROR)

    def test_invalid_json(self):
        path = self.path('broken.json')
        with open(path, 'w') as f:
            f.write('{"capacity": 48,')
        self.assertEqual(run_cli('run', path)[0], Session.EXIT_CONFIG_ERROR)

    def test_bad_values(self):
        for data in ({'initial_x': 3, 'critical_a': 3}, {'capacity': 'turbo'}, {'ber': 2.0},
                     {'use_pass': True}, {'attacks': [{'action': 'jam'}]},
                     {'message_count': 'six'}):
            with self.subTest(data=data):
                path = self.write_json('values.json', data)
                self.assertEqual(run_cli('run', path, '-o', self.dir)[0], Session.EXIT_CONFIG_ERROR)

    def test_missing_scenario(self):
        self.assertEqual(run_cli('run', self.path('nope.json'))[0], Session.EXIT_CONFIG_ERROR)

    def test_zero_messages_is_setup_error(self):
        path = self.write_json('empty.json', {'message_count': 0, 'conversation_seconds': 10})
        self.assertEqual(run_cli('run', path, '-o', self.dir)[0], Session.EXIT_CONFIG_ERROR)


class TestEmbedExtract(CliTestCase):

    def setUp(self):
        super().setUp()
        self.spec = self.write_json('tokens.json', {
            'capacity': 48,
            'seed': 5,
            'messages': ['INVITE sip:bob@voip.example SIP/2.0', 'ACK sip:bob@voip.example SIP/2.0'],
        })

    def test_roundtrip(self):
        voice = self.write_voice('voice.wav')
        marked = self.path('marked.wav')
        self.assertEqual(run_cli('embed', voice, self.spec, marked)[0], 0)
        code, out = run_cli('extract', marked, '--spec', self.spec)
        self.assertEqual(code, 0)
        _, _, tokens = load_token_spec(self.spec, 8000)
        self.assertEqual(out.splitlines(), [t.describe() for t in tokens] + ['dropped frames: 0'])

    def test_audio_keeps_length_and_tail(self):
        samples = VoiceSynth(seed=8).segment(0).samples
        source = np.concatenate([samples] * 3 + [samples[:500]])
        write_wav(self.path('odd.wav'), source, 8000)
        run_cli('embed', self.path('odd.wav'), self.spec, self.path('odd_marked.wav'))
        marked, rate = read_wav(self.path('odd_marked.wav'))
        self.assertEqual(rate, 8000)
        self.assertEqual(marked.size, source.size)
        np.testing.assert_array_equal(marked[-500:], source[-500:])
        self.assertLessEqual(int(np.max(np.abs(marked.astype(np.int32) - source))), 1)

    def test_unmarked_audio(self):
        code, out = run_cli('extract', self.write_voice('plain.wav', seconds=8))
        self.assertEqual(code, 0)
        self.assertEqual(out.splitlines(), ['dropped frames: 0'])

    def test_corrupted_carrier_drops_first_frame(self):
        voice = self.write_voice('voice.wav')
        marked = self.path('marked.wav')
        run_cli('embed', voice, self.spec, marked)
        samples, rate = read_wav(marked)
        samples = samples.copy()
        # stream bit 100 = segment 2, carrier 4
        samples[2 * 8000 + ChannelConfig(capacity=48).carrier_positions()[4]] ^= 1
        write_wav(marked, samples, rate)
        _, out = run_cli('extract', marked, '--spec', self.spec)
        _, _, tokens = load_token_spec(self.spec, 8000)
        lines = out.splitlines()
        self.assertEqual(lines[:-1], [tokens[1].describe()])
        self.assertNotEqual(lines[-1], 'dropped frames: 0')

    def test_explicit_tokens(self):
        spec = self.write_json('explicit.json', {
            'capacity': 'robust', 'hash_name': 'blake2s-32',
            'tokens': [{'digest': 'deadbeef', 'nonce': '0000002a'}],
        })
        _, primitive, tokens = load_token_spec(spec, 8000)
        self.assertEqual(primitive.bits, 32)
        self.assertEqual(tokens[0].describe(), 'deadbeef 0000002a')
        voice = self.write_voice('long.wav', seconds=90)
        run_cli('embed', voice, spec, self.path('long_marked.wav'))
        _, out = run_cli('extract', self.path('long_marked.wav'), '--spec', spec)
        self.assertEqual(out.splitlines()[0], 'deadbeef 0000002a')

    def test_wrong_digest_width(self):
        spec = self.write_json('short.json', {'tokens': [{'digest': 'abcd', 'nonce': 1}]})
        code, _ = run_cli('embed', self.write_voice('v.wav', 2), spec, self.path('o.wav'))
        self.assertEqual(code, Session.EXIT_CONFIG_ERROR)

    def test_stereo_input(self):
        path = self.path('stereo.wav')
        with wave.open(path, 'wb') as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(8000)
            wf.writeframes(b'\x00' * 4000)
        self.assertEqual(run_cli('extract', path)[0], Session.EXIT_FORMAT_ERROR)
        self.assertEqual(run_cli('embed', path, self.spec, self.path('o.wav'))[0], Session.EXIT_FORMAT_ERROR)


class TestReportCommand(CliTestCase):

    def test_summarizes_trace(self):
        run_cli('run', os.path.join(CONFIG_DIR, 'strip.json'), '-o', self.dir)
        code, out = run_cli('report', self.path('strip_trace_caller_to_callee.csv'))
        self.assertEqual(code, 0)
        self.assertIn('Termination: stopped_timeout', out)
        self.assertIn('no_token: 4', out)

    def test_malformed_trace(self):
        path = self.path('trace.csv')
        with open(path, 'w') as f:
            f.write("slot_index,outcome,lot,timer,status\n0,init,five,0,running\n")
        self.assertEqual(run_cli('report', path)[0], Session.EXIT_CONFIG_ERROR)


if __name__ == '__main__':
    unittest.main()
