import hashlib
import unittest
import numpy as np
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'code'))

from errors import ContractError, EmptyBufferError, FramingError, NonceExhaustedError, OrderingError
from token_core import (DigestPrimitive, Direction, Nonce, NonceGenerator, NONCE_SPACE,
                        SignalingBuffer, SignalingMessage, Token, TokenOptions, buffer_next,
                        buffer_peek, buffer_push, build_token, deserialize_token, encode_options,
                        expected_token, hash_message, next_nonce, serialize_token)
from voice_features import VoiceFeature


def msg(seq, payload=b'INVITE sip:bob@voip.example', direction=Direction.SENT):
    return SignalingMessage(seq, direction, payload, captured_at=seq * 40)


class TestSignalingBuffer(unittest.TestCase):

    def test_push_and_next_in_order(self):
        buf = SignalingBuffer()
        for seq in (0, 2, 4):
            buf = buffer_push(buf, msg(seq))
        seen = []
        for _ in range(3):
            m, buf = buffer_next(buf)
            seen.append(m.seq)
        self.assertEqual(seen, [0, 2, 4])
        self.assertTrue(buf.exhausted)

    def test_reads_after_exhaustion_return_last(self):
        buf = buffer_push(buffer_push(SignalingBuffer(), msg(0)), msg(1))
        _, buf = buffer_next(buf)
        _, buf = buffer_next(buf)
        for _ in range(3):
            m, buf = buffer_next(buf)
            self.assertEqual(m.seq, 1)
        self.assertEqual(buf.cursor, 2)

    def test_single_message_repeats(self):
        buf = buffer_push(SignalingBuffer(), msg(7))
        first, buf = buffer_next(buf)
        second, buf = buffer_next(buf)
        self.assertEqual(first, second)

    def test_peek_leaves_cursor(self):
        buf = buffer_push(buffer_push(SignalingBuffer(), msg(0)), msg(1))
        self.assertEqual(buffer_peek(buf).seq, 0)
        self.assertEqual(buf.cursor, 0)

    def test_empty_buffer(self):
        with self.assertRaises(EmptyBufferError):
            buffer_next(SignalingBuffer())
        with self.assertRaises(EmptyBufferError):
            buffer_peek(SignalingBuffer())

    def test_out_of_order_push(self):
        buf = buffer_push(SignalingBuffer(), msg(3))
        with self.assertRaises(OrderingError):
            buffer_push(buf, msg(3))
        with self.assertRaises(OrderingError):
            buffer_push(buf, msg(1))

    def test_directions_ordered_independently(self):
        buf = buffer_push(SignalingBuffer(), msg(3, direction=Direction.SENT))
        buf = buffer_push(buf, msg(1, direction=Direction.RECEIVED))
        self.assertEqual(len(buf), 2)

    def test_message_validation(self):
        with self.assertRaises(ContractError):
            SignalingMessage(0, Direction.SENT, b'')
        with self.assertRaises(ContractError):
            SignalingMessage(-1, Direction.SENT, b'x')


class TestNonceGenerator(unittest.TestCase):

    def test_unique_within_session(self):
        gen = NonceGenerator.seeded(42)
        values = set()
        for _ in range(5000):
            nonce, gen = next_nonce(gen)
            values.add(nonce.value)
        self.assertEqual(len(values), 5000)

    def test_seeded_is_replayable(self):
        a, b = NonceGenerator.seeded(9), NonceGenerator.seeded(9)
        for _ in range(10):
            na, a = next_nonce(a)
            nb, b = next_nonce(b)
            self.assertEqual(na, nb)

    def test_wraps_modulo_space(self):
        gen = NonceGenerator(offset=NONCE_SPACE - 1)
        first, gen = next_nonce(gen)
        second, gen = next_nonce(gen)
        self.assertEqual(first.value, NONCE_SPACE - 1)
        self.assertEqual(second.value, 0)

    def test_exhaustion(self):
        gen = NonceGenerator(offset=0, issued=NONCE_SPACE)
        with self.assertRaises(NonceExhaustedError):
            next_nonce(gen)

    def test_fresh_in_range(self):
        nonce, _ = next_nonce(NonceGenerator.fresh())
        self.assertTrue(0 <= nonce.value < NONCE_SPACE)


class TestTokenAssembly(unittest.TestCase):

    def setUp(self):
        self.message = msg(0)
        self.nonce = Nonce(0x01020304)

    def test_signaling_only_digest_formula(self):
        opts = TokenOptions()
        token = build_token(hash_message(self.message), opts, self.nonce)
        inner = hashlib.sha256(self.message.payload).digest()
        expected = hashlib.sha256(inner + bytes([1, 2, 3, 4])).digest()
        self.assertEqual(token.digest, expected)
        self.assertEqual(token.nonce, self.nonce)
        self.assertEqual(token.width, 288)

    def test_all_options_digest_formula(self):
        opts = TokenOptions(use_ts=True, ts=1136073600000, use_pass=True, password=b'pw',
                            use_id=True, id=b'alice', protect_voice=True)
        vf = VoiceFeature((12, 3, 0))
        token = build_token(hash_message(self.message), opts, self.nonce, vf)
        options = (b'\x01\x00\x08' + (1136073600000).to_bytes(8, 'big')
                   + b'\x02\x00\x02pw' + b'\x03\x00\x05alice')
        self.assertEqual(encode_options(opts), options)
        material = (hashlib.sha256(self.message.payload).digest() + options
                    + bytes([1, 2, 3, 4]) + bytes([0xC3, 0x00]))
        self.assertEqual(token.digest, hashlib.sha256(material).digest())

    def test_voice_only_mode(self):
        opts = TokenOptions(protect_voice=True, protect_signaling=False)
        vf = VoiceFeature((5, 6))
        token = build_token(None, opts, self.nonce, vf)
        expected = hashlib.sha256(bytes([1, 2, 3, 4, 0x56])).digest()
        self.assertEqual(token.digest, expected)

    def test_nothing_protected_rejected(self):
        with self.assertRaises(ContractError):
            TokenOptions(protect_signaling=False)

    def test_voice_feature_presence_must_match_flag(self):
        digest = hash_message(self.message)
        with self.assertRaises(ContractError):
            build_token(digest, TokenOptions(protect_voice=True), self.nonce)
        with self.assertRaises(ContractError):
            build_token(digest, TokenOptions(), self.nonce, VoiceFeature((1,)))

    def test_option_presence_checked(self):
        with self.assertRaises(ContractError):
            TokenOptions(use_pass=True)
        with self.assertRaises(ContractError):
            TokenOptions(use_ts=False, ts=5)

    def test_oversized_option(self):
        opts = TokenOptions(use_pass=True, password=b'x' * 70000)
        with self.assertRaises(ContractError):
            encode_options(opts)

    def test_distinct_nonces_give_distinct_tokens(self):
        digest = hash_message(self.message)
        a = build_token(digest, TokenOptions(), Nonce(1))
        b = build_token(digest, TokenOptions(), Nonce(2))
        self.assertNotEqual(a.digest, b.digest)

    def test_id_option_changes_digest(self):
        digest = hash_message(self.message)
        a = build_token(digest, TokenOptions(use_id=True, id=b'alice'), self.nonce)
        b = build_token(digest, TokenOptions(use_id=True, id=b'mallory'), self.nonce)
        self.assertNotEqual(a, b)

    def test_with_id_noop_when_disabled(self):
        opts = TokenOptions()
        self.assertIs(opts.with_id(b'bob'), opts)


class TestExpectedToken(unittest.TestCase):

    def test_matches_honest_sender(self):
        sent = msg(2, b'200 OK')
        received = SignalingMessage(2, Direction.RECEIVED, b'200 OK')
        opts = TokenOptions(use_id=True, id=b'alice', use_pass=True, password=b'pw')
        token = build_token(hash_message(sent), opts, Nonce(77))
        self.assertEqual(expected_token(received, opts, Nonce(77)), token)

    def test_single_byte_edit_mismatches(self):
        opts = TokenOptions()
        token = build_token(hash_message(msg(0, b'ACK')), opts, Nonce(5))
        tampered = SignalingMessage(0, Direction.RECEIVED, b'BCK')
        self.assertNotEqual(expected_token(tampered, opts, Nonce(5)), token)

    def test_missing_message(self):
        with self.assertRaises(ContractError):
            expected_token(None, TokenOptions(), Nonce(1))

    def test_voice_feature_difference_mismatches(self):
        opts = TokenOptions(protect_voice=True)
        digest = hash_message(msg(0))
        token = build_token(digest, opts, Nonce(1), VoiceFeature((9, 9)))
        self.assertNotEqual(expected_token(msg(0), opts, Nonce(1), VoiceFeature((9, 8))), token)
        self.assertEqual(expected_token(msg(0), opts, Nonce(1), VoiceFeature((9, 9))), token)


def reference_digest(payload, opts, nonce, codes=None):
    """Token digest computed straight from hashlib."""
    options = b''
    for tag, flag, value in ((1, opts.use_ts, opts.ts.to_bytes(8, 'big') if opts.use_ts else b''),
                             (2, opts.use_pass, opts.password),
                             (3, opts.use_id, opts.id)):
        if flag:
            options += bytes([tag]) + len(value).to_bytes(2, 'big') + value
    material = hashlib.sha256(payload).digest() + options + nonce.value.to_bytes(4, 'big')
    if codes is not None:
        padded = list(codes) + [0] * (len(codes) % 2)
        material += bytes((padded[i] << 4) | padded[i + 1] for i in range(0, len(padded), 2))
    return hashlib.sha256(material).digest()


class TestTokenProperties(unittest.TestCase):

    def test_any_single_byte_edit_changes_token(self):
        rng = np.random.default_rng(101)
        opts = TokenOptions()
        for _ in range(1000):
            payload = rng.bytes(int(rng.integers(1, 200)))
            nonce = Nonce(int(rng.integers(0, NONCE_SPACE)))
            token = build_token(hash_message(msg(0, payload)), opts, nonce)
            edited = bytearray(payload)
            edited[int(rng.integers(0, len(payload)))] ^= int(rng.integers(1, 256))
            received = SignalingMessage(0, Direction.RECEIVED, bytes(edited))
            self.assertNotEqual(expected_token(received, opts, nonce), token)

    def test_matches_hashlib_reference(self):
        rng = np.random.default_rng(202)
        for _ in range(100):
            use_ts, use_pass, use_id, protect_voice = (bool(b) for b in rng.integers(0, 2, 4))
            opts = TokenOptions(use_ts=use_ts, ts=int(rng.integers(0, 1 << 62)) if use_ts else None,
                                use_pass=use_pass,
                                password=rng.bytes(int(rng.integers(1, 24))) if use_pass else None,
                                use_id=use_id, id=rng.bytes(int(rng.integers(1, 24))) if use_id else None,
                                protect_voice=protect_voice)
            payload = rng.bytes(int(rng.integers(1, 300)))
            nonce = Nonce(int(rng.integers(0, NONCE_SPACE)))
            codes = tuple(int(c) for c in rng.integers(0, 16, int(rng.integers(0, 60)))) if protect_voice else None
            vf = VoiceFeature(codes) if protect_voice else None
            token = build_token(hash_message(msg(0, payload)), opts, nonce, vf)
            self.assertEqual(token.digest, reference_digest(payload, opts, nonce, codes))
            self.assertEqual(token.nonce, nonce)

    def test_tokens_stay_distinct_after_buffer_exhaustion(self):
        buf = SignalingBuffer()
        for seq in (0, 2, 4):
            buf = buffer_push(buf, msg(seq, f"message {seq}".encode()))
        gen = NonceGenerator.seeded(11)
        digests, seqs = set(), []
        for _ in range(50):
            message, buf = buffer_next(buf)
            nonce, gen = next_nonce(gen)
            digests.add(build_token(hash_message(message), TokenOptions(), nonce).digest)
            seqs.append(message.seq)
        self.assertEqual(len(digests), 50)
        self.assertEqual(seqs[:3], [0, 2, 4])
        self.assertEqual(set(seqs[3:]), {4})


class TestSerialization(unittest.TestCase):

    def test_layout_is_digest_then_nonce(self):
        token = Token(bytes(range(32)), Nonce(0xDEADBEEF))
        bits = serialize_token(token)
        self.assertEqual(bits.size, 288)
        self.assertEqual(np.packbits(bits).tobytes(), bytes(range(32)) + bytes.fromhex('deadbeef'))
        self.assertEqual(deserialize_token(bits), token)

    def test_reduced_digest_profile(self):
        primitive = DigestPrimitive('blake2s-32')
        self.assertEqual(primitive.bits, 32)
        token = Token(primitive.digest(b'x'), Nonce(3))
        self.assertEqual(deserialize_token(serialize_token(token), 32), token)

    def test_wrong_width(self):
        with self.assertRaises(FramingError):
            deserialize_token(np.zeros(287, dtype=np.uint8))

    def test_describe(self):
        token = Token(b'\xab' * 4, Nonce(10))
        self.assertEqual(token.describe(), 'abababab 0000000a')


class TestDigestPrimitive(unittest.TestCase):

    def test_default_is_sha256(self):
        self.assertEqual(DigestPrimitive().bits, 256)

    def test_unknown_name(self):
        with self.assertRaises(ContractError):
            DigestPrimitive('no-such-hash')
        with self.assertRaises(ContractError):
            DigestPrimitive('blake2s-12')


if __name__ == '__main__':
    unittest.main()
