# -*- coding: utf-8 -*-
import numpy as np
import pytest

from relay.wire import (
    HEADER_SIZE,
    MIN_FRAME_SIZE,
    MsgType,
    PeerChannel,
    StreamDecoder,
    WireMessage,
    decode_wire,
    encode_wire,
)
from utils.error_handler import BadAuthTag, BadLength, BadPayload, StaleSequence, WireError

PSK = bytes(range(32))
OTHER_PSK = bytes([7] * 32)


def _hop(sequence: int = 1, ciphertext: bytes = bytes(32)) -> WireMessage:
    return WireMessage(MsgType.KEY_HOP, sequence, dict(
        batch_id=1, index=0, nk_id=5, nk_digest=bytes(32), ciphertext=ciphertext, qk_id=9))


def test_key_hop_decodes_with_fields():
    frame = encode_wire(_hop(ciphertext=bytes([3] * 32)), PSK)
    msg = decode_wire(frame, PSK)
    assert msg.msg_type is MsgType.KEY_HOP
    assert msg.sequence == 1
    assert msg["nk_id"] == 5
    assert msg["ciphertext"] == bytes([3] * 32)
    assert int.from_bytes(frame[:4], "big") == len(frame)


def test_stats_report_payload():
    payload = dict(node_id="TN1", timestamp_ns=10 ** 18, available_nk=3, used_nk=1,
                   transfers_completed=2, keys_failed=0,
                   links=[dict(link_index=1, available_qk=40, used_qk=2, compromised_qk=0,
                               burned_qk=0, skr=128.0, qber=2.5)])
    msg = decode_wire(encode_wire(WireMessage(MsgType.STATS_REPORT, 4, payload), PSK), PSK)
    assert msg["links"][0]["available_qk"] == 40
    assert msg["links"][0]["qber"] == pytest.approx(2.5)
    assert msg["node_id"] == "TN1"


def test_wrong_key_and_tampering_rejected():
    frame = encode_wire(_hop(), PSK)
    with pytest.raises(BadAuthTag):
        decode_wire(frame, OTHER_PSK)
    damaged = bytearray(frame)
    damaged[HEADER_SIZE + 10] ^= 0x01
    with pytest.raises(BadAuthTag):
        decode_wire(bytes(damaged), PSK)


def test_length_checks():
    frame = encode_wire(_hop(), PSK)
    with pytest.raises(BadLength):
        decode_wire(frame[:MIN_FRAME_SIZE - 1], PSK)
    with pytest.raises(BadLength):
        decode_wire(frame + b"\x00", PSK)


def test_key_hop_blob_must_be_full_key():
    with pytest.raises(BadPayload):
        decode_wire(encode_wire(_hop(ciphertext=bytes(31)), PSK), PSK)


def test_stale_sequence_rejected():
    frame = encode_wire(_hop(sequence=3), PSK)
    assert decode_wire(frame, PSK, last_sequence=2).sequence == 3
    with pytest.raises(StaleSequence):
        decode_wire(frame, PSK, last_sequence=3)


def test_peer_channel_sequences_and_replay():
    left, right = PeerChannel("right", PSK), PeerChannel("left", PSK)
    first = left.encode(MsgType.TRANSFER_INIT, dict(batch_id=1, h=40))
    second = left.encode(MsgType.TRANSFER_ACK, dict(batch_id=1, forwarded=40, failed=0))
    assert right.decode(first)["h"] == 40
    assert right.decode(second).sequence == 2
    with pytest.raises(StaleSequence):
        right.decode(first)
    assert right.counters.stale == 1
    assert right.counters.received == 2
    assert right.snapshot() == {"send_sequence": 0, "last_received": 2}
    assert right.authenticates(first)
    assert not PeerChannel("x", OTHER_PSK).authenticates(first)


def test_peer_channel_rejects_short_psk():
    with pytest.raises(ValueError):
        PeerChannel("left", b"short")


def test_stream_decoder_reassembles_split_frames():
    frames = [encode_wire(_hop(sequence=n), PSK) for n in (1, 2)]
    data = b"".join(frames)
    decoder = StreamDecoder()
    assert decoder.feed(data[:10]) == []
    assert decoder.feed(data[10:len(frames[0]) + 5]) == [frames[0]]
    assert decoder.feed(data[len(frames[0]) + 5:]) == [frames[1]]


def test_stream_decoder_bad_length():
    with pytest.raises(BadLength):
        StreamDecoder().feed((3).to_bytes(4, "big") + b"\x00" * 8)


# ---- 随机报文 ---- #
NAME_CHARS = list("ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789:_")


def _text(rng, low=1, high=12):
    return "".join(rng.choice(NAME_CHARS, size=int(rng.integers(low, high))))


def _u(rng, bits):
    return int(rng.integers(0, 2 ** bits, dtype=np.uint64))


def _blob(rng):
    return rng.integers(0, 256, 32, dtype=np.uint8).tobytes()


def random_payload(msg_type, rng):
    if msg_type is MsgType.HELLO:
        return dict(node_id=_text(rng), channel=_text(rng))
    if msg_type is MsgType.STATS_REPORT:
        links = [dict(link_index=_u(rng, 8), available_qk=_u(rng, 32), used_qk=_u(rng, 32),
                      compromised_qk=_u(rng, 16), burned_qk=_u(rng, 16),
                      skr=float(rng.uniform(0, 1e4)), qber=float(rng.uniform(0, 12)))
                 for _ in range(int(rng.integers(0, 5)))]
        return dict(node_id=_text(rng), timestamp_ns=_u(rng, 63), available_nk=_u(rng, 32),
                    used_nk=_u(rng, 32), transfers_completed=_u(rng, 16), keys_failed=_u(rng, 16), links=links)
    if msg_type is MsgType.TRANSFER_INIT:
        return dict(batch_id=_u(rng, 64), h=_u(rng, 32))
    if msg_type is MsgType.KEY_HOP:
        return dict(batch_id=_u(rng, 64), index=_u(rng, 32), nk_id=_u(rng, 64),
                    nk_digest=_blob(rng), ciphertext=_blob(rng), qk_id=_u(rng, 64))
    if msg_type is MsgType.TRANSFER_ACK:
        return dict(batch_id=_u(rng, 64), forwarded=_u(rng, 32), failed=_u(rng, 32))
    if msg_type is MsgType.TRANSFER_COMPLETE:
        return dict(batch_id=_u(rng, 64), h=_u(rng, 32), received=_u(rng, 32))
    return dict(batch_id=_u(rng, 64), index=int(rng.integers(-1, 2 ** 31)), code=_text(rng), detail=_text(rng, 0, 40))


def test_random_messages_decode_unchanged():
    rng = np.random.default_rng(2024)
    kinds = list(MsgType)
    for n in range(1_000):
        msg_type = kinds[n % len(kinds)]
        psk = _blob(rng)
        msg = WireMessage(msg_type, _u(rng, 64), random_payload(msg_type, rng))
        decoded = decode_wire(encode_wire(msg, psk), psk)
        assert decoded.msg_type is msg_type
        assert decoded.sequence == msg.sequence
        assert decoded.payload == msg.payload


@pytest.mark.parametrize("msg_type", list(MsgType))
def test_every_single_bit_flip_rejected(msg_type):
    rng = np.random.default_rng(int(msg_type))
    frame = encode_wire(WireMessage(msg_type, 17, random_payload(msg_type, rng)), PSK)
    accepted = 0
    for bit in range(len(frame) * 8):
        damaged = bytearray(frame)
        damaged[bit // 8] ^= 1 << (bit % 8)
        try:
            decode_wire(bytes(damaged), PSK)
        except WireError:
            continue
        accepted += 1
    assert accepted == 0
