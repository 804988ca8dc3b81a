# -*- coding: utf-8 -*-
import numpy as np
import pytest

from relay.keycore import KEY_BITS, KEY_BYTES, KeyStatus, KeyTable, TableScope, available, table_digest
from relay.qkdlink import (
    QIX_FRAME_SIZE,
    CycleOutput,
    DeliveryMode,
    DisturbanceWindow,
    EmitterState,
    FeedState,
    FileSink,
    LinkEmulator,
    LinkEndpoint,
    MemorySink,
    QixStatus,
    UpdateKind,
    default_profiles,
    detect_update,
    emit_delivery,
    encode_qix_frame,
    link_rng,
    parse_qix_frame,
    sample_cycle,
    scan_qix_stream,
)
from utils.error_handler import BadCrc, BadMagic, FrameError


def _endpoints(link: int, sinks):
    profile = default_profiles()[link]
    return [LinkEndpoint(link, side, sink, KeyTable(TableScope.quantum_link(link)), profile.delivery)
            for side, sink in zip(("left", "right"), sinks)]


# ---- 成码采样 ---- #
def test_fixed_rate_link_delivers_one_key_per_cycle():
    profile = default_profiles()[1]
    cycle = sample_cycle(profile, [], 0.0, link_rng(7, 1))
    assert cycle.skr_bps == 128.0
    assert cycle.key_bits.size == KEY_BITS
    assert 0.0 <= cycle.qber_pct < 50.0


def test_disturbance_window_scales_and_adds_qber():
    profile = default_profiles()[1]
    window = DisturbanceWindow(1, 10.0, 20.0, qber_add_pct=20.0, skr_scale=0.5)
    inside = sample_cycle(profile, [window], 12.0, link_rng(7, 1))
    outside = sample_cycle(profile, [window], 20.0, link_rng(7, 1))
    assert inside.skr_bps == 64.0
    assert inside.key_bits.size == KEY_BITS // 2
    assert inside.qber_pct > outside.qber_pct
    assert outside.skr_bps == 128.0


def test_qber_stays_below_fifty():
    profile = default_profiles()[2]
    window = DisturbanceWindow(2, 0.0, 100.0, qber_add_pct=60.0)
    rng = link_rng(3, 2)
    for step in range(20):
        cycle = sample_cycle(profile, [window], float(step), rng)
        assert 0.0 <= cycle.qber_pct < 50.0
        assert cycle.skr_bps >= 0.0


def test_link_rng_streams_are_reproducible():
    a = link_rng(7, 2).integers(0, 1 << 30, 5)
    b = link_rng(7, 2).integers(0, 1 << 30, 5)
    c = link_rng(7, 3).integers(0, 1 << 30, 5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---- QIX 帧 ---- #
def test_qix_frame_fields():
    key = bytes(range(KEY_BYTES))
    frame = encode_qix_frame(9, key, QixStatus.COMPROMISED)
    assert len(frame) == QIX_FRAME_SIZE
    parsed = parse_qix_frame(frame)
    assert (parsed.key_id, parsed.key_bits, parsed.status) == (9, key, QixStatus.COMPROMISED)


def test_qix_frame_errors():
    frame = bytearray(encode_qix_frame(1, bytes(KEY_BYTES)))
    with pytest.raises(BadMagic):
        parse_qix_frame(b"XYZ" + bytes(frame[3:]))
    with pytest.raises(FrameError):
        parse_qix_frame(bytes(frame[:20]))
    frame[10] ^= 0xFF
    with pytest.raises(BadCrc):
        parse_qix_frame(bytes(frame))


def test_scan_resynchronises_after_damage():
    good = [encode_qix_frame(n, bytes([n]) * KEY_BYTES) for n in range(3)]
    damaged = bytearray(good[1])
    damaged[20] ^= 0x01
    stream = b"\x00\x01" + good[0] + bytes(damaged) + good[2] + good[0][:10]
    frames, consumed, errors = scan_qix_stream(stream)
    assert [f.key_id for f in frames] == [0, 2]
    assert consumed == len(stream) - 10
    assert any(isinstance(e, BadCrc) for e in errors)
    assert any(isinstance(e, BadMagic) for e in errors)


# ---- 变化检测 ---- #
def test_detect_update_append_and_rewrite():
    sink = MemorySink("f")
    state = FeedState(DeliveryMode.APPEND_FILE)
    assert detect_update(state, sink.observe()).kind is UpdateKind.NO_CHANGE

    sink.append(b"ab\n")
    update = detect_update(state, sink.observe())
    assert update.kind is UpdateKind.APPENDED and update.data == b"ab\n"

    sink.append(b"cd\n")
    update = detect_update(update.state, sink.observe())
    assert update.kind is UpdateKind.APPENDED and update.data == b"cd\n"

    sink.replace(b"ab\ncd\nef\n")
    update = detect_update(update.state, sink.observe())
    assert update.kind is UpdateKind.REWRITTEN

    edited = MemorySink("g")
    edited.append(b"xy\n")
    first = detect_update(FeedState(DeliveryMode.APPEND_FILE), edited.observe())
    edited.content[0:1] = b"z"
    assert detect_update(first.state, edited.observe()).kind is UpdateKind.REWRITTEN


# ---- 交付与入表 ---- #
def test_emulator_fills_both_ends_identically():
    sinks = [MemorySink("A"), MemorySink("B")]
    emulator = LinkEmulator(default_profiles()[1], sinks, seed=7)
    left, right = _endpoints(1, sinks)
    for step in range(5):
        emulator.step(2.0 * (step + 1))
        left.poll()
        right.poll()
    assert len(left.table.records) == 5
    assert table_digest(left.table) == table_digest(right.table)
    assert emulator.bits_delivered == 5 * KEY_BITS
    assert left.table.ingested_bits_total == emulator.bits_delivered


@pytest.mark.parametrize("link", [2, 3])
def test_file_delivery_modes_agree_on_both_ends(link):
    sinks = [MemorySink("A"), MemorySink("B")]
    profile = default_profiles()[link]
    emulator = LinkEmulator(profile, sinks, seed=11)
    left, right = _endpoints(link, sinks)
    for step in range(4):
        emulator.step(profile.cycle_period_s * (step + 1))
        left.poll()
        right.poll()
    assert len(left.table.records) > 0
    assert table_digest(left.table) == table_digest(right.table)
    assert left.table.ingested_bits_total + left.counters.skipped_bits == emulator.bits_delivered
    if profile.delivery is DeliveryMode.REWRITE_FILE:
        assert left.counters.rewrites == 4


def test_compromised_cycle_marks_packets():
    sinks = [MemorySink("A")]
    emulator = LinkEmulator(default_profiles()[1], sinks, seed=7)
    emulator.forced_qber_pct = 20.0
    emulator.step(2.0)
    endpoint = _endpoints(1, sinks)[0]
    endpoint.poll()
    assert endpoint.counters.compromised_ingested == 1
    assert available(endpoint.table) == 0
    assert endpoint.table.count(KeyStatus.COMPROMISED) == 1


def test_write_failure_retried_next_cycle():
    profile = default_profiles()[2]
    sink = MemorySink("A")
    state = EmitterState()
    sink.fail_next_writes = 1
    bits = np.ones(2 * KEY_BITS, dtype=np.uint8)
    assert emit_delivery(profile, CycleOutput(bits, 1.0, 1000.0), sink, state) == 0
    assert state.write_failures == 1
    assert sink.observe().length == 0
    assert emit_delivery(profile, CycleOutput(bits, 1.0, 1000.0), sink, state) == 4
    assert sink.content.count(b"\n") == 4
    assert state.bits_delivered == 4 * KEY_BITS


def test_corrupt_line_counted_and_skipped():
    sink = MemorySink("A")
    sink.append(b"00" * KEY_BYTES + b"\nnot-hex\n" + b"ff" * KEY_BYTES + b"\n")
    endpoint = LinkEndpoint(2, "left", sink, KeyTable(TableScope.quantum_link(2)), DeliveryMode.APPEND_FILE)
    records = endpoint.poll()
    assert len(records) == 2
    assert endpoint.counters.corrupt_lines == 1
    assert endpoint.counters.skipped_bits == KEY_BITS


def test_partial_line_waits_for_newline():
    sink = MemorySink("A")
    line = b"ab" * KEY_BYTES + b"\n"
    endpoint = LinkEndpoint(2, "left", sink, KeyTable(TableScope.quantum_link(2)), DeliveryMode.APPEND_FILE)
    sink.append(line[:20])
    assert endpoint.poll() == []
    sink.append(line[20:])
    assert len(endpoint.poll()) == 1


def test_file_sink_round_trip(tmp_path):
    sink = FileSink(str(tmp_path / "feeds" / "link2_A.keys"))
    assert sink.observe().length == 0
    sink.append(b"ab\n")
    sink.publish_stats(1310.0, 3.9)
    first = sink.observe()
    assert first.content == b"ab\n"
    assert sink.read_stats() == {"skr_bps": 1310.0, "qber_pct": 3.9}
    sink.replace(b"ab\ncd\n")
    assert sink.observe().content == b"ab\ncd\n"


def test_emulator_snapshot_restores_rng():
    profile = default_profiles()[2]
    original = LinkEmulator(profile, [MemorySink("A")], seed=5)
    original.step(1.0)
    saved = original.snapshot()
    expected = original.step(2.0)

    resumed = LinkEmulator(profile, [MemorySink("A")], seed=5)
    resumed.restore(saved)
    again = resumed.step(2.0)
    assert np.array_equal(expected.key_bits, again.key_bits)
    assert resumed.cycles == original.cycles


@pytest.mark.parametrize("link", [1, 2, 3])
@pytest.mark.parametrize("seed", [7, 8])
def test_long_run_statistics_match_profile(link, seed):
    profile = default_profiles()[link]
    emulator = LinkEmulator(profile, [], seed=seed)
    cycles = [emulator.step(profile.cycle_period_s * (step + 1)) for step in range(2_000)]
    skr = np.array([cycle.skr_bps for cycle in cycles])
    qber = np.array([cycle.qber_pct for cycle in cycles])

    assert skr.mean() == pytest.approx(profile.skr_mean_bps, rel=0.10)
    assert qber.mean() == pytest.approx(profile.qber_mean_pct, rel=0.10)
    assert qber.std(ddof=1) == pytest.approx(profile.qber_std_pct, rel=0.10)
    if profile.skr_std_bps > 0:
        assert skr.std(ddof=1) == pytest.approx(profile.skr_std_bps, rel=0.10)
    else:
        assert skr.std() == 0.0
    assert emulator.bits_generated == sum(cycle.key_bits.size for cycle in cycles)
