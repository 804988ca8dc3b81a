# -*- coding: utf-8 -*-
import hashlib

import numpy as np
import pytest

from relay.keycore import KEY_BYTES, KeyStatus, KeyTable, NetworkKeySource, TableScope, available, table_digest
from relay.qkdlink import DeliveryMode, LinkEndpoint, MemorySink
from relay.relayproto import (
    EdgeNode,
    Fault,
    NetworkManagerNode,
    NodeRole,
    RoleKind,
    TransferPolicy,
    TrustedNode,
    create_node,
    nm_trigger,
)
from relay.wire import MsgType, PeerChannel
from utils.error_handler import KeyExhausted

ROUTES = {
    ("NM", "right"): ("TN1", "left"),
    ("TN1", "left"): ("NM", "right"),
    ("TN1", "right"): ("EN", "left"),
    ("EN", "left"): ("TN1", "right"),
    ("TN1", "nm"): ("NM", "report:TN1"),
    ("EN", "nm"): ("NM", "report:EN"),
}


def _psk(name: str) -> bytes:
    return hashlib.sha256(name.encode("utf-8")).digest()


def _channels(**names):
    return {local: PeerChannel(shared, _psk(shared)) for local, shared in names.items()}


class Chain:
    """NM - TN1 - EN 三节点链，链路用内存文件预先填好密钥"""

    def __init__(self, keys_per_link: int = 80, seed: int = 5):
        rng = np.random.default_rng(seed)
        self.sinks = {}
        for link in (1, 2):
            content = b"".join(rng.integers(0, 256, KEY_BYTES, dtype=np.uint8).tobytes().hex().encode() + b"\n"
                               for _ in range(keys_per_link))
            ends = (MemorySink(f"link{link}_A"), MemorySink(f"link{link}_B"))
            for sink in ends:
                sink.append(content)
            self.sinks[link] = ends

        policy = TransferPolicy(60, 20)
        self.nm = NetworkManagerNode(
            "NM", NodeRole(RoleKind.NETWORK_MANAGER, None, 1), policy,
            _channels(right="pair:NM-TN1", **{"report:TN1": "report:TN1", "report:EN": "report:EN"}),
            {"right": self._endpoint(1, 0)},
            nk_source=NetworkKeySource.from_seed_text("chain"), link_reporters={2: "TN1"})
        self.tn1 = TrustedNode(
            "TN1", NodeRole(RoleKind.TRUSTED_NODE, 1, 2), policy,
            _channels(left="pair:NM-TN1", right="pair:TN1-EN", nm="report:TN1"),
            {"left": self._endpoint(1, 1), "right": self._endpoint(2, 0)})
        self.en = EdgeNode(
            "EN", NodeRole(RoleKind.EDGE_NODE, 2, None), policy,
            _channels(left="pair:TN1-EN", nm="report:EN"),
            {"left": self._endpoint(2, 1)})
        self.nodes = {"NM": self.nm, "TN1": self.tn1, "EN": self.en}
        self.dropped = []

    def _endpoint(self, link: int, end: int) -> LinkEndpoint:
        return LinkEndpoint(link, "AB"[end], self.sinks[link][end],
                            KeyTable(TableScope.quantum_link(link)), DeliveryMode.APPEND_FILE)

    def deliver(self, source: str, outbound, now: float, drop=None) -> None:
        for out in outbound:
            if drop is not None and drop(source, out):
                self.dropped.append(out)
                continue
            dest, channel = ROUTES[(source, out.channel)]
            self.deliver(dest, self.nodes[dest].receive(channel, out.frame, now), now, drop)

    def poll_all(self, now: float) -> None:
        for node_id, node in self.nodes.items():
            self.deliver(node_id, node.poll(now), now)

    def run_batch(self, now: float = 1.0, drop=None) -> None:
        self.poll_all(now)
        self.deliver("TN1", self.tn1.report(now), now, drop)


def test_nm_trigger_rule():
    policy = TransferPolicy(60, 20)
    assert nm_trigger({1: 80, 2: 70, 3: 95}, policy) == 50
    assert nm_trigger({1: 60, 2: 60}, policy) == 40
    assert nm_trigger({1: 59, 2: 300}, policy) is None
    with pytest.raises(ValueError):
        nm_trigger({}, policy)


@pytest.mark.parametrize("T,R", [(20, 20), (10, 20), (60, -1)])
def test_policy_requires_threshold_above_reserve(T, R):
    with pytest.raises(ValueError):
        TransferPolicy(T, R)


def test_role_validation():
    assert NodeRole(RoleKind.TRUSTED_NODE, 1, 2).validate() == []
    assert NodeRole(RoleKind.TRUSTED_NODE, 1, None).validate()
    assert NodeRole(RoleKind.NETWORK_MANAGER, 1, 2).validate()
    assert NodeRole(RoleKind.EDGE_NODE, None, 3).validate()


def test_create_node_by_role():
    chain = Chain()
    node = create_node("X", NodeRole(RoleKind.EDGE_NODE, 2, None), TransferPolicy(),
                       _channels(left="pair:TN1-EN"), {"left": chain._endpoint(2, 1)})
    assert isinstance(node, EdgeNode)


def test_batch_relays_network_keys_end_to_end():
    chain = Chain()
    chain.run_batch()

    batch = chain.nm.batches[0]
    assert batch.batch_id == 1
    assert batch.h == 60
    assert batch.counts == {1: 80, 2: 80}
    assert batch.status == "complete"
    assert batch.received == 60
    assert chain.nm.in_flight is None

    nm_nk, en_nk = chain.nm.nk_table, chain.en.nk_table
    assert len(en_nk.records) == 60
    assert table_digest(en_nk) == table_digest(nm_nk)
    assert table_digest(chain.tn1.nk_table) == table_digest(nm_nk)
    assert available(chain.en.nk_table) == 60
    assert nm_nk.count(KeyStatus.USED) == 60

    # 每条链路两端各消耗 60 个，剩余恰为 R
    assert available(chain.nm.link1) == 20
    assert available(chain.tn1.left) == 20
    assert available(chain.tn1.right) == 20
    assert available(chain.en.left) == 20
    assert chain.en.counters["transfers_completed"] == 1
    assert chain.nm.counters["transfers_completed"] == 1


def test_no_network_key_in_cleartext_on_the_wire():
    chain = Chain()
    chain.run_batch()
    secrets = [record.bits for record in chain.nm.nk_table.records]
    for node in chain.nodes.values():
        for row in node.wire_log:
            frame = bytes.fromhex(row["frame"])
            assert not any(secret in frame for secret in secrets)


def test_each_link_key_used_once_per_end():
    chain = Chain()
    chain.run_batch()
    for node in chain.nodes.values():
        consumed = [(e.scope, e.key_id) for e in node.ledger.entries if e.action in ("encrypt", "decrypt")]
        assert len(consumed) == len(set(consumed))


def test_tampered_ciphertext_fails_single_key():
    chain = Chain()
    chain.nm.faults = [Fault("tamper_ciphertext", 1, 1, 3)]
    chain.run_batch()

    batch = chain.nm.batches[0]
    assert batch.status == "complete"
    assert batch.received == 59
    assert batch.failed_indices == {3}
    stored = {record.key_id for record in chain.en.nk_table.records}
    assert len(stored) == 59
    assert 3 not in stored
    assert chain.tn1.counters["keys_failed"] == 1


def test_corrupted_frame_is_rejected_and_counted():
    chain = Chain()
    chain.nm.faults = [Fault("corrupt_frame", 1, 1, 0)]
    chain.run_batch()
    assert chain.tn1.channels["left"].counters.bad_auth == 1
    chain.deliver("TN1", chain.tn1.tick(40.0), 40.0)
    chain.deliver("EN", chain.en.tick(40.0), 40.0)
    batch = chain.nm.batches[0]
    assert batch.status == "complete"
    assert batch.received == 59
    assert chain.tn1.left.burned_total == 1


def test_lost_hop_burns_key_and_batch_times_out():
    chain = Chain()

    def drop_first_hop(source, out):
        return source == "NM" and out.message.msg_type is MsgType.KEY_HOP and out.message["index"] == 0

    chain.run_batch(drop=drop_first_hop)
    assert len(chain.dropped) == 1
    assert chain.nm.batches[0].status == "in_flight"
    assert chain.tn1.left.burned_total == 1
    assert chain.tn1.left.get(0).status is KeyStatus.USED

    chain.deliver("TN1", chain.tn1.tick(31.5), 31.5)
    chain.deliver("EN", chain.en.tick(31.5), 31.5)
    batch = chain.nm.batches[0]
    assert batch.status == "complete"
    assert batch.received == 59
    assert len(chain.en.nk_table.records) == 59


def test_replayed_hop_is_rejected():
    chain = Chain()
    captured = []

    def capture(source, out):
        if source == "NM" and out.message.msg_type is MsgType.KEY_HOP and out.message["index"] == 5:
            captured.append(out)
        return False

    chain.run_batch(drop=capture)
    assert chain.tn1.receive("left", captured[0].frame, 2.0) == []
    assert chain.tn1.channels["left"].counters.stale == 1
    decrypts = [e for e in chain.tn1.ledger.entries if e.action == "decrypt" and e.key_id == captured[0].message["qk_id"]]
    assert len(decrypts) == 1


def test_stale_reports_do_not_retrigger():
    chain = Chain()
    chain.run_batch()
    assert chain.nm.link_counts() is None
    chain.poll_all(2.0)
    chain.deliver("TN1", chain.tn1.report(2.0), 2.0)
    assert chain.nm.link_counts() == {1: 20, 2: 20}
    assert len(chain.nm.batches) == 1


def test_start_transfer_requires_link_keys():
    chain = Chain(keys_per_link=10)
    chain.poll_all(1.0)
    with pytest.raises(KeyExhausted):
        chain.nm.start_transfer(11, 1.0)
    assert chain.nm.batches == []
    assert chain.nm.channels["right"].send_sequence == 0


def test_reports_buffered_while_nm_unreachable():
    chain = Chain()
    chain.tn1.peer_down("nm", 2.0)
    assert chain.tn1.report(3.0) == []
    assert chain.tn1.report(4.0) == []
    assert chain.tn1.counters["reports_buffered"] == 2

    flushed = chain.tn1.peer_up("nm", 5.0)
    assert [out.message["timestamp_ns"] for out in flushed] == [3_000_000_000, 4_000_000_000]
    assert [out.message.sequence for out in flushed] == [1, 2]
    chain.deliver("TN1", flushed, 5.0)
    assert chain.nm.latest_reports["TN1"]["timestamp_ns"] == 4_000_000_000


def test_nm_waits_while_right_channel_down():
    chain = Chain()
    chain.nm.peer_down("right", 0.5)
    chain.run_batch()
    assert chain.nm.batches == []
    chain.nm.peer_up("right", 2.0)
    chain.deliver("NM", chain.nm.poll(2.0), 2.0)
    assert chain.nm.batches[0].status == "complete"


def test_node_snapshot_restores_sequences():
    chain = Chain()
    chain.run_batch()
    saved = chain.tn1.snapshot()
    fresh = Chain()
    fresh.tn1.restore(saved)
    assert fresh.tn1.channels["right"].send_sequence == chain.tn1.channels["right"].send_sequence
    assert fresh.tn1.channels["left"].last_received == chain.tn1.channels["left"].last_received
    assert fresh.tn1.counters["transfers_completed"] == 1
