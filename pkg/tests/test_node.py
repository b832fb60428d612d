"""Node orchestration: the request flow, state replay, durability, TCP runtime."""

import time

import pytest

from powdb.chain import ChainParams
from powdb.contracts import ContractCache, cached_lookup, contract_id_for, execute
from powdb.node import (
    NodeConfig,
    NodeCore,
    NodeRuntime,
    TxRejected,
    parse_tx_data,
    validate_tx_payload,
)
from powdb.sim import sim_hashrate_per_ms
from powdb.simnet import EventQueue, SimMiner
from powdb.store import BlockStore
from powdb.wire import NodeIdentity, canonical_json

from conftest import TEST_PARAMS

COUNTER = [["add", "count", 1], ["add", "total", ["arg", 0]]]
COUNTER_ID = contract_id_for(COUNTER)


def make_node(store=None, params=TEST_PARAMS, mine=True):
    queue = EventQueue()
    core = NodeCore(
        identity=NodeIdentity.from_seed(b"\x42" * 32),
        store=store or BlockStore(":memory:"),
        params=params,
        clock=lambda: queue.now,
        miner=SimMiner(queue, sim_hashrate_per_ms(params)),
        listen_addr="mem:solo",
        mine_enabled=mine,
    )
    return core, queue


def submit_and_run(core, queue, tx):
    results = []
    core.submit_tx(tx, results.append)
    queue.run()
    assert results, "no reply arrived"
    return results[-1]


class TestTxValidation:
    def test_payload_with_separator_rejected(self):
        with pytest.raises(TxRejected):
            validate_tx_payload({"kind": "raw", "data": "no\x1fgood"}, lambda _: True)

    def test_unknown_kind_rejected(self):
        with pytest.raises(TxRejected):
            validate_tx_payload({"kind": "drop"}, lambda _: True)

    def test_malformed_deploy_rejected(self):
        with pytest.raises(TxRejected):
            validate_tx_payload({"kind": "deploy", "contract": [["bogus"]]}, lambda _: True)

    def test_call_args_must_be_i64(self):
        with pytest.raises(TxRejected):
            validate_tx_payload({"kind": "call", "contract_id": "a" * 64,
                                 "args": [2**63]}, lambda _: True)

    def test_call_unknown_contract_rejected(self):
        with pytest.raises(TxRejected):
            validate_tx_payload({"kind": "call", "contract_id": "a" * 64,
                                 "args": []}, lambda _: False)

    def test_parse_round_trip(self):
        tx = {"kind": "raw", "data": "hello"}
        data = validate_tx_payload(tx, lambda _: True)
        assert parse_tx_data(data) == tx
        assert parse_tx_data("GENESIS") is None
        assert parse_tx_data('{"kind":"unknown"}') is None


class TestSingleNodeFlow:
    def test_raw_put_commits_with_canonical_data(self):
        core, queue = make_node()
        tx = {"kind": "raw", "data": "hello"}
        result = submit_and_run(core, queue, tx)
        assert result["ok"] is True
        index = result["result"]["block_index"]
        assert index == 1
        block = core.store.get_block(index)
        assert block.data == canonical_json(tx).decode()
        assert block.hash == result["result"]["block_hash"]

    def test_deploy_then_call_updates_state(self):
        core, queue = make_node()
        deploy = submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        assert deploy["ok"] is True
        assert core.store.get_contract(COUNTER_ID) is not None

        call = submit_and_run(core, queue, {"kind": "call", "contract_id": COUNTER_ID,
                                            "args": [40]})
        assert call["ok"] is True
        assert core.store.get_state(COUNTER_ID, "count") == 1
        assert core.store.get_state(COUNTER_ID, "total") == 40
        submit_and_run(core, queue, {"kind": "call", "contract_id": COUNTER_ID,
                                     "args": [2]})
        assert core.store.get_state(COUNTER_ID, "count") == 2
        assert core.store.get_state(COUNTER_ID, "total") == 42
        # state version records the writing block
        assert core.store.get_state_version(COUNTER_ID, "count") == 3

    def test_redeploy_is_idempotent(self):
        core, queue = make_node()
        submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        first = core.store.get_contract(COUNTER_ID)
        submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        assert core.store.get_contract(COUNTER_ID) == first
        assert core.store.get_block_count() == 3  # two deploy blocks, same id

    def test_exec_error_recorded_state_untouched(self):
        core, queue = make_node()
        overflow = [["set", "x", 9223372036854775807], ["add", "x", 1]]
        submit_and_run(core, queue, {"kind": "deploy", "contract": overflow})
        cid = contract_id_for(overflow)
        result = submit_and_run(core, queue, {"kind": "call", "contract_id": cid,
                                              "args": []})
        assert result["ok"] is True  # the block commits; the execution failed
        assert core.store.get_state(cid, "x") is None
        assert core.exec_log and core.exec_log[-1]["error"] == "Overflow"

    def test_rejected_payload_never_mines(self):
        core, queue = make_node()
        result = submit_and_run(core, queue, {"kind": "raw", "data": "bad\x1f"})
        assert result["ok"] is False
        assert core.store.get_block_count() == 1

    def test_no_mine_node_rejects_writes(self):
        core, queue = make_node(mine=False)
        results = []
        core.submit_tx({"kind": "raw", "data": "x"}, results.append)
        assert results[0]["ok"] is False

    def test_reads_during_mining_see_committed_data_only(self):
        core, queue = make_node()
        results = []
        core.submit_tx({"kind": "raw", "data": "inflight"}, results.append)
        # the miner is running (virtual time has not advanced); reads must
        # show only the committed chain
        assert core.handle_query("stats", {})["result"]["count"] == 1
        assert len(core.handle_query("chain", {})["result"]["blocks"]) == 1
        queue.run()
        assert results[0]["ok"] is True
        assert core.handle_query("stats", {})["result"]["count"] == 2

    def test_queued_transactions_commit_in_order(self):
        core, queue = make_node()
        replies = []
        for i in range(4):
            core.submit_tx({"kind": "raw", "data": f"q{i}"}, replies.append)
        queue.run()
        assert [r["ok"] for r in replies] == [True] * 4
        assert [r["result"]["block_index"] for r in replies] == [1, 2, 3, 4]

    def test_call_may_reference_deploy_still_in_pipeline(self):
        core, queue = make_node()
        replies = []
        core.submit_tx({"kind": "deploy", "contract": COUNTER}, replies.append)
        # the deploy has not been mined yet; the call must still validate
        core.submit_tx({"kind": "call", "contract_id": COUNTER_ID, "args": [9]},
                       replies.append)
        queue.run()
        assert [r["ok"] for r in replies] == [True, True]
        assert core.store.get_state(COUNTER_ID, "total") == 9


class TestWireTxIntake:
    def test_invalid_tx_over_wire_gets_error_response(self):
        from powdb import wire as wiremod
        from powdb.wire import NodeIdentity as Identity, decode_envelope, sign_envelope

        core, _queue = make_node()
        sent = []

        class Capture:
            def send_message(self, raw):
                sent.append(raw)

        client = Identity.from_seed(b"\x09" * 32)
        env = sign_envelope(wiremod.TX, 1, {"tx": {"kind": "nope"}}, client)
        core.on_message(Capture(), env.encode())
        assert len(sent) == 1
        response = decode_envelope(sent[0])
        assert response.kind == wiremod.RESPONSE
        assert response.payload["ok"] is False
        assert "unknown transaction kind" in response.payload["error"]
        assert core.store.get_block_count() == 1


class TestSixStepOrder:
    STEP_OF = {
        "client_request": 1,
        "create_block": 2,
        "mine_block": 2,
        "verify_block": 3,
        "add_block": 3,
        "broadcast_block": 4,
        "execute_contracts": 5,
        "persist_state": 6,
    }

    def test_steps_execute_in_request_flow_order(self):
        core, queue = make_node()
        events = []
        core.hooks.trace = lambda name, **kw: events.append(name)
        submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        steps = [self.STEP_OF[e] for e in events if e in self.STEP_OF]
        assert steps == sorted(steps)
        assert steps[0] == 1 and steps[-1] == 6

    def test_contract_execution_only_after_acceptance(self):
        core, queue = make_node()
        events = []
        core.hooks.trace = lambda name, **kw: events.append(name)
        submit_and_run(core, queue, {"kind": "call", "contract_id": COUNTER_ID,
                                     "args": [1]} if False else
                       {"kind": "raw", "data": "plain"})
        assert events.index("verify_block") < events.index("add_block")
        assert events.index("add_block") < events.index("execute_contracts")


class TestStatePurity:
    def test_state_is_pure_function_of_chain(self):
        core, queue = make_node()
        submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        for arg in (3, 9, 27):
            submit_and_run(core, queue, {"kind": "call", "contract_id": COUNTER_ID,
                                         "args": [arg]})
        submit_and_run(core, queue, {"kind": "raw", "data": "noise"})

        # independent oracle: replay every payload through a fresh interpreter
        replayed: dict[tuple[str, str], int] = {}
        sources: dict[str, list] = {}
        cache = ContractCache()
        for block in core.store.get_all_blocks()[1:]:
            tx = parse_tx_data(block.data)
            if tx is None:
                continue
            if tx["kind"] == "deploy":
                sources[contract_id_for(tx["contract"])] = tx["contract"]
            elif tx["kind"] == "call":
                cid = tx["contract_id"]
                compiled = cached_lookup(cache, cid, sources.get)
                execute(compiled, tx["args"],
                        lambda key, _c=cid: replayed.get((_c, key)),
                        lambda key, value, _c=cid: replayed.__setitem__((_c, key), value))
        assert replayed == core.store.all_state()


class TestReorgStateRebuild:
    def test_adopted_chain_state_matches_sequential_replay(self, cluster_factory):
        # a reorg wipes and re-executes all contract payloads; the result must
        # equal a plain sequential replay of the adopted chain
        cluster = cluster_factory(2)
        a, b = cluster.nodes
        # b builds the heavier history with contract activity, a diverges
        cluster.nodes[1].submit_tx({"kind": "deploy", "contract": COUNTER}, lambda _: None)
        cluster.pump()
        for arg in (10, 20, 30):
            b.submit_tx({"kind": "call", "contract_id": COUNTER_ID, "args": [arg]},
                        lambda _: None)
            cluster.pump()
        a.submit_tx({"kind": "raw", "data": "lonely"}, lambda _: None)
        cluster.pump()
        assert a.store.tip().hash != b.store.tip().hash

        cluster.connect(0, 1)
        cluster.pump()
        assert a.store.tip().hash == b.store.tip().hash  # a reorged onto b

        replayed: dict[tuple[str, str], int] = {}
        sources: dict[str, list] = {}
        for block in a.store.get_all_blocks()[1:]:
            tx = parse_tx_data(block.data)
            if tx is None:
                continue
            if tx["kind"] == "deploy":
                sources[contract_id_for(tx["contract"])] = tx["contract"]
            elif tx["kind"] == "call":
                cid = tx["contract_id"]
                compiled = cached_lookup(ContractCache(), cid, sources.get)
                execute(compiled, tx["args"],
                        lambda key, _c=cid: replayed.get((_c, key)),
                        lambda key, value, _c=cid: replayed.__setitem__((_c, key), value))
        assert replayed == a.store.all_state()
        assert a.store.get_state(COUNTER_ID, "total") == 60


class TestDurability:
    def test_restart_reproduces_tip_and_chain(self, store_path):
        core, queue = make_node(store=BlockStore(store_path))
        submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        submit_and_run(core, queue, {"kind": "call", "contract_id": COUNTER_ID,
                                     "args": [5]})
        chain_before = core.store.get_all_blocks()
        tip_before = core.store.tip().hash
        state_before = core.store.all_state()
        core.store.close()

        reopened, _queue = make_node(store=BlockStore(store_path))
        assert reopened.store.tip().hash == tip_before
        assert reopened.store.get_all_blocks() == chain_before
        assert reopened.store.all_state() == state_before

    def test_startup_replays_unapplied_payloads(self, store_path):
        core, queue = make_node(store=BlockStore(store_path))
        submit_and_run(core, queue, {"kind": "deploy", "contract": COUNTER})
        submit_and_run(core, queue, {"kind": "call", "contract_id": COUNTER_ID,
                                     "args": [5]})
        # wind the applied marker back, as if we crashed between commit and apply
        core.store.set_applied_index(1)
        core.store._conn.execute("DELETE FROM state")
        core.store.close()

        reopened, _queue = make_node(store=BlockStore(store_path))
        assert reopened.store.get_state(COUNTER_ID, "count") == 1
        assert reopened.store.get_state(COUNTER_ID, "total") == 5
        assert reopened.store.get_applied_index() == 2


class TestQueries:
    def test_stats_on_fresh_node(self):
        core, _queue = make_node()
        response = core.handle_query("stats", {})
        assert response["ok"] is True
        stats = response["result"]
        assert stats["count"] == 1
        assert stats["peer_count"] == 0
        assert stats["cache"] == {"hits": 0, "misses": 0, "compiles": 0}

    def test_state_query_never_written_key(self):
        core, _queue = make_node()
        response = core.handle_query("state", {"contract_id": "a" * 64, "key": "x"})
        assert response == {"ok": False, "what": "state", "error": "not-found"}

    def test_chain_query_matches_count(self):
        core, queue = make_node()
        submit_and_run(core, queue, {"kind": "raw", "data": "one"})
        response = core.handle_query("chain", {})
        assert len(response["result"]["blocks"]) == core.store.get_block_count()

    def test_block_query(self):
        core, queue = make_node()
        submit_and_run(core, queue, {"kind": "raw", "data": "one"})
        ok = core.handle_query("block", {"index": 1})
        assert ok["ok"] and ok["result"]["block"]["index"] == 1
        missing = core.handle_query("block", {"index": 9})
        assert missing == {"ok": False, "what": "block", "error": "not-found"}

    def test_unknown_what(self):
        core, _queue = make_node()
        response = core.handle_query("everything", {})
        assert response["ok"] is False

    def test_response_echoes_what(self):
        core, _queue = make_node()
        for what in ("chain", "block", "state", "stats", "bogus"):
            response = core.handle_query(what, {})
            assert response["what"] == what


class TestMiningContention:
    def test_competing_submissions_both_commit(self, cluster_factory):
        cluster = cluster_factory(2)
        cluster.connect(0, 1)
        cluster.pump()
        replies = []
        # both nodes start mining the same height at the same instant
        cluster.nodes[0].submit_tx({"kind": "raw", "data": "from-a"}, replies.append)
        cluster.nodes[1].submit_tx({"kind": "raw", "data": "from-b"}, replies.append)
        cluster.pump()
        assert len(replies) == 2
        outcomes = sorted(r["ok"] for r in replies)
        heads = cluster.heads()
        assert heads[0] == heads[1]
        count = cluster.nodes[0].store.get_block_count()
        committed = sum(1 for r in replies if r["ok"])
        # loser retried on the new tip; both landed unless the retry lost again
        assert count == 1 + committed
        assert committed >= 1


class TestTcpRuntime:
    def wait_until(self, predicate, timeout=30.0, interval=0.05):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if predicate():
                return True
            time.sleep(interval)
        return False

    def test_two_process_loopback(self, tmp_path):
        from powdb.cli import client_request

        params = ChainParams(target_block_interval_ms=2000, initial_difficulty=6,
                             min_difficulty=4, max_difficulty=10)
        a = NodeRuntime(NodeConfig(listen_addr="127.0.0.1:0",
                                   db_path=str(tmp_path / "a.db"),
                                   key_path=str(tmp_path / "a.key"), params=params))
        a.start()
        b = NodeRuntime(NodeConfig(listen_addr="127.0.0.1:0", peers=[a.listen_addr],
                                   db_path=str(tmp_path / "b.db"),
                                   key_path=str(tmp_path / "b.key"), params=params))
        b.start()
        try:
            assert self.wait_until(
                lambda: a.listen_addr in b.core.peers
                and b.listen_addr in a.core.peers), "mutual peer records"

            result = client_request(b.listen_addr, "TX",
                                    {"tx": {"kind": "raw", "data": "over-tcp"}})
            assert result["ok"] is True
            index = result["result"]["block_index"]

            assert self.wait_until(
                lambda: a.core.store.get_block_count() == index + 1), "replication to a"
            assert a.core.store.get_block(index).hash == result["result"]["block_hash"]

            stats = client_request(a.listen_addr, "QUERY",
                                   {"what": "stats", "params": {}})
            assert stats["result"]["count"] == index + 1
        finally:
            a.stop()
            b.stop()

    def test_restart_preserves_tip_over_tcp(self, tmp_path):
        from powdb.cli import client_request

        params = ChainParams(initial_difficulty=6, min_difficulty=4, max_difficulty=10)
        config = NodeConfig(listen_addr="127.0.0.1:0", db_path=str(tmp_path / "n.db"),
                            key_path=str(tmp_path / "n.key"), params=params)
        runtime = NodeRuntime(config)
        runtime.start()
        result = client_request(runtime.listen_addr, "TX",
                                {"tx": {"kind": "raw", "data": "persist-me"}})
        tip = result["result"]["block_hash"]
        node_id = runtime.core.identity.node_id
        runtime.stop()

        again = NodeRuntime(config)
        try:
            assert again.core.store.tip().hash == tip
            assert again.core.identity.node_id == node_id  # key file reused
        finally:
            again.stop()

    def test_busy_listen_addr_raises_network_error(self, tmp_path):
        from powdb.node import NetworkStartupError

        first = NodeRuntime(NodeConfig(listen_addr="127.0.0.1:0",
                                       db_path=str(tmp_path / "x.db")))
        try:
            with pytest.raises(NetworkStartupError):
                NodeRuntime(NodeConfig(listen_addr=first.listen_addr,
                                       db_path=str(tmp_path / "y.db")))
        finally:
            first.stop()

    def test_unusable_db_path_raises_store_error(self, tmp_path):
        from powdb.store import StoreError

        with pytest.raises(StoreError):
            NodeRuntime(NodeConfig(listen_addr="127.0.0.1:0",
                                   db_path=str(tmp_path / "missing" / "nested" / "n.db")))
