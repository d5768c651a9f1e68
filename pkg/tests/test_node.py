import socket

import pytest

from scrybe import model
from scrybe.config import ConfigError, load_config
from scrybe.node import POOL_FILE, NodeClient, NodeConfig, NodeError, NodeService, load_node_config, run_node
from scrybe.web import HttpError, JsonClient

from conftest import entry_series, seeded_key, wait_for, write_cluster


@pytest.fixture
def cluster(tmp_path, miners, author):
    configs = write_cluster(tmp_path, miners, author)
    nodes = [run_node(load_node_config(c)) for c in configs]
    yield nodes
    for n in nodes:
        n.stop()


@pytest.mark.slow
class TestCluster:
    def test_agree_and_grow(self, cluster, builder):
        assert wait_for(lambda: min(n.chain.height for n in cluster) >= 4, 60)
        target = min(n.chain.height for n in cluster)
        hashes = {n.chain.hash_at(target) for n in cluster}
        assert len(hashes) == 1
        assert model.verify_chain(cluster[0].get_chain(), builder.registry).ok

    def test_transactions_anchored(self, cluster, author):
        client = NodeClient(",".join(n.http.url for n in cluster))
        entries = entry_series(author, 5)
        for e in entries:
            client.submit(model.make_transaction(e, author))

        def anchored():
            return {t.entry_id for b in client.get_chain() for t in b.transactions}

        assert wait_for(lambda: anchored() == {1, 2, 3, 4, 5}, 60)

    def test_duplicate_and_unknown(self, cluster, author):
        client = NodeClient(cluster[0].http.url)
        txn = model.make_transaction(entry_series(author, 1)[0], author)
        client.submit(txn)
        with pytest.raises(NodeError) as exc:
            client.submit(txn)
        assert exc.value.code == "DUPLICATE"
        stranger = seeded_key(77)
        with pytest.raises(NodeError) as exc:
            client.submit(model.make_transaction(entry_series(stranger, 1)[0], stranger))
        assert exc.value.code == "UNKNOWN_SIGNER"

    def test_out_of_range(self, cluster):
        with pytest.raises(NodeError) as exc:
            NodeClient(cluster[0].http.url).get_chain(10_000)
        assert exc.value.code == "OUT_OF_RANGE"

    def test_status(self, cluster, miners):
        status = NodeClient(cluster[0].http.url).status()
        assert status["key_id"] == miners[0].key_id.hex()
        assert {"height", "tip_hash", "round", "attempt", "phase", "pool"} <= set(status)

    def test_failover(self, cluster):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            dead = f"http://127.0.0.1:{s.getsockname()[1]}"
        status = NodeClient(f"{dead},{cluster[1].http.url}", timeout=2).status()
        assert status["key_id"] == cluster[1].config.key.key_id.hex()

    def test_restart_catches_up(self, tmp_path, miners, author):
        configs = write_cluster(tmp_path / "r", miners, author)
        nodes = [run_node(load_node_config(c)) for c in configs]
        try:
            assert wait_for(lambda: min(n.chain.height for n in nodes) >= 2, 60)
            nodes[2].stop()
            stopped_at = nodes[2].chain.height
            assert wait_for(lambda: nodes[0].chain.height >= stopped_at + 3, 60)
            nodes[2] = run_node(load_node_config(configs[2]))
            assert nodes[2].chain.height >= stopped_at  # persisted blocks reloaded
            assert wait_for(lambda: nodes[2].chain.height >= nodes[0].chain.height - 1 > stopped_at, 60)
            h = min(n.chain.height for n in nodes)
            assert len({n.chain.hash_at(h) for n in nodes}) == 1
        finally:
            for n in nodes:
                n.stop()


class TestConfig:
    def test_missing_key(self, tmp_path):
        cfg = tmp_path / "n.conf"
        cfg.write_text("registry_file = r.txt\n")
        with pytest.raises(ConfigError):
            load_node_config(cfg)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_node_config(tmp_path / "absent.conf")

    def test_self_excluded_from_peers(self, tmp_path, miners, author):
        cfg = load_node_config(write_cluster(tmp_path, miners, author)[0])
        assert miners[0].key_id not in {p.key_id for p in cfg.peers}
        assert len(cfg.peers) == 2
        assert cfg.params.block_interval_ms == 500

    def test_bad_registry(self, tmp_path, miners, author):
        configs = write_cluster(tmp_path, miners, author)
        (tmp_path / "registry.txt").write_text("miner zz\n")
        with pytest.raises(ConfigError):
            NodeConfig.from_config(load_config(configs[0]))


class TestPoolDurability:
    def test_acknowledged_txn_survives_restart(self, tmp_path, miners, author):
        cfg = load_node_config(write_cluster(tmp_path, miners, author)[0])
        txn = model.make_transaction(entry_series(author, 1)[0], author)
        svc = NodeService(cfg)
        assert svc._accept_client_txn(txn)
        svc.stop()
        again = NodeService(cfg)
        try:
            assert again._recovered == [txn]
        finally:
            again.stop()

    def test_anchored_txns_compacted(self, tmp_path, miners, author, builder):
        cfg = load_node_config(write_cluster(tmp_path, miners, author)[0])
        entries = entry_series(author, 2)
        svc = NodeService(cfg)
        for e in entries:
            svc._accept_client_txn(model.make_transaction(e, author))
        block = builder.next_block([model.make_transaction(entries[0], author)])
        svc.chain.append(block)
        svc.stop()
        again = NodeService(cfg)
        try:
            assert [t.entry_id for t in again._recovered] == [2]
            assert len(again.pool_log) == 1
        finally:
            again.stop()
        assert (cfg.data_dir / POOL_FILE).exists()


def test_single_node_http(tmp_path, author):
    key = seeded_key(1)
    node = run_node(load_node_config(write_cluster(tmp_path, [key], author, interval_ms=200)[0]))
    try:
        assert wait_for(lambda: node.chain.height >= 2, 30)
        http = JsonClient(node.http.url)
        blocks = http.get("/chain?from=1")["blocks"]
        assert blocks[0]["height"] == 1
        with pytest.raises(HttpError):
            http.get("/chain?from=abc")
    finally:
        node.stop()
