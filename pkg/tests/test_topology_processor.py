import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.topology_processor import (  # noqa: E402
    ONE_PER_SWITCH,
    TWO_PER_LEAF,
    TopologyParseError,
    genFattree,
    leafSwitches,
    loadGeoTopology,
    maxBaseRttUs,
    placeClients,
    placeControllers,
    propagationDelayUs,
)

SAMPLE = Path(__file__).resolve().parents[1] / "sample_data" / "internet2.topo"


def test_fattree_sizes():
    """k=4 有 20 台交換器，k=2 有 5 台；奇數 k 不合法"""
    G = genFattree(4)
    assert G.number_of_nodes() == 20
    assert G.number_of_edges() == 32
    assert len(leafSwitches(G)) == 8
    assert all(d["capacity"] == 100 and d["delay_us"] == 100 for _, _, d in G.edges(data=True))
    assert genFattree(2).number_of_nodes() == 5
    with pytest.raises(ValueError):
        genFattree(3)


def test_propagation_delay():
    """1000 公里約 5000 微秒"""
    assert propagationDelayUs(1_000_000) == 5000
    assert propagationDelayUs(0) == 0


def test_load_sample_topology():
    """範例骨幹拓撲有 34 個站點、44 條連線"""
    G = loadGeoTopology(SAMPLE)
    assert G.number_of_nodes() == 34
    assert G.number_of_edges() == 44
    assert sorted(d["capacity"] for _, _, d in G.edges(data=True))[-2:] == [200, 200]
    assert all(d["delay_us"] >= 1 for _, _, d in G.edges(data=True))
    assert G.nodes[0]["name"] == "Seattle"


def test_malformed_topology_names_line(tmp_path):
    """格式錯誤時訊息包含行號"""
    path = tmp_path / "bad.topo"
    path.write_text("nodes\n0 10.0 20.0\n1 10.0\n", encoding="utf-8")
    with pytest.raises(TopologyParseError) as excinfo:
        loadGeoTopology(path)
    assert excinfo.value.lineNo == 3

    path.write_text("nodes\n0 10.0 20.0\n1 11.0 21.0\nlinks\n0 5\n", encoding="utf-8")
    with pytest.raises(TopologyParseError):
        loadGeoTopology(path)

    path.write_text("nodes\n0 10.0 20.0\n1 11.0 21.0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        loadGeoTopology(path)


def test_client_placement():
    """fat-tree 每台邊緣交換器兩個用戶端；地理拓撲每台交換器一個"""
    fattree = genFattree(4)
    clients = placeClients(fattree, TWO_PER_LEAF)
    assert len(clients) == 16
    assert [c.clientId for c in clients] == list(range(16))
    assert {c.switch for c in clients} == set(leafSwitches(fattree))
    geo = loadGeoTopology(SAMPLE)
    assert len(placeClients(geo, ONE_PER_SWITCH)) == 34
    with pytest.raises(ValueError):
        placeClients(geo, TWO_PER_LEAF)


def test_controller_placement():
    """fat-tree 控制器放在邊緣交換器；地理拓撲挑選不同站點"""
    fattree = genFattree(4)
    assert placeControllers(fattree, 4) == leafSwitches(fattree)[:4]
    assert len(placeControllers(fattree, 10)) == 10
    geo = loadGeoTopology(SAMPLE)
    sites = placeControllers(geo, 5)
    assert len(set(sites)) == 5
    assert placeControllers(geo, 5) == sites
    assert maxBaseRttUs(fattree, placeControllers(fattree, 1)) == 2 * 400
