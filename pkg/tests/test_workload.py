import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.topology_processor import TWO_PER_LEAF, genFattree, placeClients  # noqa: E402
from src.workload import Workload, generateWorkload  # noqa: E402


def test_workload_is_reproducible():
    """相同種子得到相同請求，時間遞增且來源與目的不同"""
    G = genFattree(4)
    clients = placeClients(G, TWO_PER_LEAF)
    spec = Workload(rate=20.0, durationS=0.5, demandMin=2, demandMax=4, seed=7)
    first = generateWorkload(G, clients, spec)
    assert first == generateWorkload(G, clients, spec)
    assert first
    times = [t for t, _ in first]
    assert times == sorted(times)
    assert all(0 < t <= 500_000 for t in times)
    homes = {c.clientId: c.switch for c in clients}
    for _, request in first:
        assert request.src == homes[request.id.client]
        assert request.dst != request.src
        assert 2 <= request.bandwidth <= 4
    assert first != generateWorkload(G, clients, Workload(20.0, 0.5, 2, 4, seed=8))


def test_request_ids_count_per_client():
    """每個用戶端的計數從 0 連續遞增"""
    G = genFattree(4)
    clients = placeClients(G, TWO_PER_LEAF)
    arrivals = generateWorkload(G, clients, Workload(rate=30.0, durationS=0.3, seed=1))
    perClient = {}
    for _, request in arrivals:
        perClient.setdefault(request.id.client, []).append(request.id.counter)
    for counters in perClient.values():
        assert counters == list(range(len(counters)))


def test_empty_and_invalid_workloads():
    """到達率 0 時沒有請求；不合法的參數拋出 ValueError"""
    G = genFattree(4)
    clients = placeClients(G, TWO_PER_LEAF)
    assert generateWorkload(G, clients, Workload(rate=0.0, durationS=1.0)) == []
    with pytest.raises(ValueError):
        Workload(rate=-1.0, durationS=1.0)
    with pytest.raises(ValueError):
        Workload(rate=1.0, durationS=1.0, demandMin=5, demandMax=2)
