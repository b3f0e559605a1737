import math
import sys
from pathlib import Path

import networkx as nx
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.event_log import EventLog  # noqa: E402
from src.models import ClientRequest, FaultBudget, Protocol, RequestId  # noqa: E402
from src.metrics_processor import (  # noqa: E402
    MetricsReport,
    countMessages,
    extractMetrics,
    fitScaling,
    responseTimes,
)
from src.protocol_engine import EngineOptions  # noqa: E402
from src.simnet import ClientSpec, LinkModel, Scenario, run  # noqa: E402


def test_empty_log():
    """沒有任何請求時計數為 0，回應時間為 NaN"""
    log = EventLog({"protocol": "SBFT"})
    counts = countMessages(log)
    assert (counts.c2c, counts.c2s) == (0, 0)
    report = extractMetrics(log)
    assert report.requests == 0
    assert report.acceptanceRate == 0.0
    assert math.isnan(report.responseMeanMs)
    assert responseTimes(log).empty


def test_counts_and_response_times():
    """依類別與階段統計 SEND；回應時間取最後一台交換器套用的時間"""
    log = EventLog({"protocol": "OBFT", "faulty": [], "params": {"duration_s": 1.0}})
    log.append("CLIENT_ISSUE", 0, client=0, request="0.0", attempt=0)
    log.append("SEND", 0, src="CL0", dst="R0", cls="CLIENT", phase="REQUEST", request="0.0")
    log.append("SEND", 100, src="R0", dst="R1", cls="C2C", phase="COMMIT", request="0.0")
    log.append("SEND", 100, src="R0", dst="R2", cls="C2C", phase="COMMIT", request="0.0")
    log.append("SEND", 300, src="R0", dst="S1", cls="C2S", phase="REPLY", request="0.0")
    log.append("TRANSITION", 300, replica=0, event="REPLY_EMIT", request="0.0", attempt=0, rounds=2)
    log.append("APPLIED", 1500, switch=1, request="0.0")
    log.append("APPLIED", 2500, switch=2, request="0.0")
    log.append("CLIENT_DONE", 900, client=0, request="0.0", attempt=0, outcome="ACCEPTED",
               issuedAt=0, firstIssuedAt=0)
    counts = countMessages(log)
    assert (counts.c2c, counts.c2s, counts.client) == (2, 1, 1)
    assert counts.phase("C2C", "COMMIT") == 2
    report = extractMetrics(log)
    assert report.accepted == report.firstAttemptAccepted == 1
    assert report.acceptanceRate == 1.0
    assert report.responseMeanMs == pytest.approx(2.5)
    assert report.rounds == 2
    assert report.c2cPps == pytest.approx(2.0)
    row = report.toRow()
    assert row["msg_C2C_COMMIT"] == 2
    assert row["msg_C2S_PREPARE"] == 0
    assert set(MetricsReport().toRow()) == set(row)


def test_fit_scaling():
    """二次資料的二次擬合 R² 為 1；點數不足時拋出例外"""
    x = np.arange(4, 10)
    y = 3 * x ** 2 + 2 * x + 1
    coeffs, r2 = fitScaling(x, y, 2)
    assert coeffs == pytest.approx([3, 2, 1])
    assert r2 == pytest.approx(1.0)
    _, linear = fitScaling(x, y, 1)
    assert linear < 1.0
    with pytest.raises(ValueError):
        fitScaling([1, 2], [1, 2], 2)


def mesh_scenario(protocol, n, workload, options=EngineOptions(), rotating=False):
    """n 台交換器兩兩相連、延遲相同，每台交換器旁一台控制器與一個用戶端

    ``rotating`` 為真時交換器 s 的群組為 (s, s+1, s+2)，否則全部使用 (0, 1, 2)。
    """
    G = nx.complete_graph(n)
    nx.set_edge_attributes(G, 10_000, "capacity")
    nx.set_edge_attributes(G, 100, "delay_us")
    groups = {s: tuple((s + i) % n for i in range(3)) if rotating else (0, 1, 2) for s in G.nodes}
    return Scenario(
        protocol=protocol,
        budget=FaultBudget(1),
        topology=G,
        controllerSites=list(range(n)),
        clients=[ClientSpec(s, s) for s in G.nodes],
        workload=workload,
        groups=groups,
        link=LinkModel(jitterRatio=0.0),
        options=options,
    )


def test_message_counts_scale_with_cluster_size():
    """|A|=3 固定：SBFT 的 C2C 為 |C| 的一次函數，MPBFT 與 OBFT 為二次函數"""
    sizes = list(range(4, 14))
    c2c = {p: [] for p in Protocol}
    c2s = {p: [] for p in Protocol}
    for n in sizes:
        workload = [(0, ClientRequest(RequestId(0, 0), 0, 1, 5))]
        for protocol in Protocol:
            counts = countMessages(run(mesh_scenario(protocol, n, workload)))
            c2c[protocol].append(counts.c2c)
            c2s[protocol].append(counts.c2s)

    coeffs, r2 = fitScaling(sizes, c2c[Protocol.SBFT], 1)
    assert r2 >= 0.99
    assert coeffs == pytest.approx([9, -9])
    for protocol, leading in ((Protocol.MPBFT, 2), (Protocol.OBFT, 1)):
        coeffs, r2 = fitScaling(sizes, c2c[protocol], 2)
        assert r2 >= 0.99
        assert coeffs[0] == pytest.approx(leading)

    assert len(set(c2s[Protocol.SBFT])) == 1
    assert len(set(c2s[Protocol.OBFT])) == 1
    _, r2 = fitScaling(sizes, c2s[Protocol.MPBFT], 1)
    assert r2 == pytest.approx(1.0)
    assert c2s[Protocol.MPBFT][-1] > c2s[Protocol.MPBFT][0]


def mean_response(protocol, workload, options=EngineOptions()):
    log = run(mesh_scenario(protocol, 10, workload, options, rotating=True))
    report = extractMetrics(log)
    assert report.accepted > 0
    return report.responseMeanMs


def test_response_time_trend():
    """輕載時 OBFT 少一個階段而快於 SBFT；每台複本都執行請求的 MPBFT 在重載下最慢"""
    light = [(i * 20_000, ClientRequest(RequestId(i % 10, i // 10), i % 10, (i + 5) % 10, 1)) for i in range(20)]
    quiet = {p: mean_response(p, light, EngineOptions(costModel="hops")) for p in Protocol}
    assert quiet[Protocol.OBFT] < quiet[Protocol.SBFT]
    assert quiet[Protocol.MPBFT] < quiet[Protocol.SBFT]

    rng = np.random.default_rng(7)
    arrivals = np.cumsum(rng.exponential(1e6 / 1000, size=200)).astype(int)
    counters = [0] * 10
    heavy = []
    for t, src in zip(arrivals, rng.integers(0, 10, size=200)):
        src = int(src)
        dst = (src + 1 + int(rng.integers(0, 9))) % 10
        heavy.append((int(t), ClientRequest(RequestId(src, counters[src]), src, dst, 1)))
        counters[src] += 1
    costly = EngineOptions(cmpCostUs=10, execCostUs=1000, costModel="hops")
    busy = {p: mean_response(p, heavy, costly) for p in Protocol}
    assert busy[Protocol.SBFT] < busy[Protocol.MPBFT]
    assert busy[Protocol.OBFT] < busy[Protocol.MPBFT]


def test_obft_rejections_grow_with_concurrency():
    """同一路徑上同時送出的請求越多，OBFT 第一次嘗試被拒的比例越高；SBFT 與 MPBFT 依序號全部接受"""
    rates = {}
    for k in (1, 2, 4):
        workload = [(0, ClientRequest(RequestId(0, i), 0, 1, 5)) for i in range(k)]
        rates[k] = {p: extractMetrics(run(mesh_scenario(p, 4, workload))).acceptanceRate for p in Protocol}
    rejection = [1 - rates[k][Protocol.OBFT] for k in (1, 2, 4)]
    assert rejection == sorted(rejection)
    assert len(set(rejection)) == 3
    for k in (1, 2, 4):
        assert rates[k][Protocol.SBFT] == rates[k][Protocol.MPBFT] == 1.0
        assert rates[k][Protocol.SBFT] >= rates[k][Protocol.OBFT]
