import copy
import json
import sys
from pathlib import Path

import networkx as nx
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.event_log import EventLog, verifyLog  # noqa: E402
from src.models import ClientRequest, FaultBudget, Protocol, RequestId  # noqa: E402
from src.simnet import ClientSpec, LinkModel, Scenario, run  # noqa: E402


def clean_log(protocol=Protocol.MPBFT):
    """4 台交換器直線拓撲上的單一請求"""
    G = nx.path_graph(4)
    nx.set_edge_attributes(G, 100, "capacity")
    nx.set_edge_attributes(G, 1000, "delay_us")
    scenario = Scenario(
        protocol=protocol,
        budget=FaultBudget(1),
        topology=G,
        controllerSites=[0, 1, 2, 3],
        clients=[ClientSpec(0, 0)],
        workload=[(0, ClientRequest(RequestId(0, 0), 0, 3, 5))],
        groups={s: (0, 1, 2) for s in G.nodes},
        link=LinkModel(jitterRatio=0.0),
    )
    return run(scenario)


def tampered(log):
    forged = EventLog(copy.deepcopy(log.header))
    forged.records = copy.deepcopy(log.records)
    return forged


def checks(report):
    return {v.check for v in report.violations}


def test_clean_run_verifies():
    """無故障的執行通過所有檢查"""
    for protocol in Protocol:
        report = verifyLog(clean_log(protocol))
        assert report.ok, report.violations
        assert report.requests == 1
        assert report.applied == 4


def test_detects_disagreement():
    """竄改一台複本的提交摘要會被判定為不一致"""
    log = tampered(clean_log())
    commit = next(r for r in log.transitions("COMMIT") if r["replica"] == 2)
    commit["digest"] = "0" * 16
    assert "AGREEMENT" in checks(verifyLog(log))


def test_detects_missing_attestation():
    """交換器在相符 REPLY 不足時套用會被抓出"""
    log = tampered(clean_log())
    applied = log.ofKind("APPLIED")[0]
    applied["attesters"] = applied["attesters"][:1]
    assert checks(verifyLog(log)) == {"ATTESTATION"}


def test_detects_unfinished_request():
    """沒有結果的請求違反活性"""
    log = tampered(clean_log())
    log.records = [r for r in log.records if r["kind"] != "CLIENT_DONE"]
    assert checks(verifyLog(log)) == {"LIVENESS"}


def test_ndjson_round_trip(tmp_path):
    """NDJSON 第一行為標頭，讀回後內容相同"""
    log = clean_log(Protocol.OBFT)
    path = tmp_path / "events.ndjson"
    log.toNdjson(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    assert header["schema"] == "bftsim-eventlog"
    assert header["protocol"] == "OBFT"
    assert len(lines) == len(log) + 1
    restored = EventLog.fromNdjson(path)
    assert restored.records == log.records
    assert verifyLog(restored).ok


def test_rejects_foreign_files(tmp_path):
    """非事件日誌或未知紀錄種類都拋出 ValueError"""
    path = tmp_path / "other.ndjson"
    path.write_text('{"hello": 1}\n', encoding="utf-8")
    with pytest.raises(ValueError):
        EventLog.fromNdjson(path)
    with pytest.raises(ValueError):
        EventLog().append("BOOM", 0)
