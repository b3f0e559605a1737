import dataclasses
import sys
from pathlib import Path

import networkx as nx
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.event_log import verifyLog  # noqa: E402
from src.metrics_processor import countMessages, extractMetrics  # noqa: E402
from src.models import (  # noqa: E402
    ClientRequest,
    ComputedOutput,
    FaultBudget,
    Phase,
    ProtocolMessage,
    Protocol,
    RequestId,
    Status,
    StatusPayload,
    replicaEndpoint,
)
from src.path_app import EMPTY_CONFIG_HASH, hashRules  # noqa: E402
from src.protocol_engine import GroupDirectory  # noqa: E402
from src.simnet import (  # noqa: E402
    ClientAgent,
    ClientOptions,
    ClientSpec,
    LinkModel,
    Scenario,
    Simulator,
    SwitchState,
    injectFault,
    run,
    switchOnReply,
)


def line_scenario(protocol, n=4, budget=FaultBudget(1), group=(0, 1, 2), link=None, workload=None):
    """n 台交換器排成一直線，每台交換器旁各有一台控制器，用戶端在交換器 0"""
    G = nx.path_graph(n)
    nx.set_edge_attributes(G, 100, "capacity")
    nx.set_edge_attributes(G, 1000, "delay_us")
    if workload is None:
        workload = [(0, ClientRequest(RequestId(0, 0), 0, n - 1, 5))]
    return Scenario(
        protocol=protocol,
        budget=budget,
        topology=G,
        controllerSites=list(range(n)),
        clients=[ClientSpec(0, 0)],
        workload=workload,
        groups={s: group for s in G.nodes},
        link=link or LinkModel(jitterRatio=0.0),
    )


def outcomes(log):
    return {r["request"]: r["outcome"] for r in log.ofKind("CLIENT_DONE")}


@pytest.mark.parametrize(
    "protocol, c2c, c2s, rounds",
    [
        (Protocol.MPBFT, 24, 16, 2),
        (Protocol.SBFT, 27, 12, 3),
        (Protocol.OBFT, 21, 12, 2),
    ],
)
def test_single_request_message_counts(protocol, c2c, c2s, rounds):
    """單一請求：C2C / C2S 訊息數與訊息延遲輪數符合各協定的通訊模式"""
    log = run(line_scenario(protocol))
    counts = countMessages(log)
    assert counts.c2c == c2c
    assert counts.c2s == c2s
    report = extractMetrics(log)
    assert report.rounds == rounds
    assert report.accepted == 1
    assert outcomes(log) == {"0.0": "ACCEPTED"}
    assert verifyLog(log).ok


def test_phase_breakdown():
    """OBFT：群組成員送 COMMIT，所有複本送 PRE_REPLY"""
    counts = countMessages(run(line_scenario(Protocol.OBFT)))
    assert counts.phase("C2C", Phase.COMMIT) == 9
    assert counts.phase("C2C", Phase.PRE_REPLY) == 12
    assert counts.phase("C2S", Phase.REPLY) == 12


def test_switches_install_path():
    """路徑上每台交換器都套用一次規則，且結束時雜湊一致"""
    log = run(line_scenario(Protocol.SBFT))
    applied = log.ofKind("APPLIED")
    assert sorted(r["switch"] for r in applied) == [0, 1, 2, 3]
    assert all(len(r["attesters"]) >= 2 for r in applied)
    ends = [r for r in log.ofKind("END") if r["scope"] == "switch"]
    assert all(r["rules"] == 1 for r in ends)


def test_same_seed_same_log(tmp_path):
    """相同種子產生位元組相同的事件日誌"""
    link = LinkModel(jitterRatio=0.05, lossProbability=0.1)
    workload = [
        (0, ClientRequest(RequestId(0, 0), 0, 3, 5)),
        (500, ClientRequest(RequestId(0, 1), 0, 2, 5)),
    ]
    paths = []
    for name in ("a.ndjson", "b.ndjson"):
        scenario = line_scenario(Protocol.MPBFT, link=link, workload=workload)
        path = tmp_path / name
        run(scenario).toNdjson(path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_lossy_links_retransmit():
    """遺失的訊息會重傳，請求最終仍被接受"""
    scenario = line_scenario(Protocol.OBFT, link=LinkModel(jitterRatio=0.0, lossProbability=0.2))
    log = run(scenario)
    assert len(log.ofKind("DROP")) == len(log.ofKind("RETRANSMIT"))
    assert outcomes(log) == {"0.0": "ACCEPTED"}


def test_sequential_requests_all_protocols():
    """間隔足夠的多個請求依序完成，保留頻寬逐步累加"""
    workload = [
        (i * 50_000, ClientRequest(RequestId(0, i), 0, 3, 30)) for i in range(4)
    ]
    for protocol in Protocol:
        log = run(line_scenario(protocol, workload=workload))
        done = outcomes(log)
        assert [done[f"0.{i}"] for i in range(4)] == ["ACCEPTED"] * 3 + ["DENIED"]
        assert verifyLog(log).ok


def test_mpbft_tolerates_equivocation():
    """序號矛盾的 MPBFT 複本不影響其他複本達成共識"""
    scenario = injectFault(line_scenario(Protocol.MPBFT), 3, "EQUIVOCATE_SEQ")
    log = run(scenario)
    assert log.header["faulty"] == [3]
    assert outcomes(log) == {"0.0": "ACCEPTED"}
    assert verifyLog(log).ok


def test_sbft_tolerates_corrupt_output():
    """輸出被竄改的群組成員無法讓交換器套用錯誤設定"""
    scenario = injectFault(line_scenario(Protocol.SBFT), 0, "CORRUPT_OUTPUT")
    log = run(scenario)
    assert outcomes(log) == {"0.0": "ACCEPTED"}
    digests = {r["digest"] for r in log.ofKind("APPLIED") if r["switch"] == 1}
    assert len(digests) == 1
    assert verifyLog(log).ok


@pytest.mark.parametrize("protocol, behavior", [
    (Protocol.SBFT, "CRASH"),
    (Protocol.OBFT, "CORRUPT_HASH"),
])
def test_larger_group_tolerates_fault(protocol, behavior):
    """fa=1 的群組 (4 台) 在一台成員故障時仍能完成請求"""
    scenario = line_scenario(protocol, n=5, budget=FaultBudget(1, 1), group=(0, 1, 2, 3))
    log = run(injectFault(scenario, 3 if behavior == "CRASH" else 0, behavior))
    assert outcomes(log) == {"0.0": "ACCEPTED"}
    assert verifyLog(log).ok


def test_inject_fault_validation():
    """故障目標必須存在，行為名稱必須合法"""
    scenario = line_scenario(Protocol.MPBFT)
    with pytest.raises(ValueError):
        injectFault(scenario, 9, "CRASH")
    with pytest.raises(ValueError):
        injectFault(scenario, 0, "EXPLODE")
    assert scenario.faults == ()


def reply(sender, output, hashView=None):
    return ProtocolMessage(
        sender=replicaEndpoint(sender),
        phase=Phase.REPLY,
        requestId=output.requestId,
        payload=output,
        hashView=hashView,
    )


def test_switch_needs_matching_replies():
    """fm+1 個相同 REPLY 才套用；無法湊齊時記錄衝突"""
    output = ComputedOutput.fromPath(RequestId(0, 0), (0, 1, 2), 5)
    forged = ComputedOutput.fromPath(RequestId(0, 0), (0, 1, 2), 6)
    switch = SwitchState(1)
    assert switchOnReply(switch, reply(0, forged), 1, 3, now=0) == []
    assert switchOnReply(switch, reply(1, output), 1, 3, now=0) == []
    records = switchOnReply(switch, reply(2, output), 1, 3, now=5)
    assert [r["kind"] for r in records] == ["APPLIED"]
    assert records[0]["attesters"] == ["R1", "R2"]
    assert switch.rules[RequestId(0, 0)].nextHop == 2

    other = SwitchState(1)
    switchOnReply(other, reply(0, forged), 1, 2, now=0)
    records = switchOnReply(other, reply(1, output), 1, 2, now=0)
    assert [r["kind"] for r in records] == ["CONFLICT"]


def test_switch_holds_until_base_matches():
    """基準雜湊尚未到達的設定先保留，前一筆套用後一併套用"""
    first = ComputedOutput.fromPath(RequestId(0, 0), (0, 1, 2), 5)
    second = ComputedOutput.fromPath(RequestId(1, 0), (1, 2), 3)
    firstView = tuple((s, EMPTY_CONFIG_HASH) for s in (0, 1, 2))
    secondView = (
        (1, hashRules({first.requestId: first.ruleFor(1)})),
        (2, hashRules({first.requestId: first.ruleFor(2)})),
    )
    switch = SwitchState(1)
    switchOnReply(switch, reply(0, second, secondView), 1, 3, now=0)
    records = switchOnReply(switch, reply(1, second, secondView), 1, 3, now=0)
    assert [r["kind"] for r in records] == ["HELD"]
    switchOnReply(switch, reply(0, first, firstView), 1, 3, now=10)
    records = switchOnReply(switch, reply(1, first, firstView), 1, 3, now=10)
    assert [(r["kind"], r["request"]) for r in records] == [("APPLIED", "0.0"), ("APPLIED", "1.0")]
    assert all(r["base"] == r["pre"] for r in records)
    assert switch.held == {}


def rejection(sender, requestId, attempt=0):
    return ProtocolMessage(
        sender=replicaEndpoint(sender),
        phase=Phase.REPLY,
        requestId=requestId,
        payload=StatusPayload(Status.REJECT, "timeout"),
        attempt=attempt,
    )


def build_client(options=ClientOptions()):
    return ClientAgent(
        ClientSpec(0, 0), Protocol.MPBFT, GroupDirectory((0, 1, 2, 3)), 1, options, 4000,
        np.random.default_rng(0),
    )


def test_client_decides_once_per_attempt():
    """fm+1 個 REJECT 只排定一次重試，之後同一嘗試的回覆被忽略"""
    client = build_client()
    request = ClientRequest(RequestId(0, 0), 0, 3, 5)
    client.issue(request, now=0)
    decisions = [client.onReply(rejection(r, request.id), now=10 + r)[0] for r in (0, 1, 2)]
    assert decisions == [None, "RETRY", None]

    out = client.retry(request.id, now=100)
    assert [o.message.attempt for o in out] == [1] * 4
    with pytest.raises(ValueError):
        client.retry(request.id, now=200)
    assert client.onReply(rejection(3, request.id), now=210) == (None, None)


def test_simulator_logs_one_retry_per_attempt():
    scenario = line_scenario(Protocol.MPBFT)
    _, request = scenario.workload[0]
    sim = Simulator(scenario)
    sim._on_arrival(request)
    for r in (0, 1, 2):
        sim._clientReply(rejection(r, request.id))
    retries = sim.log.ofKind("CLIENT_RETRY")
    assert len(retries) == 1
    assert retries[0]["reason"] == "rejected"
    assert [kind for _, _, kind, _ in sim.queue].count("client_retry") == 1


def test_client_timeout_resends_then_abandons_attempt():
    """重送次數用完後放棄該次嘗試；重試額度用完時結果為 REJECTED"""
    client = build_client(ClientOptions(retryBudget=2, resendLimit=1, timeoutUs=1000))
    request = ClientRequest(RequestId(0, 0), 0, 3, 5)
    client.issue(request, now=0)
    action, out = client.onTimeout(request.id, 0)
    assert action == "RESEND"
    assert len(out) == 4
    assert client.onTimeout(request.id, 0) == ("RETRY", [])
    assert client.onTimeout(request.id, 0) == (None, [])
    client.retry(request.id, now=3000)
    assert client.onTimeout(request.id, 0) == (None, [])
    assert client.onTimeout(request.id, 1)[0] == "RESEND"
    assert client.onTimeout(request.id, 1) == ("REJECTED", [])
    assert client.requests[request.id].outcome == "REJECTED"


def test_unanswered_request_ends_rejected():
    """群組多數當機時，用戶端靠逾時重送與重試後仍以 REJECTED 結束"""
    scenario = dataclasses.replace(
        line_scenario(Protocol.SBFT),
        clientOptions=ClientOptions(retryBudget=2, resendLimit=1, timeoutUs=20_000),
    )
    scenario = injectFault(injectFault(scenario, 1, "CRASH"), 2, "CRASH")
    log = run(scenario)
    assert outcomes(log) == {"0.0": "REJECTED"}
    assert len(log.ofKind("CLIENT_RESEND")) == 2
    assert [r["reason"] for r in log.ofKind("CLIENT_RETRY")] == ["timeout"]
    assert [r["attempt"] for r in log.ofKind("CLIENT_ISSUE")] == [0, 1]
