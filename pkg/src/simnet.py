"""離散事件網路模擬模組

單執行緒事件迴圈依 (觸發時間, 插入順序) 處理事件；所有隨機性來自
``numpy.random.default_rng(seed)``，相同情境與種子必定產生相同的事件日誌。

連線模型為 fair-loss：訊息可能遺失、重複或延遲，遺失的訊息由傳送端
在重傳計時器到期後重送，直到送達或傳送端當機為止。
"""

from __future__ import annotations

import dataclasses
import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

import networkx as nx
import numpy as np
from scipy.stats import truncnorm

from . import codec
from .assignment_solver import (
    AssignmentProblem,
    InfeasibleAssignmentError,
    groupsFromMatrix,
    reassignOnFailure,
)
from .event_log import EventLog
from .fault_injector import Behavior, FaultInjector, FaultSpec, parseBehavior
from .models import (
    ClientRequest,
    ComputedOutput,
    Endpoint,
    EndpointKind,
    FaultBudget,
    FlowRule,
    Phase,
    Protocol,
    ProtocolMessage,
    RequestId,
    Status,
    StatusPayload,
    clientEndpoint,
    replicaEndpoint,
)
from .path_app import DuplicateReservationError, OvercommitError, hashRules
from .protocol_engine import (
    REASON_NO_PATH,
    EngineOptions,
    GroupDirectory,
    Outgoing,
    Replica,
    RoundStateError,
)

logger = logging.getLogger(__name__)


class InvariantViolation(AssertionError):
    """模擬中任何不變量失效；附帶觸發時的事件索引"""

    def __init__(self, message: str, eventIndex: int):
        super().__init__(f"{message} (事件 #{eventIndex})")
        self.eventIndex = eventIndex


@dataclass(frozen=True)
class LinkModel:
    """連線模型

    基礎延遲取自拓撲上 ``delay_us`` 的最短路徑；同一站點之間使用
    ``localDelayUs``。抖動為截斷常態分布 (±2σ)，σ = ``jitterRatio`` x 基礎延遲。
    """

    jitterRatio: float = 0.05
    lossProbability: float = 0.0
    duplicateProbability: float = 0.0
    localDelayUs: int = 20

    def __post_init__(self) -> None:
        if not 0.0 <= self.lossProbability < 1.0:
            raise ValueError("遺失機率需介於 [0, 1)")
        if not 0.0 <= self.duplicateProbability < 1.0:
            raise ValueError("重複機率需介於 [0, 1)")
        if self.jitterRatio < 0:
            raise ValueError("抖動比例不可為負數")


@dataclass(frozen=True)
class ClientOptions:
    retryBudget: int = 5
    backoffFactor: float = 4.0
    resendLimit: int = 2
    timeoutUs: int = 0


@dataclass(frozen=True)
class ClientSpec:
    clientId: int
    switch: int


@dataclass
class Scenario:
    """一次模擬所需的全部輸入"""

    protocol: Protocol
    budget: FaultBudget
    topology: nx.Graph
    controllerSites: list[int]
    clients: list[ClientSpec]
    workload: list[tuple[int, ClientRequest]]
    groups: dict[int, tuple[int, ...]] = field(default_factory=dict)
    link: LinkModel = LinkModel()
    options: EngineOptions = EngineOptions()
    clientOptions: ClientOptions = ClientOptions()
    seed: int = 0
    horizonUs: int = 0
    faults: tuple[FaultSpec, ...] = ()
    replicaSpeeds: dict[int, float] = field(default_factory=dict)
    assignmentProblem: Optional[AssignmentProblem] = None
    assignment: Optional[np.ndarray] = None
    reassignDelayUs: int = 0
    delayMaxUs: int = 0
    retransmitUs: int = 0
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def clusterSize(self) -> int:
        return len(self.controllerSites)


def injectFault(
    scenario: Scenario, target: int, behavior: str | Behavior, at: int = 0
) -> Scenario:
    """回傳加入一項故障的新情境"""
    kind = parseBehavior(behavior)
    if not 0 <= target < scenario.clusterSize:
        raise ValueError(f"複本 {target} 不存在")
    spec = FaultSpec(target, kind, at)
    return dataclasses.replace(scenario, faults=tuple(scenario.faults) + (spec,))


def replyDigest(message: ProtocolMessage, switch: int) -> str:
    """交換器比對 REPLY 時使用的內容摘要 (輸出加上該交換器的基準雜湊)"""
    base = dict(message.hashView or ()).get(switch)
    return codec.shortDigest((message.payload, base))


def trafficClass(src: Endpoint, dst: Endpoint) -> str:
    if src.kind is EndpointKind.REPLICA and dst.kind is EndpointKind.REPLICA:
        return "C2C"
    if src.kind is EndpointKind.REPLICA and dst.kind is EndpointKind.SWITCH:
        return "C2S"
    return "CLIENT"


@dataclass
class SwitchState:
    """交換器端的設定比對與套用"""

    switchId: int
    rules: dict[RequestId, FlowRule] = field(default_factory=dict)
    votes: dict[RequestId, dict[Endpoint, str]] = field(default_factory=dict)
    replies: dict[tuple[RequestId, str], ProtocolMessage] = field(default_factory=dict)
    held: dict[RequestId, tuple[str, ProtocolMessage]] = field(default_factory=dict)
    applied: dict[RequestId, int] = field(default_factory=dict)
    conflicts: set[RequestId] = field(default_factory=set)

    def currentHash(self) -> bytes:
        return hashRules(self.rules)


def switchOnReply(
    switch: SwitchState,
    message: ProtocolMessage,
    fm: int,
    expectedSenders: int,
    now: int,
) -> list[dict[str, Any]]:
    """處理控制器送來的 REPLY

    同一傳送者只計第一則；某內容累積 fm+1 個相同摘要時套用。帶有 OBFT 基準
    雜湊的設定要等交換器目前雜湊與基準相同才套用，否則先保留。

    Returns:
        list[dict]: 要寫入事件日誌的 APPLIED / HELD / CONFLICT 紀錄欄位。
    """
    if message.phase is not Phase.REPLY:
        raise ValueError("交換器只接受 REPLY")
    rid = message.requestId
    if rid in switch.applied or rid in switch.held or not isinstance(message.payload, ComputedOutput):
        return []
    votes = switch.votes.setdefault(rid, {})
    if message.sender in votes:
        return []
    digest = replyDigest(message, switch.switchId)
    votes[message.sender] = digest
    switch.replies.setdefault((rid, digest), message)
    attesters = sorted(s for s, d in votes.items() if d == digest)
    if len(attesters) < fm + 1:
        tally: dict[str, int] = {}
        for d in votes.values():
            tally[d] = tally.get(d, 0) + 1
        outstanding = expectedSenders - len(votes)
        if rid not in switch.conflicts and max(tally.values()) + outstanding < fm + 1:
            switch.conflicts.add(rid)
            return [{"kind": "CONFLICT", "switch": switch.switchId, "request": str(rid),
                     "digests": sorted(set(votes.values()))}]
        return []
    records: list[dict[str, Any]] = []
    base = dict(message.hashView or ()).get(switch.switchId)
    if base is not None and switch.currentHash() != base:
        switch.held[rid] = (digest, switch.replies[(rid, digest)])
        records.append({"kind": "HELD", "switch": switch.switchId, "request": str(rid),
                        "base": base.hex()[:16]})
        return records
    records.append(_apply(switch, switch.replies[(rid, digest)], digest, attesters, now))
    progressed = True
    while progressed:
        progressed = False
        for heldRid in sorted(switch.held):
            heldDigest, heldMessage = switch.held[heldRid]
            heldBase = dict(heldMessage.hashView or ()).get(switch.switchId)
            if switch.currentHash() == heldBase:
                del switch.held[heldRid]
                heldAttesters = sorted(
                    s for s, d in switch.votes[heldRid].items() if d == heldDigest
                )
                records.append(_apply(switch, heldMessage, heldDigest, heldAttesters, now))
                progressed = True
                break
    return records


def _apply(
    switch: SwitchState, message: ProtocolMessage, digest: str, attesters: list[Endpoint], now: int
) -> dict[str, Any]:
    output = message.payload
    pre = switch.currentHash()
    rule = output.ruleFor(switch.switchId)
    if rule is not None:
        switch.rules[output.requestId] = rule
    switch.applied[output.requestId] = now
    base = dict(message.hashView or ()).get(switch.switchId)
    return {
        "kind": "APPLIED",
        "switch": switch.switchId,
        "request": str(output.requestId),
        "attempt": message.attempt,
        "digest": digest,
        "attesters": [str(a) for a in attesters],
        "pre": pre.hex()[:16],
        "base": base.hex()[:16] if base is not None else None,
        "post": switch.currentHash().hex()[:16],
    }


@dataclass
class LogicalRequest:
    request: ClientRequest
    attempt: int = 0
    issuedAt: dict[int, int] = field(default_factory=dict)
    replies: dict[int, dict[Endpoint, tuple[str, bool]]] = field(default_factory=dict)
    resends: int = 0
    outcome: Optional[str] = None
    retryPending: bool = False


class ClientAgent:
    """用戶端：送出請求、收集 fm+1 個相符回覆、被拒絕時退避重試"""

    def __init__(
        self,
        spec: ClientSpec,
        protocol: Protocol,
        directory: GroupDirectory,
        fm: int,
        options: ClientOptions,
        backoffBaseUs: int,
        rng: np.random.Generator,
    ):
        self.spec = spec
        self.endpoint = clientEndpoint(spec.clientId)
        self.protocol = protocol
        self.directory = directory
        self.fm = fm
        self.options = options
        self.backoffBaseUs = backoffBaseUs
        self.rng = rng
        self.requests: dict[RequestId, LogicalRequest] = {}

    def targets(self, request: ClientRequest) -> tuple[int, ...]:
        return self.directory.groupFor(self.protocol, request.src)

    def send(self, logical: LogicalRequest) -> list[Outgoing]:
        message = ProtocolMessage(
            sender=self.endpoint,
            phase=Phase.REQUEST,
            requestId=logical.request.id,
            payload=logical.request,
            attempt=logical.attempt,
            request=logical.request,
        )
        return [Outgoing(replicaEndpoint(r), message) for r in self.targets(logical.request)]

    def issue(self, request: ClientRequest, now: int) -> list[Outgoing]:
        if request.id in self.requests:
            raise ValueError(f"請求 {request.id} 已送出過")
        logical = LogicalRequest(request)
        logical.issuedAt[0] = now
        self.requests[request.id] = logical
        return self.send(logical)

    def onReply(self, message: ProtocolMessage, now: int) -> tuple[Optional[str], Optional[int]]:
        """回傳 (結果, 重試延遲)

        結果為 ACCEPTED / DENIED / REJECTED / RETRY 或 None (尚未決定)。
        每次嘗試最多決定一次；排定重試後，同一嘗試的後續回覆一律忽略。
        """
        logical = self.requests.get(message.requestId)
        if logical is None or logical.outcome is not None or message.attempt != logical.attempt:
            return None, None
        if logical.retryPending:
            return None, None
        if not isinstance(message.payload, StatusPayload):
            return None, None
        votes = logical.replies.setdefault(message.attempt, {})
        if message.sender in votes:
            return None, None
        payload = message.payload
        votes[message.sender] = (payload.status.value, payload.reason == REASON_NO_PATH)
        tally: dict[tuple[str, bool], int] = {}
        for value in votes.values():
            tally[value] = tally.get(value, 0) + 1
        decided = [v for v, count in sorted(tally.items()) if count >= self.fm + 1]
        if not decided:
            return None, None
        status, noPath = decided[0]
        if status == Status.ACCEPT.value:
            logical.outcome = "ACCEPTED"
            return logical.outcome, None
        if noPath:
            logical.outcome = "DENIED"
            return logical.outcome, None
        jitter = int(self.rng.uniform(0, max(self.backoffBaseUs / self.options.backoffFactor, 1)))
        return self._abandonAttempt(logical, int(self.backoffBaseUs) + jitter)

    def _abandonAttempt(self, logical: LogicalRequest, delayUs: int) -> tuple[str, Optional[int]]:
        if logical.attempt + 1 >= self.options.retryBudget:
            logical.outcome = "REJECTED"
            return logical.outcome, None
        logical.retryPending = True
        return "RETRY", delayUs

    def retry(self, requestId: RequestId, now: int) -> list[Outgoing]:
        logical = self.requests[requestId]
        if not logical.retryPending:
            raise ValueError(f"請求 {requestId} 沒有排定的重試")
        logical.retryPending = False
        logical.attempt += 1
        logical.issuedAt[logical.attempt] = now
        logical.resends = 0
        return self.send(logical)

    def onTimeout(self, requestId: RequestId, attempt: int) -> tuple[Optional[str], list[Outgoing]]:
        """逾時處理，回傳 (動作, 待送訊息)

        先以同一嘗試重送至多 ``resendLimit`` 次；仍無法湊齊相符回覆時
        放棄該嘗試，與收到拒絕相同地改為 RETRY 或終止為 REJECTED。
        """
        logical = self.requests[requestId]
        if logical.outcome is not None or logical.attempt != attempt or logical.retryPending:
            return None, []
        if logical.resends < self.options.resendLimit:
            logical.resends += 1
            return "RESEND", self.send(logical)
        outcome, _ = self._abandonAttempt(logical, 0)
        return outcome, []


class JitterSource:
    """以批次向 scipy 的截斷常態分布取樣，降低逐筆取樣的開銷"""

    def __init__(self, rng: np.random.Generator, ratio: float, batch: int = 4096):
        self.rng = rng
        self.ratio = ratio
        self.batch = batch
        self.buffer: deque[float] = deque()

    def draw(self) -> float:
        if not self.buffer:
            self.buffer.extend(truncnorm.rvs(-2.0, 2.0, size=self.batch, random_state=self.rng))
        return self.buffer.popleft()

    def delay(self, base: int) -> int:
        if self.ratio <= 0:
            return max(int(base), 1)
        return max(int(round(base + self.draw() * self.ratio * base)), 1)


class Simulator:
    """執行單一情境並產生事件日誌"""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.jitter = JitterSource(self.rng, scenario.link.jitterRatio)
        self.topology = scenario.topology
        self.fm = scenario.budget.fm
        self.distances = dict(nx.all_pairs_dijkstra_path_length(self.topology, weight="delay_us"))
        cluster = tuple(range(scenario.clusterSize))
        self.directory = GroupDirectory(cluster=cluster, groups=dict(scenario.groups))
        self.replicas = {
            i: Replica(i, scenario.protocol, scenario.budget, self.directory, self.topology, scenario.options)
            for i in cluster
        }
        self.speeds = {i: float(scenario.replicaSpeeds.get(i, 1.0)) for i in cluster}
        self.injector = FaultInjector(
            scenario.faults, np.random.default_rng(scenario.seed + 1), scenario.delayMaxUs
        )
        self.meanRttUs = self._meanRtt()
        self.retransmitUs = scenario.retransmitUs or 4 * self.maxRttUs()
        backoff = int(scenario.clientOptions.backoffFactor * self.meanRttUs)
        self.clients = {
            c.clientId: ClientAgent(
                c, scenario.protocol, self.directory, self.fm, scenario.clientOptions,
                backoff, np.random.default_rng(scenario.seed + 2 + c.clientId),
            )
            for c in scenario.clients
        }
        self.switches = {s: SwitchState(s) for s in sorted(self.topology.nodes)}
        self.matrix = None if scenario.assignment is None else np.array(scenario.assignment)
        self.log = EventLog(self._header())
        self.queue: list[tuple[int, int, str, Any]] = []
        self.counter = 0
        self.inbox: dict[int, deque[ProtocolMessage]] = {i: deque() for i in cluster}
        self.busyUntil: dict[int, int] = {i: 0 for i in cluster}
        self.processing: set[int] = set()
        self.now = 0

    # ------------------------------------------------------------------
    def _site(self, endpoint: Endpoint) -> int:
        if endpoint.kind is EndpointKind.REPLICA:
            return self.scenario.controllerSites[endpoint.index]
        if endpoint.kind is EndpointKind.CLIENT:
            return self.clients[endpoint.index].spec.switch
        return endpoint.index

    def baseDelay(self, src: Endpoint, dst: Endpoint) -> int:
        a, b = self._site(src), self._site(dst)
        if a == b:
            return self.scenario.link.localDelayUs
        return int(self.distances[a][b])

    def _meanRtt(self) -> int:
        sites = self.scenario.controllerSites
        pairs = [
            self.baseDelay(replicaEndpoint(i), replicaEndpoint(j))
            for i in range(len(sites))
            for j in range(len(sites))
            if i != j
        ]
        return int(2 * np.mean(pairs)) if pairs else 2 * self.scenario.link.localDelayUs

    def maxRttUs(self) -> int:
        longest = max(
            (self.distances[s][n] for s in self.scenario.controllerSites for n in self.topology.nodes),
            default=0,
        )
        return int(2 * max(longest, self.scenario.link.localDelayUs))

    def _header(self) -> dict[str, Any]:
        s = self.scenario
        return {
            "protocol": s.protocol.value,
            "fm": s.budget.fm,
            "fa": s.budget.fa,
            "clusterSize": s.clusterSize,
            "seed": s.seed,
            "horizonUs": s.horizonUs,
            "faulty": self.injector.faultyReplicas(),
            "links": [
                [int(u), int(v), int(d.get("capacity", 0))]
                for u, v, d in sorted(self.topology.edges(data=True))
            ],
            "groups": {str(k): list(v) for k, v in sorted(s.groups.items())},
            "params": s.params,
        }

    # ------------------------------------------------------------------
    def _schedule(self, at: int, kind: str, data: Any) -> None:
        heapq.heappush(self.queue, (int(at), self.counter, kind, data))
        self.counter += 1

    def _transmit(self, outgoing: Outgoing, sender: Endpoint, at: int, extra: int = 0) -> None:
        link = self.scenario.link
        message = outgoing.message
        if link.lossProbability > 0 and self.rng.random() < link.lossProbability:
            self.log.append("DROP", at, src=str(sender), dst=str(outgoing.recipient),
                            phase=message.phase.value, request=str(message.requestId))
            self._schedule(at + self.retransmitUs, "retransmit", (outgoing, sender, extra))
            return
        base = self.baseDelay(sender, outgoing.recipient)
        self._schedule(at + self.jitter.delay(base) + extra, "deliver", outgoing)
        if link.duplicateProbability > 0 and self.rng.random() < link.duplicateProbability:
            self.log.append("DUPLICATE", at, src=str(sender), dst=str(outgoing.recipient),
                            phase=message.phase.value, request=str(message.requestId))
            self._schedule(at + self.jitter.delay(base) + extra, "deliver", outgoing)

    def _send(self, sender: Endpoint, outgoing: list[Outgoing], at: int) -> None:
        pairs = [(o, 0) for o in outgoing]
        if sender.kind is EndpointKind.REPLICA:
            pairs = self.injector.transform(sender.index, outgoing, at)
        for o, extra in pairs:
            message = o.message
            fields: dict[str, Any] = {
                "src": str(sender),
                "dst": str(o.recipient),
                "cls": trafficClass(sender, o.recipient),
                "phase": message.phase.value,
                "request": str(message.requestId),
                "attempt": message.attempt,
                "depth": message.depth,
            }
            if o.recipient.kind is EndpointKind.SWITCH:
                fields["digest"] = replyDigest(message, o.recipient.index)
            self.log.append("SEND", at, **fields)
            self._transmit(o, sender, at, extra)

    # ------------------------------------------------------------------
    def run(self) -> EventLog:
        s = self.scenario
        for fault in sorted(s.faults, key=lambda f: (f.at, f.target)):
            self._schedule(fault.at, "fault", fault)
        for at, request in s.workload:
            self._schedule(at, "arrival", request)
        while self.queue:
            at, _, kind, data = heapq.heappop(self.queue)
            if s.horizonUs and at > s.horizonUs:
                break
            self.now = at
            getattr(self, f"_on_{kind}")(data)
        self._finish()
        return self.log

    def _on_arrival(self, request: ClientRequest) -> None:
        client = self.clients[request.id.client]
        out = client.issue(request, self.now)
        self.log.append("CLIENT_ISSUE", self.now, client=request.id.client, request=str(request.id),
                        attempt=0, src=request.src, dst=request.dst, bandwidth=request.bandwidth)
        self._send(client.endpoint, out, self.now)
        self._armClient(client, request.id, 0)

    def _armClient(self, client: ClientAgent, requestId: RequestId, attempt: int) -> None:
        if client.options.timeoutUs > 0:
            self._schedule(self.now + client.options.timeoutUs, "client_timer",
                           (client.spec.clientId, requestId, attempt))

    def _on_client_timer(self, data: tuple[int, RequestId, int]) -> None:
        clientId, requestId, attempt = data
        client = self.clients[clientId]
        action, out = client.onTimeout(requestId, attempt)
        if action == "RESEND":
            self.log.append("CLIENT_RESEND", self.now, client=clientId, request=str(requestId), attempt=attempt)
            self._send(client.endpoint, out, self.now)
            self._armClient(client, requestId, attempt)
        elif action == "RETRY":
            self._scheduleRetry(client, requestId, 0, reason="timeout")
        elif action is not None:
            self._clientDone(client, requestId, action)

    def _on_client_retry(self, data: tuple[int, RequestId]) -> None:
        clientId, requestId = data
        client = self.clients[clientId]
        out = client.retry(requestId, self.now)
        attempt = client.requests[requestId].attempt
        self.log.append("CLIENT_ISSUE", self.now, client=clientId, request=str(requestId), attempt=attempt)
        self._send(client.endpoint, out, self.now)
        self._armClient(client, requestId, attempt)

    def _on_retransmit(self, data: tuple[Outgoing, Endpoint, int]) -> None:
        outgoing, sender, extra = data
        if sender.kind is EndpointKind.REPLICA and self.injector.isCrashed(sender.index, self.now):
            return
        self.log.append("RETRANSMIT", self.now, src=str(sender), dst=str(outgoing.recipient),
                        phase=outgoing.message.phase.value, request=str(outgoing.message.requestId))
        self._transmit(outgoing, sender, self.now, extra)

    def _on_deliver(self, outgoing: Outgoing) -> None:
        recipient = outgoing.recipient
        message = outgoing.message
        fields: dict[str, Any] = {
            "src": str(message.sender),
            "dst": str(recipient),
            "phase": message.phase.value,
            "request": str(message.requestId),
            "attempt": message.attempt,
        }
        if recipient.kind is EndpointKind.REPLICA:
            if self.injector.isCrashed(recipient.index, self.now):
                self.log.append("DISCARD", self.now, **fields)
                return
            self.log.append("DELIVER", self.now, **fields)
            self.inbox[recipient.index].append(message)
            if recipient.index not in self.processing:
                self.processing.add(recipient.index)
                self._schedule(max(self.now, self.busyUntil[recipient.index]), "process", recipient.index)
        elif recipient.kind is EndpointKind.CLIENT:
            self.log.append("DELIVER", self.now, **fields)
            self._clientReply(message)
        else:
            fields["digest"] = replyDigest(message, recipient.index)
            self.log.append("DELIVER", self.now, **fields)
            switch = self.switches[recipient.index]
            expected = len(self.directory.groupFor(self.scenario.protocol, self._requestSrc(message)))
            for record in switchOnReply(switch, message, self.fm, expected, self.now):
                kind = record.pop("kind")
                self.log.append(kind, self.now, **record)

    def _requestSrc(self, message: ProtocolMessage) -> int:
        output = message.payload
        if isinstance(output, ComputedOutput) and output.path:
            return output.path[0]
        return self.clients[message.requestId.client].spec.switch

    def _clientReply(self, message: ProtocolMessage) -> None:
        client = self.clients[message.requestId.client]
        outcome, delay = client.onReply(message, self.now)
        if outcome is None:
            return
        if outcome == "RETRY":
            self._scheduleRetry(client, message.requestId, delay, reason="rejected")
            return
        self._clientDone(client, message.requestId, outcome)

    def _scheduleRetry(self, client: ClientAgent, requestId: RequestId, delay: int, reason: str) -> None:
        logical = client.requests[requestId]
        self.log.append("CLIENT_RETRY", self.now, client=client.spec.clientId, request=str(requestId),
                        attempt=logical.attempt, backoffUs=delay, reason=reason)
        self._schedule(self.now + delay, "client_retry", (client.spec.clientId, requestId))

    def _clientDone(self, client: ClientAgent, requestId: RequestId, outcome: str) -> None:
        logical = client.requests[requestId]
        self.log.append(
            "CLIENT_DONE", self.now, client=client.spec.clientId, request=str(requestId),
            attempt=logical.attempt, outcome=outcome, issuedAt=logical.issuedAt[logical.attempt],
            firstIssuedAt=logical.issuedAt[0],
        )

    def _on_process(self, replicaId: int) -> None:
        inbox = self.inbox[replicaId]
        if self.injector.isCrashed(replicaId, self.now):
            inbox.clear()
            self.processing.discard(replicaId)
            return
        if not inbox:
            self.processing.discard(replicaId)
            return
        message = inbox.popleft()
        replica = self.replicas[replicaId]
        try:
            if message.phase is Phase.REQUEST:
                out = replica.onClientRequest(message.payload, self.now, message.attempt)
            else:
                out = replica.onReplicaMessage(message, self.now)
        except (OvercommitError, DuplicateReservationError, RoundStateError) as exc:
            raise InvariantViolation(f"複本 {replicaId}：{exc}", len(self.log)) from exc
        work = int(round(replica.drainWork() / self.speeds[replicaId]))
        done = self.now + work
        self.busyUntil[replicaId] = done
        self._flush(replica, out, done)
        if inbox:
            self._schedule(done, "process", replicaId)
        else:
            self.processing.discard(replicaId)

    def _flush(self, replica: Replica, out: list[Outgoing], at: int) -> None:
        for entry in replica.drainJournal():
            entry = dict(entry)
            kind = entry.pop("kind")
            self.log.append(kind, self.now, **entry)
        for timer in replica.drainTimers():
            self._schedule(at + timer.delayUs, "timer", (replica.id, timer.token))
        if not out:
            return
        if at == self.now:
            self._send(replica.endpoint, out, at)
        else:
            self._schedule(at, "emit", (replica.id, out))

    def _on_emit(self, data: tuple[int, list[Outgoing]]) -> None:
        replicaId, out = data
        if self.injector.isCrashed(replicaId, self.now):
            return
        self._send(replicaEndpoint(replicaId), out, self.now)

    def _on_timer(self, data: tuple[int, tuple]) -> None:
        replicaId, token = data
        if self.injector.isCrashed(replicaId, self.now):
            return
        replica = self.replicas[replicaId]
        out = replica.onTimer(token, self.now)
        replica.drainWork()
        self._flush(replica, out, self.now)

    def _on_fault(self, fault: FaultSpec) -> None:
        self.log.append("FAULT", self.now, replica=fault.target, behavior=fault.behavior.value)
        logger.debug("複本 %d 於 %d us 開始 %s", fault.target, self.now, fault.behavior.value)
        if (
            fault.behavior is Behavior.CRASH
            and self.scenario.reassignDelayUs > 0
            and self.scenario.protocol is not Protocol.MPBFT
            and self.scenario.assignmentProblem is not None
            and self.matrix is not None
        ):
            self._schedule(self.now + self.scenario.reassignDelayUs, "reassign", None)

    def _on_reassign(self, _: Any) -> None:
        failed = [i for i in self.replicas if self.injector.isCrashed(i, self.now)]
        problem = self.scenario.assignmentProblem
        try:
            matrix = reassignOnFailure(problem, failed, self.matrix)
        except InfeasibleAssignmentError as exc:
            self.log.append("REASSIGN", self.now, failed=failed, ok=False, detail=str(exc))
            return
        changed = int(np.abs(matrix.astype(int) - self.matrix.astype(int)).sum())
        self.matrix = matrix
        self.directory.groups.clear()
        self.directory.groups.update(groupsFromMatrix(problem, matrix))
        self.log.append("REASSIGN", self.now, failed=failed, ok=True, changed=changed)
        for replicaId in sorted(self.replicas):
            if not self.injector.isCrashed(replicaId, self.now):
                self.propagateStateSync(replicaId)

    def propagateStateSync(self, replicaId: int, delayUs: int = 0) -> None:
        """排程讓複本立即為未完成的 round 發出 SYNC_REQUEST"""
        self._schedule(self.now + delayUs, "sync", replicaId)

    def _on_sync(self, replicaId: int) -> None:
        if self.injector.isCrashed(replicaId, self.now):
            return
        replica = self.replicas[replicaId]
        out = replica.requestSync(self.now)
        self._flush(replica, out, self.now)

    def _finish(self) -> None:
        for i, replica in sorted(self.replicas.items()):
            snapshot = replica.syncSnapshot()
            snapshot["crashed"] = self.injector.isCrashed(i, self.now)
            self.log.append("END", self.now, scope="replica", **snapshot)
        for s, switch in sorted(self.switches.items()):
            self.log.append("END", self.now, scope="switch", switch=s, rules=len(switch.rules),
                            held=len(switch.held), hash=switch.currentHash().hex()[:16])


def run(scenario: Scenario) -> EventLog:
    """執行情境並回傳完整事件日誌"""
    return Simulator(scenario).run()


def propagateStateSync(simulator: Simulator, replicaId: int, delayUs: int = 0) -> None:
    """讓落後的複本向其他複本拉取已提交的結果"""
    simulator.propagateStateSync(replicaId, delayUs)
