"""BFT 協定引擎模組

每個控制器複本是一個確定性的狀態機：輸入用戶端請求、其他複本的訊息
或計時器，輸出要送出的訊息。MPBFT、SBFT、OBFT 共用同一套 round 管理、
投票收集與拒絕處理，差別在各階段的收件者與門檻。

排程與網路由模擬器負責；複本只透過 :attr:`Replica.timers` 要求計時器，
透過 :attr:`Replica.journal` 回報狀態轉移，透過 :attr:`Replica.workUs`
回報本次處理耗費的計算時間。
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Hashable, Iterable, Optional

import networkx as nx

from . import codec
from .models import (
    PROTOCOL_PHASES,
    ClientRequest,
    ComputedOutput,
    ConfigHash,
    Endpoint,
    EndpointKind,
    FaultBudget,
    HashView,
    Phase,
    Protocol,
    ProtocolMessage,
    RequestId,
    RoundStatus,
    SeqProposal,
    Status,
    StatusPayload,
    clientEndpoint,
    makeHashView,
    replicaEndpoint,
    switchEndpoint,
)
from .path_app import (
    EMPTY_CONFIG_HASH,
    ReservationStore,
    applyReservation,
    configHash,
    findPath,
)
from .quorum import QuorumSizes, thresholdFor
from .sequencer import (
    SequenceConflictError,
    SequencerState,
    proposeSeqNo,
    recordRemoteMapping,
    retireSeqNo,
)

logger = logging.getLogger(__name__)

RoundKey = tuple[RequestId, int]

REASON_NO_PATH = "no-path"


class ConsensusKind(str, Enum):
    MAJORITY = "MAJORITY"
    PENDING = "PENDING"
    UNREACHABLE = "UNREACHABLE"


class CausalStatus(str, Enum):
    READY = "READY"
    BLOCKED = "BLOCKED"


@dataclass(frozen=True)
class ConsensusResult:
    kind: ConsensusKind
    value: Any = None


def consensus(
    votes: Iterable[Hashable],
    threshold: int,
    potential: Optional[int] = None,
    slack: int = 0,
) -> ConsensusResult:
    """統計已去重的投票值

    Args:
        votes: 每位傳送者一票。
        threshold: 需要的相符票數。
        potential: 可能投票的傳送者總數，預設為目前票數。
        slack: 判定無法達成時額外保留的票數。

    Returns:
        ConsensusResult: 有值達到門檻時為 MAJORITY；剩餘票數加上 slack
        仍不可能讓任何值達標時為 UNREACHABLE；否則為 PENDING。
    """
    ballot = list(votes)
    counts = Counter(ballot)
    if potential is None:
        potential = len(ballot)
    winners = [value for value, count in counts.items() if count >= threshold]
    if winners:
        winner = max(winners, key=lambda v: (counts[v], codec.encode(v)))
        return ConsensusResult(ConsensusKind.MAJORITY, winner)
    best = max(counts.values(), default=0)
    remaining = max(potential - len(ballot), 0)
    if best + remaining + slack < threshold:
        return ConsensusResult(ConsensusKind.UNREACHABLE)
    return ConsensusResult(ConsensusKind.PENDING)


@dataclass(frozen=True)
class EngineOptions:
    """複本行為參數 (時間單位皆為微秒)

    計時器設為 0 代表停用。
    """

    obftCommitRule: str = "agr"
    safeRejection: bool = False
    cmpCostUs: int = 0
    execCostUs: int = 0
    syncTimeoutUs: int = 0
    roundTimeoutUs: int = 0
    holeTimeoutUs: int = 0
    costModel: str = "utilisation"


@dataclass
class GroupDirectory:
    """交換器 -> A&E 群組成員，所有複本與用戶端共用同一份

    MPBFT 不使用群組，整個叢集即為唯一群組。
    """

    cluster: tuple[int, ...]
    groups: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def groupFor(self, protocol: Protocol, switch: int) -> tuple[int, ...]:
        if protocol is Protocol.MPBFT:
            return self.cluster
        if switch not in self.groups:
            raise ValueError(f"交換器 {switch} 沒有指派 A&E 群組")
        return self.groups[switch]


@dataclass(frozen=True)
class Outgoing:
    recipient: Endpoint
    message: ProtocolMessage


@dataclass(frozen=True)
class TimerRequest:
    delayUs: int
    token: tuple[str, RequestId, int]


@dataclass(frozen=True)
class CommitRecord:
    attempt: int
    seqNo: Optional[int]
    output: ComputedOutput
    hashView: Optional[HashView]


class RoundStateError(RuntimeError):
    """對已結束的 round 再次轉移狀態"""


@dataclass
class RoundState:
    """單一 (請求, 嘗試次數) 的協定執行狀態"""

    requestId: RequestId
    attempt: int
    request: ClientRequest
    group: tuple[int, ...]
    createdAt: int = 0
    phase: Phase = Phase.REQUEST
    status: RoundStatus = RoundStatus.PENDING
    buffers: dict[Phase, dict[Endpoint, ProtocolMessage]] = field(default_factory=dict)
    discounted: set[Endpoint] = field(default_factory=set)
    proposedSeq: Optional[int] = None
    preAgreed: bool = False
    prepareDone: bool = False
    agreedSeq: Optional[int] = None
    output: Optional[ComputedOutput] = None
    decided: Optional[ComputedOutput] = None
    decidedSeq: Optional[int] = None
    decidedHashView: Optional[HashView] = None
    preReply: Optional[Status] = None
    accepted: bool = False
    depth: int = 0
    clientSeen: bool = False
    sent: list[Outgoing] = field(default_factory=list)
    reason: str = ""

    @property
    def key(self) -> RoundKey:
        return (self.requestId, self.attempt)

    @property
    def terminal(self) -> bool:
        return self.status is not RoundStatus.PENDING

    def finish(self, status: RoundStatus, reason: str = "") -> None:
        if self.terminal:
            raise RoundStateError(
                f"round {self.requestId}#{self.attempt} 已是 {self.status.value}"
            )
        if status is RoundStatus.PENDING:
            raise RoundStateError("round 只能轉移到 ACCEPTING 或 REJECTING")
        self.status = status
        self.reason = reason

    def buffer(self, phase: Phase) -> dict[Endpoint, ProtocolMessage]:
        return self.buffers.setdefault(phase, {})

    def reach(self, depth: int) -> None:
        self.depth = max(self.depth, depth)


def voteValue(message: ProtocolMessage) -> tuple:
    """訊息在共識比對時使用的值"""
    payload = message.payload
    if isinstance(payload, StatusPayload):
        return (payload.status.value,)
    if isinstance(payload, SeqProposal):
        return ("SEQ", payload.seqNo)
    if isinstance(payload, ComputedOutput):
        return (
            "OUT",
            message.seqNo,
            codec.encode(payload),
            codec.encode(message.hashView),
        )
    return ("NONE",)


def payloadIsValid(protocol: Protocol, message: ProtocolMessage) -> bool:
    """檢查 (協定, 階段) 與負載種類是否相符"""
    phase = message.phase
    payload = message.payload
    if phase is Phase.SYNC_REQUEST:
        return payload is None
    if phase is Phase.SYNC:
        return isinstance(payload, ComputedOutput) and payload.requestId == message.requestId
    if phase not in PROTOCOL_PHASES[protocol] or phase in (Phase.REQUEST, Phase.REPLY):
        return False
    if isinstance(payload, ComputedOutput) and payload.requestId != message.requestId:
        return False
    if protocol is Protocol.MPBFT:
        if phase is Phase.PREPARE:
            return isinstance(payload, SeqProposal)
        return isinstance(payload, ComputedOutput) and message.seqNo is not None
    if protocol is Protocol.SBFT:
        if phase is Phase.PRE_PREPARE:
            return isinstance(payload, SeqProposal)
        if phase is Phase.PREPARE:
            return isinstance(payload, SeqProposal) or _isReject(payload)
        return (
            isinstance(payload, ComputedOutput) and message.seqNo is not None
        ) or _isReject(payload)
    if phase is Phase.COMMIT:
        return isinstance(payload, ComputedOutput) and message.hashView is not None
    return isinstance(payload, StatusPayload)


def _isReject(payload: Any) -> bool:
    return isinstance(payload, StatusPayload) and payload.status is Status.REJECT


class Replica:
    """單一控制器複本"""

    def __init__(
        self,
        replicaId: int,
        protocol: Protocol,
        budget: FaultBudget,
        directory: GroupDirectory,
        topology: nx.Graph,
        options: EngineOptions = EngineOptions(),
    ):
        self.id = replicaId
        self.endpoint = replicaEndpoint(replicaId)
        self.protocol = protocol
        self.budget = budget
        self.directory = directory
        self.topology = topology
        self.options = options
        self.sequencer = SequencerState()
        self.store = ReservationStore.fromTopology(topology)
        self.hv: dict[int, ConfigHash] = {s: EMPTY_CONFIG_HASH for s in topology.nodes}
        self.hvc: dict[RoundKey, dict[int, ConfigHash]] = {}
        self.rounds: dict[RoundKey, RoundState] = {}
        self.attempts: dict[RequestId, set[int]] = {}
        # MPBFT/SBFT：每個請求在同一序號只執行一次，各次嘗試共用同一份輸出
        self.executed: dict[RequestId, tuple[int, ComputedOutput]] = {}
        # OBFT：每個請求同時只對一次嘗試回 PRE_REPLY ACCEPT
        self.preAccepted: dict[RequestId, int] = {}
        self.lastCommittedSeq: Optional[int] = None
        self.executionQueue: set[RoundKey] = set()
        self.hashWaiting: set[RoundKey] = set()
        self.committedRequests: dict[RequestId, CommitRecord] = {}
        self.acceptedBases: dict[tuple[int, ConfigHash], RequestId] = {}
        self.holeSince: dict[int, int] = {}
        self.skippedHoles: set[int] = set()
        self.syncVotes: dict[RequestId, dict[Endpoint, ProtocolMessage]] = {}
        self.journal: list[dict[str, Any]] = []
        self.timers: list[TimerRequest] = []
        self.workUs = 0
        self.now = 0

    # ------------------------------------------------------------------
    # 共用工具
    # ------------------------------------------------------------------
    @property
    def cluster(self) -> tuple[int, ...]:
        return self.directory.cluster

    def _sizes(self, rnd: RoundState) -> QuorumSizes:
        return QuorumSizes(
            group=len(rnd.group),
            cluster=len(self.cluster),
            fm=self.budget.fm,
            obftCommitRule=self.options.obftCommitRule,
        )

    def _threshold(self, rnd: RoundState, phase: Phase) -> int:
        return thresholdFor(self.protocol, phase, self._sizes(rnd))

    def _slack(self) -> int:
        return self.budget.fm if self.options.safeRejection else 0

    def _potential(self, rnd: RoundState, members: Iterable[int]) -> int:
        return len({replicaEndpoint(i) for i in members} - rnd.discounted)

    def _inGroup(self, rnd: RoundState) -> bool:
        return self.id in rnd.group

    def _record(self, event: str, rnd: Optional[RoundState] = None, **fields: Any) -> None:
        entry: dict[str, Any] = {"kind": "TRANSITION", "replica": self.id, "event": event}
        if rnd is not None:
            entry["request"] = str(rnd.requestId)
            entry["attempt"] = rnd.attempt
        entry.update(fields)
        self.journal.append(entry)

    def _repliesToClient(self, rnd: RoundState) -> bool:
        return self.protocol is Protocol.MPBFT or self._inGroup(rnd)

    def _emit(
        self,
        rnd: RoundState,
        phase: Phase,
        payload: Any,
        recipients: Iterable[int],
        seqNo: Optional[int] = None,
        hashView: Optional[HashView] = None,
        ownVote: bool = False,
    ) -> list[Outgoing]:
        """產生下一階段訊息；``ownVote`` 為真時同時寫入自己的緩衝區"""
        message = ProtocolMessage(
            sender=self.endpoint,
            phase=phase,
            requestId=rnd.requestId,
            payload=payload,
            attempt=rnd.attempt,
            seqNo=seqNo,
            hashView=hashView,
            request=rnd.request,
            depth=rnd.depth + 1,
        )
        out = [
            Outgoing(replicaEndpoint(r), message)
            for r in sorted(set(recipients))
            if r != self.id
        ]
        if ownVote:
            rnd.buffer(phase)[self.endpoint] = message
        rnd.phase = phase
        rnd.sent = out
        return out

    def _openRound(self, request: ClientRequest, attempt: int) -> RoundState:
        rnd = RoundState(
            requestId=request.id,
            attempt=attempt,
            request=request,
            group=self.directory.groupFor(self.protocol, request.src),
            createdAt=self.now,
        )
        self.rounds[rnd.key] = rnd
        self.attempts.setdefault(rnd.requestId, set()).add(attempt)
        if self.options.syncTimeoutUs > 0:
            self.timers.append(TimerRequest(self.options.syncTimeoutUs, ("sync", rnd.requestId, attempt)))
        if self.options.roundTimeoutUs > 0:
            self.timers.append(TimerRequest(self.options.roundTimeoutUs, ("timeout", rnd.requestId, attempt)))
        return rnd

    def _liveSiblings(self, rnd: RoundState) -> list[RoundState]:
        """同一請求其他嘗試中尚未結束的 round"""
        siblings = []
        for attempt in sorted(self.attempts.get(rnd.requestId, ())):
            other = self.rounds[(rnd.requestId, attempt)]
            if other is not rnd and not other.terminal:
                siblings.append(other)
        return siblings

    def _isStale(self, seqNo: int) -> bool:
        """序號已被略過，或不大於本複本最後提交的序號"""
        if seqNo in self.skippedHoles:
            return True
        return self.lastCommittedSeq is not None and seqNo <= self.lastCommittedSeq

    def _clientReply(self, rnd: RoundState, status: Status, reason: str = "") -> list[Outgoing]:
        if not self._repliesToClient(rnd):
            return []
        message = ProtocolMessage(
            sender=self.endpoint,
            phase=Phase.REPLY,
            requestId=rnd.requestId,
            payload=StatusPayload(status, reason),
            attempt=rnd.attempt,
            depth=rnd.depth + 1,
        )
        return [Outgoing(clientEndpoint(rnd.requestId.client), message)]

    def _decisionReply(self, rnd: RoundState) -> list[Outgoing]:
        if rnd.status is RoundStatus.ACCEPTING:
            done = self.committedRequests.get(rnd.requestId)
            if done is not None and done.output.denied:
                return self._clientReply(rnd, Status.REJECT, REASON_NO_PATH)
            return self._clientReply(rnd, Status.ACCEPT)
        return self._clientReply(rnd, Status.REJECT, rnd.reason)

    # ------------------------------------------------------------------
    # 外部事件
    # ------------------------------------------------------------------
    def onClientRequest(self, request: ClientRequest, now: int, attempt: int = 0) -> list[Outgoing]:
        """處理用戶端 REQUEST"""
        self.now = now
        self.workUs += self.options.cmpCostUs
        key = (request.id, attempt)
        rnd = self.rounds.get(key)
        if rnd is None:
            group = self.directory.groupFor(self.protocol, request.src)
            if self.protocol is not Protocol.MPBFT and self.id not in group:
                return []
            done = self.committedRequests.get(request.id)
            if done is not None:
                answered = RoundState(request.id, attempt, request, group, status=RoundStatus.ACCEPTING)
                return self._decisionReply(answered)
            rnd = self._openRound(request, attempt)
        elif rnd.terminal:
            return self._decisionReply(rnd)
        elif rnd.clientSeen:
            return list(rnd.sent)
        rnd.clientSeen = True
        if self.protocol is not Protocol.MPBFT and not self._inGroup(rnd):
            return []
        out = self._start(rnd)
        # 其他複本的票可能早於本地請求抵達
        depth = max((m.depth for slot in rnd.buffers.values() for m in slot.values()), default=0)
        out += self._evaluate(rnd, depth)
        return out + self._settle(rnd)

    def onReplicaMessage(self, message: ProtocolMessage, now: int) -> list[Outgoing]:
        """處理其他複本送來的協定訊息"""
        self.now = now
        self.workUs += self.options.cmpCostUs
        sender = message.sender
        if sender.kind is not EndpointKind.REPLICA or sender.index not in self.cluster or sender == self.endpoint:
            return []
        if not payloadIsValid(self.protocol, message):
            self._record("DROP_INVALID", sender=str(sender), phase=message.phase.value,
                         request=str(message.requestId), attempt=message.attempt)
            return []
        if message.phase is Phase.SYNC_REQUEST:
            return self._answerSync(message)
        if message.phase is Phase.SYNC:
            return self._collectSync(message)

        key = (message.requestId, message.attempt)
        rnd = self.rounds.get(key)
        if rnd is None:
            if message.request is None or message.request.id != message.requestId:
                return []
            if message.requestId in self.committedRequests:
                return []
            rnd = self._openRound(message.request, message.attempt)
        if rnd.terminal:
            return []
        if self.protocol is not Protocol.MPBFT and not self._fromExpectedSender(rnd, message):
            self._record("DROP_INVALID", rnd, sender=str(sender), phase=message.phase.value)
            return []
        if not self._buffer(rnd, message):
            return []

        out: list[Outgoing] = []
        if self.protocol is Protocol.MPBFT and rnd.proposedSeq is None:
            out += self._start(rnd)
        if self.protocol is Protocol.SBFT and message.phase is Phase.PRE_PREPARE and rnd.proposedSeq is None:
            rnd.proposedSeq = proposeSeqNo(self.sequencer, rnd.requestId)
        out += self._evaluate(rnd, message.depth)
        return out + self._settle(rnd)

    def onTimer(self, token: tuple[str, RequestId, int], now: int) -> list[Outgoing]:
        """處理計時器到期"""
        self.now = now
        kind, requestId, attempt = token
        if kind == "hole":
            return self._drain()
        rnd = self.rounds.get((requestId, attempt))
        if rnd is None or rnd.terminal:
            return []
        if kind == "sync":
            self.timers.append(TimerRequest(self.options.syncTimeoutUs, token))
            return self._syncRequest(rnd)
        if kind == "timeout":
            decided = rnd.accepted or (self.protocol is not Protocol.OBFT and rnd.decided is not None)
            if decided:
                self.timers.append(TimerRequest(self.options.roundTimeoutUs, token))
                return []
            return self._reject(rnd, "timeout") + self._drain() + self._drainHashes()
        raise ValueError(f"未知的計時器種類：{kind}")

    def requestSync(self, now: int) -> list[Outgoing]:
        """立即為所有未完成的 round 向其他複本要求同步"""
        self.now = now
        out: list[Outgoing] = []
        for rnd in sorted(self.pendingRounds(), key=lambda r: r.key):
            out += self._syncRequest(rnd)
        return out

    def _syncRequest(self, rnd: RoundState) -> list[Outgoing]:
        message = ProtocolMessage(
            sender=self.endpoint,
            phase=Phase.SYNC_REQUEST,
            requestId=rnd.requestId,
            payload=None,
            attempt=rnd.attempt,
            request=rnd.request,
            depth=rnd.depth + 1,
        )
        self._record("SYNC_REQUEST", rnd)
        return [Outgoing(replicaEndpoint(r), message) for r in self.cluster if r != self.id]

    def drainJournal(self) -> list[dict[str, Any]]:
        entries, self.journal = self.journal, []
        return entries

    def drainTimers(self) -> list[TimerRequest]:
        timers, self.timers = self.timers, []
        return timers

    def drainWork(self) -> int:
        work, self.workUs = self.workUs, 0
        return work

    def pendingRounds(self) -> list[RoundState]:
        return [rnd for rnd in self.rounds.values() if not rnd.terminal]

    # ------------------------------------------------------------------
    # 緩衝與共識
    # ------------------------------------------------------------------
    def _fromExpectedSender(self, rnd: RoundState, message: ProtocolMessage) -> bool:
        sender = message.sender.index
        phase = message.phase
        if self.protocol is Protocol.SBFT:
            if phase in (Phase.PRE_PREPARE, Phase.COMMIT):
                return sender in rnd.group
            return self._inGroup(rnd)
        if phase is Phase.COMMIT:
            return sender in rnd.group
        return True

    def _buffer(self, rnd: RoundState, message: ProtocolMessage) -> bool:
        """寫入緩衝區；重複訊息回傳 False，偵測到矛盾時作廢該傳送者的票"""
        sender = message.sender
        if sender in rnd.discounted:
            return False
        slot = rnd.buffer(message.phase)
        existing = slot.get(sender)
        if existing is None:
            slot[sender] = message
            return True
        if voteValue(existing) == voteValue(message):
            return False
        rnd.discounted.add(sender)
        for buffered in rnd.buffers.values():
            buffered.pop(sender, None)
        self._record("EQUIVOCATION", rnd, sender=str(sender), phase=message.phase.value)
        return True

    def _tally(self, rnd: RoundState, phase: Phase, members: Iterable[int]) -> ConsensusResult:
        votes = [voteValue(m) for m in rnd.buffer(phase).values()]
        return consensus(
            votes,
            self._threshold(rnd, phase),
            self._potential(rnd, members),
            self._slack(),
        )

    def _messageWith(self, rnd: RoundState, phase: Phase, value: tuple) -> ProtocolMessage:
        for sender in sorted(rnd.buffer(phase)):
            message = rnd.buffer(phase)[sender]
            if voteValue(message) == value:
                return message
        raise KeyError(value)

    # ------------------------------------------------------------------
    # 協定流程
    # ------------------------------------------------------------------
    def _start(self, rnd: RoundState) -> list[Outgoing]:
        if self.protocol is Protocol.MPBFT:
            if rnd.proposedSeq is not None:
                return []
            rnd.proposedSeq = proposeSeqNo(self.sequencer, rnd.requestId)
            return self._emit(rnd, Phase.PREPARE, SeqProposal(rnd.proposedSeq), self.cluster, ownVote=True)
        if self.protocol is Protocol.SBFT:
            if Phase.PRE_PREPARE in rnd.buffers and self.endpoint in rnd.buffer(Phase.PRE_PREPARE):
                return []
            rnd.proposedSeq = proposeSeqNo(self.sequencer, rnd.requestId)
            return self._emit(rnd, Phase.PRE_PREPARE, SeqProposal(rnd.proposedSeq), self.cluster, ownVote=True)
        if rnd.output is not None:
            return []
        output = self._execute(rnd)
        snapshot = {s: self.hv[s] for s in output.path}
        self.hvc[rnd.key] = snapshot
        return self._emit(
            rnd, Phase.COMMIT, output, self.cluster, hashView=makeHashView(snapshot), ownVote=True
        )

    def _execute(self, rnd: RoundState) -> ComputedOutput:
        self.workUs += self.options.execCostUs
        output = findPath(self.topology, self.store, rnd.request, self.options.costModel)
        if output is None:
            output = ComputedOutput.denial(rnd.requestId, rnd.request.bandwidth)
        rnd.output = output
        self._record("EXECUTE", rnd, digest=codec.shortDigest(output), path=list(output.path))
        return output

    def _executeOnce(self, rnd: RoundState) -> ComputedOutput:
        """MPBFT/SBFT：同一請求在同一序號只計算一次，其他嘗試沿用結果"""
        cached = self.executed.get(rnd.requestId)
        if cached is not None and cached[0] == rnd.agreedSeq:
            rnd.output = cached[1]
            self._record("REUSE_OUTPUT", rnd, seq=rnd.agreedSeq, digest=codec.shortDigest(cached[1]))
            return cached[1]
        output = self._execute(rnd)
        self.executed[rnd.requestId] = (rnd.agreedSeq, output)
        return output

    def _evaluate(self, rnd: RoundState, depth: int) -> list[Outgoing]:
        if self.protocol is Protocol.MPBFT:
            return self._evaluateMpbft(rnd, depth)
        if self.protocol is Protocol.SBFT:
            return self._evaluateSbft(rnd, depth)
        return self._evaluateObft(rnd, depth)

    def _settle(self, rnd: RoundState) -> list[Outgoing]:
        if self.protocol is Protocol.OBFT:
            return self._drainHashes()
        return self._drain()

    def _agree(self, rnd: RoundState, seqNo: int) -> bool:
        """採納共識序號；與本地已確定的序號衝突或已過時時回傳 False

        提交序號在每個複本上嚴格遞增，因此已略過的洞或不大於最後提交
        序號的值都不能再採納。
        """
        if self._isStale(seqNo):
            self._record("STALE_SEQ", rnd, seq=seqNo, last=self.lastCommittedSeq)
            return False
        try:
            recordRemoteMapping(self.sequencer, rnd.requestId, seqNo)
        except SequenceConflictError as exc:
            logger.debug("複本 %d：%s", self.id, exc)
            return False
        if rnd.agreedSeq != seqNo:
            rnd.agreedSeq = seqNo
            self._record("AGREE", rnd, seq=seqNo)
        self.executionQueue.add(rnd.key)
        return True

    def _evaluateMpbft(self, rnd: RoundState, depth: int) -> list[Outgoing]:
        out: list[Outgoing] = []
        if rnd.agreedSeq is None and rnd.decided is None:
            result = self._tally(rnd, Phase.PREPARE, self.cluster)
            if result.kind is ConsensusKind.MAJORITY:
                rnd.reach(depth)
                if not self._agree(rnd, result.value[1]):
                    return self._reject(rnd, "seq-conflict")
            elif result.kind is ConsensusKind.UNREACHABLE:
                return self._reject(rnd, "prepare-unreachable")
        return out + self._evaluateCommit(rnd, depth, self.cluster)

    def _evaluateSbft(self, rnd: RoundState, depth: int) -> list[Outgoing]:
        out: list[Outgoing] = []
        if not rnd.preAgreed:
            result = self._tally(rnd, Phase.PRE_PREPARE, rnd.group)
            if result.kind is not ConsensusKind.PENDING:
                rnd.preAgreed = True
                rnd.reach(depth)
                payload: Any = StatusPayload(Status.REJECT)
                if result.kind is ConsensusKind.MAJORITY:
                    seqNo = result.value[1]
                    if self._isStale(seqNo):
                        self._record("STALE_SEQ", rnd, seq=seqNo, last=self.lastCommittedSeq)
                    else:
                        try:
                            recordRemoteMapping(self.sequencer, rnd.requestId, seqNo)
                            payload = SeqProposal(seqNo)
                        except SequenceConflictError as exc:
                            logger.debug("複本 %d：%s", self.id, exc)
                out += self._emit(rnd, Phase.PREPARE, payload, rnd.group, ownVote=self._inGroup(rnd))
        if self._inGroup(rnd) and not rnd.prepareDone:
            result = self._tally(rnd, Phase.PREPARE, self.cluster)
            if result.kind is ConsensusKind.MAJORITY and result.value[0] == "SEQ":
                rnd.prepareDone = True
                rnd.reach(depth)
                if not self._agree(rnd, result.value[1]):
                    out += self._emit(rnd, Phase.COMMIT, StatusPayload(Status.REJECT), self.cluster, ownVote=True)
            elif result.kind is not ConsensusKind.PENDING:
                rnd.prepareDone = True
                rnd.reach(depth)
                out += self._emit(rnd, Phase.COMMIT, StatusPayload(Status.REJECT), self.cluster, ownVote=True)
        return out + self._evaluateCommit(rnd, depth, rnd.group)

    def _evaluateCommit(self, rnd: RoundState, depth: int, members: Iterable[int]) -> list[Outgoing]:
        if rnd.terminal or rnd.decided is not None:
            return []
        result = self._tally(rnd, Phase.COMMIT, members)
        if result.kind is ConsensusKind.PENDING:
            return []
        rnd.reach(depth)
        if result.kind is ConsensusKind.UNREACHABLE:
            return self._reject(rnd, "commit-unreachable")
        if result.value[0] != "OUT":
            return self._reject(rnd, "commit-reject")
        message = self._messageWith(rnd, Phase.COMMIT, result.value)
        rnd.decided = message.payload
        rnd.decidedSeq = message.seqNo
        if rnd.agreedSeq != message.seqNo and not self._agree(rnd, message.seqNo):
            return self._reject(rnd, "seq-conflict")
        self.executionQueue.add(rnd.key)
        return []

    def _evaluateObft(self, rnd: RoundState, depth: int) -> list[Outgoing]:
        out: list[Outgoing] = []
        if rnd.preReply is None:
            result = self._tally(rnd, Phase.COMMIT, rnd.group)
            if result.kind is not ConsensusKind.PENDING:
                rnd.reach(depth)
                status = Status.REJECT
                if result.kind is ConsensusKind.MAJORITY:
                    message = self._messageWith(rnd, Phase.COMMIT, result.value)
                    rnd.decided = message.payload
                    rnd.decidedHashView = message.hashView
                    holder = self.preAccepted.get(rnd.requestId)
                    if holder is not None and holder != rnd.attempt:
                        self._record("ATTEMPT_LOCKED", rnd, holder=holder)
                    elif self.inlineWithReplicaView(rnd, message.payload, message.hashes()):
                        status = Status.ACCEPT
                        self.preAccepted[rnd.requestId] = rnd.attempt
                        for switch, base in rnd.decidedHashView:
                            self.acceptedBases[(switch, base)] = rnd.requestId
                rnd.preReply = status
                self._record("PRE_REPLY", rnd, status=status.value)
                out += self._emit(rnd, Phase.PRE_REPLY, StatusPayload(status), self.cluster, ownVote=True)
        if not rnd.accepted:
            result = self._tally(rnd, Phase.PRE_REPLY, self.cluster)
            if result.kind is ConsensusKind.MAJORITY and result.value[0] == Status.ACCEPT.value:
                if rnd.decided is not None:
                    rnd.accepted = True
                    rnd.reach(depth)
                    self.hashWaiting.add(rnd.key)
            elif result.kind is not ConsensusKind.PENDING:
                rnd.reach(depth)
                return out + self._reject(rnd, "pre-reply-reject")
        return out

    def inlineWithReplicaView(
        self, rnd: RoundState, output: ComputedOutput, proposed: dict[int, ConfigHash]
    ) -> bool:
        """OBFT 提案的雜湊是否與本地視圖一致

        每台路徑交換器的提案雜湊需等於目前的 hv，或 (本複本曾執行此請求時)
        等於執行當下的快照 hvc。同一 (交換器, 基準雜湊) 只接受一個請求。
        """
        if set(proposed) != set(output.path):
            return False
        snapshot = self.hvc.get(rnd.key, {})
        for switch in output.path:
            base = proposed[switch]
            if self.hv.get(switch) != base and snapshot.get(switch) != base:
                return False
            holder = self.acceptedBases.get((switch, base))
            if holder is not None and holder != rnd.requestId:
                return False
        return True

    # ------------------------------------------------------------------
    # 因果順序與提交
    # ------------------------------------------------------------------
    def _drain(self) -> list[Outgoing]:
        """依序號執行與提交已可進行的 round"""
        out: list[Outgoing] = []
        progressed = True
        while progressed:
            progressed = False
            for key in sorted(self.executionQueue, key=self._queueOrder):
                rnd = self.rounds[key]
                if rnd.terminal:
                    self.executionQueue.discard(key)
                    progressed = True
                    break
                if rnd.agreedSeq is not None and self._isStale(rnd.agreedSeq):
                    out += self._reject(rnd, "stale-seq")
                    progressed = True
                    break
                if resolveCausalOrder(self, key) is not CausalStatus.READY:
                    continue
                executes = self.protocol is Protocol.MPBFT or self._inGroup(rnd)
                if rnd.output is None and executes:
                    # 已由他人的 COMMIT 決定時仍送出自己的 COMMIT
                    output = self._executeOnce(rnd)
                    members = self.cluster if self.protocol is Protocol.MPBFT else rnd.group
                    out += self._emit(rnd, Phase.COMMIT, output, self.cluster, seqNo=rnd.agreedSeq, ownVote=True)
                    out += self._evaluateCommit(rnd, rnd.depth + 1, members)
                    progressed = True
                if rnd.decided is not None and not rnd.terminal:
                    out += self._commit(rnd)
                    self.executionQueue.discard(key)
                    progressed = True
                if progressed:
                    break
        return out

    def _queueOrder(self, key: RoundKey) -> tuple:
        rnd = self.rounds[key]
        seqNo = rnd.agreedSeq if rnd.agreedSeq is not None else -1
        return (seqNo, key)

    def _drainHashes(self) -> list[Outgoing]:
        """OBFT：提交基準雜湊已與本地視圖一致的 round"""
        out: list[Outgoing] = []
        progressed = True
        while progressed:
            progressed = False
            for key in sorted(self.hashWaiting):
                rnd = self.rounds[key]
                if rnd.terminal:
                    self.hashWaiting.discard(key)
                    progressed = True
                    break
                base = dict(rnd.decidedHashView or ())
                if all(self.hv[s] == base.get(s) for s in rnd.decided.path):
                    self.hashWaiting.discard(key)
                    out += self._commit(rnd)
                    progressed = True
                    break
        return out

    def _commit(self, rnd: RoundState) -> list[Outgoing]:
        output = rnd.decided
        if rnd.requestId in self.committedRequests:
            return self._closeAsCommitted(rnd)
        pre = {s: self.hv[s] for s in output.path}
        applyReservation(self.store, output)
        for switch in output.path:
            self.hv[switch] = configHash(self.store, switch)
        self.hvc.pop(rnd.key, None)
        seqNo = rnd.agreedSeq if self.protocol is not Protocol.OBFT else None
        if seqNo is not None and (self.lastCommittedSeq is None or seqNo > self.lastCommittedSeq):
            self.lastCommittedSeq = seqNo
        self.committedRequests[rnd.requestId] = CommitRecord(
            rnd.attempt, seqNo, output, rnd.decidedHashView
        )
        self.executed.pop(rnd.requestId, None)
        rnd.finish(RoundStatus.ACCEPTING)
        fields: dict[str, Any] = {
            "seq": seqNo,
            "digest": codec.shortDigest(output),
            "path": list(output.path),
            "bandwidth": output.bandwidth,
            "denied": output.denied,
            "rounds": rnd.depth,
            "pre": {str(s): h.hex()[:16] for s, h in pre.items()},
            "post": {str(s): self.hv[s].hex()[:16] for s in output.path},
        }
        if rnd.decidedHashView is not None:
            fields["base"] = {str(s): h.hex()[:16] for s, h in rnd.decidedHashView}
        self._record("COMMIT", rnd, **fields)

        out: list[Outgoing] = []
        if self._repliesToClient(rnd) and not output.denied:
            message = ProtocolMessage(
                sender=self.endpoint,
                phase=Phase.REPLY,
                requestId=rnd.requestId,
                payload=output,
                attempt=rnd.attempt,
                seqNo=seqNo,
                hashView=rnd.decidedHashView,
                depth=rnd.depth + 1,
            )
            out += [Outgoing(switchEndpoint(s), message) for s in output.path]
            self._record("REPLY_EMIT", rnd, rounds=rnd.depth)
        out += self._decisionReply(rnd)
        for sibling in self._liveSiblings(rnd):
            out += self._closeAsCommitted(sibling)
        return out

    def _closeAsCommitted(self, rnd: RoundState) -> list[Outgoing]:
        """請求已在其他嘗試提交：結束此 round 並回覆已提交的結果"""
        rnd.finish(RoundStatus.ACCEPTING, "already-committed")
        self._record("DUPLICATE_COMMIT", rnd, committedAttempt=self.committedRequests[rnd.requestId].attempt)
        self.hvc.pop(rnd.key, None)
        self.executionQueue.discard(rnd.key)
        self.hashWaiting.discard(rnd.key)
        return self._decisionReply(rnd)

    def _reject(self, rnd: RoundState, reason: str) -> list[Outgoing]:
        rnd.finish(RoundStatus.REJECTING, reason)
        committed = rnd.requestId in self.committedRequests
        # 仍有其他嘗試進行中時保留序號與執行結果給它們使用
        shared = bool(self._liveSiblings(rnd))
        seqNo = None
        if not committed and not shared and self.protocol is not Protocol.OBFT:
            seqNo = retireSeqNo(self.sequencer, rnd.requestId)
            self.executed.pop(rnd.requestId, None)
        self.hvc.pop(rnd.key, None)
        if not committed and self.preAccepted.get(rnd.requestId) == rnd.attempt:
            del self.preAccepted[rnd.requestId]
            for lock in [k for k, holder in self.acceptedBases.items() if holder == rnd.requestId]:
                del self.acceptedBases[lock]
        self.executionQueue.discard(rnd.key)
        self.hashWaiting.discard(rnd.key)
        self._record("REJECT", rnd, reason=reason, seq=seqNo)
        return self._clientReply(rnd, Status.REJECT, reason)

    # ------------------------------------------------------------------
    # 狀態同步
    # ------------------------------------------------------------------
    def _answerSync(self, message: ProtocolMessage) -> list[Outgoing]:
        done = self.committedRequests.get(message.requestId)
        if done is None:
            return []
        reply = ProtocolMessage(
            sender=self.endpoint,
            phase=Phase.SYNC,
            requestId=message.requestId,
            payload=done.output,
            attempt=done.attempt,
            seqNo=done.seqNo,
            hashView=done.hashView,
            depth=message.depth + 1,
        )
        return [Outgoing(message.sender, reply)]

    def _collectSync(self, message: ProtocolMessage) -> list[Outgoing]:
        live = [
            rnd for rnd in self.rounds.values()
            if rnd.requestId == message.requestId and not rnd.terminal
        ]
        if message.requestId in self.committedRequests:
            out: list[Outgoing] = []
            for rnd in sorted(live, key=lambda r: r.attempt):
                out += self._closeAsCommitted(rnd)
            return out
        if not live:
            return []
        votes = self.syncVotes.setdefault(message.requestId, {})
        if message.sender in votes:
            return []
        votes[message.sender] = message
        result = consensus(
            [voteValue(m) for m in votes.values()], self.budget.fm + 1
        )
        if result.kind is not ConsensusKind.MAJORITY:
            return []
        source = next(m for m in votes.values() if voteValue(m) == result.value)
        rnd = min(live, key=lambda r: r.attempt)
        rnd.decided = source.payload
        rnd.decidedHashView = source.hashView
        rnd.decidedSeq = source.seqNo
        self._record("SYNC_ADOPT", rnd, seq=source.seqNo)
        del self.syncVotes[message.requestId]
        if self.protocol is Protocol.OBFT:
            rnd.accepted = True
            self.hashWaiting.add(rnd.key)
            return self._drainHashes()
        if not self._agree(rnd, source.seqNo):
            return self._reject(rnd, "seq-conflict") + self._drain()
        return self._drain()

    def syncSnapshot(self) -> dict[str, Any]:
        """結束時的狀態摘要，供事件日誌重播比對"""
        return {
            "replica": self.id,
            "pending": len(self.pendingRounds()),
            "committed": len(self.committedRequests),
            "hv": {str(s): self.hv[s].hex()[:16] for s in sorted(self.hv)},
        }


def resolveCausalOrder(replica: Replica, key: RoundKey) -> CausalStatus:
    """MPBFT/SBFT：較小序號的 round 皆已結束時才可執行

    較小序號若在本地完全沒有紀錄 (洞)，在 ``holeTimeoutUs`` 內視為尚未
    到達而阻擋；逾時後略過。
    """
    rnd = replica.rounds[key]
    seqNo = rnd.agreedSeq
    if seqNo is None:
        return CausalStatus.BLOCKED
    for other in replica.rounds.values():
        if other is rnd or other.terminal or other.requestId == rnd.requestId:
            continue
        effective = other.agreedSeq
        if effective is None:
            effective = replica.sequencer.mappings.get(other.requestId)
        if effective is not None and effective < seqNo:
            return CausalStatus.BLOCKED
    timeout = replica.options.holeTimeoutUs
    if timeout <= 0:
        return CausalStatus.READY
    blocked = False
    for n in range(seqNo):
        if n in replica.skippedHoles or replica.sequencer.isAccounted(n):
            replica.holeSince.pop(n, None)
            continue
        since = replica.holeSince.get(n)
        if since is None:
            replica.holeSince[n] = replica.now
            replica.timers.append(TimerRequest(timeout, ("hole", rnd.requestId, rnd.attempt)))
            blocked = True
        elif replica.now - since >= timeout:
            replica.skippedHoles.add(n)
            replica.holeSince.pop(n, None)
        else:
            blocked = True
    return CausalStatus.BLOCKED if blocked else CausalStatus.READY
