"""共用資料型別模組

控制器叢集、交換器與用戶端之間傳遞的所有值型別集中在此定義。
所有型別皆為 frozen dataclass，可安全地在模擬器各元件間共享。
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union


class Protocol(str, Enum):
    """三種 BFT 協定"""

    MPBFT = "MPBFT"
    SBFT = "SBFT"
    OBFT = "OBFT"


class Phase(str, Enum):
    """協定階段標籤

    ``SYNC_REQUEST`` 與 ``SYNC`` 為狀態同步 (追趕) 使用的額外階段，
    不屬於任何協定的主要流程。
    """

    REQUEST = "REQUEST"
    PRE_PREPARE = "PRE_PREPARE"
    PREPARE = "PREPARE"
    COMMIT = "COMMIT"
    PRE_REPLY = "PRE_REPLY"
    REPLY = "REPLY"
    SYNC_REQUEST = "SYNC_REQUEST"
    SYNC = "SYNC"


PROTOCOL_PHASES: dict[Protocol, tuple[Phase, ...]] = {
    Protocol.MPBFT: (Phase.REQUEST, Phase.PREPARE, Phase.COMMIT, Phase.REPLY),
    Protocol.SBFT: (
        Phase.REQUEST,
        Phase.PRE_PREPARE,
        Phase.PREPARE,
        Phase.COMMIT,
        Phase.REPLY,
    ),
    Protocol.OBFT: (Phase.REQUEST, Phase.COMMIT, Phase.PRE_REPLY, Phase.REPLY),
}


class Status(str, Enum):
    """接受 / 拒絕狀態"""

    ACCEPT = "ACCEPT"
    REJECT = "REJECT"


class RoundStatus(str, Enum):
    """單一協定執行 (round) 的狀態"""

    PENDING = "PENDING"
    ACCEPTING = "ACCEPTING"
    REJECTING = "REJECTING"


class EndpointKind(str, Enum):
    """訊息端點種類"""

    REPLICA = "R"
    CLIENT = "CL"
    SWITCH = "S"


@dataclass(frozen=True, order=True)
class Endpoint:
    """訊息的傳送者或接收者"""

    kind: EndpointKind
    index: int

    def __str__(self) -> str:
        return f"{self.kind.value}{self.index}"

    @staticmethod
    def parse(text: str) -> "Endpoint":
        """將 ``R3``、``CL2``、``S5`` 字串還原為端點"""
        for kind in (EndpointKind.CLIENT, EndpointKind.REPLICA, EndpointKind.SWITCH):
            if text.startswith(kind.value) and text[len(kind.value):].isdigit():
                return Endpoint(kind, int(text[len(kind.value):]))
        raise ValueError(f"無法解析端點：{text}")


def replicaEndpoint(index: int) -> Endpoint:
    return Endpoint(EndpointKind.REPLICA, index)


def clientEndpoint(index: int) -> Endpoint:
    return Endpoint(EndpointKind.CLIENT, index)


def switchEndpoint(index: int) -> Endpoint:
    return Endpoint(EndpointKind.SWITCH, index)


@dataclass(frozen=True)
class FaultBudget:
    """每個 A&E 群組可容忍的拜占庭 (fm) 與當機 (fa) 故障數"""

    fm: int
    fa: int = 0

    def __post_init__(self) -> None:
        if self.fm < 0 or self.fa < 0:
            raise ValueError("故障數不可為負數")
        if self.fm + self.fa < 1:
            raise ValueError("fm + fa 至少需為 1")


@dataclass(frozen=True, order=True)
class RequestId:
    """用戶端請求識別碼：(用戶端, 用戶端內遞增計數)

    重送同一邏輯請求時沿用相同的 RequestId。
    """

    client: int
    counter: int

    def __str__(self) -> str:
        return f"{self.client}.{self.counter}"

    @staticmethod
    def parse(text: str) -> "RequestId":
        client, counter = text.split(".")
        return RequestId(int(client), int(counter))


@dataclass(frozen=True)
class ClientRequest:
    """頻寬保留請求"""

    id: RequestId
    src: int
    dst: int
    bandwidth: int

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise ValueError("來源與目的交換器不可相同")
        if self.bandwidth <= 0:
            raise ValueError("頻寬需求必須大於 0")


@dataclass(frozen=True)
class FlowRule:
    """安裝在單一交換器上的抽象流規則 (無 in-port，只記下一跳)"""

    requestId: RequestId
    switch: int
    nextHop: Optional[int]
    bandwidth: int


@dataclass(frozen=True)
class ComputedOutput:
    """應用程式執行結果

    ``path`` 為空代表無可行路徑 (准入拒絕)，此時 ``rules`` 亦為空。
    """

    requestId: RequestId
    path: tuple[int, ...]
    bandwidth: int
    rules: tuple[FlowRule, ...] = ()

    @property
    def denied(self) -> bool:
        return not self.path

    def ruleFor(self, switch: int) -> Optional[FlowRule]:
        for rule in self.rules:
            if rule.switch == switch:
                return rule
        return None

    @staticmethod
    def fromPath(
        requestId: RequestId, path: tuple[int, ...], bandwidth: int
    ) -> "ComputedOutput":
        """依路徑產生每台交換器的流規則"""
        rules = tuple(
            FlowRule(
                requestId,
                sw,
                path[i + 1] if i + 1 < len(path) else None,
                bandwidth,
            )
            for i, sw in enumerate(path)
        )
        return ComputedOutput(requestId, tuple(path), bandwidth, rules)

    @staticmethod
    def denial(requestId: RequestId, bandwidth: int) -> "ComputedOutput":
        return ComputedOutput(requestId, (), bandwidth, ())


@dataclass(frozen=True)
class SeqProposal:
    seqNo: int


@dataclass(frozen=True)
class StatusPayload:
    status: Status
    reason: str = ""


Payload = Union[ClientRequest, SeqProposal, ComputedOutput, StatusPayload]

# 交換器設定雜湊 (SHA-256, 32 bytes)
ConfigHash = bytes

HashView = tuple[tuple[int, ConfigHash], ...]


def makeHashView(hashes: dict[int, ConfigHash]) -> HashView:
    """將 dict 轉為依交換器排序的 tuple，以便比較與雜湊"""
    return tuple(sorted(hashes.items()))


@dataclass(frozen=True)
class ProtocolMessage:
    """協定訊息封包

    ``payload`` 的種類由 (協定, 階段) 決定；``hashView`` 只出現在 OBFT 的
    COMMIT / REPLY / SYNC。``request`` 為捎帶的原始請求，讓尚未收到用戶端
    請求的複本也能建立 round。``depth`` 記錄從 REQUEST 起算的訊息延遲跳數。
    """

    sender: Endpoint
    phase: Phase
    requestId: RequestId
    payload: Optional[Payload]
    attempt: int = 0
    seqNo: Optional[int] = None
    hashView: Optional[HashView] = None
    request: Optional[ClientRequest] = field(default=None, compare=False)
    depth: int = 0

    def hashes(self) -> dict[int, ConfigHash]:
        return dict(self.hashView or ())
