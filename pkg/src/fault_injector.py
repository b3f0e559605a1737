"""拜占庭故障注入模組

故障行為只改寫複本「送出」的訊息；複本內部狀態維持正常運算，
因此同一複本仍會依自己的誠實投票前進。
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .models import ComputedOutput, ProtocolMessage, SeqProposal
from .protocol_engine import Outgoing

logger = logging.getLogger(__name__)


class UnknownBehaviorError(ValueError):
    """不支援的故障行為名稱"""


class Behavior(str, Enum):
    EQUIVOCATE_SEQ = "EQUIVOCATE_SEQ"
    CORRUPT_OUTPUT = "CORRUPT_OUTPUT"
    CORRUPT_HASH = "CORRUPT_HASH"
    SILENT = "SILENT"
    CRASH = "CRASH"
    DELAY_MAX = "DELAY_MAX"


BYZANTINE_BEHAVIORS = (
    Behavior.EQUIVOCATE_SEQ,
    Behavior.CORRUPT_OUTPUT,
    Behavior.CORRUPT_HASH,
    Behavior.SILENT,
    Behavior.DELAY_MAX,
)


def parseBehavior(name: str | Behavior) -> Behavior:
    if isinstance(name, Behavior):
        return name
    try:
        return Behavior(str(name).upper())
    except ValueError as exc:
        raise UnknownBehaviorError(f"未知的故障行為：{name}") from exc


@dataclass(frozen=True)
class FaultSpec:
    """在 ``at`` 微秒時讓複本 ``target`` 開始表現 ``behavior``"""

    target: int
    behavior: Behavior
    at: int = 0

    def __post_init__(self) -> None:
        if self.at < 0:
            raise ValueError("故障時間不可為負數")


def corruptOutput(output: ComputedOutput) -> ComputedOutput:
    """改變頻寬讓輸出的正規編碼與正確值不同"""
    if output.denied:
        return ComputedOutput.denial(output.requestId, output.bandwidth + 1)
    return ComputedOutput.fromPath(output.requestId, output.path, output.bandwidth + 1)


class FaultInjector:
    """依時間判斷複本的故障狀態並改寫其送出的訊息"""

    def __init__(
        self,
        faults: Iterable[FaultSpec],
        rng: np.random.Generator,
        delayMaxUs: int = 0,
    ):
        self.faults = sorted(faults, key=lambda f: (f.at, f.target))
        self.rng = rng
        self.delayMaxUs = delayMaxUs

    def behaviorOf(self, replicaId: int, now: int) -> Optional[Behavior]:
        """最後一個已生效的故障行為"""
        current = None
        for fault in self.faults:
            if fault.target == replicaId and fault.at <= now:
                current = fault.behavior
        return current

    def isCrashed(self, replicaId: int, now: int) -> bool:
        return self.behaviorOf(replicaId, now) is Behavior.CRASH

    def faultyReplicas(self) -> list[int]:
        return sorted({f.target for f in self.faults})

    def transform(
        self, replicaId: int, outgoing: list[Outgoing], now: int
    ) -> list[tuple[Outgoing, int]]:
        """回傳 (改寫後訊息, 額外延遲) 串列"""
        behavior = self.behaviorOf(replicaId, now)
        if behavior is None:
            return [(o, 0) for o in outgoing]
        if behavior in (Behavior.SILENT, Behavior.CRASH):
            return []
        if behavior is Behavior.DELAY_MAX:
            return [(o, self.delayMaxUs) for o in outgoing]
        if behavior is Behavior.EQUIVOCATE_SEQ:
            return [(o, 0) for o in self._equivocate(outgoing)]
        if behavior is Behavior.CORRUPT_OUTPUT:
            return [(o, 0) for o in self._rewrite(outgoing, self._corruptPayload)]
        return [(o, 0) for o in self._rewrite(outgoing, self._corruptHashes)]

    def _equivocate(self, outgoing: list[Outgoing]) -> list[Outgoing]:
        """同一序號提案：前半收件者收到 n，後半收到 n+1"""
        recipients: dict[int, list] = {}
        for o in outgoing:
            recipients.setdefault(id(o.message), []).append(o.recipient)
        result = []
        for o in outgoing:
            payload = o.message.payload
            if not isinstance(payload, SeqProposal):
                result.append(o)
                continue
            ordered = sorted(recipients[id(o.message)])
            if ordered.index(o.recipient) < len(ordered) // 2:
                result.append(o)
            else:
                forged = dataclasses.replace(o.message, payload=SeqProposal(payload.seqNo + 1))
                result.append(Outgoing(o.recipient, forged))
        return result

    def _rewrite(self, outgoing: list[Outgoing], rewrite) -> list[Outgoing]:
        cache: dict[int, ProtocolMessage] = {}
        result = []
        for o in outgoing:
            key = id(o.message)
            if key not in cache:
                cache[key] = rewrite(o.message)
            result.append(Outgoing(o.recipient, cache[key]))
        return result

    @staticmethod
    def _corruptPayload(message: ProtocolMessage) -> ProtocolMessage:
        if isinstance(message.payload, ComputedOutput):
            return dataclasses.replace(message, payload=corruptOutput(message.payload))
        return message

    def _corruptHashes(self, message: ProtocolMessage) -> ProtocolMessage:
        if not message.hashView:
            return message
        forged = tuple((switch, self.rng.bytes(32)) for switch, _ in message.hashView)
        return dataclasses.replace(message, hashView=forged)
