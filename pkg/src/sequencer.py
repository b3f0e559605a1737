"""序號分配模組

每個複本持有一份 :class:`SequencerState`。提案時從原子計數器往上找
第一個尚未被使用、也未被作廢的序號；採納遠端共識結果時覆寫本地提案。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .models import RequestId

logger = logging.getLogger(__name__)


class SequenceConflictError(ValueError):
    """序號已被其他請求確定使用"""


@dataclass
class SequencerState:
    mappings: dict[RequestId, int] = field(default_factory=dict)
    atomicCounter: int = 0
    committed: set[int] = field(default_factory=set)
    retired: set[int] = field(default_factory=set)

    def owner(self, seqNo: int) -> RequestId | None:
        for rid, value in self.mappings.items():
            if value == seqNo:
                return rid
        return None

    def isAccounted(self, seqNo: int) -> bool:
        """序號已被某請求持有或已作廢"""
        return seqNo in self.retired or seqNo in self.mappings.values()


def proposeSeqNo(state: SequencerState, requestId: RequestId) -> int:
    """為請求提案序號；同一請求重複呼叫回傳相同序號"""
    if requestId in state.mappings:
        return state.mappings[requestId]
    used = set(state.mappings.values())
    while state.atomicCounter in used or state.atomicCounter in state.retired:
        state.atomicCounter += 1
    seqNo = state.atomicCounter
    state.mappings[requestId] = seqNo
    logger.debug("提案序號 %s -> %d", requestId, seqNo)
    return seqNo


def recordRemoteMapping(
    state: SequencerState, requestId: RequestId, seqNo: int
) -> SequencerState:
    """採納共識決定的 (請求, 序號)

    本地落敗的提案會被覆寫；其他請求尚未確定的提案若佔用此序號則被擠開，
    之後重新提案。序號若已確定給其他請求則拋出 :class:`SequenceConflictError`。
    """
    holder = state.owner(seqNo)
    if holder is not None and holder != requestId:
        if seqNo in state.committed:
            raise SequenceConflictError(
                f"序號 {seqNo} 已確定給 {holder}，無法再給 {requestId}"
            )
        del state.mappings[holder]
        logger.debug("序號 %d 由 %s 改給 %s", seqNo, holder, requestId)
    previous = state.mappings.get(requestId)
    if previous is not None and previous != seqNo and previous in state.committed:
        raise SequenceConflictError(
            f"{requestId} 已確定使用序號 {previous}，不可改為 {seqNo}"
        )
    state.retired.discard(seqNo)
    state.mappings[requestId] = seqNo
    state.committed.add(seqNo)
    return state


def retireSeqNo(state: SequencerState, requestId: RequestId) -> int | None:
    """拒絕執行後作廢請求的序號，並移除對應關係

    回傳被作廢的序號；請求沒有序號時回傳 None。
    """
    seqNo = state.mappings.pop(requestId, None)
    if seqNo is None:
        return None
    state.committed.discard(seqNo)
    state.retired.add(seqNo)
    logger.debug("作廢序號 %d (%s)", seqNo, requestId)
    return seqNo
