"""群組大小與法定人數計算模組"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .models import FaultBudget, Phase, Protocol


class QuorumError(ValueError):
    """群組或叢集大小不足以容忍指定的故障數"""


class PhaseError(ValueError):
    """協定沒有該階段的門檻"""


def groupSize(budget: FaultBudget) -> int:
    """A&E 群組最小成員數 2*fm + fa + 1"""
    return 2 * budget.fm + budget.fa + 1


def _quorum(size: int, fm: int, label: str) -> int:
    if fm < 0:
        raise QuorumError("fm 不可為負數")
    if size < 2 * fm + 1:
        raise QuorumError(f"{label} 大小 {size} 小於 2*fm+1 = {2 * fm + 1}")
    return math.ceil((size + fm + 1) / 2)


def quorumAgr(groupSizeValue: int, fm: int) -> int:
    """群組範圍的法定人數 ceil((|A| + fm + 1) / 2)"""
    return _quorum(groupSizeValue, fm, "群組")


def quorumGlob(clusterSize: int, fm: int) -> int:
    """叢集範圍的法定人數 ceil((|C| + fm + 1) / 2)"""
    return _quorum(clusterSize, fm, "叢集")


@dataclass(frozen=True)
class QuorumSizes:
    """計算門檻所需的尺寸資訊

    ``obftCommitRule`` 為 ``"agr"`` 時 OBFT COMMIT 使用群組法定人數，
    為 ``"fm+1"`` 時改用 fm+1 個相符訊息。
    """

    group: int
    cluster: int
    fm: int
    obftCommitRule: str = "agr"


def thresholdFor(protocol: Protocol, phase: Phase, sizes: QuorumSizes) -> int:
    """回傳某協定某階段需要的相符訊息數"""
    fm = sizes.fm
    if protocol is Protocol.MPBFT:
        if phase is Phase.PREPARE:
            return quorumGlob(sizes.cluster, fm)
        if phase in (Phase.COMMIT, Phase.REPLY, Phase.SYNC):
            return fm + 1
    elif protocol is Protocol.SBFT:
        if phase is Phase.PRE_PREPARE:
            return quorumAgr(sizes.group, fm)
        if phase is Phase.PREPARE:
            return quorumGlob(sizes.cluster, fm)
        if phase in (Phase.COMMIT, Phase.REPLY, Phase.SYNC):
            return fm + 1
    elif protocol is Protocol.OBFT:
        if phase is Phase.COMMIT:
            if sizes.obftCommitRule == "fm+1":
                return fm + 1
            if sizes.obftCommitRule != "agr":
                raise ValueError(f"未知的 OBFT COMMIT 規則：{sizes.obftCommitRule}")
            return quorumAgr(sizes.group, fm)
        if phase is Phase.PRE_REPLY:
            return quorumGlob(sizes.cluster, fm)
        if phase in (Phase.REPLY, Phase.SYNC):
            return fm + 1
    raise PhaseError(f"{protocol.value} 沒有 {phase.value} 階段的門檻")
