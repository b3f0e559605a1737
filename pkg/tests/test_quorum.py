import itertools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.models import FaultBudget, Phase, Protocol  # noqa: E402
from src.quorum import (  # noqa: E402
    PhaseError,
    QuorumError,
    QuorumSizes,
    groupSize,
    quorumAgr,
    quorumGlob,
    thresholdFor,
)


def test_group_size():
    """群組大小為 2fm + fa + 1"""
    assert groupSize(FaultBudget(1, 0)) == 3
    assert groupSize(FaultBudget(2, 0)) == 5
    assert groupSize(FaultBudget(3, 0)) == 7
    assert groupSize(FaultBudget(1, 1)) == 4


def test_quorum_values():
    """法定人數取 (大小 + fm + 1) / 2 的上界"""
    assert quorumAgr(3, 1) == 3
    assert quorumAgr(5, 2) == 4
    assert quorumGlob(4, 1) == 3
    assert quorumGlob(10, 1) == 6
    assert quorumGlob(13, 3) == 9


def test_quorum_too_small():
    """大小不足 2fm+1 時拋出 QuorumError"""
    with pytest.raises(QuorumError):
        quorumAgr(2, 1)
    with pytest.raises(QuorumError):
        quorumGlob(4, 2)
    with pytest.raises(ValueError):
        quorumGlob(1, 1)


def test_threshold_table():
    """各協定各階段的門檻"""
    sizes = QuorumSizes(group=3, cluster=10, fm=1)
    assert thresholdFor(Protocol.MPBFT, Phase.PREPARE, sizes) == 6
    assert thresholdFor(Protocol.MPBFT, Phase.COMMIT, sizes) == 2
    assert thresholdFor(Protocol.SBFT, Phase.PRE_PREPARE, sizes) == 3
    assert thresholdFor(Protocol.SBFT, Phase.PREPARE, sizes) == 6
    assert thresholdFor(Protocol.SBFT, Phase.COMMIT, sizes) == 2
    assert thresholdFor(Protocol.OBFT, Phase.COMMIT, sizes) == 3
    assert thresholdFor(Protocol.OBFT, Phase.PRE_REPLY, sizes) == 6
    assert thresholdFor(Protocol.OBFT, Phase.REPLY, sizes) == 2


def test_obft_commit_rule_variant():
    """OBFT COMMIT 可切換為 fm+1 門檻"""
    sizes = QuorumSizes(group=5, cluster=10, fm=2, obftCommitRule="fm+1")
    assert thresholdFor(Protocol.OBFT, Phase.COMMIT, sizes) == 3
    with pytest.raises(ValueError):
        thresholdFor(Protocol.OBFT, Phase.COMMIT, QuorumSizes(5, 10, 2, "other"))


def test_threshold_unknown_phase():
    """協定沒有的階段拋出 PhaseError"""
    sizes = QuorumSizes(group=3, cluster=4, fm=1)
    with pytest.raises(PhaseError):
        thresholdFor(Protocol.MPBFT, Phase.PRE_PREPARE, sizes)
    with pytest.raises(PhaseError):
        thresholdFor(Protocol.OBFT, Phase.PREPARE, sizes)


def test_documented_examples():
    assert quorumAgr(7, 3) == 6
    assert groupSize(FaultBudget(1, 2)) == 5


def test_any_two_quorums_share_fm_plus_one_members():
    """|A| 從 3 到 15、fm 從 1 到 5：任兩個法定人數集合至少共有 fm+1 個成員"""
    for size in range(3, 16):
        for fm in range(1, 6):
            if size < 2 * fm + 1:
                with pytest.raises(QuorumError):
                    quorumAgr(size, fm)
                continue
            q = quorumAgr(size, fm)
            assert q <= size
            assert 2 * q - size >= fm + 1
            if size <= 7:
                members = range(size)
                overlap = min(
                    len(set(a) & set(b))
                    for a in itertools.combinations(members, q)
                    for b in itertools.combinations(members, q)
                )
                assert overlap >= fm + 1
            assert quorumGlob(size, fm) == q
