import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.models import RequestId  # noqa: E402
from src.sequencer import (  # noqa: E402
    SequenceConflictError,
    SequencerState,
    proposeSeqNo,
    recordRemoteMapping,
    retireSeqNo,
)


def test_propose_is_idempotent():
    """同一請求重複提案得到相同序號，不同請求得到遞增序號"""
    state = SequencerState()
    a, b = RequestId(0, 0), RequestId(1, 0)
    assert proposeSeqNo(state, a) == 0
    assert proposeSeqNo(state, a) == 0
    assert proposeSeqNo(state, b) == 1


def test_remote_mapping_displaces_local_proposal():
    """共識序號覆寫本地提案，被擠開的請求重新提案時取得新序號"""
    state = SequencerState()
    a, b = RequestId(0, 0), RequestId(1, 0)
    proposeSeqNo(state, a)
    recordRemoteMapping(state, b, 0)
    assert state.mappings[b] == 0
    assert a not in state.mappings
    assert proposeSeqNo(state, a) == 1


def test_committed_conflict_raises():
    """序號已確定給其他請求時拋出錯誤"""
    state = SequencerState()
    a, b = RequestId(0, 0), RequestId(1, 0)
    recordRemoteMapping(state, a, 3)
    with pytest.raises(SequenceConflictError):
        recordRemoteMapping(state, b, 3)
    with pytest.raises(SequenceConflictError):
        recordRemoteMapping(state, a, 4)


def test_retired_numbers_are_not_reused():
    """作廢的序號不會再被提案"""
    state = SequencerState()
    a, b = RequestId(0, 0), RequestId(1, 0)
    proposeSeqNo(state, a)
    assert retireSeqNo(state, a) == 0
    assert state.isAccounted(0)
    assert proposeSeqNo(state, b) == 1
    assert proposeSeqNo(state, a) == 2
    assert retireSeqNo(state, RequestId(9, 9)) is None


def test_remote_mapping_revives_retired_number():
    """共識結果可以採用本地已作廢的序號"""
    state = SequencerState()
    a = RequestId(0, 0)
    proposeSeqNo(state, a)
    retireSeqNo(state, a)
    recordRemoteMapping(state, a, 0)
    assert 0 not in state.retired
    assert state.owner(0) == a


def test_conflicting_arrival_order_converges():
    """兩台複本以相反順序收到請求時提案不同，採納共識結果後收斂"""
    a, b = RequestId(0, 0), RequestId(1, 0)
    first, second = SequencerState(), SequencerState()
    assert (proposeSeqNo(first, a), proposeSeqNo(first, b)) == (0, 1)
    assert (proposeSeqNo(second, b), proposeSeqNo(second, a)) == (0, 1)

    for state in (first, second):
        recordRemoteMapping(state, a, 0)
    assert second.mappings == {a: 0}
    assert proposeSeqNo(second, b) == proposeSeqNo(first, b) == 1
    for state in (first, second):
        recordRemoteMapping(state, b, 1)
    assert first.mappings == second.mappings == {a: 0, b: 1}
    assert first.committed == second.committed == {0, 1}


def replay(ops):
    state = SequencerState()
    results = []
    for op, rid, seqNo in ops:
        if op == "propose":
            results.append(proposeSeqNo(state, rid))
        elif op == "record":
            try:
                recordRemoteMapping(state, rid, seqNo)
                results.append(seqNo)
            except SequenceConflictError:
                results.append(None)
        else:
            results.append(retireSeqNo(state, rid))
    return state, results


def test_same_operations_same_state():
    """相同的操作序列得到相同的序號與狀態；序號對應始終是一對一"""
    rng = np.random.default_rng(11)
    for _ in range(200):
        ops = [
            (
                str(rng.choice(["propose", "record", "retire"])),
                RequestId(int(rng.integers(3)), int(rng.integers(3))),
                int(rng.integers(6)),
            )
            for _ in range(int(rng.integers(1, 25)))
        ]
        state, results = replay(ops)
        again, repeated = replay(ops)
        assert state == again
        assert results == repeated
        values = list(state.mappings.values())
        assert len(values) == len(set(values))
        assert not set(values) & state.retired


def test_proposals_skip_used_and_retired_numbers():
    rng = np.random.default_rng(5)
    state = SequencerState()
    for counter in range(100):
        rid = RequestId(int(rng.integers(4)), counter)
        taken = set(state.mappings.values()) | state.retired
        seqNo = proposeSeqNo(state, rid)
        assert seqNo not in taken
        if rng.random() < 0.3:
            retireSeqNo(state, rid)
