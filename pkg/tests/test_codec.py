import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src import codec  # noqa: E402
from src.models import (  # noqa: E402
    ComputedOutput,
    Phase,
    ProtocolMessage,
    RequestId,
    SeqProposal,
    makeHashView,
    replicaEndpoint,
)


def test_equal_values_encode_identically():
    """相同內容得到相同位元組，不同內容則不同"""
    rid = RequestId(1, 2)
    a = ComputedOutput.fromPath(rid, (0, 1, 2), 5)
    b = ComputedOutput.fromPath(rid, (0, 1, 2), 5)
    c = ComputedOutput.fromPath(rid, (0, 1, 2), 6)
    assert codec.encode(a) == codec.encode(b)
    assert codec.encode(a) != codec.encode(c)
    assert codec.digest(a) == codec.digest(b)
    assert len(codec.shortDigest(a)) == 16


def test_dict_order_does_not_matter():
    """dict 依鍵排序後編碼"""
    assert codec.encode({2: b"x", 1: b"y"}) == codec.encode({1: b"y", 2: b"x"})


def test_decode_restores_message():
    """協定訊息可由編碼還原 (捎帶的請求不參與比較)"""
    message = ProtocolMessage(
        sender=replicaEndpoint(3),
        phase=Phase.PREPARE,
        requestId=RequestId(0, 7),
        payload=SeqProposal(11),
        attempt=1,
        depth=1,
    )
    assert codec.decode(codec.encode(message)) == message


def test_rejects_unknown_types_and_truncated_data():
    """不支援的型別與截斷的資料都拋出 ValueError"""
    with pytest.raises(ValueError):
        codec.encode(1.5)
    data = codec.encode(ComputedOutput.fromPath(RequestId(0, 0), (0, 1), 3))
    with pytest.raises(ValueError):
        codec.decode(data[:-1])
    with pytest.raises(ValueError):
        codec.decode(data + b"N")


def test_computed_output_roundtrip_including_denial():
    """路徑輸出與准入拒絕都能由編碼還原"""
    rid = RequestId(4, 9)
    granted = ComputedOutput.fromPath(rid, (3, 1, 0, 2), 7)
    denied = ComputedOutput.denial(rid, 7)
    assert codec.decode(codec.encode(granted)) == granted
    restored = codec.decode(codec.encode(denied))
    assert restored == denied
    assert restored.denied


def test_commit_with_hash_view_roundtrip():
    """OBFT COMMIT 帶的基準雜湊 (bytes) 還原後不變，摘要也相同"""
    rid = RequestId(1, 0)
    output = ComputedOutput.fromPath(rid, (0, 1), 2)
    message = ProtocolMessage(
        sender=replicaEndpoint(2),
        phase=Phase.COMMIT,
        requestId=rid,
        payload=output,
        attempt=3,
        hashView=makeHashView({1: b"\x01" * 32, 0: b"\x00" * 32}),
        depth=2,
    )
    restored = codec.decode(codec.encode(message))
    assert restored == message
    assert restored.hashes() == {0: b"\x00" * 32, 1: b"\x01" * 32}
    assert codec.digest(restored) == codec.digest(message)


def test_unknown_enum_member_raises_value_error():
    """未知的列舉型別或成員都以 ValueError 回報"""
    data = codec.encode(Phase.PREPARE)
    with pytest.raises(ValueError):
        codec.decode(data.replace(b"Phase", b"Qhase"))
    with pytest.raises(ValueError):
        codec.decode(data.replace(b"PREPARE", b"PREPARX"))
