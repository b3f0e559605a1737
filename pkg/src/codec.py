"""正規化編碼模組

以長度前綴、欄位順序固定的二進位格式序列化模型物件。相同的值
一定得到相同的位元組，因此可直接用於雜湊、共識比對與交換器端的
「位元組相同」判斷。
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from enum import Enum
from typing import Any

from . import models

_LEN = struct.Struct(">I")

_TAG_NONE = b"N"
_TAG_TRUE = b"T"
_TAG_FALSE = b"F"
_TAG_INT = b"I"
_TAG_STR = b"S"
_TAG_BYTES = b"B"
_TAG_SEQ = b"L"
_TAG_ENUM = b"E"
_TAG_RECORD = b"D"

_RECORD_TYPES: dict[str, type] = {
    cls.__name__: cls
    for cls in (
        models.Endpoint,
        models.FaultBudget,
        models.RequestId,
        models.ClientRequest,
        models.FlowRule,
        models.ComputedOutput,
        models.SeqProposal,
        models.StatusPayload,
        models.ProtocolMessage,
    )
}

_ENUM_TYPES: dict[str, type[Enum]] = {
    cls.__name__: cls
    for cls in (
        models.Protocol,
        models.Phase,
        models.Status,
        models.RoundStatus,
        models.EndpointKind,
    )
}


def _chunk(tag: bytes, body: bytes) -> bytes:
    return tag + _LEN.pack(len(body)) + body


def encode(value: Any) -> bytes:
    """將值編碼為正規位元組

    支援 None、bool、int、str、bytes、tuple/list、模型列舉與模型 dataclass。
    dict 以排序後的 (key, value) 序列編碼。
    """
    if value is None:
        return _TAG_NONE
    if value is True:
        return _TAG_TRUE
    if value is False:
        return _TAG_FALSE
    if isinstance(value, Enum):
        name = type(value).__name__
        if name not in _ENUM_TYPES:
            raise ValueError(f"不支援的列舉型別：{name}")
        return _chunk(_TAG_ENUM, encode(name) + encode(value.value))
    if isinstance(value, int):
        width = max(1, (value.bit_length() + 8) // 8)
        return _chunk(_TAG_INT, value.to_bytes(width, "big", signed=True))
    if isinstance(value, str):
        return _chunk(_TAG_STR, value.encode("utf-8"))
    if isinstance(value, (bytes, bytearray)):
        return _chunk(_TAG_BYTES, bytes(value))
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        name = type(value).__name__
        if name not in _RECORD_TYPES:
            raise ValueError(f"不支援的資料型別：{name}")
        body = encode(name) + b"".join(
            encode(getattr(value, f.name)) for f in dataclasses.fields(value)
        )
        return _chunk(_TAG_RECORD, body)
    if isinstance(value, dict):
        items = sorted(value.items())
        return encode(tuple(items))
    if isinstance(value, (tuple, list)):
        return _chunk(_TAG_SEQ, b"".join(encode(v) for v in value))
    raise ValueError(f"無法編碼的型別：{type(value).__name__}")


def _decodeAt(data: bytes, pos: int) -> tuple[Any, int]:
    if pos >= len(data):
        raise ValueError("編碼資料提前結束")
    tag = data[pos:pos + 1]
    pos += 1
    if tag == _TAG_NONE:
        return None, pos
    if tag == _TAG_TRUE:
        return True, pos
    if tag == _TAG_FALSE:
        return False, pos
    if pos + _LEN.size > len(data):
        raise ValueError("長度欄位不完整")
    (length,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    end = pos + length
    if end > len(data):
        raise ValueError("內容長度超出資料範圍")
    body = data[pos:end]
    if tag == _TAG_INT:
        return int.from_bytes(body, "big", signed=True), end
    if tag == _TAG_STR:
        return body.decode("utf-8"), end
    if tag == _TAG_BYTES:
        return body, end
    if tag == _TAG_SEQ:
        items = []
        inner = 0
        while inner < len(body):
            item, inner = _decodeAt(body, inner)
            items.append(item)
        return tuple(items), end
    if tag == _TAG_ENUM:
        name, inner = _decodeAt(body, 0)
        raw, _ = _decodeAt(body, inner)
        enumType = _ENUM_TYPES.get(name)
        if enumType is None:
            raise ValueError(f"未知的列舉型別：{name}")
        try:
            return enumType(raw), end
        except ValueError as exc:
            raise ValueError(f"{name} 沒有成員 {raw!r}") from exc
    if tag == _TAG_RECORD:
        name, inner = _decodeAt(body, 0)
        cls = _RECORD_TYPES.get(name)
        if cls is None:
            raise ValueError(f"未知的資料型別：{name}")
        values = []
        while inner < len(body):
            item, inner = _decodeAt(body, inner)
            values.append(item)
        try:
            return cls(*values), end
        except TypeError as exc:
            raise ValueError(f"{name} 的欄位數不符：{len(values)}") from exc
    raise ValueError(f"未知的編碼標籤：{tag!r}")


def decode(data: bytes) -> Any:
    """將 :func:`encode` 的輸出還原

    序列一律還原為 tuple。
    """
    value, pos = _decodeAt(data, 0)
    if pos != len(data):
        raise ValueError("編碼資料尾端有多餘位元組")
    return value


def digest(value: Any) -> bytes:
    """正規編碼後的 SHA-256 摘要"""
    return hashlib.sha256(encode(value)).digest()


def shortDigest(value: Any) -> str:
    """事件日誌使用的 16 字元十六進位摘要"""
    return digest(value).hex()[:16]
