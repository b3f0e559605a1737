"""事件日誌與重播驗證模組

模擬器將每次傳送、送達、狀態轉移與交換器套用寫成一筆紀錄。日誌以
NDJSON 儲存：第一行為標頭 (含 schema 版本與情境參數)，之後每行一筆紀錄。
:func:`verifyLog` 讀取日誌重新檢查安全性與活性性質。
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd

from .models import ComputedOutput, RequestId
from .path_app import OvercommitError, ReservationStore, applyReservation, configHash, linkKey

logger = logging.getLogger(__name__)

SCHEMA_NAME = "bftsim-eventlog"
SCHEMA_VERSION = 1

RECORD_KINDS = (
    "SEND",
    "DELIVER",
    "DISCARD",
    "DROP",
    "DUPLICATE",
    "RETRANSMIT",
    "TRANSITION",
    "APPLIED",
    "HELD",
    "CONFLICT",
    "CLIENT_ISSUE",
    "CLIENT_RETRY",
    "CLIENT_RESEND",
    "CLIENT_DONE",
    "FAULT",
    "REASSIGN",
    "END",
)


class EventLog:
    """依事件順序累積的紀錄"""

    def __init__(self, header: dict[str, Any] | None = None):
        self.header: dict[str, Any] = {"schema": SCHEMA_NAME, "version": SCHEMA_VERSION}
        if header:
            self.header.update(header)
        self.records: list[dict[str, Any]] = []

    def append(self, kind: str, t: int, **fields: Any) -> dict[str, Any]:
        if kind not in RECORD_KINDS:
            raise ValueError(f"未知的紀錄種類：{kind}")
        record = {"idx": len(self.records), "t": int(t), "kind": kind}
        record.update(fields)
        self.records.append(record)
        return record

    def __len__(self) -> int:
        return len(self.records)

    def ofKind(self, *kinds: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] in kinds]

    def transitions(self, event: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] == "TRANSITION" and r["event"] == event]

    def toDataFrame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records)

    def toNdjson(self, path: str | Path) -> None:
        """寫出 NDJSON；相同內容一定得到相同位元組"""
        lines = [_dumps(self.header)] + [_dumps(r) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def fromNdjson(path: str | Path) -> "EventLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path} 是空的日誌")
        header = json.loads(lines[0])
        if header.get("schema") != SCHEMA_NAME:
            raise ValueError(f"{path} 不是事件日誌")
        if header.get("version") != SCHEMA_VERSION:
            raise ValueError(f"不支援的日誌版本：{header.get('version')}")
        log = EventLog(header)
        log.records = [json.loads(line) for line in lines[1:] if line.strip()]
        return log


def _dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class Violation:
    check: str
    idx: int
    detail: str


@dataclass
class VerificationReport:
    violations: list[Violation] = field(default_factory=list)
    commits: int = 0
    applied: int = 0
    requests: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, check: str, idx: int, detail: str) -> None:
        self.violations.append(Violation(check, idx, detail))

    def summary(self) -> str:
        if self.ok:
            return f"通過：{self.commits} 筆提交、{self.applied} 筆交換器套用、{self.requests} 個請求"
        kinds = sorted({v.check for v in self.violations})
        return f"失敗：{len(self.violations)} 項違規 ({', '.join(kinds)})"


def verifyLog(log: EventLog) -> VerificationReport:
    """重播事件日誌並檢查協定性質

    檢查項目：
        - AGREEMENT：正確複本對同一請求提交的輸出摘要必須相同。
        - ORDER：MPBFT/SBFT 正確複本的提交序號嚴格遞增。
        - HASH_CHAIN：OBFT 提交時每台路徑交換器的雜湊等於提案基準。
        - ATTESTATION：交換器套用前已收到 fm+1 個相同內容的 REPLY。
        - OVERCOMMIT / REPLAY：依提交紀錄重建保留狀態不超量，且最終雜湊與複本相符。
        - LIVENESS：每個邏輯請求都有結果，正確複本結束時沒有未完成的 round。
    """
    header = log.header
    report = VerificationReport()
    fm = int(header.get("fm", 0))
    protocol = header.get("protocol")
    faulty = {int(r) for r in header.get("faulty", [])}
    for record in log.ofKind("FAULT"):
        faulty.add(int(record["replica"]))
    capacities = {
        linkKey(int(a), int(b)): int(cap) for a, b, cap in header.get("links", [])
    }

    digests: dict[str, dict[str, int]] = {}
    lastSeq: dict[int, int] = {}
    stores: dict[int, ReservationStore] = {}
    for record in log.transitions("COMMIT"):
        replica = int(record["replica"])
        if replica in faulty:
            continue
        report.commits += 1
        request = record["request"]
        seen = digests.setdefault(request, {})
        seen.setdefault(record["digest"], record["idx"])
        if len(seen) > 1:
            report.add("AGREEMENT", record["idx"], f"請求 {request} 有 {len(seen)} 種提交結果")
        seqNo = record.get("seq")
        if protocol in ("MPBFT", "SBFT") and seqNo is not None:
            if replica in lastSeq and seqNo <= lastSeq[replica]:
                report.add(
                    "ORDER", record["idx"],
                    f"複本 {replica} 在序號 {lastSeq[replica]} 之後提交 {seqNo}",
                )
            lastSeq[replica] = max(seqNo, lastSeq.get(replica, seqNo))
        base = record.get("base")
        if protocol == "OBFT" and base is not None and base != record.get("pre"):
            report.add("HASH_CHAIN", record["idx"], f"複本 {replica} 提交 {request} 時雜湊與基準不符")
        if capacities and not record.get("denied"):
            store = stores.setdefault(replica, ReservationStore(capacity=dict(capacities)))
            output = ComputedOutput.fromPath(
                RequestId.parse(request), tuple(record["path"]), int(record["bandwidth"])
            )
            try:
                applyReservation(store, output)
            except OvercommitError as exc:
                report.add("OVERCOMMIT", record["idx"], str(exc))
            except ValueError as exc:
                report.add("REPLAY", record["idx"], str(exc))

    delivered: dict[tuple[int, str], dict[str, str]] = {}
    for record in log.records:
        kind = record["kind"]
        if kind == "DELIVER" and record.get("phase") == "REPLY" and str(record["dst"]).startswith("S"):
            key = (int(record["dst"][1:]), record["request"])
            delivered.setdefault(key, {}).setdefault(record["src"], record.get("digest", ""))
        elif kind == "APPLIED":
            report.applied += 1
            key = (int(record["switch"]), record["request"])
            attesters = record.get("attesters", [])
            votes = delivered.get(key, {})
            matching = [a for a in attesters if votes.get(a) == record["digest"]]
            if len(set(matching)) < fm + 1:
                report.add(
                    "ATTESTATION", record["idx"],
                    f"交換器 {key[0]} 套用 {key[1]} 時只有 {len(set(matching))} 個相符 REPLY",
                )
            if record.get("base") is not None and record.get("base") != record.get("pre"):
                report.add("HASH_CHAIN", record["idx"], f"交換器 {key[0]} 套用 {key[1]} 時雜湊與基準不符")

    issued = {r["request"] for r in log.ofKind("CLIENT_ISSUE")}
    finished = {r["request"] for r in log.ofKind("CLIENT_DONE")}
    report.requests = len(issued)
    for request in sorted(issued - finished):
        report.add("LIVENESS", -1, f"請求 {request} 沒有結果")
    for record in log.ofKind("END"):
        if record.get("scope") != "replica":
            continue
        replica = int(record["replica"])
        if replica in faulty:
            continue
        if record.get("pending", 0):
            report.add("LIVENESS", record["idx"], f"複本 {replica} 仍有 {record['pending']} 個未完成 round")
        if capacities:
            store = stores.get(replica, ReservationStore(capacity=dict(capacities)))
            for switch, expected in record.get("hv", {}).items():
                if configHash(store, int(switch)).hex()[:16] != expected:
                    report.add("REPLAY", record["idx"], f"複本 {replica} 交換器 {switch} 的重建雜湊不符")
                    break
    logger.info("日誌驗證：%s", report.summary())
    return report

