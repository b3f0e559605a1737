"""事件日誌 -> 效能指標

訊息依傳送端與接收端分為 C2C (控制器間)、C2S (控制器到交換器) 與
CLIENT (用戶端往返)，三類互斥且涵蓋所有 SEND 紀錄。
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .event_log import EventLog
from .models import Phase

logger = logging.getLogger(__name__)

TRAFFIC_CLASSES = ("C2C", "C2S", "CLIENT")


@dataclass
class MessageCounts:
    c2c: int = 0
    c2s: int = 0
    client: int = 0
    byPhase: dict[tuple[str, str], int] = field(default_factory=dict)

    def phase(self, cls: str, phase: Phase | str) -> int:
        name = phase.value if isinstance(phase, Phase) else phase
        return self.byPhase.get((cls, name), 0)


def countMessages(log: EventLog) -> MessageCounts:
    """統計每一類、每個階段送出的訊息數 (重傳與網路重複不計)"""
    sends = [r for r in log.records if r["kind"] == "SEND"]
    if not sends:
        return MessageCounts()
    df = pd.DataFrame.from_records(sends, columns=["cls", "phase"])
    byPhase = {
        (str(cls), str(phase)): int(n)
        for (cls, phase), n in df.groupby(["cls", "phase"]).size().items()
    }
    totals = df["cls"].value_counts()
    return MessageCounts(
        c2c=int(totals.get("C2C", 0)),
        c2s=int(totals.get("C2S", 0)),
        client=int(totals.get("CLIENT", 0)),
        byPhase=byPhase,
    )


@dataclass
class MetricsReport:
    """單次模擬的指標；回應時間只計入被接受的請求 (毫秒)"""

    requests: int = 0
    accepted: int = 0
    firstAttemptAccepted: int = 0
    denied: int = 0
    rejected: int = 0
    unfinished: int = 0
    retries: int = 0
    acceptanceRate: float = 0.0
    responseMeanMs: float = float("nan")
    responseP50Ms: float = float("nan")
    responseP95Ms: float = float("nan")
    rounds: int = 0
    c2c: int = 0
    c2s: int = 0
    client: int = 0
    c2cPps: float = 0.0
    c2sPps: float = 0.0
    durationS: float = 0.0
    byPhase: dict[tuple[str, str], int] = field(default_factory=dict)

    def toRow(self) -> dict[str, object]:
        """攤平成 CSV 列；每個 (類別, 階段) 都有欄位，空值為 0"""
        row = {k: v for k, v in asdict(self).items() if k != "byPhase"}
        for cls in TRAFFIC_CLASSES:
            for phase in Phase:
                row[f"msg_{cls}_{phase.value}"] = self.byPhase.get((cls, phase.value), 0)
        return row


def responseTimes(log: EventLog) -> pd.Series:
    """被接受請求的回應時間 (毫秒)：首次送出到最後一台交換器套用"""
    done = [r for r in log.ofKind("CLIENT_DONE") if r["outcome"] == "ACCEPTED"]
    applied = log.ofKind("APPLIED")
    if not done or not applied:
        return pd.Series(dtype=float)
    issued = pd.DataFrame.from_records(done).set_index("request")["firstIssuedAt"]
    lastApply = pd.DataFrame.from_records(applied).groupby("request")["t"].max()
    joined = pd.concat([issued, lastApply], axis=1, join="inner")
    return ((joined["t"] - joined["firstIssuedAt"]) / 1000.0).sort_index()


def extractMetrics(log: EventLog, durationS: float | None = None) -> MetricsReport:
    """由事件日誌計算 MetricsReport

    Args:
        log: 完整事件日誌。
        durationS: 計算訊息速率的時間長度 (秒)；省略時使用標頭中的負載時間，
            再不然使用最後一筆 SEND 的時間。
    """
    counts = countMessages(log)
    issued = {r["request"] for r in log.ofKind("CLIENT_ISSUE")}
    done = log.ofKind("CLIENT_DONE")
    outcomes = pd.Series({r["request"]: r["outcome"] for r in done}, dtype=object)
    firstAccepted = sum(1 for r in done if r["outcome"] == "ACCEPTED" and r["attempt"] == 0)
    if durationS is None:
        durationS = float(log.header.get("params", {}).get("duration_s", 0.0) or 0.0)
    if durationS <= 0:
        lastSend = max((r["t"] for r in log.records if r["kind"] == "SEND"), default=0)
        durationS = lastSend / 1e6
    times = responseTimes(log)
    faulty = set(log.header.get("faulty", []))
    rounds = [
        r["rounds"] for r in log.transitions("REPLY_EMIT")
        if r["replica"] not in faulty and r.get("rounds") is not None
    ]
    report = MetricsReport(
        requests=len(issued),
        accepted=int((outcomes == "ACCEPTED").sum()),
        firstAttemptAccepted=firstAccepted,
        denied=int((outcomes == "DENIED").sum()),
        rejected=int((outcomes == "REJECTED").sum()),
        unfinished=len(issued) - len(outcomes),
        retries=len(log.ofKind("CLIENT_RETRY")),
        acceptanceRate=firstAccepted / len(issued) if issued else 0.0,
        rounds=max(rounds, default=0),
        c2c=counts.c2c,
        c2s=counts.c2s,
        client=counts.client,
        c2cPps=counts.c2c / durationS if durationS > 0 else 0.0,
        c2sPps=counts.c2s / durationS if durationS > 0 else 0.0,
        durationS=durationS,
        byPhase=counts.byPhase,
    )
    if len(times):
        report.responseMeanMs = float(times.mean())
        report.responseP50Ms = float(times.quantile(0.5))
        report.responseP95Ms = float(times.quantile(0.95))
    return report


def fitScaling(x, y, degree: int) -> tuple[np.ndarray, float]:
    """多項式最小平方擬合

    Returns:
        tuple[np.ndarray, float]: 係數 (最高次方在前) 與決定係數 R²。
    """
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if len(xs) <= degree:
        raise ValueError(f"{degree} 次擬合至少需要 {degree + 1} 個點")
    coeffs = np.polyfit(xs, ys, degree)
    residual = ys - np.polyval(coeffs, xs)
    total = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - float((residual ** 2).sum()) / total if total > 0 else 1.0
    return coeffs, r2
