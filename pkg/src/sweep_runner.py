"""參數掃描模組

每個掃描值 x 每個種子建立一個情境，交給行程池平行執行；結果依輸入順序
收回後由主行程一次寫出 CSV，相同種子重跑得到相同位元組的檔案。
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Optional

import pandas as pd

from .assignment_solver import AssignmentTooLargeError, InfeasibleAssignmentError
from .event_log import verifyLog
from .metrics_processor import MetricsReport, extractMetrics
from .scenario_builder import buildScenario
from .simnet import run

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    "protocol": "protocol",
    "cluster_size": "cluster_size",
    "group_size": "group_size",
    "f_m": "f_m",
    "lambda": "lambda",
    "loss": "loss",
}


def _csvValue(value: Any) -> Any:
    if isinstance(value, (list, dict, tuple)):
        return json.dumps(value, sort_keys=True, ensure_ascii=False)
    return value


def expandPoints(
    settings: dict[str, Any], axis: str, values: Iterable[Any], seeds: int = 1
) -> list[dict[str, Any]]:
    """展開成逐一執行的設定 (掃描值為外層，種子為內層)"""
    if axis not in SWEEP_AXES:
        raise ValueError(f"不支援的掃描軸：{axis}，可用 {', '.join(SWEEP_AXES)}")
    if seeds < 1:
        raise ValueError("種子數至少為 1")
    points = []
    baseSeed = int(settings["seed"])
    for value in values:
        for s in range(seeds):
            point = dict(settings)
            point[SWEEP_AXES[axis]] = value
            point["seed"] = baseSeed + s
            points.append(point)
    return points


def runPoint(settings: dict[str, Any], baseDir: Optional[str] = None) -> dict[str, Any]:
    """執行單一掃描點並回傳 CSV 列；不可行的情境回傳帶警告的列"""
    row = {k: _csvValue(v) for k, v in settings.items()}
    try:
        scenario = buildScenario(settings, baseDir=Path(baseDir) if baseDir else None)
    except (ValueError, InfeasibleAssignmentError, AssignmentTooLargeError) as exc:
        row["status"] = f"skipped: {exc}"
        return row
    log = run(scenario)
    report = extractMetrics(log)
    row.update(report.toRow())
    row["status"] = "ok"
    row["verified"] = verifyLog(log).ok
    return row


def runSweep(
    settings: dict[str, Any],
    axis: str,
    values: Iterable[Any],
    seeds: int = 1,
    workers: int = 1,
    output: str | Path | None = None,
    baseDir: Optional[str | Path] = None,
) -> pd.DataFrame:
    """沿一個參數軸掃描。

    Args:
        settings: 基準設定 (見 :func:`src.scenario_builder.flattenConfig`)。
        axis: 掃描軸名稱。
        values: 掃描值。
        seeds: 每個掃描值的種子數。
        workers: 行程池大小；1 代表在目前行程內依序執行。
        output: CSV 輸出路徑，省略時不寫檔。
        baseDir: 相對拓撲檔路徑的基準目錄。

    Returns:
        pd.DataFrame: 每個 (掃描值, 種子) 一列。
    """
    points = expandPoints(settings, axis, values, seeds)
    base = str(baseDir) if baseDir is not None else None
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(runPoint, points, [base] * len(points)))
    else:
        rows = [runPoint(p, base) for p in points]
    for row in rows:
        row["axis"] = axis
        if row["status"] != "ok":
            logger.warning("略過 %s=%s (seed %s)：%s", axis, row[axis], row["seed"], row["status"])

    columns = list(settings) + ["axis", "status", "verified"] + list(MetricsReport().toRow())
    df = pd.DataFrame.from_records(rows, columns=columns)
    if output is not None:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(output, index=False, encoding="utf-8-sig")
        logger.info("掃描結果寫入 %s (%d 列)", output, len(df))
    return df
