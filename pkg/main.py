import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from src.assignment_solver import constraintReport, objective
from src.event_log import EventLog, verifyLog
from src.metrics_processor import extractMetrics
from src.scenario_builder import buildScenario, flattenConfig, loadConfig
from src.simnet import run
from src.sweep_runner import SWEEP_AXES, runSweep

ROOT = Path(__file__).resolve().parent


def addScenarioArguments(parser: argparse.ArgumentParser) -> None:
    """情境相關參數；未指定者沿用設定檔"""
    parser.add_argument("--config", default="config.json", help="設定檔路徑")
    parser.add_argument("--protocol", choices=["MPBFT", "SBFT", "OBFT"], help="BFT 協定")
    parser.add_argument("--cluster-size", dest="cluster_size", type=int, help="控制器數 |C|")
    parser.add_argument("--group-size", dest="group_size", type=int, help="A&E 群組大小 |A|")
    parser.add_argument("--fm", dest="f_m", type=int, help="可容忍的拜占庭故障數")
    parser.add_argument("--fa", dest="f_a", type=int, help="可容忍的當機故障數")
    parser.add_argument("--lambda", dest="lambda", type=float, help="每個用戶端的請求率 (次/秒)")
    parser.add_argument("--duration", dest="duration_s", type=float, help="請求產生時間 (秒)")
    parser.add_argument("--loss", type=float, help="訊息遺失機率")
    parser.add_argument("--jitter", dest="jitter_ratio", type=float, help="延遲抖動比例")
    parser.add_argument("--seed", type=int, help="亂數種子")
    parser.add_argument("--topology", dest="kind", choices=["fattree", "geo"], help="拓撲種類")
    parser.add_argument("--k", type=int, help="fat-tree 的 k")
    parser.add_argument("--topology-file", dest="file", help="地理拓撲檔")
    parser.add_argument("--method", choices=["auto", "exact", "greedy", "ilp"], help="A&E 指派方法")
    parser.add_argument(
        "--fault", action="append", default=[], metavar="TARGET:BEHAVIOR[:AT_US]",
        help="注入故障，例如 2:EQUIVOCATE_SEQ 或 1:CRASH:50000，可重複指定")
    parser.add_argument("--output-dir", dest="outputDir", help="輸出目錄")


def parseFault(text: str) -> dict:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"故障格式錯誤：{text}")
    fault = {"target": int(parts[0]), "behavior": parts[1]}
    if len(parts) == 3:
        fault["at_us"] = int(parts[2])
    return fault


def parse_arguments(argv=None):
    """解析命令列參數"""
    parser = argparse.ArgumentParser(description="SDN 控制平面 BFT 協定模擬工具")
    parser.add_argument(
        "--log-level", dest="logLevel", default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="日誌等級")
    sub = parser.add_subparsers(dest="command", required=True)

    runParser = sub.add_parser("run", help="執行單一情境")
    addScenarioArguments(runParser)

    sweepParser = sub.add_parser("sweep", help="沿參數軸掃描")
    addScenarioArguments(sweepParser)
    sweepParser.add_argument("--axis", choices=sorted(SWEEP_AXES), help="掃描軸")
    sweepParser.add_argument("--values", help="以逗號分隔的掃描值，例如 4,5,6")
    sweepParser.add_argument("--seeds", type=int, help="每個掃描值的種子數")
    sweepParser.add_argument("--workers", type=int, help="平行行程數")

    verifyParser = sub.add_parser("verify", help="重播事件日誌並檢查不變量")
    verifyParser.add_argument("log", help="NDJSON 事件日誌路徑")

    solveParser = sub.add_parser("solve-assignment", help="只求解 A&E 群組指派")
    addScenarioArguments(solveParser)
    return parser.parse_args(argv)


def parseValue(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text.upper()


def loadSettings(args) -> tuple[dict, dict]:
    """合併設定檔、環境變數與命令列參數"""
    configPath = Path(args.config)
    if not configPath.is_absolute() and not configPath.exists():
        configPath = ROOT / configPath
    config = loadConfig(configPath)
    overrides = {}
    for key in ("protocol", "cluster_size", "group_size", "f_m", "f_a", "lambda", "duration_s",
                "loss", "jitter_ratio", "kind", "k", "file", "method"):
        overrides[key] = getattr(args, key)
    seed = args.seed if args.seed is not None else os.environ.get("BFTSIM_SEED")
    overrides["seed"] = int(seed) if seed is not None else None
    if args.fault:
        overrides["faults"] = [parseFault(f) for f in args.fault]
    return flattenConfig(config, overrides), config


def outputDir(args) -> Path:
    path = Path(args.outputDir or os.environ.get("BFTSIM_OUTPUT_DIR") or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def commandRun(args) -> int:
    settings, _ = loadSettings(args)
    out = outputDir(args)
    scenario = buildScenario(settings, baseDir=ROOT)
    print(f"開始模擬 {scenario.protocol.value}：|C|={scenario.clusterSize}，{len(scenario.workload)} 個請求")
    log = run(scenario)
    logPath = out / "events.ndjson"
    log.toNdjson(logPath)
    print(f"已輸出 {logPath.name}")
    report = extractMetrics(log)
    metricsPath = out / "metrics.csv"
    pd.DataFrame([report.toRow()]).to_csv(metricsPath, index=False, encoding="utf-8-sig")
    print(f"已輸出 {metricsPath.name}")
    print(
        f"接受率 {report.acceptanceRate:.2%}，平均回應時間 {report.responseMeanMs:.2f} ms，"
        f"C2C {report.c2c} 則，C2S {report.c2s} 則"
    )
    verification = verifyLog(log)
    print(verification.summary())
    return 0 if verification.ok else 1


def commandSweep(args) -> int:
    settings, config = loadSettings(args)
    sweepParams = config.get("sweep_params", {})
    axis = args.axis or sweepParams.get("axis", "cluster_size")
    if args.values:
        values = [parseValue(v) for v in args.values.split(",")]
    else:
        values = sweepParams.get("values", list(range(4, 14)))
    seeds = args.seeds or int(sweepParams.get("seeds", 1))
    workers = args.workers or int(sweepParams.get("workers", 1))
    out = outputDir(args) / f"sweep_{axis}.csv"
    print(f"開始掃描 {axis}：{len(values)} 個值 x {seeds} 個種子")
    df = runSweep(settings, axis, values, seeds=seeds, workers=workers, output=out, baseDir=ROOT)
    print(f"已輸出 {out.name}")
    skipped = int((df["status"] != "ok").sum())
    if skipped:
        print(f"略過 {skipped} 個不可行的情境")
    return 0


def commandVerify(args) -> int:
    log = EventLog.fromNdjson(args.log)
    report = verifyLog(log)
    print(report.summary())
    for violation in report.violations:
        print(f"  [{violation.check}] #{violation.idx} {violation.detail}")
    return 0 if report.ok else 1


def commandSolveAssignment(args) -> int:
    settings, _ = loadSettings(args)
    if str(settings["protocol"]).upper() == "MPBFT":
        settings["protocol"] = "SBFT"
    settings["duration_s"] = 0.0
    scenario = buildScenario(settings, baseDir=ROOT)
    problem = scenario.assignmentProblem
    matrix = scenario.assignment
    out = outputDir(args)
    matrixPath = out / "assignment.csv"
    pd.DataFrame(
        np.asarray(matrix, dtype=int),
        index=[f"C{c}" for c in problem.controllerIds],
        columns=[f"S{s}" for s in problem.switchIds],
    ).to_csv(matrixPath, encoding="utf-8-sig")
    print(f"已輸出 {matrixPath.name}")
    report = constraintReport(problem, matrix)
    reportPath = out / "assignment_constraints.csv"
    report.to_csv(reportPath, index=False, encoding="utf-8-sig")
    print(f"已輸出 {reportPath.name}")
    print(f"目標值 (Hamming 距離總和)：{objective(matrix)}")
    violated = int((~report["Satisfied"].astype(bool)).sum())
    if violated:
        print(f"有 {violated} 項限制未滿足")
        return 1
    return 0


COMMANDS = {
    "run": commandRun,
    "sweep": commandSweep,
    "verify": commandVerify,
    "solve-assignment": commandSolveAssignment,
}


def main(argv=None) -> int:
    """主執行流程"""
    args = parse_arguments(argv)
    logging.basicConfig(level=getattr(logging, args.logLevel), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError) as exc:
        print(f"錯誤：{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
