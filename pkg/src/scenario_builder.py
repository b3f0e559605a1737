"""設定檔 -> 模擬情境

``config.json`` 依段落分組；本模組把各段落攤平成單層設定 (鍵名在各段落間
不重複)，套上命令列或掃描軸的覆寫值，再建立 :class:`Scenario`。
計時器以控制器到交換器的最大來回延遲 (RTT) 的倍數設定。
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Optional

import networkx as nx

from .assignment_solver import problemFromTopology, solveAssignment, groupsFromMatrix
from .fault_injector import FaultSpec, parseBehavior
from .models import FaultBudget, Protocol
from .protocol_engine import EngineOptions
from .quorum import groupSize
from .simnet import ClientOptions, LinkModel, Scenario
from .topology_processor import (
    ONE_PER_SWITCH,
    TWO_PER_LEAF,
    genFattree,
    loadGeoTopology,
    maxBaseRttUs,
    placeClients,
    placeControllers,
)
from .workload import Workload, generateWorkload

logger = logging.getLogger(__name__)

DEFAULTS: dict[str, dict[str, Any]] = {
    "protocol_params": {
        "protocol": "SBFT",
        "f_m": 1,
        "f_a": 0,
        "cluster_size": 4,
        "group_size": None,
        "obft_commit_rule": "agr",
        "safe_rejection": False,
        "faults": [],
    },
    "network_params": {
        "jitter_ratio": 0.05,
        "loss": 0.0,
        "duplicate": 0.0,
        "local_delay_us": 20,
        "cmp_cost_us": 0,
        "exec_cost_us": 0,
        "replica_speed": 1.0,
        "cost_model": "utilisation",
    },
    "timer_params": {
        "sync_timeout_rtt": 8,
        "round_timeout_rtt": 40,
        "hole_timeout_rtt": 8,
        "retransmit_us": 0,
        "client_timeout_rtt": 0,
        "reject_backoff_factor": 4,
        "retry_budget": 5,
        "resend_limit": 2,
        "reassign_delay_us": 0,
        "delay_max_rtt": 4,
    },
    "workload_params": {
        "lambda": 1.0,
        "duration_s": 1.0,
        "drain_s": 2.0,
        "demand_min": 1,
        "demand_max": 10,
        "seed": 0,
    },
    "assignment_params": {
        "method": "auto",
        "exact_bound": 10**7,
        "controller_capacity": None,
        "delay_bound_ms": None,
        "client_load": 0.0,
    },
    "topology_params": {
        "kind": "fattree",
        "k": 4,
        "file": "sample_data/internet2.topo",
        "link_capacity": 100,
        "link_delay_us": 100,
        "client_style": None,
    },
}


def loadConfig(path: str | Path | None) -> dict[str, Any]:
    """讀取設定檔；路徑不存在時回傳空設定"""
    if path is None or not Path(path).exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def flattenConfig(config: dict[str, Any], overrides: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """合併預設值、設定檔與覆寫值成單層設定"""
    settings: dict[str, Any] = {}
    for section, defaults in DEFAULTS.items():
        given = config.get(section, {})
        for key, value in defaults.items():
            settings[key] = given.get(key, value)
    for key, value in (overrides or {}).items():
        if key not in settings:
            raise ValueError(f"未知的設定項目：{key}")
        if value is not None:
            settings[key] = value
    return settings


def buildTopology(settings: dict[str, Any], baseDir: Path | None = None) -> nx.Graph:
    kind = settings["kind"]
    if kind == "fattree":
        return genFattree(int(settings["k"]), int(settings["link_capacity"]), int(settings["link_delay_us"]))
    if kind == "geo":
        path = Path(settings["file"])
        if baseDir is not None and not path.is_absolute():
            path = baseDir / path
        return loadGeoTopology(path, int(settings["link_capacity"]))
    raise ValueError(f"未知的拓撲種類：{kind}")


def _replicaSpeeds(value: Any, clusterSize: int) -> dict[int, float]:
    if isinstance(value, (list, tuple)):
        if len(value) != clusterSize:
            raise ValueError(f"replica_speed 需有 {clusterSize} 個值")
        speeds = {i: float(v) for i, v in enumerate(value)}
    else:
        speeds = {i: float(value) for i in range(clusterSize)}
    if any(s <= 0 for s in speeds.values()):
        raise ValueError("複本速度必須大於 0")
    return speeds


def buildScenario(
    settings: dict[str, Any],
    topology: nx.Graph | None = None,
    baseDir: Path | None = None,
) -> Scenario:
    """依攤平後的設定建立情境。

    Args:
        settings: :func:`flattenConfig` 的結果。
        topology: 已建立的拓撲；省略時依 ``topology_params`` 建立。
        baseDir: 相對拓撲檔路徑的基準目錄。

    Returns:
        Scenario: 可直接交給 :func:`src.simnet.run` 的情境。
    """
    protocol = Protocol(str(settings["protocol"]).upper())
    budget = FaultBudget(int(settings["f_m"]), int(settings["f_a"]))
    clusterSize = int(settings["cluster_size"])
    req = int(settings["group_size"] or groupSize(budget))
    if req < groupSize(budget):
        raise ValueError(f"群組大小 {req} 小於 2fm+fa+1 = {groupSize(budget)}")
    if req > clusterSize:
        raise ValueError(f"群組大小 {req} 大於叢集大小 {clusterSize}")

    G = topology if topology is not None else buildTopology(settings, baseDir)
    style = settings["client_style"] or (TWO_PER_LEAF if G.graph.get("kind") == "fattree" else ONE_PER_SWITCH)
    clients = placeClients(G, style)
    sites = placeControllers(G, clusterSize)
    rtt = maxBaseRttUs(G, sites, int(settings["local_delay_us"]))
    rate = float(settings["lambda"])

    groups: dict[int, tuple[int, ...]] = {}
    problem = matrix = None
    if protocol is not Protocol.MPBFT:
        attached: dict[int, int] = {}
        for c in clients:
            attached[c.switch] = attached.get(c.switch, 0) + 1
        loads = {s: attached.get(s, 0) * rate for s in G.nodes}
        capacity = settings["controller_capacity"]
        if capacity is None:
            capacity = sum(loads.values()) + float(settings["client_load"]) * clusterSize + 1.0
        delayBound = settings["delay_bound_ms"]
        problem = problemFromTopology(
            G, sites, loads, req, float(capacity),
            math.inf if delayBound is None else float(delayBound),
            [float(settings["client_load"])] if settings["client_load"] else [],
        )
        matrix = solveAssignment(problem, str(settings["method"]), int(settings["exact_bound"]))
        groups = groupsFromMatrix(problem, matrix)

    workload = Workload(
        rate=rate,
        durationS=float(settings["duration_s"]),
        demandMin=int(settings["demand_min"]),
        demandMax=int(settings["demand_max"]),
        seed=int(settings["seed"]),
    )
    options = EngineOptions(
        obftCommitRule=str(settings["obft_commit_rule"]),
        safeRejection=bool(settings["safe_rejection"]),
        cmpCostUs=int(settings["cmp_cost_us"]),
        execCostUs=int(settings["exec_cost_us"]),
        syncTimeoutUs=int(settings["sync_timeout_rtt"] * rtt),
        roundTimeoutUs=int(settings["round_timeout_rtt"] * rtt),
        holeTimeoutUs=int(settings["hole_timeout_rtt"] * rtt),
        costModel=str(settings["cost_model"]),
    )
    faults = tuple(
        FaultSpec(int(f["target"]), parseBehavior(f["behavior"]), int(f.get("at_us", 0)))
        for f in settings["faults"]
    )
    scenario = Scenario(
        protocol=protocol,
        budget=budget,
        topology=G,
        controllerSites=sites,
        clients=clients,
        workload=generateWorkload(G, clients, workload),
        groups=groups,
        link=LinkModel(
            jitterRatio=float(settings["jitter_ratio"]),
            lossProbability=float(settings["loss"]),
            duplicateProbability=float(settings["duplicate"]),
            localDelayUs=int(settings["local_delay_us"]),
        ),
        options=options,
        clientOptions=ClientOptions(
            retryBudget=int(settings["retry_budget"]),
            backoffFactor=float(settings["reject_backoff_factor"]),
            resendLimit=int(settings["resend_limit"]),
            timeoutUs=int(settings["client_timeout_rtt"] * rtt),
        ),
        seed=int(settings["seed"]),
        horizonUs=int((float(settings["duration_s"]) + float(settings["drain_s"])) * 1e6),
        faults=faults,
        replicaSpeeds=_replicaSpeeds(settings["replica_speed"], clusterSize),
        assignmentProblem=problem,
        assignment=matrix,
        reassignDelayUs=int(settings["reassign_delay_us"]),
        delayMaxUs=int(settings["delay_max_rtt"] * rtt),
        retransmitUs=int(settings["retransmit_us"]),
        params=dict(settings),
    )
    logger.info(
        "情境：%s |C|=%d |A|=%d fm=%d λ=%.2f，%d 個請求",
        protocol.value, clusterSize, req, budget.fm, rate, len(scenario.workload),
    )
    return scenario
