"""A&E 群組指派求解模組

以控制器 x 交換器的 0/1 矩陣表示指派，目標為所有有序交換器對之間
指派位元字串的 Hamming 距離總和 (越小代表群組重疊越多)。提供精確的
分支界限法、貪婪法、OR-Tools CP-SAT 模型，以及控制器故障後的重新指派。
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np
import pandas as pd
from ortools.sat.python import cp_model

logger = logging.getLogger(__name__)

DEFAULT_EXACT_BOUND = 10**7
_LOAD_SCALE = 1000


class InfeasibleAssignmentError(RuntimeError):
    """限制條件無法同時滿足"""


class AssignmentTooLargeError(RuntimeError):
    """搜尋空間超過精確求解上限，應改用啟發式"""


@dataclass
class AssignmentProblem:
    """指派問題

    Attributes:
        capacities: 各控制器可處理的請求率 P_Ci。
        loads: 各交換器的請求率 L_Sj。
        delays: 控制器到交換器的延遲 (毫秒)，形狀為 (控制器數, 交換器數)。
        delayBound: 允許的最大延遲 D_CS (毫秒)。
        req: 每台交換器需要的群組成員數。
        clientLoads: 北向用戶端的請求率，自每個控制器容量中扣除。
        controllerIds / switchIds: 矩陣列與欄對應的實際編號。
    """

    capacities: np.ndarray
    loads: np.ndarray
    delays: np.ndarray
    delayBound: float
    req: int
    clientLoads: list[float] = field(default_factory=list)
    controllerIds: list[int] = field(default_factory=list)
    switchIds: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.capacities = np.asarray(self.capacities, dtype=float)
        self.loads = np.asarray(self.loads, dtype=float)
        self.delays = np.asarray(self.delays, dtype=float)
        nCtrl, nSw = len(self.capacities), len(self.loads)
        if self.delays.shape != (nCtrl, nSw):
            raise ValueError(
                f"延遲矩陣形狀 {self.delays.shape} 應為 ({nCtrl}, {nSw})"
            )
        if (self.capacities < 0).any() or (self.loads < 0).any():
            raise ValueError("容量與負載不可為負數")
        if any(load < 0 for load in self.clientLoads):
            raise ValueError("北向用戶端負載不可為負數")
        if self.req < 1:
            raise ValueError("群組大小至少為 1")
        if not self.controllerIds:
            self.controllerIds = list(range(nCtrl))
        if not self.switchIds:
            self.switchIds = list(range(nSw))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.capacities), len(self.loads)

    def residualCapacity(self) -> np.ndarray:
        return self.capacities - float(sum(self.clientLoads))

    def delayFeasible(self) -> np.ndarray:
        return self.delays <= self.delayBound


def objective(matrix: np.ndarray) -> int:
    """所有有序交換器對的 Hamming 距離總和"""
    m = np.asarray(matrix, dtype=np.int64)
    colSums = m.sum(axis=0)
    gram = m.T @ m
    distances = colSums[:, None] + colSums[None, :] - 2 * gram
    return int(distances.sum())


def checkMatrix(problem: AssignmentProblem, matrix: np.ndarray) -> list[str]:
    """回傳違反的限制條件描述，空串列代表可行"""
    m = np.asarray(matrix)
    problems: list[str] = []
    if m.shape != problem.shape:
        return [f"矩陣形狀 {m.shape} 與問題 {problem.shape} 不符"]
    if not np.isin(m, (0, 1)).all():
        problems.append("矩陣含有 0/1 以外的值")
    for j, total in enumerate(m.sum(axis=0)):
        if total != problem.req:
            problems.append(f"交換器 {problem.switchIds[j]} 指派 {total} 台控制器，需要 {problem.req}")
    used = m @ problem.loads
    residual = problem.residualCapacity()
    for i, load in enumerate(used):
        if load > residual[i] + 1e-9:
            problems.append(f"控制器 {problem.controllerIds[i]} 負載 {load:g} 超過剩餘容量 {residual[i]:g}")
    far = (m == 1) & ~problem.delayFeasible()
    for i, j in zip(*np.nonzero(far)):
        problems.append(
            f"控制器 {problem.controllerIds[i]} 到交換器 {problem.switchIds[j]} 延遲超過上限"
        )
    return problems


def constraintReport(problem: AssignmentProblem, matrix: np.ndarray) -> pd.DataFrame:
    """各限制條件的寬裕量 (slack) 報表

    Returns:
        pd.DataFrame: 欄位為 Constraint、Target、Value、Limit、Slack、Satisfied。
    """
    m = np.asarray(matrix)
    rows = []
    for j, total in enumerate(m.sum(axis=0)):
        rows.append(("MinAssignment", f"S{problem.switchIds[j]}", int(total), problem.req))
    residual = problem.residualCapacity()
    for i, load in enumerate(m @ problem.loads):
        rows.append(("BoundedCapacity", f"C{problem.controllerIds[i]}", float(load), float(residual[i])))
    for j in range(m.shape[1]):
        assigned = problem.delays[m[:, j] == 1, j]
        worst = float(assigned.max()) if assigned.size else 0.0
        rows.append(("DelayBounds", f"S{problem.switchIds[j]}", worst, float(problem.delayBound)))
    df = pd.DataFrame(rows, columns=["Constraint", "Target", "Value", "Limit"])
    df["Slack"] = df["Limit"] - df["Value"]
    isMin = df["Constraint"] == "MinAssignment"
    df.loc[isMin, "Slack"] = -(df.loc[isMin, "Value"] - df.loc[isMin, "Limit"]).abs()
    df["Satisfied"] = df["Slack"] >= 0
    df.loc[isMin, "Satisfied"] = df.loc[isMin, "Slack"] == 0
    return df


def _candidateSets(problem: AssignmentProblem) -> list[list[tuple[int, ...]]]:
    feasible = problem.delayFeasible()
    residual = problem.residualCapacity()
    candidates = []
    for j in range(problem.shape[1]):
        ctrls = [
            i
            for i in range(problem.shape[0])
            if feasible[i, j] and problem.loads[j] <= residual[i] + 1e-9
        ]
        if len(ctrls) < problem.req:
            raise InfeasibleAssignmentError(
                f"交換器 {problem.switchIds[j]} 只有 {len(ctrls)} 台可用控制器，需要 {problem.req}"
            )
        candidates.append(list(itertools.combinations(ctrls, problem.req)))
    return candidates


def searchSpaceSize(problem: AssignmentProblem) -> int:
    """各交換器可行組合數的乘積"""
    feasible = problem.delayFeasible()
    size = 1
    for j in range(problem.shape[1]):
        size *= math.comb(int(feasible[:, j].sum()), problem.req)
    return size


def _branchAndBound(
    problem: AssignmentProblem,
    bound: int,
    current: Optional[np.ndarray] = None,
) -> np.ndarray:
    if searchSpaceSize(problem) > bound:
        raise AssignmentTooLargeError(
            f"搜尋空間 {searchSpaceSize(problem)} 超過上限 {bound}"
        )
    candidates = _candidateSets(problem)
    nCtrl, nSw = problem.shape
    residual = problem.residualCapacity()
    loads = problem.loads
    columns = np.zeros((nCtrl, nSw), dtype=np.int8)
    used = np.zeros(nCtrl)
    best: dict[str, object] = {"key": None, "matrix": None}

    def leafKey(obj: int, churn: int) -> tuple:
        flat = tuple(int(v) for v in columns.flatten())
        return (obj, churn, flat) if current is not None else (obj, flat)

    def dominated(obj: int, churn: int) -> bool:
        key = best["key"]
        if key is None:
            return False
        if obj != key[0]:
            return obj > key[0]
        return current is not None and churn > key[1]

    def visit(j: int, obj: int, churn: int) -> None:
        if dominated(obj, churn):
            return
        if j == nSw:
            key = leafKey(obj, churn)
            if best["key"] is None or key < best["key"]:
                best["key"] = key
                best["matrix"] = columns.copy()
            return
        for combo in candidates[j]:
            if any(used[i] + loads[j] > residual[i] + 1e-9 for i in combo):
                continue
            col = np.zeros(nCtrl, dtype=np.int8)
            col[list(combo)] = 1
            added = 0
            if j:
                prev = columns[:, :j]
                added = 2 * int(np.abs(prev - col[:, None]).sum())
            extra = int(np.abs(current[:, j] - col).sum()) if current is not None else 0
            columns[:, j] = col
            used[list(combo)] += loads[j]
            visit(j + 1, obj + added, churn + extra)
            used[list(combo)] -= loads[j]
            columns[:, j] = 0

    visit(0, 0, 0)
    if best["matrix"] is None:
        raise InfeasibleAssignmentError("找不到同時滿足容量與延遲限制的指派")
    return best["matrix"]


def solveExact(problem: AssignmentProblem, bound: int = DEFAULT_EXACT_BOUND) -> np.ndarray:
    """分支界限法求最小重疊距離的指派

    同目標值時取展平後 (列優先) 字典序最小的矩陣。
    """
    matrix = _branchAndBound(problem, bound)
    logger.info("精確指派完成，目標值 %d", objective(matrix))
    return matrix


def solveGreedy(problem: AssignmentProblem) -> np.ndarray:
    """依負載由大到小處理交換器，優先重複使用已在其他群組出現的控制器"""
    nCtrl, nSw = problem.shape
    feasible = problem.delayFeasible()
    residual = problem.residualCapacity().copy()
    reuse = np.zeros(nCtrl, dtype=int)
    matrix = np.zeros((nCtrl, nSw), dtype=np.int8)
    order = sorted(range(nSw), key=lambda j: (-problem.loads[j], j))
    for j in order:
        options = [
            i
            for i in range(nCtrl)
            if feasible[i, j] and residual[i] + 1e-9 >= problem.loads[j]
        ]
        if len(options) < problem.req:
            raise InfeasibleAssignmentError(
                f"交換器 {problem.switchIds[j]} 找不到 {problem.req} 台可用控制器"
            )
        chosen = sorted(options, key=lambda i: (-reuse[i], i))[: problem.req]
        for i in chosen:
            matrix[i, j] = 1
            reuse[i] += 1
            residual[i] -= problem.loads[j]
    logger.info("貪婪指派完成，目標值 %d", objective(matrix))
    return matrix


def solveIlp(
    problem: AssignmentProblem,
    current: Optional[np.ndarray] = None,
    timeLimit: int = 10,
) -> np.ndarray:
    """以 OR-Tools CP-SAT 求解指派

    Hamming 項以 |a-b| 的線性化表示。給定 ``current`` 時第二階段固定最佳
    目標值並最小化與現有矩陣的差異。
    """
    nCtrl, nSw = problem.shape
    feasible = problem.delayFeasible()
    residual = problem.residualCapacity()
    loads = [int(round(v * _LOAD_SCALE)) for v in problem.loads]

    model = cp_model.CpModel()
    x = {
        (i, j): model.NewBoolVar(f"x_{i}_{j}")
        for i in range(nCtrl)
        for j in range(nSw)
    }
    for (i, j), var in x.items():
        if not feasible[i, j]:
            model.Add(var == 0)
    for j in range(nSw):
        model.Add(sum(x[i, j] for i in range(nCtrl)) == problem.req)
    for i in range(nCtrl):
        cap = int(math.floor(residual[i] * _LOAD_SCALE + 1e-6))
        model.Add(sum(loads[j] * x[i, j] for j in range(nSw)) <= max(cap, 0))

    diffs = []
    for j, k in itertools.combinations(range(nSw), 2):
        for i in range(nCtrl):
            d = model.NewBoolVar(f"d_{i}_{j}_{k}")
            model.Add(d >= x[i, j] - x[i, k])
            model.Add(d >= x[i, k] - x[i, j])
            diffs.append(d)
    distance = 2 * sum(diffs) if diffs else 0
    model.Minimize(distance)

    solver = cp_model.CpSolver()
    solver.parameters.max_time_in_seconds = timeLimit
    solver.parameters.num_workers = 1
    solver.parameters.random_seed = 0
    status = solver.Solve(model)
    if status == cp_model.INFEASIBLE:
        raise InfeasibleAssignmentError("CP-SAT 判定指派不可行")
    if status not in (cp_model.OPTIMAL, cp_model.FEASIBLE):
        raise RuntimeError("CP-SAT 指派求解失敗")

    if current is not None:
        best = int(solver.ObjectiveValue())
        model.Add(distance == best)
        churn = []
        for (i, j), var in x.items():
            churn.append(var if current[i, j] == 0 else 1 - var)
        model.Minimize(sum(churn))
        status = solver.Solve(model)
        if status not in (cp_model.OPTIMAL, cp_model.FEASIBLE):
            raise RuntimeError("CP-SAT 重新指派求解失敗")

    matrix = np.zeros((nCtrl, nSw), dtype=np.int8)
    for (i, j), var in x.items():
        matrix[i, j] = solver.Value(var)
    logger.info("CP-SAT 指派完成，目標值 %d", objective(matrix))
    return matrix


def solveAssignment(
    problem: AssignmentProblem, method: str = "auto", bound: int = DEFAULT_EXACT_BOUND
) -> np.ndarray:
    """依方法名稱求解：``exact``、``greedy``、``ilp`` 或 ``auto``

    ``auto`` 在搜尋空間不超過上限時用精確解，否則用貪婪法。
    """
    if method == "exact":
        return solveExact(problem, bound)
    if method == "greedy":
        return solveGreedy(problem)
    if method == "ilp":
        return solveIlp(problem)
    if method != "auto":
        raise ValueError(f"未知的指派方法：{method}")
    try:
        return solveExact(problem, bound)
    except AssignmentTooLargeError:
        logger.info("搜尋空間過大，改用貪婪法")
        return solveGreedy(problem)


def withoutControllers(problem: AssignmentProblem, failed: Iterable[int]) -> AssignmentProblem:
    """將故障控制器 (以實際編號表示) 標示為不可用"""
    failedRows = [problem.controllerIds.index(c) for c in failed]
    delays = problem.delays.copy()
    capacities = problem.capacities.copy()
    delays[failedRows, :] = np.inf
    capacities[failedRows] = 0.0
    return AssignmentProblem(
        capacities=capacities,
        loads=problem.loads,
        delays=delays,
        delayBound=problem.delayBound,
        req=problem.req,
        clientLoads=list(problem.clientLoads),
        controllerIds=list(problem.controllerIds),
        switchIds=list(problem.switchIds),
    )


def reassignOnFailure(
    problem: AssignmentProblem,
    failed: Iterable[int],
    current: np.ndarray,
    bound: int = DEFAULT_EXACT_BOUND,
) -> np.ndarray:
    """控制器故障後重新指派

    現有矩陣未使用故障控制器且仍可行時原樣回傳；否則重新求解，同目標值
    時取與現有矩陣差異最少者。
    """
    failedSet = sorted(set(failed))
    survivors = len(problem.controllerIds) - len(failedSet)
    if survivors < problem.req:
        raise InfeasibleAssignmentError(
            f"存活控制器 {survivors} 台少於群組大小 {problem.req}"
        )
    reduced = withoutControllers(problem, failedSet)
    current = np.asarray(current, dtype=np.int8)
    if not checkMatrix(reduced, current):
        return current.copy()
    target = current.copy()
    for c in failedSet:
        target[problem.controllerIds.index(c), :] = 0
    try:
        matrix = _branchAndBound(reduced, bound, current=target)
    except AssignmentTooLargeError:
        matrix = solveIlp(reduced, current=target)
    logger.info(
        "重新指派：故障 %s，變動 %d 個項目", failedSet, int(np.abs(matrix - current).sum())
    )
    return matrix


def problemFromTopology(
    topology: nx.Graph,
    controllerSites: Sequence[int],
    switchLoads: dict[int, float],
    req: int,
    capacity: float,
    delayBoundMs: float,
    clientLoads: Sequence[float] = (),
) -> AssignmentProblem:
    """由拓撲與控制器位置建立指派問題

    控制器到交換器的延遲取拓撲上 ``delay_us`` 權重的最短路徑，換算為毫秒。
    """
    switches = sorted(topology.nodes)
    delays = np.zeros((len(controllerSites), len(switches)))
    for i, site in enumerate(controllerSites):
        lengths = nx.single_source_dijkstra_path_length(topology, site, weight="delay_us")
        for j, sw in enumerate(switches):
            delays[i, j] = lengths.get(sw, math.inf) / 1000.0
    return AssignmentProblem(
        capacities=np.full(len(controllerSites), float(capacity)),
        loads=np.array([float(switchLoads.get(sw, 0.0)) for sw in switches]),
        delays=delays,
        delayBound=delayBoundMs,
        req=req,
        clientLoads=list(clientLoads),
        controllerIds=list(range(len(controllerSites))),
        switchIds=switches,
    )


def groupsFromMatrix(problem: AssignmentProblem, matrix: np.ndarray) -> dict[int, tuple[int, ...]]:
    """交換器編號 -> 該交換器 A&E 群組的控制器編號 (遞增排序)"""
    m = np.asarray(matrix)
    return {
        sw: tuple(problem.controllerIds[i] for i in np.nonzero(m[:, j])[0])
        for j, sw in enumerate(problem.switchIds)
    }
