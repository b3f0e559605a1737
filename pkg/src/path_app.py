"""路徑計算與頻寬保留模組

每個控制器複本各自持有一份 :class:`ReservationStore`。路徑以 Dijkstra
在剩餘頻寬足夠的鏈路上搜尋，鏈路成本為保留後的使用率，同成本時比較
跳數，再比較節點序列，確保各複本算出完全相同的結果。
"""

from __future__ import annotations

import hashlib
import heapq
import logging
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx

from . import codec
from .models import ClientRequest, ComputedOutput, ConfigHash, FlowRule, RequestId

logger = logging.getLogger(__name__)

LinkKey = tuple[int, int]


class OvercommitError(RuntimeError):
    """保留後鏈路使用量超過容量"""


class DuplicateReservationError(ValueError):
    """同一請求重複保留"""


def linkKey(a: int, b: int) -> LinkKey:
    return (a, b) if a <= b else (b, a)


@dataclass
class ReservationStore:
    """每條鏈路的已保留頻寬與已安裝的流規則"""

    capacity: dict[LinkKey, int]
    reserved: dict[LinkKey, int] = field(default_factory=dict)
    committed: dict[RequestId, ComputedOutput] = field(default_factory=dict)
    rulesBySwitch: dict[int, dict[RequestId, FlowRule]] = field(default_factory=dict)

    @staticmethod
    def fromTopology(topology: nx.Graph) -> "ReservationStore":
        capacity = {
            linkKey(u, v): int(data.get("capacity", 0))
            for u, v, data in topology.edges(data=True)
        }
        return ReservationStore(capacity=capacity)

    def residual(self, a: int, b: int) -> int:
        key = linkKey(a, b)
        return self.capacity.get(key, 0) - self.reserved.get(key, 0)

    def utilisation(self, a: int, b: int) -> float:
        key = linkKey(a, b)
        cap = self.capacity.get(key, 0)
        return self.reserved.get(key, 0) / cap if cap else 1.0


def findPath(
    topology: nx.Graph,
    store: ReservationStore,
    request: ClientRequest,
    costModel: str = "utilisation",
) -> Optional[ComputedOutput]:
    """為請求尋找頻寬足夠的最低成本路徑

    Args:
        topology: 交換器拓撲。
        store: 本地保留狀態。
        request: 頻寬保留請求。
        costModel: ``"utilisation"`` 以保留後使用率為成本，``"hops"`` 以跳數為成本。

    Returns:
        ComputedOutput | None: 找不到可行路徑時回傳 None。
    """
    if request.src not in topology or request.dst not in topology:
        raise ValueError(f"請求 {request.id} 的端點不在拓撲中")
    demand = request.bandwidth
    best: dict[int, tuple[float, int, tuple[int, ...]]] = {}
    heap: list[tuple[float, int, tuple[int, ...]]] = [(0.0, 0, (request.src,))]
    while heap:
        cost, hops, path = heapq.heappop(heap)
        node = path[-1]
        if node in best:
            continue
        best[node] = (cost, hops, path)
        if node == request.dst:
            break
        for nxt in sorted(topology.adj[node]):
            if nxt in best:
                continue
            if store.residual(node, nxt) < demand:
                continue
            if costModel == "hops":
                step = 1.0
            else:
                key = linkKey(node, nxt)
                step = (store.reserved.get(key, 0) + demand) / store.capacity[key]
            heapq.heappush(heap, (cost + step, hops + 1, path + (nxt,)))
    if request.dst not in best:
        logger.debug("請求 %s 無可行路徑", request.id)
        return None
    return ComputedOutput.fromPath(request.id, best[request.dst][2], demand)


def applyReservation(store: ReservationStore, output: ComputedOutput) -> ReservationStore:
    """將共識輸出寫入本地保留狀態 (就地更新並回傳同一物件)"""
    if output.requestId in store.committed:
        raise DuplicateReservationError(f"請求 {output.requestId} 已保留")
    if output.denied:
        return store
    path = output.path
    links = [linkKey(path[i], path[i + 1]) for i in range(len(path) - 1)]
    for key in links:
        if key not in store.capacity:
            raise ValueError(f"鏈路 {key} 不存在")
        if store.reserved.get(key, 0) + output.bandwidth > store.capacity[key]:
            raise OvercommitError(
                f"鏈路 {key} 保留 {output.bandwidth} 後超過容量 {store.capacity[key]}"
            )
    for key in links:
        store.reserved[key] = store.reserved.get(key, 0) + output.bandwidth
    store.committed[output.requestId] = output
    for rule in output.rules:
        store.rulesBySwitch.setdefault(rule.switch, {})[output.requestId] = rule
    return store


def rulesAt(rules: dict[RequestId, FlowRule]) -> tuple[FlowRule, ...]:
    return tuple(rules[rid] for rid in sorted(rules))


def hashRules(rules: dict[RequestId, FlowRule]) -> ConfigHash:
    """流規則集合的 SHA-256 (依 RequestId 排序後正規編碼)"""
    return hashlib.sha256(codec.encode(rulesAt(rules))).digest()


def configHash(store: ReservationStore, switch: int) -> ConfigHash:
    return hashRules(store.rulesBySwitch.get(switch, {}))


EMPTY_CONFIG_HASH: ConfigHash = hashRules({})
