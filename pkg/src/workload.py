"""請求負載產生模組

每個用戶端的請求間隔為獨立的指數分布 (平均 1/λ 秒)；目的交換器在其他
交換器中均勻挑選，頻寬需求為 [demandMin, demandMax] 的均勻整數。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .models import ClientRequest, RequestId
from .simnet import ClientSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Workload:
    rate: float
    durationS: float
    demandMin: int = 1
    demandMax: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError("到達率不可為負數")
        if self.durationS < 0:
            raise ValueError("持續時間不可為負數")
        if not 1 <= self.demandMin <= self.demandMax:
            raise ValueError("頻寬需求範圍需滿足 1 <= 最小值 <= 最大值")


def generateWorkload(
    topology: nx.Graph, clients: list[ClientSpec], workload: Workload
) -> list[tuple[int, ClientRequest]]:
    """產生依到達時間排序的 (微秒, 請求) 串列

    用戶端依編號順序取樣，保證相同種子得到相同的請求序列。
    """
    rng = np.random.default_rng(workload.seed)
    switches = sorted(topology.nodes)
    horizonUs = workload.durationS * 1e6
    arrivals: list[tuple[int, ClientRequest]] = []
    if workload.rate == 0 or len(switches) < 2:
        return arrivals
    for client in sorted(clients, key=lambda c: c.clientId):
        others = [s for s in switches if s != client.switch]
        t = 0.0
        counter = 0
        while True:
            t += rng.exponential(1e6 / workload.rate)
            if t > horizonUs:
                break
            dst = others[int(rng.integers(len(others)))]
            demand = int(rng.integers(workload.demandMin, workload.demandMax + 1))
            request = ClientRequest(RequestId(client.clientId, counter), client.switch, dst, demand)
            arrivals.append((int(t), request))
            counter += 1
    arrivals.sort(key=lambda item: (item[0], item[1].id))
    logger.info("產生 %d 個請求 (λ=%.2f/s, %d 個用戶端)", len(arrivals), workload.rate, len(clients))
    return arrivals
