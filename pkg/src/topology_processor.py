"""拓撲處理模組

產生 fat-tree 資料中心拓撲、讀取地理座標拓撲檔，並配置用戶端與控制器位置。
邊的屬性：``capacity`` (頻寬單位) 與 ``delay_us`` (傳播延遲，微秒)。
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import networkx as nx

from .simnet import ClientSpec

logger = logging.getLogger(__name__)

DEFAULT_LINK_CAPACITY = 100
DEFAULT_LINK_DELAY_US = 100
SIGNAL_SPEED_M_PER_S = 2e8
EARTH_RADIUS_M = 6_371_000.0

ONE_PER_SWITCH = "ONE_PER_SWITCH"
TWO_PER_LEAF = "TWO_PER_LEAF"


class TopologyParseError(ValueError):
    """拓撲檔格式錯誤，訊息包含行號"""

    def __init__(self, path: str, lineNo: int, message: str):
        super().__init__(f"{path} 第 {lineNo} 行：{message}")
        self.lineNo = lineNo


def genFattree(
    k: int,
    capacity: int = DEFAULT_LINK_CAPACITY,
    delayUs: int = DEFAULT_LINK_DELAY_US,
) -> nx.Graph:
    """產生 k-ary fat-tree。

    節點編號依序為核心、各 pod 的匯聚層、各 pod 的邊緣層。k=4 時共 20 台交換器。

    Args:
        k: pod 數，需為不小於 2 的偶數。
        capacity: 每條連線的容量。
        delayUs: 每條連線的傳播延遲。

    Returns:
        nx.Graph: 節點帶有 ``layer`` 與 ``pod`` 屬性的拓撲。
    """
    if k < 2 or k % 2:
        raise ValueError(f"fat-tree 的 k 必須為不小於 2 的偶數，收到 {k}")
    half = k // 2
    G = nx.Graph(kind="fattree", k=k)
    cores = list(range(half * half))
    for c in cores:
        G.add_node(c, layer="core", pod=-1)
    nextId = len(cores)
    for pod in range(k):
        aggs = list(range(nextId, nextId + half))
        edges = list(range(nextId + half, nextId + 2 * half))
        nextId += 2 * half
        for a in aggs:
            G.add_node(a, layer="agg", pod=pod)
        for e in edges:
            G.add_node(e, layer="edge", pod=pod)
        for i, a in enumerate(aggs):
            for e in edges:
                G.add_edge(a, e, capacity=capacity, delay_us=delayUs)
            for c in cores[i * half:(i + 1) * half]:
                G.add_edge(a, c, capacity=capacity, delay_us=delayUs)
    return G


def leafSwitches(G: nx.Graph) -> list[int]:
    return sorted(n for n, d in G.nodes(data=True) if d.get("layer") == "edge")


def greatCircleM(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Haversine 距離 (公尺)"""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def propagationDelayUs(distanceM: float) -> int:
    return int(round(distanceM / SIGNAL_SPEED_M_PER_S * 1e6))


def loadGeoTopology(path: str | Path, defaultCapacity: int = DEFAULT_LINK_CAPACITY) -> nx.Graph:
    """讀取地理拓撲檔。

    檔案分為 ``nodes`` 與 ``links`` 兩段；``#`` 之後為註解。::

        nodes
        <id> <緯度> <經度> [名稱]
        links
        <a> <b> [容量]

    Args:
        path: 拓撲檔路徑。
        defaultCapacity: 連線未指定容量時使用的值。

    Returns:
        nx.Graph: 連線延遲為大圓距離除以訊號速度的拓撲。
    """
    name = str(path)
    G = nx.Graph(kind="geo", source=Path(path).name)
    section = None
    links: list[tuple[int, int, int, int]] = []
    for lineNo, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() in ("nodes", "links"):
            section = line.lower()
            continue
        fields = line.split()
        if section is None:
            raise TopologyParseError(name, lineNo, "資料出現在 nodes/links 段落之前")
        try:
            if section == "nodes":
                if len(fields) < 3:
                    raise ValueError("節點需要編號、緯度與經度")
                node = int(fields[0])
                lat, lon = float(fields[1]), float(fields[2])
                if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                    raise ValueError("座標超出範圍")
                if node in G:
                    raise ValueError(f"節點 {node} 重複")
                G.add_node(node, lat=lat, lon=lon, name=" ".join(fields[3:]) or str(node))
            else:
                if len(fields) not in (2, 3):
                    raise ValueError("連線格式為 <a> <b> [容量]")
                a, b = int(fields[0]), int(fields[1])
                cap = int(fields[2]) if len(fields) == 3 else defaultCapacity
                if cap <= 0:
                    raise ValueError("容量必須為正數")
                links.append((a, b, cap, lineNo))
        except ValueError as exc:
            raise TopologyParseError(name, lineNo, str(exc)) from exc

    for a, b, cap, lineNo in links:
        if a not in G or b not in G:
            raise TopologyParseError(name, lineNo, f"連線 {a}-{b} 指向未定義的節點")
        if a == b:
            raise TopologyParseError(name, lineNo, "連線兩端不可相同")
        distance = greatCircleM(G.nodes[a]["lat"], G.nodes[a]["lon"], G.nodes[b]["lat"], G.nodes[b]["lon"])
        G.add_edge(a, b, capacity=cap, delay_us=max(propagationDelayUs(distance), 1))

    if G.number_of_nodes() and not nx.is_connected(G):
        parts = nx.number_connected_components(G)
        raise ValueError(f"{name} 的拓撲不連通 (共 {parts} 個分量)")
    logger.info("讀取 %s：%d 台交換器、%d 條連線", name, G.number_of_nodes(), G.number_of_edges())
    return G


def placeClients(G: nx.Graph, style: str = ONE_PER_SWITCH) -> list[ClientSpec]:
    """依配置方式在交換器上放置用戶端，用戶端編號依交換器編號遞增"""
    if style == ONE_PER_SWITCH:
        switches = sorted(G.nodes)
        return [ClientSpec(i, s) for i, s in enumerate(switches)]
    if style == TWO_PER_LEAF:
        if G.graph.get("kind") != "fattree":
            raise ValueError("TWO_PER_LEAF 只適用於 fat-tree 拓撲")
        leaves = leafSwitches(G)
        return [ClientSpec(2 * i + j, s) for i, s in enumerate(leaves) for j in range(2)]
    raise ValueError(f"未知的用戶端配置方式：{style}")


def placeControllers(G: nx.Graph, count: int, coverageUs: float | None = None) -> list[int]:
    """決定控制器所在的交換器。

    fat-tree 依序放在邊緣交換器；其他拓撲以最大覆蓋貪婪法挑選，覆蓋半徑
    預設為所有節點對延遲的中位數。控制器數超過候選節點時循環重複使用。
    """
    if count < 1:
        raise ValueError("控制器數至少為 1")
    if G.number_of_nodes() == 0:
        raise ValueError("空拓撲無法放置控制器")
    if G.graph.get("kind") == "fattree":
        leaves = leafSwitches(G)
        return [leaves[i % len(leaves)] for i in range(count)]

    lengths = dict(nx.all_pairs_dijkstra_path_length(G, weight="delay_us"))
    nodes = sorted(G.nodes)
    if coverageUs is None:
        pairs = sorted(lengths[a][b] for a in nodes for b in nodes if a < b)
        coverageUs = pairs[len(pairs) // 2] if pairs else 0.0
    reach = {n: {m for m in nodes if lengths[n][m] <= coverageUs} for n in nodes}
    total = {n: sum(lengths[n].values()) for n in nodes}

    chosen: list[int] = []
    covered: set[int] = set()
    while len(chosen) < min(count, len(nodes)):
        if covered >= set(nodes):
            covered = set()
        best = min(
            (n for n in nodes if n not in chosen),
            key=lambda n: (-len(reach[n] - covered), total[n], n),
        )
        chosen.append(best)
        covered |= reach[best]
    return [chosen[i % len(chosen)] for i in range(count)]


def maxBaseRttUs(G: nx.Graph, sites: list[int], localDelayUs: int = 20) -> int:
    """控制器到任一交換器的最大來回傳播延遲"""
    longest = 0.0
    for site in set(sites):
        lengths = nx.single_source_dijkstra_path_length(G, site, weight="delay_us")
        longest = max(longest, max(lengths.values(), default=0.0))
    return int(2 * max(longest, localDelayUs))
