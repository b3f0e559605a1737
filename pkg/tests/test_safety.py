"""隨機負載下的安全性與活性檢查

正確複本之間不得出現不一致的提交或錯誤的交換器設定，每個邏輯請求最終
都要有結果。用戶端啟用逾時，讓無法湊齊相符回覆的嘗試也能結束。
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.event_log import verifyLog  # noqa: E402
from src.fault_injector import Behavior  # noqa: E402
from src.scenario_builder import buildScenario, flattenConfig  # noqa: E402
from src.simnet import run  # noqa: E402

CHECKS = {"AGREEMENT", "ORDER", "HASH_CHAIN", "ATTESTATION", "OVERCOMMIT", "REPLAY", "LIVENESS"}

PROTOCOLS = ["MPBFT", "SBFT", "OBFT"]

# (|C|, fm)；|C| < 3fm+1 的組合沒有意義
SIZES = [(4, 1), (7, 1), (7, 2), (10, 1), (10, 2)]


def violations(**overrides):
    base = {
        "duration_s": 0.1,
        "drain_s": 2.0,
        "lambda": 10.0,
        "cmp_cost_us": 50,
        "exec_cost_us": 200,
        "client_timeout_rtt": 60,
        "resend_limit": 1,
    }
    base.update(overrides)
    log = run(buildScenario(flattenConfig({}, base)))
    report = verifyLog(log)
    return [v for v in report.violations if v.check in CHECKS], log


@pytest.mark.parametrize("protocol", PROTOCOLS)
@pytest.mark.parametrize("cluster_size, f_m", SIZES)
@pytest.mark.parametrize("loss", [0.0, 0.1])
@pytest.mark.parametrize("seed", [0, 1])
def test_random_workload_is_safe_and_live(protocol, cluster_size, f_m, loss, seed):
    found, log = violations(protocol=protocol, cluster_size=cluster_size, f_m=f_m, loss=loss, seed=seed)
    assert found == []
    issued = {r["request"] for r in log.ofKind("CLIENT_ISSUE")}
    assert issued
    assert issued == {r["request"] for r in log.ofKind("CLIENT_DONE")}


@pytest.mark.parametrize("protocol", PROTOCOLS)
@pytest.mark.parametrize("behavior", [b.value for b in Behavior])
@pytest.mark.parametrize("cluster_size, f_m", [(4, 1), (7, 2)])
@pytest.mark.parametrize("loss", [0.0, 0.1])
def test_faulty_replica_cannot_break_safety_or_liveness(protocol, behavior, cluster_size, f_m, loss):
    faults = [{"target": 0, "behavior": behavior}]
    found, log = violations(
        protocol=protocol, faults=faults, cluster_size=cluster_size, f_m=f_m, loss=loss
    )
    assert found == []
    assert log.header["faulty"] == [0]


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_late_crash_keeps_committed_state(protocol):
    """執行中途當機的複本不影響已提交請求與後續請求"""
    found, log = violations(protocol=protocol, faults=[{"target": 1, "behavior": "CRASH", "at_us": 50_000}])
    assert found == []
    assert log.ofKind("CLIENT_DONE")


def test_safe_rejection_with_equivocation():
    found, _ = violations(
        protocol="SBFT", safe_rejection=True, faults=[{"target": 0, "behavior": "EQUIVOCATE_SEQ"}]
    )
    assert found == []


def test_lossy_duplicating_network():
    found, log = violations(protocol="SBFT", loss=0.05, duplicate=0.05)
    assert found == []
    assert log.ofKind("DROP")
    assert log.ofKind("DUPLICATE")
