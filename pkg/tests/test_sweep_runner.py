import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # noqa: E402

from src.scenario_builder import flattenConfig  # noqa: E402
from src.sweep_runner import expandPoints, runSweep  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def small_settings(**overrides):
    base = {"duration_s": 0.05, "drain_s": 0.5, "lambda": 5.0, "k": 2}
    base.update(overrides)
    return flattenConfig({}, base)


def test_expand_points():
    """掃描值在外層、種子在內層"""
    points = expandPoints(small_settings(seed=10), "cluster_size", [4, 5], seeds=2)
    assert [(p["cluster_size"], p["seed"]) for p in points] == [(4, 10), (4, 11), (5, 10), (5, 11)]
    with pytest.raises(ValueError):
        expandPoints(small_settings(), "colour", [1])


def test_infeasible_point_is_skipped(tmp_path):
    """群組大於叢集的掃描點以警告列呈現，不中斷整個掃描"""
    output = tmp_path / "sweep.csv"
    df = runSweep(small_settings(), "group_size", [3, 5], output=output, baseDir=ROOT)
    assert list(df["group_size"]) == [3, 5]
    assert df.loc[0, "status"] == "ok"
    assert df.loc[1, "status"].startswith("skipped")
    assert output.exists()
    assert output.read_bytes().startswith(b"\xef\xbb\xbf")


def test_sweep_is_reproducible(tmp_path):
    """相同設定與種子輸出位元組相同的 CSV"""
    settings = small_settings()
    runSweep(settings, "protocol", ["MPBFT", "OBFT"], output=tmp_path / "a.csv", baseDir=ROOT)
    runSweep(settings, "protocol", ["MPBFT", "OBFT"], output=tmp_path / "b.csv", baseDir=ROOT)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
