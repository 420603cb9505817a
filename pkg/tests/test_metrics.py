import json

import pytest

from src.ppimce.config import ArchProfile, CalibrationConfig
from src.ppimce.dispatcher import CostReport
from src.ppimce.errors import DomainError
from src.ppimce.metrics import (
    ComponentBudget, TechScaling, bandwidth_curve, cycles_to_seconds, report, scale,
)


class TestTechScaling:
    def test_composed_factors(self):
        power, area = TechScaling().factors(45, 5)
        assert power == pytest.approx(0.0553, abs=5e-5)
        assert area == pytest.approx(0.03186, abs=5e-5)

    def test_identity(self):
        assert TechScaling().factors(45, 45) == (1.0, 1.0)

    def test_single_hop(self):
        assert TechScaling().factors(7, 5) == pytest.approx((0.70, 0.54))

    def test_bad_nodes(self):
        with pytest.raises(DomainError):
            TechScaling().factors(45, 3)
        with pytest.raises(DomainError):
            TechScaling().factors(5, 45)


class TestBudget:
    def test_calibrated_totals(self):
        budget = scale(ComponentBudget.from_profile(ArchProfile()), 45, 5)
        assert budget.technology_nm == 5
        assert budget.area_total == pytest.approx(138.3, abs=0.01)
        assert budget.power_total == pytest.approx(9.4, abs=0.01)
        assert "calibrated" in budget.provenance

    def test_counts(self):
        budget = ComponentBudget.from_profile(ArchProfile(cores=1024))
        assert budget.counts["cem"] == 1024
        assert budget.counts["oacam"] == 1
        rows = {row["component"]: row for row in budget.breakdown()}
        assert rows["uim"]["area_mm2"] == pytest.approx(0.08 * 1024)

    def test_wrong_source_node(self):
        with pytest.raises(DomainError):
            scale(ComponentBudget.from_profile(), 7, 5)

    def test_custom_calibration(self, tmp_path):
        path = tmp_path / "cal.json"
        path.write_text(json.dumps({"area_mm2": {"cem": 1.0}, "power_w": {"cem": 0.5}}))
        cal = CalibrationConfig.load(str(path))
        budget = ComponentBudget.from_profile(ArchProfile(cores=16, gc_units=16), cal)
        assert budget.area_total == 16.0
        assert budget.power_total == 8.0


class TestReport:
    def test_cycles_to_seconds(self):
        assert cycles_to_seconds(1000) == pytest.approx(1e-6)
        assert CostReport(cycles=1000).latency_s == pytest.approx(1e-6)

    def test_bandwidth_curve_monotone(self):
        rows = bandwidth_curve(0.01, 10_000_000, [1e12, 1e5, 2e6, 1e8, 2e10])
        totals = [r["total_s"] for r in rows]
        assert [r["bandwidth_bps"] for r in rows] == [1e5, 2e6, 1e8, 2e10, 1e12]
        assert totals == sorted(totals, reverse=True)
        assert totals[-1] == pytest.approx(0.01, rel=1e-2)
        assert rows[0]["comm_s"] == pytest.approx(800.0)

    def test_report_contents(self):
        cost = CostReport(cycles=2000, gc_cycles=500, he_cycles=1500, energy_pj=12.5)
        ledger = {"online-he_bytes": 100, "online-gc_bytes": 50, "preprocessing_bytes": 1000, "total_bytes": 1150}
        rep = report(cost, ledger, bandwidths=[1e6], name="unit")
        d = rep.to_dict()
        assert d["technology_nm"] == 5
        assert d["he_share"] == pytest.approx(0.75)
        assert d["area_mm2"] == pytest.approx(138.3, abs=0.01)
        assert d["bandwidth_curve"][0]["comm_s"] == pytest.approx(8 * 150 / 1e6)
        lines = rep.to_csv().splitlines()
        assert lines[0].startswith("name,cycles")
        assert lines[1].split(",")[-2:] == ["150", "1000"]

    def test_json_deterministic(self):
        cost = CostReport(cycles=10, gc_cycles=10)
        a = report(cost, {"total_bytes": 3}, name="x").to_json()
        b = report(cost, {"total_bytes": 3}, name="x").to_json()
        assert a == b
        assert json.loads(a)["version"] == 1
