"""
Area/power scaling and report aggregation.

Per-component constants are calibrated, not measured: the shipped numbers are
fitted so that the full machine scaled to 5 nm lands on its published totals.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ArchProfile, CalibrationConfig
from .dispatcher import CostReport
from .errors import DomainError

logger = logging.getLogger(__name__)

REPORT_VERSION = 1

# (from_nm, to_nm) -> (power factor, area factor)
NODE_HOPS: Dict[Tuple[int, int], Tuple[float, float]] = {
    (45, 7): (0.079, 0.059),
    (7, 5): (0.70, 0.54),
}


@dataclass(frozen=True)
class TechScaling:
    hops: Tuple[Tuple[int, int, float, float], ...] = tuple((a, b, p, s) for (a, b), (p, s) in NODE_HOPS.items())

    @property
    def nodes(self) -> List[int]:
        return [self.hops[0][0]] + [h[1] for h in self.hops]

    def factors(self, from_nm: int, to_nm: int) -> Tuple[float, float]:
        """Composed (power, area) factors along the chain."""
        nodes = self.nodes
        if from_nm not in nodes or to_nm not in nodes:
            raise DomainError(f"unknown technology node; the chain is {' -> '.join(map(str, nodes))} nm")
        i, j = nodes.index(from_nm), nodes.index(to_nm)
        if j < i:
            raise DomainError(f"scaling runs from larger to smaller nodes, got {from_nm} -> {to_nm}")
        power = area = 1.0
        for _, _, p, a in self.hops[i:j]:
            power *= p
            area *= a
        return power, area


@dataclass
class ComponentBudget:
    area_mm2: Dict[str, float]
    power_w: Dict[str, float]
    counts: Dict[str, int]
    technology_nm: int = 45
    provenance: str = ""

    @classmethod
    def from_profile(cls, profile: Optional[ArchProfile] = None,
                     calibration: Optional[CalibrationConfig] = None) -> "ComponentBudget":
        """Per-core components times the core count; one scheduler (OA-CAM and bank)."""
        profile = profile or ArchProfile()
        cal = calibration or CalibrationConfig.load()
        counts = {name: profile.cores for name in ("cem", "lut_fabric", "shifter", "uim")}
        counts.update(oacam=1, bank=1)
        return cls(dict(cal.area_mm2), dict(cal.power_w), counts, cal.technology_nm, cal.provenance)

    def _total(self, table: Dict[str, float]) -> float:
        return sum(v * self.counts.get(k, 0) for k, v in table.items())

    @property
    def area_total(self) -> float:
        return self._total(self.area_mm2)

    @property
    def power_total(self) -> float:
        return self._total(self.power_w)

    def breakdown(self) -> List[Dict[str, object]]:
        return [{"component": k, "count": self.counts.get(k, 0), "area_mm2": self.area_mm2[k] * self.counts.get(k, 0),
                 "power_w": self.power_w.get(k, 0.0) * self.counts.get(k, 0)} for k in sorted(self.area_mm2)]


def scale(budget: ComponentBudget, from_nm: int, to_nm: int, chain: Optional[TechScaling] = None) -> ComponentBudget:
    if budget.technology_nm != from_nm:
        raise DomainError(f"budget is at {budget.technology_nm} nm, not {from_nm} nm")
    power, area = (chain or TechScaling()).factors(from_nm, to_nm)
    return ComponentBudget({k: v * area for k, v in budget.area_mm2.items()},
                           {k: v * power for k, v in budget.power_w.items()},
                           dict(budget.counts), to_nm, budget.provenance)


def cycles_to_seconds(cycles: int, frequency_hz: float = 1e9) -> float:
    return cycles / frequency_hz


def bandwidth_curve(compute_s: float, online_bytes: int, bandwidths: Sequence[float]) -> List[Dict[str, float]]:
    """Total latency per bandwidth; approaches the compute time as bandwidth grows."""
    rows = []
    for bw in sorted(bandwidths):
        comm = 8 * online_bytes / bw
        rows.append({"bandwidth_bps": bw, "compute_s": compute_s, "comm_s": comm, "total_s": compute_s + comm})
    return rows


@dataclass
class Report:
    name: str
    cost: CostReport
    budget: ComponentBudget
    ledger: Dict[str, int] = field(default_factory=dict)
    curve: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "version": REPORT_VERSION,
            "name": self.name,
            "latency_s": self.cost.latency_s,
            "cycles": self.cost.to_dict(),
            "he_share": self.cost.he_cycles / self.cost.cycles if self.cost.cycles else 0.0,
            "energy_pj": self.cost.energy_pj,
            "technology_nm": self.budget.technology_nm,
            "area_mm2": round(self.budget.area_total, 4),
            "power_w": round(self.budget.power_total, 4),
            "calibrated": True,
            "provenance": self.budget.provenance,
            "communication": dict(self.ledger),
            "bandwidth_curve": list(self.curve),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "cycles", "he_cycles", "gc_cycles", "latency_s", "energy_pj",
                         "technology_nm", "area_mm2", "power_w", "online_bytes", "preprocessing_bytes"])
        writer.writerow([self.name, self.cost.cycles, self.cost.he_cycles, self.cost.gc_cycles,
                         f"{self.cost.latency_s:.9g}", f"{self.cost.energy_pj:.6g}", self.budget.technology_nm,
                         f"{self.budget.area_total:.4f}", f"{self.budget.power_total:.4f}",
                         self.ledger.get("online-he_bytes", 0) + self.ledger.get("online-gc_bytes", 0),
                         self.ledger.get("preprocessing_bytes", 0)])
        if self.curve:
            writer.writerow([])
            writer.writerow(["bandwidth_bps", "compute_s", "comm_s", "total_s"])
            for row in self.curve:
                writer.writerow([f"{row[k]:.9g}" for k in ("bandwidth_bps", "compute_s", "comm_s", "total_s")])
        return buf.getvalue()


def report(cost: CostReport, ledger: Optional[Dict[str, int]] = None, budget: Optional[ComponentBudget] = None,
           bandwidths: Sequence[float] = (), name: str = "run", to_nm: int = 5) -> Report:
    """Assemble a report; the budget is scaled to ``to_nm`` when it sits at another node."""
    budget = budget or ComponentBudget.from_profile()
    if budget.technology_nm != to_nm:
        budget = scale(budget, budget.technology_nm, to_nm)
    ledger = dict(ledger or {})
    online = ledger.get("online-he_bytes", 0) + ledger.get("online-gc_bytes", 0)
    curve = bandwidth_curve(cost.latency_s, online, bandwidths) if bandwidths else []
    logger.debug("report %s: %d cycles, %.1f mm2, %.2f W", name, cost.cycles, budget.area_total, budget.power_total)
    return Report(name, cost, budget, ledger, curve)
