from __future__ import annotations
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

from .errors import DomainError

DATA_DIR = os.getenv("PPIMCE_DATA", os.path.abspath("./data"))

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
CALIBRATION_PATH = os.path.join(PACKAGE_DIR, "calibration.json")
RUNS_DB_PATH = os.getenv("PPIMCE_RUNS_DB", os.path.join(DATA_DIR, "runs.db"))


def _get_env_var(primary: str, fallback: str, default: str = None):
    """Get environment variable, checking the primary name first, then the fallback.

    Args:
        primary: Primary environment variable name (e.g., PPIMCE_PROFILE)
        fallback: Fallback environment variable name (e.g., PPIMCE_ARCH_PROFILE)
        default: Default value if neither is set

    Returns:
        Environment variable value or default
    """
    value = os.getenv(primary)
    if value is not None:
        return value
    value = os.getenv(fallback)
    if value is not None:
        return value
    return default


def ensure_data_dir() -> str:
    os.makedirs(DATA_DIR, exist_ok=True)
    return DATA_DIR


@dataclass
class ArchProfile:
    """Architecture description shared by the simulator, dispatcher and metrics."""
    name: str = "default"
    cores: int = int(os.getenv("PPIMCE_CORES", "8192"))
    gc_units: int = int(os.getenv("PPIMCE_GC_UNITS", "16"))
    cem_bytes: int = int(os.getenv("PPIMCE_CEM_BYTES", "4096"))  # per core, split over the tiles
    tiles: int = 4
    word_bits: int = int(os.getenv("PPIMCE_WORD_BITS", "32"))
    frequency_hz: float = float(os.getenv("PPIMCE_FREQUENCY_HZ", "1e9"))
    mem_bandwidth: float = float(os.getenv("PPIMCE_MEM_BANDWIDTH", "512e9"))  # bytes/s
    uim_bytes: int = 16 * 1024
    lut_cam_elements: int = 4
    lut_sram_elements: int = 8
    lut_entries: int = 256
    bank_bytes: int = 16 * 1024
    oacam_bytes: int = 16 * 1024
    technology_nm: int = 45

    def __post_init__(self):
        if self.cores <= 0 or self.gc_units <= 0:
            raise DomainError("core and unit counts must be positive")
        if self.cores % self.gc_units:
            raise DomainError(f"{self.cores} cores do not split into {self.gc_units} GC units")
        if self.cem_bytes % (self.tiles * 16):
            raise DomainError("CEM size must hold whole 128-bit rows in every tile")
        if self.word_bits not in (32, 64):
            raise DomainError(f"word_bits must be 32 or 64, got {self.word_bits}")
        if self.mem_bandwidth <= 0:
            raise DomainError("memory bandwidth must be positive")

    @property
    def cores_per_unit(self) -> int:
        return self.cores // self.gc_units

    @property
    def cem_words(self) -> int:
        """32-bit words per core."""
        return self.cem_bytes // 4

    @property
    def words_per_tile(self) -> int:
        return self.cem_words // self.tiles

    @property
    def bytes_per_cycle(self) -> float:
        return self.mem_bandwidth / self.frequency_hz

    @property
    def uim_words(self) -> int:
        return self.uim_bytes // 16

    def to_dict(self) -> dict:
        return asdict(self)


PROFILE_PRESETS: Dict[str, dict] = {
    "default": {},
    # larger CEM arrays used only for the GC micro-benchmarks
    "gc-bench": {"cem_bytes": 128 * 1024},
    "desk": {"cores": 4096, "gc_units": 16},
}


def load_profile(name_or_path: Optional[str] = None, **overrides) -> ArchProfile:
    """Resolve a preset name or a JSON profile file; ``PPIMCE_PROFILE`` is the default."""
    name_or_path = name_or_path or _get_env_var("PPIMCE_PROFILE", "PPIMCE_ARCH_PROFILE", "default")
    if name_or_path in PROFILE_PRESETS:
        values = dict(PROFILE_PRESETS[name_or_path], name=name_or_path)
    elif os.path.exists(name_or_path):
        with open(name_or_path, "r", encoding="utf-8") as fh:
            values = json.load(fh)
        values.setdefault("name", os.path.splitext(os.path.basename(name_or_path))[0])
    else:
        raise DomainError(f"unknown architecture profile {name_or_path!r}")
    known = {f.name for f in fields(ArchProfile)}
    unknown = set(values) - known
    if unknown:
        raise DomainError(f"unknown profile keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ArchProfile(**values)


@dataclass
class DispatchConfig:
    units: int = int(os.getenv("PPIMCE_UNITS", "16"))
    # free the unit and the OA-CAM entry in the completion cycle itself instead of the cycle after
    early_release: bool = os.getenv("PPIMCE_EARLY_RELEASE", "0") == "1"
    bank_entries: int = int(os.getenv("PPIMCE_BANK_ENTRIES", "4096"))  # 16 KB of 32-bit C-Insts
    oacam_entries: int = int(os.getenv("PPIMCE_OACAM_ENTRIES", "8192"))  # 16 KB of 13-bit tags, rounded
    hop_cycles: int = int(os.getenv("PPIMCE_HOP_CYCLES", "1"))  # inter-core word move
    freexor_cycles: int = 3
    halfgate_cycles: int = 45

    def __post_init__(self):
        if self.units <= 0:
            raise DomainError("dispatcher needs at least one unit")


@dataclass
class ProtocolConfig:
    share_bits: int = int(os.getenv("PPIMCE_SHARE_BITS", "20"))
    frac_bits: int = int(os.getenv("PPIMCE_FRAC_BITS", "8"))
    weight_bits: int = int(os.getenv("PPIMCE_WEIGHT_BITS", "7"))
    ot_bytes_per_wire: int = int(os.getenv("PPIMCE_OT_BYTES", "32"))
    label_bytes: int = 16
    he_preset: str = os.getenv("PPIMCE_HE_PRESET", "ppml")
    seed: int = int(os.getenv("PPIMCE_SEED", "0"))
    transcript_path: str = ""
    # bits/s; 2G, 3G, 4G, 5G, 6G
    bandwidths: List[float] = field(default_factory=lambda: [
        float(b) for b in os.getenv("PPIMCE_BANDWIDTHS", "1e5,2e6,1e8,2e10,1e12").split(",") if b.strip()])


BANDWIDTH_PRESETS = {"2G": 1e5, "3G": 2e6, "4G": 1e8, "5G": 2e10, "6G": 1e12}


@dataclass
class CalibrationConfig:
    """Per-component 45 nm constants; linear model fitted to published totals."""
    area_mm2: Dict[str, float] = field(default_factory=dict)
    power_w: Dict[str, float] = field(default_factory=dict)
    energy_pj: Dict[str, float] = field(default_factory=dict)
    provenance: str = ""
    technology_nm: int = 45

    @classmethod
    def load(cls, path: Optional[str] = None) -> "CalibrationConfig":
        path = path or _get_env_var("PPIMCE_CALIBRATION", "PPIMCE_CALIBRATION_FILE", CALIBRATION_PATH)
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            area_mm2={k: float(v) for k, v in raw["area_mm2"].items()},
            power_w={k: float(v) for k, v in raw["power_w"].items()},
            energy_pj={k: float(v) for k, v in raw.get("energy_pj", {}).items()},
            provenance=raw.get("provenance", ""),
            technology_nm=int(raw.get("technology_nm", 45)),
        )
