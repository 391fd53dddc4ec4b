"""Hardware description: core, DRAM, NoC, scheduler sections plus presets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigError

DEFAULT_OP_LATENCY = {
    "ADD": 1,
    "MUL": 1,
    "RELU": 1,
    "GELU": 4,
    "SOFTMAX": 2,
    "LAYERNORM": 2,
    "ACC_REDUCE": 1,
}


@dataclass
class CoreConfig:
    array_h: int = 8
    array_w: int = 8
    vector_lanes: int = 8
    alus_per_lane: int = 16
    spm_bytes: int = 64 * 1024
    acc_bytes: int = 16 * 1024
    spm_word_bytes: int = 16
    clock_hz: int = 1_000_000_000

    @property
    def spm_partition_bytes(self) -> int:
        return self.spm_bytes // 2

    @property
    def acc_partition_bytes(self) -> int:
        return self.acc_bytes // 2

    @property
    def vector_width(self) -> int:
        return self.vector_lanes * self.alus_per_lane

    def validate(self) -> None:
        for name in ("array_h", "array_w", "vector_lanes", "alus_per_lane",
                     "spm_bytes", "acc_bytes", "spm_word_bytes", "clock_hz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"core.{name} must be positive")
        if self.spm_bytes % 2 or self.acc_bytes % 2:
            raise ConfigError("core SRAM sizes must be even (two partitions)")


@dataclass
class DramConfig:
    channels: int = 2
    banks_per_channel: int = 8
    row_bytes: int = 8192
    access_bytes: int = 64
    tCL_ns: int = 22
    tRCD_ns: int = 22
    tRAS_ns: int = 56
    tWR_ns: int = 24
    tRP_ns: int = 22
    clock_hz: int = 1_000_000_000
    peak_bytes_per_sec: int = 6_000_000_000  # per channel
    queue_depth: int = 32

    def cycles(self, ns: int) -> int:
        return -(-ns * self.clock_hz // 1_000_000_000)

    @property
    def tCL(self) -> int:
        return self.cycles(self.tCL_ns)

    @property
    def tRCD(self) -> int:
        return self.cycles(self.tRCD_ns)

    @property
    def tRAS(self) -> int:
        return self.cycles(self.tRAS_ns)

    @property
    def tWR(self) -> int:
        return self.cycles(self.tWR_ns)

    @property
    def tRP(self) -> int:
        return self.cycles(self.tRP_ns)

    @property
    def burst_cycles(self) -> int:
        return -(-self.access_bytes * self.clock_hz // self.peak_bytes_per_sec)

    @property
    def peak_bytes_per_cycle(self) -> float:
        return self.peak_bytes_per_sec / self.clock_hz

    def validate(self) -> None:
        for name in ("channels", "banks_per_channel", "row_bytes", "access_bytes",
                     "tCL_ns", "tRCD_ns", "tRAS_ns", "tWR_ns", "tRP_ns",
                     "clock_hz", "peak_bytes_per_sec", "queue_depth"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"dram.{name} must be positive")
        if self.channels & (self.channels - 1):
            raise ConfigError("dram.channels must be a power of two (IPOLY hashing)")
        if self.row_bytes % self.access_bytes:
            raise ConfigError("dram.access_bytes must divide dram.row_bytes")
        if self.tRAS_ns < self.tRCD_ns:
            raise ConfigError("dram timing requires tRAS >= tRCD")


@dataclass
class NocConfig:
    model: str = "crossbar"  # simple | crossbar
    latency_cycles: int = 8
    bytes_per_cycle: int = 8
    flit_bytes: int = 8
    header_bytes: int = 8
    ports: tuple[int, int] | None = None  # (cores, memory channels)

    def validate(self) -> None:
        if self.model not in ("simple", "crossbar"):
            raise ConfigError(f"noc.model must be 'simple' or 'crossbar', got '{self.model}'")
        for name in ("latency_cycles", "bytes_per_cycle", "flit_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"noc.{name} must be positive")
        if self.header_bytes < 0:
            raise ConfigError("noc.header_bytes must be non-negative")


@dataclass
class SchedulerConfig:
    policy: str = "fifo"  # fifo | time_share | spatial
    partition: dict[str, list[int]] = field(default_factory=dict)

    def validate(self, num_cores: int) -> None:
        if self.policy not in ("fifo", "time_share", "spatial"):
            raise ConfigError(f"unknown scheduler policy '{self.policy}'")
        seen: set[int] = set()
        for req, cores in self.partition.items():
            if not cores:
                raise ConfigError(f"partition for request '{req}' is empty")
            for c in cores:
                if not 0 <= c < num_cores:
                    raise ConfigError(
                        f"partition for request '{req}' names core {c}, "
                        f"but num_cores={num_cores}"
                    )
                if c in seen:
                    raise ConfigError(
                        f"partition core sets overlap on core {c} (must be disjoint)"
                    )
                seen.add(c)


@dataclass
class SimConfig:
    core: CoreConfig = field(default_factory=CoreConfig)
    num_cores: int = 4
    dram: DramConfig = field(default_factory=DramConfig)
    noc: NocConfig = field(default_factory=NocConfig)
    op_latency: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_OP_LATENCY))
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    dram_base: int = 0x1000_0000
    request_region_bytes: int = 256 * 1024 * 1024
    timeline_window: int = 1024
    event_jump: bool = True

    def validate(self) -> None:
        if self.num_cores <= 0:
            raise ConfigError("num_cores must be positive")
        self.core.validate()
        self.dram.validate()
        self.noc.validate()
        self.scheduler.validate(self.num_cores)
        if self.noc.model == "crossbar":
            ports = self.noc.ports or (self.num_cores, self.dram.channels)
            if ports != (self.num_cores, self.dram.channels):
                raise ConfigError(
                    f"crossbar ports {ports[0]}x{ports[1]} inconsistent with "
                    f"num_cores={self.num_cores} and dram.channels={self.dram.channels}"
                )
            self.noc.ports = ports
        if self.timeline_window <= 0:
            raise ConfigError("timeline_window must be positive")

    def to_dict(self) -> dict:
        return {
            "core": {
                "array_h": self.core.array_h,
                "array_w": self.core.array_w,
                "vector_lanes": self.core.vector_lanes,
                "alus_per_lane": self.core.alus_per_lane,
                "spm_bytes": self.core.spm_bytes,
                "acc_bytes": self.core.acc_bytes,
                "spm_word_bytes": self.core.spm_word_bytes,
                "clock_hz": self.core.clock_hz,
            },
            "num_cores": self.num_cores,
            "dram": {
                "channels": self.dram.channels,
                "banks_per_channel": self.dram.banks_per_channel,
                "row_bytes": self.dram.row_bytes,
                "access_bytes": self.dram.access_bytes,
                "timing_ns": {
                    "tCL": self.dram.tCL_ns,
                    "tRCD": self.dram.tRCD_ns,
                    "tRAS": self.dram.tRAS_ns,
                    "tWR": self.dram.tWR_ns,
                    "tRP": self.dram.tRP_ns,
                },
                "clock_hz": self.dram.clock_hz,
                "peak_bytes_per_sec": self.dram.peak_bytes_per_sec,
                "queue_depth": self.dram.queue_depth,
            },
            "noc": {
                "model": self.noc.model,
                "latency_cycles": self.noc.latency_cycles,
                "bytes_per_cycle": self.noc.bytes_per_cycle,
                "flit_bytes": self.noc.flit_bytes,
                "header_bytes": self.noc.header_bytes,
                "ports": list(self.noc.ports) if self.noc.ports else None,
            },
            "op_latency": dict(sorted(self.op_latency.items())),
            "scheduler": {
                "policy": self.scheduler.policy,
                "partition": {k: list(v) for k, v in sorted(self.scheduler.partition.items())},
            },
            "dram_base": self.dram_base,
            "request_region_bytes": self.request_region_bytes,
            "timeline_window": self.timeline_window,
            "event_jump": self.event_jump,
        }


def config_from_dict(doc: dict) -> SimConfig:
    """Build and cross-validate a SimConfig from a parsed JSON document."""
    cfg = SimConfig()
    _apply_section(cfg.core, doc.get("core", {}), "core")
    if "num_cores" in doc:
        cfg.num_cores = _as_int(doc["num_cores"], "num_cores")

    dram_doc = dict(doc.get("dram", {}))
    timing = dram_doc.pop("timing_ns", {})
    for key, value in timing.items():
        attr = f"{key}_ns"
        if not hasattr(cfg.dram, attr):
            raise ConfigError(f"unknown dram timing field '{key}'")
        setattr(cfg.dram, attr, _as_int(value, f"dram.timing_ns.{key}"))
    _apply_section(cfg.dram, dram_doc, "dram")

    noc_doc = dict(doc.get("noc", {}))
    if "ports" in noc_doc:
        ports = noc_doc.pop("ports")
        if ports is not None:
            cfg.noc.ports = (int(ports[0]), int(ports[1]))
    _apply_section(cfg.noc, noc_doc, "noc")

    for key, value in doc.get("op_latency", {}).items():
        cfg.op_latency[str(key)] = _as_int(value, f"op_latency.{key}")

    sched_doc = doc.get("scheduler", {})
    if "policy" in sched_doc:
        cfg.scheduler.policy = str(sched_doc["policy"])
    for req, cores in sched_doc.get("partition", {}).items():
        cfg.scheduler.partition[str(req)] = [int(c) for c in cores]

    for key in ("dram_base", "request_region_bytes", "timeline_window"):
        if key in doc:
            setattr(cfg, key, _as_int(doc[key], key))
    if "event_jump" in doc:
        cfg.event_jump = bool(doc["event_jump"])

    cfg.validate()
    return cfg


def _apply_section(target, doc: dict, section: str) -> None:
    for key, value in doc.items():
        if not hasattr(target, key):
            raise ConfigError(f"unknown config field '{section}.{key}'")
        setattr(target, key, _as_int(value, f"{section}.{key}") if isinstance(
            getattr(target, key), int) else value)


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config field '{where}' must be a number")
    if isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"config field '{where}' must be an integer")
    return int(value)


def load_config(path: str, overrides: list[str] | None = None) -> SimConfig:
    """Load a config file, apply key=value overrides, cross-validate."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e.msg}") from None
    for ov in overrides or []:
        doc = _apply_override(doc, ov)
    return config_from_dict(doc)


def _apply_override(doc: dict, spec: str) -> dict:
    if "=" not in spec:
        raise ConfigError(f"override '{spec}' must look like key.path=value")
    path, _, raw = spec.partition("=")
    keys = path.strip().split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed
    cursor = doc
    for k in keys[:-1]:
        cursor = cursor.setdefault(k, {})
        if not isinstance(cursor, dict):
            raise ConfigError(f"override path '{path}' crosses a non-object")
    cursor[keys[-1]] = value
    return doc


def load_preset(name: str) -> SimConfig:
    """Load a shipped preset ('mobile' or 'server')."""
    ref = resources.files("npusim.presets").joinpath(f"{name}.json")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no preset named '{name}'") from None
    return config_from_dict(json.loads(text))


def preset_path(name: str) -> str:
    ref = resources.files("npusim.presets").joinpath(f"{name}.json")
    return str(ref)
