"""Superchip and MIG hardware profiles."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from c2csim.errors import ConfigError

GB = 1e9
TB = 1e12

SUPPORTED_INSTANCE_COUNTS = (1, 2, 3, 4, 7)


@dataclass(frozen=True)
class MigProfile:
    instance_count: int
    hbm_per_instance: float
    hbm_bw_per_instance: float
    sm_per_instance: int

    def __post_init__(self):
        if self.instance_count not in SUPPORTED_INSTANCE_COUNTS:
            raise ConfigError(f"unsupported MIG instance count {self.instance_count}")
        if min(self.hbm_per_instance, self.hbm_bw_per_instance, self.sm_per_instance) <= 0:
            raise ConfigError("MIG capacities must be positive")


@dataclass(frozen=True)
class SuperchipProfile:
    """One CPU-GPU superchip.

    ``c2c_bandwidth`` is the per-direction link rate (CPU to GPU weight
    fetches are the only traffic charged to it); ``c2c_peak_bandwidth`` is
    the bidirectional figure vendors quote. The two efficiency factors scale
    nominal bandwidths to what kernels sustain and are fitted by
    :func:`c2csim.gemm.calibrate`.
    """

    name: str
    cpu_mem_capacity: float
    hbm_capacity: float
    hbm_bandwidth_total: float
    c2c_bandwidth: float
    sm_count_total: int
    flops_per_sm: float
    mig_profiles: tuple[MigProfile, ...]
    pcie_bandwidth: float = 64 * GB
    engine_init_latency_dense: float = 0.20
    engine_init_latency_moe: float = 0.50
    c2c_peak_bandwidth: float = 0.0
    c2c_efficiency: float = 1.0
    hbm_efficiency: float = 1.0

    def __post_init__(self):
        positive = (
            "cpu_mem_capacity", "hbm_capacity", "hbm_bandwidth_total", "c2c_bandwidth",
            "sm_count_total", "flops_per_sm", "pcie_bandwidth",
            "engine_init_latency_dense", "engine_init_latency_moe",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{self.name}: {name} must be positive")
        if not self.c2c_bandwidth < self.hbm_bandwidth_total:
            raise ConfigError(f"{self.name}: C2C bandwidth must be below total HBM bandwidth")
        for eff in (self.c2c_efficiency, self.hbm_efficiency):
            if not 0 < eff <= 1:
                raise ConfigError(f"{self.name}: efficiencies must lie in (0, 1]")
        if self.c2c_peak_bandwidth == 0.0:
            object.__setattr__(self, "c2c_peak_bandwidth", 2 * self.c2c_bandwidth)
        counts = [p.instance_count for p in self.mig_profiles]
        if len(set(counts)) != len(counts):
            raise ConfigError(f"{self.name}: duplicate MIG instance counts")
        for p in self.mig_profiles:
            if p.instance_count * p.hbm_bw_per_instance > self.hbm_bandwidth_total * (1 + 1e-12):
                raise ConfigError(f"{self.name}: MIG {p.instance_count} oversubscribes HBM bandwidth")
            if p.instance_count * p.sm_per_instance > self.sm_count_total:
                raise ConfigError(f"{self.name}: MIG {p.instance_count} oversubscribes SMs")
            if p.instance_count * p.hbm_per_instance > self.hbm_capacity * (1 + 1e-12):
                raise ConfigError(f"{self.name}: MIG {p.instance_count} oversubscribes HBM capacity")

    @property
    def link_bandwidth(self) -> float:
        """Sustained per-direction C2C bandwidth shared by all instances."""
        return self.c2c_bandwidth * self.c2c_efficiency


@dataclass(frozen=True)
class InstanceResources:
    """Sustained compute and HBM rates of one MIG instance."""

    sm_count: float
    flops_per_sm: float
    hbm_bandwidth: float

    @classmethod
    def of(cls, chip: SuperchipProfile, mig: MigProfile) -> InstanceResources:
        return cls(mig.sm_per_instance, chip.flops_per_sm, mig.hbm_bw_per_instance * chip.hbm_efficiency)


@dataclass
class MigInstance:
    id: int
    profile: MigProfile
    resident_model: str | None = None
    hbm_reserved: float = 0.0
    state: str = "idle"

    def __post_init__(self):
        self.check()

    def check(self):
        if self.state not in ("idle", "active", "switching"):
            raise ConfigError(f"instance {self.id}: bad state {self.state!r}")
        if self.hbm_reserved > self.profile.hbm_per_instance:
            raise ConfigError(f"instance {self.id}: HBM reservation exceeds slice capacity")


def _scaled_migs(sm_total: int, hbm: float, hbm_bw: float) -> tuple[MigProfile, ...]:
    # Same partition fractions as the GH200 table.
    rows = []
    for count, sm_frac, mem_frac in ((1, 1.0, 1.0), (2, 56 / 132, 0.5), (3, 28 / 132, 0.25),
                                     (4, 16 / 132, 0.25), (7, 16 / 132, 0.125)):
        sms = sm_total if count == 1 else int(sm_total * sm_frac)
        rows.append(MigProfile(count, hbm * mem_frac, hbm_bw * mem_frac, sms))
    return tuple(rows)


_GH200_MIGS = (
    MigProfile(1, 96 * GB, 4.0 * TB, 132),
    MigProfile(2, 48 * GB, 2.0 * TB, 56),
    MigProfile(3, 24 * GB, 1.0 * TB, 28),
    MigProfile(4, 24 * GB, 1.0 * TB, 16),
    MigProfile(7, 12 * GB, 0.5 * TB, 16),
)

_BUILTIN = {
    "gh200": SuperchipProfile(
        name="gh200", cpu_mem_capacity=480 * GB, hbm_capacity=96 * GB,
        hbm_bandwidth_total=4.0 * TB, c2c_bandwidth=450 * GB, c2c_peak_bandwidth=900 * GB,
        sm_count_total=132, flops_per_sm=989.4e12 / 132, mig_profiles=_GH200_MIGS,
    ),
    "gb200": SuperchipProfile(
        name="gb200", cpu_mem_capacity=480 * GB, hbm_capacity=192 * GB,
        hbm_bandwidth_total=8.0 * TB, c2c_bandwidth=450 * GB, c2c_peak_bandwidth=900 * GB,
        sm_count_total=148, flops_per_sm=2.5e15 / 148,
        mig_profiles=_scaled_migs(148, 192 * GB, 8.0 * TB),
    ),
    "rubin": SuperchipProfile(
        name="rubin", cpu_mem_capacity=1.5 * TB, hbm_capacity=288 * GB,
        hbm_bandwidth_total=22 * TB, c2c_bandwidth=900 * GB, c2c_peak_bandwidth=1.8 * TB,
        sm_count_total=224, flops_per_sm=4.0e15 / 224,
        mig_profiles=_scaled_migs(224, 288 * GB, 22 * TB),
    ),
}


def builtin_names() -> list[str]:
    return sorted(_BUILTIN)


def builtin_profile(name: str) -> SuperchipProfile:
    try:
        return _BUILTIN[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown chip {name!r}; choose from {', '.join(builtin_names())}") from None


def mig_profile(chip: SuperchipProfile, instance_count: int) -> MigProfile:
    for p in chip.mig_profiles:
        if p.instance_count == instance_count:
            return p
    raise ConfigError(f"{chip.name} has no MIG configuration with {instance_count} instances")


def with_efficiencies(chip: SuperchipProfile, c2c: float, hbm: float) -> SuperchipProfile:
    return replace(chip, c2c_efficiency=c2c, hbm_efficiency=hbm)


# Config file: one [section] per chip with scalar keys named after the
# profile fields, plus "mig.<count> = sm, hbm_bytes, hbm_bw" rows.

_SCALARS = [f.name for f in fields(SuperchipProfile) if f.name not in ("name", "mig_profiles")]


def load_profiles(path: str | Path) -> dict[str, SuperchipProfile]:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    chips = {}
    for section in parser.sections():
        body = parser[section]
        kwargs: dict = {"name": section}
        migs = []
        for key, raw in body.items():
            try:
                if key.startswith("mig."):
                    sm, hbm, bw = (float(x) for x in raw.split(","))
                    migs.append(MigProfile(int(key[4:]), hbm, bw, int(sm)))
                elif key in _SCALARS:
                    kwargs[key] = int(raw) if key == "sm_count_total" else float(raw)
                else:
                    raise ConfigError(f"{path}: [{section}] unknown key {key!r}")
            except ValueError as exc:
                raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
        if not migs:
            raise ConfigError(f"{path}: [{section}] defines no MIG rows")
        try:
            chips[section] = SuperchipProfile(mig_profiles=tuple(sorted(migs, key=lambda p: p.instance_count)), **kwargs)
        except TypeError as exc:
            raise ConfigError(f"{path}: [{section}] {exc}") from None
    return chips


def dump_profiles(chips: list[SuperchipProfile], path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for chip in chips:
        section = {key: repr(getattr(chip, key)) for key in _SCALARS}
        for p in chip.mig_profiles:
            section[f"mig.{p.instance_count}"] = f"{p.sm_per_instance}, {p.hbm_per_instance!r}, {p.hbm_bw_per_instance!r}"
        parser[chip.name] = section
    with open(path, "w") as fh:
        parser.write(fh)
