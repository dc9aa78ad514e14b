"""Traffic and latency model for the symmetric, asymmetric and hybrid GEMM dataflows.

The symmetric dataflow is output-stationary: each SM owns an output tile and
streams the matching weight column-block once per M-tile row, so CPU-resident
weights cross the C2C link ``ceil(m / t_m)`` times. The asymmetric dataflow
pins a weight tile per SM and streams it once, paying instead with partial
output reductions in HBM. The hybrid kernel splits the N dimension between
the two.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

from c2csim.errors import ConfigError, ModelError
from c2csim.hw import InstanceResources, SUPPORTED_INSTANCE_COUNTS, SuperchipProfile, mig_profile, with_efficiencies

ORACLE_BUDGET = 1_000_000


@dataclass(frozen=True)
class GemmWorkload:
    """``O[m, n] = X[m, k] @ W[k, n]``."""

    m: int
    k: int
    n: int
    elem_bytes: int = 2
    weight_location: str = "cpu"

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ModelError(f"GEMM dimensions must be >= 1, got {self.m}x{self.k}x{self.n}")
        if self.elem_bytes not in (1, 2, 4):
            raise ModelError(f"unsupported element size {self.elem_bytes}")
        if self.weight_location not in ("cpu", "hbm"):
            raise ModelError(f"weight_location must be 'cpu' or 'hbm', got {self.weight_location!r}")


@dataclass(frozen=True)
class KernelConfig:
    alpha: float = 0.0
    t_m: int = 256
    t_n: int = 128
    t_k: int = 512
    sm_split: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ModelError(f"alpha must lie in [0, 1], got {self.alpha}")
        if min(self.t_m, self.t_n, self.t_k) < 1:
            raise ModelError("tile sizes must be >= 1")
        if self.sm_split is not None and not 0.0 <= self.sm_split <= 1.0:
            raise ModelError(f"sm_split must lie in [0, 1], got {self.sm_split}")

    @property
    def sym_sm_fraction(self) -> float:
        return self.alpha if self.sm_split is None else self.sm_split


@dataclass(frozen=True)
class GammaCoefficients:
    """Effective HBM re-read counts for activations (symmetric path) and
    partial outputs (asymmetric path).

    ``reduction_overhead`` is a fixed byte cost per TMA reduction step; it is
    zero in the structural model and absorbs per-transaction inefficiency in
    calibrated sets.
    """

    gamma_x: float = 1.0
    gamma_o: float = 1.0
    reduction_overhead: float = 0.0

    def __post_init__(self):
        if self.gamma_x < 1 or self.gamma_o < 1:
            raise ModelError("gamma coefficients must be >= 1")
        if self.reduction_overhead < 0:
            raise ModelError("reduction overhead must be >= 0")

    @classmethod
    def structural(cls, w: GemmWorkload, cfg: KernelConfig) -> GammaCoefficients:
        """Exact tile-loop counts: every N-tile re-reads its activations; each
        K-tile after the first does a read-modify-write of the output."""
        return cls(math.ceil(w.n / cfg.t_n), 2 * math.ceil(w.k / cfg.t_k) - 1)


@dataclass(frozen=True)
class TrafficEstimate:
    c2c_bytes: float = 0.0
    hbm_bytes: float = 0.0
    flops: int = 0

    def __add__(self, other: TrafficEstimate) -> TrafficEstimate:
        return TrafficEstimate(self.c2c_bytes + other.c2c_bytes, self.hbm_bytes + other.hbm_bytes,
                               self.flops + other.flops)


def _sym(m, k, n, e, cpu, cfg, gamma) -> TrafficEstimate:
    if n == 0:
        return TrafficEstimate()
    weights = math.ceil(m / cfg.t_m) * k * n * e
    hbm = gamma.gamma_x * m * k * e + m * n * e
    if cpu:
        return TrafficEstimate(weights, hbm, 2 * m * k * n)
    return TrafficEstimate(0, hbm + weights, 2 * m * k * n)


def _asym(m, k, n, e, cpu, cfg, gamma) -> TrafficEstimate:
    if n == 0:
        return TrafficEstimate()
    reductions = math.ceil(m / cfg.t_m) * math.ceil(n / cfg.t_n) * math.ceil(k / cfg.t_k)
    hbm = m * k * e + gamma.gamma_o * m * n * e + gamma.reduction_overhead * reductions
    weights = k * n * e
    if cpu:
        return TrafficEstimate(weights, hbm, 2 * m * k * n)
    return TrafficEstimate(0, hbm + weights, 2 * m * k * n)


def traffic_sym(w: GemmWorkload, cfg: KernelConfig, gamma: GammaCoefficients) -> TrafficEstimate:
    return _sym(w.m, w.k, w.n, w.elem_bytes, w.weight_location == "cpu", cfg, gamma)


def traffic_asym(w: GemmWorkload, cfg: KernelConfig, gamma: GammaCoefficients) -> TrafficEstimate:
    return _asym(w.m, w.k, w.n, w.elem_bytes, w.weight_location == "cpu", cfg, gamma)


def split_columns(n: int, alpha: float) -> tuple[int, int]:
    n_sym = math.floor(alpha * n)
    return n_sym, n - n_sym


def _paths(w: GemmWorkload, cfg: KernelConfig, gamma: GammaCoefficients):
    n_sym, n_asym = split_columns(w.n, cfg.alpha)
    cpu = w.weight_location == "cpu"
    return (_sym(w.m, w.k, n_sym, w.elem_bytes, cpu, cfg, gamma),
            _asym(w.m, w.k, n_asym, w.elem_bytes, cpu, cfg, gamma))


def traffic_hybrid(w: GemmWorkload, cfg: KernelConfig, gamma: GammaCoefficients) -> TrafficEstimate:
    sym, asym = _paths(w, cfg, gamma)
    return sym + asym


def latency_terms(w: GemmWorkload, cfg: KernelConfig, res: InstanceResources, c2c_share: float,
                  gamma: GammaCoefficients) -> dict[str, float]:
    """Roofline terms of the slowest path, keyed compute / hbm / c2c.

    Each path runs on its own SM group. HBM bandwidth and the C2C share are
    divided between the paths in proportion to their byte demand.
    """
    paths = _paths(w, cfg, gamma)
    frac = cfg.sym_sm_fraction
    sms = (res.sm_count * frac, res.sm_count * (1.0 - frac))
    hbm_total = sum(p.hbm_bytes for p in paths)
    c2c_total = sum(p.c2c_bytes for p in paths)
    if c2c_total > 0 and not c2c_share > 0:
        raise ModelError("C2C share must be positive when weights stream over C2C")
    terms = {"compute": 0.0, "hbm": 0.0, "c2c": 0.0}
    for p, sm in zip(paths, sms):
        if p.flops == 0:
            continue
        if sm <= 0:
            raise ModelError("a non-empty GEMM path was given zero SMs")
        terms["compute"] = max(terms["compute"], p.flops / (sm * res.flops_per_sm))
        if p.hbm_bytes:
            share = res.hbm_bandwidth * p.hbm_bytes / hbm_total
            terms["hbm"] = max(terms["hbm"], p.hbm_bytes / share)
        if p.c2c_bytes:
            share = c2c_share * p.c2c_bytes / c2c_total
            terms["c2c"] = max(terms["c2c"], p.c2c_bytes / share)
    return terms


def latency(w: GemmWorkload, cfg: KernelConfig, res: InstanceResources, c2c_share: float,
            gamma: GammaCoefficients) -> float:
    return max(latency_terms(w, cfg, res, c2c_share, gamma).values())


def bottleneck(w: GemmWorkload, cfg: KernelConfig, res: InstanceResources, c2c_share: float,
               gamma: GammaCoefficients) -> str:
    terms = latency_terms(w, cfg, res, c2c_share, gamma)
    return max(terms, key=terms.get)


@dataclass(frozen=True)
class OracleCounts:
    x_bytes: int
    w_bytes: int
    o_read_bytes: int
    o_write_bytes: int
    flops: int
    reductions: int
    tile_visits: int

    def traffic(self, weight_location: str) -> TrafficEstimate:
        hbm = self.x_bytes + self.o_read_bytes + self.o_write_bytes
        if weight_location == "cpu":
            return TrafficEstimate(self.w_bytes, hbm, self.flops)
        return TrafficEstimate(0, hbm + self.w_bytes, self.flops)


def _tiles(size: int, tile: int) -> list[int]:
    full, rest = divmod(size, tile)
    return [tile] * full + ([rest] if rest else [])


def oracle_counts(w: GemmWorkload, cfg: KernelConfig, dataflow: str,
                  budget: int = ORACLE_BUDGET) -> OracleCounts:
    """Walk the tile loop and count every byte moved, with no reuse beyond
    the tile held in shared memory."""
    tm, tn, tk = _tiles(w.m, cfg.t_m), _tiles(w.n, cfg.t_n), _tiles(w.k, cfg.t_k)
    visits = len(tm) * len(tn) * len(tk)
    if visits > budget:
        raise ModelError(f"oracle needs {visits} tile visits, budget is {budget}")
    e = w.elem_bytes
    x = wt = o_rd = o_wr = flops = reductions = 0
    if dataflow == "sym":
        for rows in tm:
            for cols in tn:
                for depth in tk:
                    x += rows * depth * e
                    wt += depth * cols * e
                    flops += 2 * rows * cols * depth
                o_wr += rows * cols * e
    elif dataflow == "asym":
        for cols in tn:
            for kk, depth in enumerate(tk):
                wt += depth * cols * e
                for rows in tm:
                    x += rows * depth * e
                    flops += 2 * rows * cols * depth
                    if kk:
                        o_rd += rows * cols * e
                    o_wr += rows * cols * e
                    reductions += 1
    else:
        raise ModelError(f"unknown dataflow {dataflow!r}")
    return OracleCounts(x, wt, o_rd, o_wr, flops, reductions, visits)


def tiling_oracle(w: GemmWorkload, cfg: KernelConfig, dataflow: str,
                  budget: int = ORACLE_BUDGET) -> TrafficEstimate:
    return oracle_counts(w, cfg, dataflow, budget).traffic(w.weight_location)


# Calibration against measured full-GPU anchors on one reference shape.

ANCHOR_SHAPE = GemmWorkload(10240, 4096, 16384, 2, "cpu")


@dataclass(frozen=True)
class Anchors:
    sym_c2c: float = 5.37e9
    asym_c2c: float = 0.13e9
    sym_hbm: float = 1.23e9
    asym_hbm: float = 5.18e9
    sym_latency: float = 16.4e-3
    asym_latency: float = 4.0e-3
    reduction_overhead: float = 4096.0


@dataclass(frozen=True)
class Calibration:
    chip: SuperchipProfile
    gamma: GammaCoefficients
    residuals: dict


def calibrate(chip: SuperchipProfile, anchors: Anchors = Anchors(), cfg: KernelConfig = KernelConfig()) -> Calibration:
    """Fit the gammas to the anchor HBM byte counts and the sustained link
    and HBM efficiencies to the anchor latencies.

    The symmetric anchor is taken as C2C-bound and the asymmetric one as
    HBM-bound; both assumptions are checked against the chip's compute rate.
    """
    w = ANCHOR_SHAPE
    mk, mn = w.m * w.k * w.elem_bytes, w.m * w.n * w.elem_bytes
    reductions = math.ceil(w.m / cfg.t_m) * math.ceil(w.n / cfg.t_n) * math.ceil(w.k / cfg.t_k)
    gamma = GammaCoefficients(
        gamma_x=(anchors.sym_hbm - mn) / mk,
        gamma_o=(anchors.asym_hbm - mk - anchors.reduction_overhead * reductions) / mn,
        reduction_overhead=anchors.reduction_overhead,
    )
    sym_cfg, asym_cfg = replace(cfg, alpha=1.0), replace(cfg, alpha=0.0)
    sym, asym = traffic_hybrid(w, sym_cfg, gamma), traffic_hybrid(w, asym_cfg, gamma)
    full = mig_profile(chip, 1)
    c2c_eff = sym.c2c_bytes / (chip.c2c_bandwidth * anchors.sym_latency)
    hbm_eff = asym.hbm_bytes / (full.hbm_bw_per_instance * anchors.asym_latency)
    if not (0 < c2c_eff <= 1 and 0 < hbm_eff <= 1):
        raise ModelError("anchor latencies imply bandwidth above the nominal peak")
    fitted = with_efficiencies(chip, c2c_eff, hbm_eff)
    res = InstanceResources.of(fitted, full)
    link = fitted.link_bandwidth
    t_sym = latency_terms(w, sym_cfg, res, link, gamma)
    t_asym = latency_terms(w, asym_cfg, res, link, gamma)
    if bottleneck(w, sym_cfg, res, link, gamma) != "c2c" or bottleneck(w, asym_cfg, res, link, gamma) != "hbm":
        raise ModelError("compute rate too low: anchors are not bandwidth-bound under this profile")
    residuals = {
        "sym_c2c": sym.c2c_bytes / anchors.sym_c2c - 1,
        "asym_c2c": asym.c2c_bytes / anchors.asym_c2c - 1,
        "sym_hbm": sym.hbm_bytes / anchors.sym_hbm - 1,
        "asym_hbm": asym.hbm_bytes / anchors.asym_hbm - 1,
        "sym_latency": max(t_sym.values()) / anchors.sym_latency - 1,
        "asym_latency": max(t_asym.values()) / anchors.asym_latency - 1,
    }
    return Calibration(fitted, gamma, residuals)


_CALIBRATED: dict[str, Calibration] = {}


def calibrated(name: str = "gh200") -> Calibration:
    """Built-in chip with efficiencies fitted on the GH200 anchors.

    Other chips inherit the GH200 efficiencies since no anchors exist for them.
    """
    from c2csim.hw import builtin_profile

    if name not in _CALIBRATED:
        base = calibrate(builtin_profile("gh200"))
        chip = builtin_profile(name)
        if chip.name != "gh200":
            chip = with_efficiencies(chip, base.chip.c2c_efficiency, base.chip.hbm_efficiency)
            base = Calibration(chip, base.gamma, base.residuals)
        _CALIBRATED[name] = base
    return _CALIBRATED[name]


# Kernel repository: precompiled variants keyed by precision, operator shape
# class and MIG instance count.

PRECISIONS = {1: "fp8", 2: "bf16", 4: "fp32"}
SHAPE_CLASSES = ("attn", "mlp", "expert", "lm_head")
_REPO_FIELDS = ["precision", "shape_class", "mig_instances", "t_m", "t_n", "t_k",
                "gamma_x", "gamma_o", "reduction_overhead"]


@dataclass(frozen=True)
class KernelVariant:
    precision: str
    shape_class: str
    mig_instances: int
    t_m: int
    t_n: int
    t_k: int
    gamma: GammaCoefficients

    def config(self, alpha: float = 0.0) -> KernelConfig:
        return KernelConfig(alpha=alpha, t_m=self.t_m, t_n=self.t_n, t_k=self.t_k)


class KernelRepository:
    def __init__(self, variants=()):
        self._variants: dict[tuple[str, str, int], KernelVariant] = {}
        for v in variants:
            self.add(v)

    def add(self, variant: KernelVariant) -> None:
        self._variants[(variant.precision, variant.shape_class, variant.mig_instances)] = variant

    def __len__(self):
        return len(self._variants)

    def __iter__(self):
        return iter(self._variants[key] for key in sorted(self._variants))

    def lookup(self, precision: str, shape_class: str, mig_instances: int) -> KernelVariant:
        try:
            return self._variants[(precision, shape_class, mig_instances)]
        except KeyError:
            raise ConfigError(
                f"no kernel variant for precision={precision} class={shape_class} mig={mig_instances}"
            ) from None

    @classmethod
    def default(cls, gamma: GammaCoefficients, cfg: KernelConfig = KernelConfig()) -> KernelRepository:
        return cls(
            KernelVariant(p, s, count, cfg.t_m, cfg.t_n, cfg.t_k, gamma)
            for p in ("bf16", "fp8") for s in SHAPE_CLASSES for count in SUPPORTED_INSTANCE_COUNTS
        )

    def dump(self, path: str | Path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            out = csv.writer(fh, delimiter="\t", lineterminator="\n")
            out.writerow(_REPO_FIELDS)
            for v in self:
                out.writerow([v.precision, v.shape_class, v.mig_instances, v.t_m, v.t_n, v.t_k,
                              repr(v.gamma.gamma_x), repr(v.gamma.gamma_o), repr(v.gamma.reduction_overhead)])

    @classmethod
    def load(cls, path: str | Path) -> KernelRepository:
        with open(path, newline="") as fh:
            rows = [line for line in fh if not line.startswith("#")]
        reader = csv.DictReader(rows, delimiter="\t")
        if reader.fieldnames != _REPO_FIELDS:
            raise ConfigError(f"{path}: unexpected kernel repository columns {reader.fieldnames}")
        repo = cls()
        for row in reader:
            try:
                gamma = GammaCoefficients(float(row["gamma_x"]), float(row["gamma_o"]),
                                          float(row["reduction_overhead"]))
                repo.add(KernelVariant(row["precision"], row["shape_class"], int(row["mig_instances"]),
                                       int(row["t_m"]), int(row["t_n"]), int(row["t_k"]), gamma))
            except (ValueError, ModelError) as exc:
                raise ConfigError(f"{path}: bad row {row}: {exc}") from None
        return repo
