"""Request routing, bandwidth-aware placement, chunk sizing and kernel selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from c2csim.cost import Overheads, forward_cost
from c2csim.errors import CapacityError, ConfigError
from c2csim.gemm import PRECISIONS, GammaCoefficients, KernelConfig, KernelRepository
from c2csim.hw import InstanceResources, SuperchipProfile, mig_profile
from c2csim.workload import ModelSpec, Request

DEFAULT_CHUNKS = (256, 512, 1024, 2048, 4096, 8192)
_EPS = 1e-9


def required_c2c_bw(model: ModelSpec) -> float:
    """Link bandwidth needed to stream one token's weights within the TPOT target."""
    return model.param_footprint_per_token / model.tpot_slo


@dataclass
class PlacementState:
    available: float
    active_set: dict[int, str] = field(default_factory=dict)
    demand: dict[str, float] = field(default_factory=dict)

    @property
    def c2c_budget_used(self) -> float:
        return sum(self.demand[m] for m in self.active_set.values())

    def place(self, instance_id: int, model: ModelSpec) -> None:
        if instance_id in self.active_set:
            raise ConfigError(f"instance {instance_id} already hosts {self.active_set[instance_id]}")
        self.demand[model.id] = required_c2c_bw(model)
        self.active_set[instance_id] = model.id
        self.check()

    def evict(self, instance_id: int) -> str:
        return self.active_set.pop(instance_id)

    def check(self) -> None:
        if self.c2c_budget_used > self.available * (1 + _EPS):
            raise AssertionError(f"C2C budget oversubscribed: {self.c2c_budget_used:.6g} > {self.available:.6g}")


def admit(model: ModelSpec, state: PlacementState, freed: float = 0.0) -> bool:
    """Feasible iff the model's demand fits in the unreserved link bandwidth
    (after releasing ``freed`` bytes/s from an eviction)."""
    return state.c2c_budget_used - freed + required_c2c_bw(model) <= state.available * (1 + _EPS)


def chunk_hbm_demand(chunk_tokens: int, shapes, elem_bytes: int, gamma_x: float, gamma_o: float,
                     ttft_budget: float, layers: int = 1) -> float:
    """HBM bandwidth a prefill chunk needs to finish its activation and
    output traffic within ``ttft_budget``.

    ``shapes`` holds (K, N) or (K, N, rows_per_token) per projection; the
    third entry lets routed expert projections see only part of the chunk.
    """
    if not ttft_budget > 0:
        raise ValueError("ttft_budget must be positive")
    s_x = s_o = 0.0
    for shape in shapes:
        k, n = shape[0], shape[1]
        rows = chunk_tokens * (shape[2] if len(shape) > 2 else 1)
        s_x += rows * k * elem_bytes
        s_o += rows * n * elem_bytes
    return layers * (gamma_x * s_x + gamma_o * s_o) / ttft_budget


def effective_gammas(alpha: float, gamma: GammaCoefficients) -> tuple[float, float]:
    """Column-weighted reuse factors of a hybrid kernel."""
    return alpha * gamma.gamma_x + (1 - alpha), alpha + (1 - alpha) * gamma.gamma_o


def model_chunk_shapes(model: ModelSpec) -> list[tuple]:
    shapes = [(k, n) for k, n in model.attn_shapes + model.mlp_shapes]
    shapes += [(k, n, model.top_k) for k, n in model.expert_shapes]
    return shapes


def select_kernel(model: ModelSpec, mig_instances: int, repo: KernelRepository,
                  shape_class: str = "mlp") -> tuple[KernelConfig, GammaCoefficients]:
    """Repository variant for the model's precision on this MIG layout, with
    the split ratio starting fully on the C2C-frugal path."""
    precision = PRECISIONS.get(model.precision_bytes)
    if precision is None:
        raise ConfigError(f"{model.id}: no kernel family for {model.precision_bytes}-byte elements")
    variant = repo.lookup(precision, shape_class, mig_instances)
    return variant.config(alpha=0.0), variant.gamma


def model_kernels(model: ModelSpec, mig_instances: int, repo: KernelRepository) -> dict:
    return {cls: select_kernel(model, mig_instances, repo, cls) for cls in ("attn", "mlp", "expert", "lm_head")}


def switch_constant(model: ModelSpec, dense: float = 0.050, moe: float = 0.318) -> float:
    return moe if model.kind == "moe" else dense


@dataclass(frozen=True)
class TableEntry:
    chunk_size: int
    kernel: KernelConfig
    predicted_ttft: float
    feasible: bool


@dataclass
class ProfilingTable:
    entries: dict[tuple[str, int], TableEntry] = field(default_factory=dict)

    def lookup(self, model_id: str, mig_instances: int) -> TableEntry:
        try:
            return self.entries[(model_id, mig_instances)]
        except KeyError:
            raise ConfigError(f"profiling table has no entry for {model_id} on {mig_instances} instances") from None

    def infeasible(self) -> list[tuple[str, int]]:
        return sorted(key for key, e in self.entries.items() if not e.feasible)

    _FIELDS = ["model_id", "mig_instances", "chunk_size", "feasible", "predicted_ttft", "alpha", "t_m", "t_n", "t_k"]

    def dump(self, path: str | Path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(header)
            out = csv.writer(fh, delimiter="\t", lineterminator="\n")
            out.writerow(self._FIELDS)
            for (model_id, count), e in sorted(self.entries.items()):
                k = e.kernel
                out.writerow([model_id, count, e.chunk_size, int(e.feasible), repr(e.predicted_ttft),
                              repr(k.alpha), k.t_m, k.t_n, k.t_k])

    @classmethod
    def load(cls, path: str | Path) -> ProfilingTable:
        with open(path, newline="") as fh:
            reader = csv.DictReader((line for line in fh if not line.startswith("#")), delimiter="\t")
            table = cls()
            for row in reader:
                try:
                    kernel = KernelConfig(float(row["alpha"]), int(row["t_m"]), int(row["t_n"]), int(row["t_k"]))
                    table.entries[(row["model_id"], int(row["mig_instances"]))] = TableEntry(
                        int(row["chunk_size"]), kernel, float(row["predicted_ttft"]), row["feasible"] == "1")
                except (KeyError, ValueError, TypeError) as exc:
                    raise ConfigError(f"{path}: bad profiling row {row}: {exc}") from None
        return table


def predict_prefill(model: ModelSpec, prompt_tokens: int, chunk: int, kernels: dict, res: InstanceResources,
                    c2c_share: float, overheads: Overheads, weight_location: str = "cpu") -> float:
    full, rest = divmod(prompt_tokens, chunk)
    total = 0.0
    if full:
        last_is_full = rest == 0
        step = forward_cost(model, chunk, 0, kernels, res, weight_location, overheads).latency(c2c_share)
        total += step * (full - 1 if last_is_full else full)
        if last_is_full:
            total += forward_cost(model, chunk, 1, kernels, res, weight_location, overheads).latency(c2c_share)
    if rest:
        total += forward_cost(model, rest, 1, kernels, res, weight_location, overheads).latency(c2c_share)
    return total


def build_profiling_table(catalog: list[ModelSpec], chip: SuperchipProfile, mig_counts, repo: KernelRepository,
                          candidate_chunks=DEFAULT_CHUNKS, overheads: Overheads = Overheads(),
                          reference_prompt: int = 4096, ttft_budget: float | None = None,
                          switch_dense: float = 0.050, switch_moe: float = 0.318) -> ProfilingTable:
    """Smallest candidate chunk whose uncontended prefill of a reference
    prompt meets the TTFT budget and whose HBM demand fits the slice.

    The budget defaults to each model's TTFT SLO minus its switch constant.
    Infeasible pairs keep the fastest candidate so they can still be served.
    """
    chunks = list(candidate_chunks)
    if chunks != sorted(chunks) or not chunks or chunks[0] < 1:
        raise ConfigError("candidate chunks must be positive and sorted ascending")
    table = ProfilingTable()
    for count in mig_counts:
        mig = mig_profile(chip, count)
        res = InstanceResources.of(chip, mig)
        for model in catalog:
            kernels = model_kernels(model, count, repo)
            cfg, gamma = kernels["mlp"]
            budget = ttft_budget if ttft_budget is not None else (
                model.ttft_slo - switch_constant(model, switch_dense, switch_moe))
            gx, go = effective_gammas(cfg.alpha, gamma)
            best = None
            chosen = None
            for chunk in chunks:
                ttft = predict_prefill(model, reference_prompt, chunk, kernels, res, chip.link_bandwidth, overheads)
                if best is None or ttft < best[1]:
                    best = (chunk, ttft)
                hbm_ok = budget > 0 and chunk_hbm_demand(
                    chunk, model_chunk_shapes(model), model.precision_bytes, gx, go, budget,
                    model.layer_count) <= res.hbm_bandwidth
                if hbm_ok and ttft <= budget:
                    chosen = TableEntry(chunk, cfg, ttft, True)
                    break
            table.entries[(model.id, count)] = chosen or TableEntry(best[0], cfg, best[1], False)
    return table


@dataclass(frozen=True)
class InstanceView:
    id: int
    resident_model: str | None
    busy: bool
    last_used: float = 0.0


@dataclass(frozen=True)
class ScheduleDecision:
    instance_id: int
    action: str
    chunk_size: int
    kernel: KernelConfig
    evicted: str | None = None


def lru_priority(view: InstanceView):
    return (view.last_used, view.id)


def schedule(request: Request, state: PlacementState, table: ProfilingTable, instances: list[InstanceView],
             models: dict[str, ModelSpec], chip: SuperchipProfile, mig_instances: int,
             priority: Callable[[InstanceView], tuple] = lru_priority) -> ScheduleDecision | None:
    """Pick an instance for ``request``; None means it must wait in its model's queue.

    Order of preference: an instance already hosting the model, then an
    empty instance that passes admission (lowest id first), then evicting
    the highest-priority idle tenant (least recently used by default).
    """
    try:
        model = models[request.model_id]
    except KeyError:
        raise ConfigError(f"request references unknown model {request.model_id!r}") from None
    if model.param_footprint_total > chip.cpu_mem_capacity:
        raise CapacityError(f"{model.id} ({model.param_footprint_total:.3g} B) exceeds CPU memory")
    entry = table.lookup(model.id, mig_instances)

    def decide(inst, action, evicted=None):
        return ScheduleDecision(inst.id, action, entry.chunk_size, entry.kernel, evicted)

    for inst in instances:
        if inst.resident_model == model.id:
            return decide(inst, "route_warm")
    for inst in sorted(instances, key=lambda v: v.id):
        if inst.resident_model is None and admit(model, state):
            return decide(inst, "cold_start")
    idle = [v for v in instances if v.resident_model is not None and not v.busy]
    for inst in sorted(idle, key=priority):
        if admit(model, state, freed=state.demand[inst.resident_model]):
            return decide(inst, "model_switch", inst.resident_model)
    return None
