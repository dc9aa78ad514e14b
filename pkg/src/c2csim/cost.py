"""Cost of one model forward pass (a serving step) on one MIG instance."""

from __future__ import annotations

import math
from dataclasses import dataclass

from c2csim.gemm import GammaCoefficients, GemmWorkload, KernelConfig, latency_terms, traffic_hybrid
from c2csim.hw import InstanceResources
from c2csim.workload import ModelSpec

INF = float("inf")


@dataclass(frozen=True)
class Overheads:
    """Non-GEMM time per step (attention, norms, sampling, launch)."""

    step: float = 0.015
    layer: float = 3e-4

    def of(self, model: ModelSpec) -> float:
        return self.step + self.layer * model.layer_count


@dataclass(frozen=True)
class StepCost:
    c2c_bytes: float
    hbm_bytes: float
    flops: float
    floor: float
    class_floor: dict

    def latency(self, c2c_share: float) -> float:
        """Step time when weights stream at ``c2c_share`` bytes/s.

        Weight streaming overlaps with compute, HBM traffic and the fixed
        overhead, so the step takes whichever is longer.
        """
        if self.c2c_bytes == 0:
            return self.floor
        return max(self.floor, self.c2c_bytes / c2c_share)


def layer_gemms(model: ModelSpec, tokens: int, seqs: int):
    """(shape_class, k, n, rows, multiplicity) for every GEMM in one step.

    ``tokens`` rows flow through each layer; ``seqs`` of them reach the
    output head. MoE layers touch the expected number of distinct experts,
    each seeing an equal share of the routed tokens.
    """
    out = []
    if tokens > 0:
        for k, n in model.attn_shapes:
            out.append(("attn", k, n, tokens, model.layer_count))
        for k, n in model.mlp_shapes:
            out.append(("mlp", k, n, tokens, model.layer_count))
        if model.kind == "moe":
            touched = model.expected_experts(tokens)
            rows = max(1, math.ceil(tokens * model.top_k / touched))
            for k, n in model.expert_shapes:
                out.append(("expert", k, n, rows, model.layer_count * touched))
    if seqs > 0 and model.vocab:
        out.append(("lm_head", model.hidden, model.vocab, seqs, 1))
    return out


def forward_cost(model: ModelSpec, tokens: int, seqs: int, kernels: dict, res: InstanceResources,
                 weight_location: str = "cpu", overheads: Overheads = Overheads()) -> StepCost:
    """``kernels`` maps shape class to (KernelConfig, GammaCoefficients)."""
    c2c = hbm = flops = 0.0
    class_floor: dict[str, float] = {}
    for cls, k, n, rows, mult in layer_gemms(model, tokens, seqs):
        cfg, gamma = kernels[cls]
        w = GemmWorkload(rows, k, n, model.precision_bytes, weight_location)
        t = traffic_hybrid(w, cfg, gamma)
        terms = latency_terms(w, cfg, res, INF, gamma)
        c2c += t.c2c_bytes * mult
        hbm += t.hbm_bytes * mult
        flops += t.flops * mult
        class_floor[cls] = class_floor.get(cls, 0.0) + max(terms["compute"], terms["hbm"]) * mult
    floor = sum(class_floor.values()) + overheads.of(model)
    return StepCost(c2c, hbm, flops, floor, class_floor)


def uniform_kernels(cfg: KernelConfig, gamma: GammaCoefficients) -> dict:
    return {cls: (cfg, gamma) for cls in ("attn", "mlp", "expert", "lm_head")}
