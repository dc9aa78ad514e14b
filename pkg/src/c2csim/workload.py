"""Models, requests, synthetic long-tail traces and the trace file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from decimal import Decimal, localcontext
from pathlib import Path

import numpy as np

from c2csim.errors import ConfigError, TraceParseError

TRACE_HEADER = "arrival_ms,model_id,prompt_tokens,output_tokens"


@dataclass(frozen=True)
class ModelSpec:
    """A served model.

    Per-layer projections are split into attention, dense MLP and expert
    shapes, each a tuple of (K, N). ``vocab`` sizes the output head; with
    tied embeddings the head and the input embedding share one matrix.
    Footprints are in bytes.
    """

    id: str
    kind: str
    param_footprint_total: float
    param_footprint_per_token: float
    layer_count: int
    hidden: int
    attn_shapes: tuple[tuple[int, int], ...]
    mlp_shapes: tuple[tuple[int, int], ...] = ()
    expert_shapes: tuple[tuple[int, int], ...] = ()
    n_experts: int = 0
    top_k: int = 0
    vocab: int = 0
    tied_embeddings: bool = False
    kv_dim: int = 0
    precision_bytes: int = 2
    ttft_slo: float = 1.0
    tpot_slo: float = 0.1

    def __post_init__(self):
        if self.kind not in ("dense", "moe"):
            raise ConfigError(f"{self.id}: kind must be dense or moe")
        if self.layer_count < 1 or self.hidden < 1:
            raise ConfigError(f"{self.id}: layer_count and hidden must be >= 1")
        if self.kind == "moe" and not (self.expert_shapes and 0 < self.top_k <= self.n_experts):
            raise ConfigError(f"{self.id}: MoE models need expert shapes and 0 < top_k <= n_experts")
        if self.ttft_slo <= 0 or self.tpot_slo <= 0:
            raise ConfigError(f"{self.id}: SLOs must be positive")
        if not 0 < self.param_footprint_per_token <= self.param_footprint_total:
            raise ConfigError(f"{self.id}: need 0 < per-token footprint <= total footprint")
        if self.kind == "dense" and self.param_footprint_per_token != self.param_footprint_total:
            raise ConfigError(f"{self.id}: dense models activate all weights per token")
        structural = self.structural_params() * self.precision_bytes
        if abs(structural - self.param_footprint_total) > 0.05 * self.param_footprint_total:
            raise ConfigError(
                f"{self.id}: layer shapes account for {structural:.4g} B, footprint is {self.param_footprint_total:.4g} B"
            )

    @property
    def gemm_shapes(self) -> list[tuple[int, int]]:
        """All parameter-bearing projections of one layer."""
        return list(self.attn_shapes) + list(self.mlp_shapes) + list(self.expert_shapes) * self.n_experts

    def structural_params(self) -> int:
        per_layer = sum(k * n for k, n in self.gemm_shapes)
        embed = self.hidden * self.vocab * (1 if self.tied_embeddings else 2)
        return per_layer * self.layer_count + embed

    def kv_bytes_per_token(self) -> float:
        return 2 * self.layer_count * self.kv_dim * self.precision_bytes

    def expected_experts(self, tokens: int) -> float:
        """Expected number of distinct experts routed to by ``tokens`` tokens."""
        if self.kind != "moe" or tokens <= 0:
            return 0.0
        return self.n_experts * (1.0 - (1.0 - self.top_k / self.n_experts) ** tokens)


@dataclass(frozen=True)
class Request:
    arrival_time: float
    model_id: str
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValueError("prompt_tokens and output_tokens must be >= 1")
        if not math.isfinite(self.arrival_time) or self.arrival_time < 0:
            raise ValueError("arrival_time must be finite and non-negative")


def _llama(id, layers, hidden, inter, kv, vocab, tied, params, **kw) -> ModelSpec:
    heads_out = kw.pop("q_dim", hidden)
    attn = ((hidden, heads_out), (hidden, kv), (hidden, kv), (heads_out, hidden))
    mlp = ((hidden, inter), (hidden, inter), (inter, hidden))
    size = params * 2
    return ModelSpec(id=id, kind="dense", param_footprint_total=size, param_footprint_per_token=size,
                     layer_count=layers, hidden=hidden, attn_shapes=attn, mlp_shapes=mlp,
                     vocab=vocab, tied_embeddings=tied, kv_dim=kv, **kw)


def _moe(id, layers, hidden, inter, kv, vocab, experts, top_k, params, active, q_dim=None) -> ModelSpec:
    q = q_dim or hidden
    attn = ((hidden, q), (hidden, kv), (hidden, kv), (q, hidden))
    expert = ((hidden, inter), (hidden, inter), (inter, hidden))
    return ModelSpec(id=id, kind="moe", param_footprint_total=params * 2, param_footprint_per_token=active * 2,
                     layer_count=layers, hidden=hidden, attn_shapes=attn, expert_shapes=expert,
                     n_experts=experts, top_k=top_k, vocab=vocab, kv_dim=kv)


def default_catalog() -> list[ModelSpec]:
    return [
        _llama("llama-3.2-1b", 16, 2048, 8192, 512, 128256, True, 1.24e9),
        _llama("llama-3.2-3b", 28, 3072, 8192, 1024, 128256, True, 3.21e9),
        _llama("llama-3.1-8b", 32, 4096, 14336, 1024, 128256, False, 8.03e9),
        _llama("llama-3.1-70b", 80, 8192, 28672, 1024, 128256, False, 70.6e9),
        _moe("mixtral-8x7b", 32, 4096, 14336, 1024, 32000, 8, 2, 46.7e9, 12.9e9),
        _moe("qwen3-30b-a3b", 48, 2048, 768, 512, 151936, 128, 8, 30.5e9, 3.3e9, q_dim=4096),
    ]


def catalog_by_id(catalog: list[ModelSpec]) -> dict[str, ModelSpec]:
    return {m.id: m for m in catalog}


def pick_models(ids, catalog: list[ModelSpec] | None = None) -> list[ModelSpec]:
    known = catalog_by_id(catalog or default_catalog())
    missing = [i for i in ids if i not in known]
    if missing:
        raise ConfigError(f"unknown model(s): {', '.join(missing)}")
    return [known[i] for i in ids]


def variant_catalog(count: int, bases: list[ModelSpec] | None = None) -> list[ModelSpec]:
    """``count`` fine-tuned variants cycling over the base architectures."""
    if count < 1:
        raise ConfigError("catalog needs at least one model")
    bases = bases or [m for m in default_catalog() if m.id != "llama-3.1-70b"]
    return [replace(bases[i % len(bases)], id=f"{bases[i % len(bases)].id}-ft{i:03d}") for i in range(count)]


# Length distributions

@dataclass(frozen=True)
class LengthDistribution:
    """Prompt and output token counts.

    Defaults to independent log-normals. Supplying ``prompt_hist`` or
    ``output_hist`` as (bin_edges, weights) switches that side to an
    empirical histogram sampled uniformly within the chosen bin.
    """

    prompt_median: float = 512
    prompt_sigma: float = 1.0
    output_median: float = 256
    output_sigma: float = 0.8
    prompt_max: int = 8192
    output_max: int = 2048
    prompt_hist: tuple | None = None
    output_hist: tuple | None = None


def _draw(rng, n, median, sigma, hist, cap):
    if hist is None:
        values = rng.lognormal(math.log(median), sigma, n)
    else:
        edges, weights = (np.asarray(x, dtype=float) for x in hist)
        if len(edges) != len(weights) + 1 or weights.sum() <= 0:
            raise ConfigError("histogram needs len(edges) == len(weights) + 1 and positive mass")
        bins = rng.choice(len(weights), size=n, p=weights / weights.sum())
        values = rng.uniform(edges[bins], edges[bins + 1])
    return np.clip(np.rint(values), 1, cap).astype(int)


def sample_lengths(seed, count: int, dist: LengthDistribution = LengthDistribution()) -> list[tuple[int, int]]:
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    prompts = _draw(rng, count, dist.prompt_median, dist.prompt_sigma, dist.prompt_hist, dist.prompt_max)
    outputs = _draw(rng, count, dist.output_median, dist.output_sigma, dist.output_hist, dist.output_max)
    return list(zip(prompts.tolist(), outputs.tolist()))


# ON-OFF bursty arrivals

@dataclass(frozen=True)
class BurstParams:
    """Per-model ON-OFF process.

    ON and OFF periods are exponential. The mean OFF period varies across
    models: it is drawn log-normally around ``idle_median`` with spread
    ``idle_sigma``, which produces the long tail of rarely-used models.
    Within ON periods requests arrive as a Poisson process.
    """

    burst_mean: float = 1200.0
    idle_median: float = 40 * 3600.0
    idle_sigma: float = 1.5
    rate: float = 0.02
    lengths: LengthDistribution = field(default_factory=LengthDistribution)

    def __post_init__(self):
        if not self.burst_mean > 0 or not self.rate > 0:
            raise ConfigError("burst_mean and in-burst rate must be positive")
        if self.idle_median < 0 or self.idle_sigma < 0:
            raise ConfigError("idle parameters must be non-negative")


def generate_trace(catalog: list[ModelSpec], duration: float, seed: int,
                   burst: BurstParams = BurstParams()) -> list[Request]:
    if not catalog:
        raise ConfigError("model catalog is empty")
    if not duration > 0:
        raise ConfigError("duration must be positive")
    root = np.random.SeedSequence(seed)
    model_seeds = root.spawn(len(catalog))
    out = []
    for model, ss in zip(catalog, model_seeds):
        arrival_ss, length_ss = ss.spawn(2)
        rng = np.random.default_rng(arrival_ss)
        idle_mean = burst.idle_median * math.exp(burst.idle_sigma * rng.standard_normal())
        times = []
        p_on = burst.burst_mean / (burst.burst_mean + idle_mean)
        on = rng.random() < p_on
        t = 0.0
        while t < duration:
            if on:
                end = min(t + rng.exponential(burst.burst_mean), duration)
                t += rng.exponential(1.0 / burst.rate)
                while t < end:
                    times.append(t)
                    t += rng.exponential(1.0 / burst.rate)
                t = end
            elif idle_mean > 0:
                t += rng.exponential(idle_mean)
            on = not on
        times = sorted({round(x, 6) for x in times if round(x, 6) < duration})
        lengths = sample_lengths(length_ss, len(times), burst.lengths)
        out.extend(Request(a, model.id, p, o) for a, (p, o) in zip(times, lengths))
    out.sort(key=lambda r: (r.arrival_time, r.model_id))
    return out


# Statistics

@dataclass(frozen=True)
class TraceStats:
    per_model_active_hour_fraction: dict[str, float]
    median_idle_fraction: float
    long_tail_fraction: float
    buckets: int
    flagged: bool = False


def trace_stats(trace: list[Request], hour_bucket: float = 3600.0, duration: float | None = None,
                activity_threshold: float = 0.2) -> TraceStats:
    """A model is active in a bucket iff at least one of its requests arrives
    in it. Only models that appear in the trace are counted."""
    if not hour_bucket > 0:
        raise ValueError("hour_bucket must be positive")
    if not trace:
        return TraceStats({}, 0.0, 0.0, 0, flagged=True)
    span = duration if duration is not None else trace[-1].arrival_time + 1e-9
    n_buckets = max(1, math.ceil(span / hour_bucket))
    active: dict[str, set[int]] = {}
    for r in trace:
        active.setdefault(r.model_id, set()).add(min(int(r.arrival_time // hour_bucket), n_buckets - 1))
    frac = {m: len(b) / n_buckets for m, b in sorted(active.items())}
    values = np.array(list(frac.values()))
    return TraceStats(
        per_model_active_hour_fraction=frac,
        median_idle_fraction=float(1.0 - np.median(values)),
        long_tail_fraction=float(np.mean(values < activity_threshold)),
        buckets=n_buckets,
    )


# Trace file: CSV with a fixed header; '#' lines carry metadata.

def _parse_ms(text: str) -> float:
    with localcontext() as ctx:
        ctx.prec = 80
        return float(Decimal(text) / 1000)


def _format_ms(seconds: float) -> str:
    ms = format(Decimal(repr(seconds)).scaleb(3), "f")
    if _parse_ms(ms) == seconds:
        return ms
    # Exact decimal expansion of the stored double always round-trips.
    with localcontext() as ctx:
        ctx.prec = 80
        return format(Decimal(seconds) * 1000, "f")


def save_trace(trace: list[Request], path: str | Path, header: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(header)
        fh.write(TRACE_HEADER + "\n")
        for r in trace:
            fh.write(f"{_format_ms(r.arrival_time)},{r.model_id},{r.prompt_tokens},{r.output_tokens}\n")


def load_trace(path: str | Path) -> list[Request]:
    out = []
    seen_header = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if not seen_header:
                if line.replace(" ", "") != TRACE_HEADER:
                    raise TraceParseError(path, lineno, f"expected header {TRACE_HEADER!r}")
                seen_header = True
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise TraceParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
            if not parts[1]:
                raise TraceParseError(path, lineno, "empty model id")
            try:
                out.append(Request(_parse_ms(parts[0]), parts[1], int(parts[2]), int(parts[3])))
            except (ValueError, ArithmeticError) as exc:
                raise TraceParseError(path, lineno, str(exc)) from None
    return out
