"""Discrete-event serving simulator.

Each instance runs one forward step at a time. A step batches one budget of
prefill tokens with one decode token for every running sequence. Steps that
stream weights over C2C are fluid flows: the link is re-divided whenever a
flow starts or finishes, and a step ends when its last weight byte arrives
or when its compute/HBM floor elapses, whichever is later.
"""

from __future__ import annotations

import heapq
import json
import math
from array import array
from collections import deque
from dataclasses import dataclass, field, fields, replace

from c2csim.contention import C2cLinkState, UtilizationMeter, allocate, interference_gap
from c2csim.controller import BoundaryController, ControlObservation, ControllerParams, ControllerState, assign_budgets
from c2csim.cost import Overheads, StepCost, forward_cost
from c2csim.errors import ConfigError, OutOfMemory
from c2csim.gemm import Calibration, KernelConfig, KernelRepository, calibrated
from c2csim.hw import InstanceResources, MigInstance, SuperchipProfile, mig_profile
from c2csim.scheduler import (
    DEFAULT_CHUNKS, InstanceView, PlacementState, ProfilingTable, build_profiling_table, model_kernels,
    required_c2c_bw, schedule, switch_constant,
)
from c2csim.workload import ModelSpec, Request, catalog_by_id, default_catalog

POLICIES = ("c2cserve", "dedicated", "timeshare", "mig_resident")
CONTROLLED = ("attn", "mlp", "expert")
INF = float("inf")


@dataclass(frozen=True)
class SimConfig:
    chunk_candidates: tuple[int, ...] = DEFAULT_CHUNKS
    reference_prompt: int = 4096
    overheads: Overheads = Overheads()
    window: float = 0.010
    controller: ControllerParams = ControllerParams()
    controller_enabled: bool = True
    switch_dense: float = 0.050
    switch_moe: float = 0.318
    # Staged baselines: runtime re-initialization plus weight copy.
    staged_init_dense: float = 1.45
    staged_init_moe: float = 10.54
    staging_bandwidth: float | None = None
    baseline_chunk: int = 2048
    max_batch: int = 256
    kv_fraction: float = 0.8
    arbitration: str = "reserved"
    fixed_kernel: KernelConfig | None = None
    fixed_chunk: int | None = None
    preload: tuple[tuple[int, str], ...] = ()
    record_series: bool = True

    def __post_init__(self):
        if self.arbitration not in ("reserved", "maxmin"):
            raise ConfigError("arbitration must be 'reserved' or 'maxmin'")
        if not self.window > 0:
            raise ConfigError("utilization window must be positive")


@dataclass
class RequestRecord:
    request: Request
    ttft: float
    tpot_mean: float
    token_latencies: list[float]
    start_class: str
    slo_met_ttft: bool
    slo_met_tpot: bool

    @property
    def tpot_p95_contrib(self) -> list[float]:
        return self.token_latencies[1:]


def cold_start_timeline(action: str, model: ModelSpec, chip: SuperchipProfile, policy: str,
                        config: SimConfig = SimConfig(), hbm_capacity: float | None = None) -> float:
    """Seconds from placement decision until the instance can run ``model``."""
    if action not in ("cold", "switch"):
        raise ConfigError(f"unknown start class {action!r}")
    if policy == "c2cserve":
        if action == "switch":
            return switch_constant(model, config.switch_dense, config.switch_moe)
        return chip.engine_init_latency_moe if model.kind == "moe" else chip.engine_init_latency_dense
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}")
    if hbm_capacity is not None and model.param_footprint_total > hbm_capacity:
        raise OutOfMemory(f"{model.id} needs {model.param_footprint_total:.3g} B, slice holds {hbm_capacity:.3g} B")
    init = config.staged_init_moe if model.kind == "moe" else config.staged_init_dense
    return init + model.param_footprint_total / (config.staging_bandwidth or chip.pcie_bandwidth)


def decode_step(model: ModelSpec, res: InstanceResources, c2c_share: float, kernels: dict, batch: int = 1,
                overheads: Overheads = Overheads(), weight_location: str = "cpu") -> float:
    """Per-token latency of one decode step of ``batch`` sequences."""
    return forward_cost(model, batch, batch, kernels, res, weight_location, overheads).latency(c2c_share)


def prefill_timeline(request: Request, model: ModelSpec, chunk_size: int, kernels: dict, res: InstanceResources,
                     c2c_share: float, overheads: Overheads = Overheads(), weight_location: str = "cpu"):
    """Uncontended chunked prefill of one request on its own.

    Returns the time to first token and one ledger row per chunk. The first
    token is sampled by the step that consumes the last prompt chunk.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    ledger = []
    t = 0.0
    done = 0
    while done < request.prompt_tokens:
        tokens = min(chunk_size, request.prompt_tokens - done)
        done += tokens
        cost = forward_cost(model, tokens, int(done == request.prompt_tokens), kernels, res, weight_location,
                            overheads)
        lat = cost.latency(c2c_share)
        t += lat
        ledger.append({"tokens": tokens, "c2c_bytes": cost.c2c_bytes, "hbm_bytes": cost.hbm_bytes,
                       "latency": lat, "end": t})
    return t, ledger


# Runtime state

class _Req:
    __slots__ = ("req", "model", "prefilled", "generated", "ttft", "lat", "last", "start_class", "kv_tokens")

    def __init__(self, req: Request, model: ModelSpec):
        self.req = req
        self.model = model
        self.prefilled = 0
        self.generated = 0
        self.ttft = INF
        self.lat: list[float] = []
        self.last = 0.0
        self.start_class = "warm"
        self.kv_tokens = req.prompt_tokens + req.output_tokens


@dataclass
class _Step:
    start: float
    cost: StepCost
    prefill: list  # (request, tokens)
    decode: list
    frac: float = 0.0
    rate: float = 0.0
    grant: float = 0.0
    version: int = 0


class _Instance:
    def __init__(self, iid: int, mig, res: InstanceResources):
        self.mig = MigInstance(iid, mig)
        self.res = res
        self.model: ModelSpec | None = None
        self.ready = False
        self.waiting: deque[_Req] = deque()
        self.running: list[_Req] = []
        self.step: _Step | None = None
        self.last_used = 0.0
        self.chunk = 0
        self.kernels: dict = {}
        self.controllers: dict[str, BoundaryController] = {}
        self.class_share: dict[str, float] = {}
        self.last_step_time = 0.0
        self.kv_capacity = INF
        self.kv_used = 0
        self.avail = 0.0
        self.pending_class = "cold"

    @property
    def id(self) -> int:
        return self.mig.id

    def busy(self) -> bool:
        return bool(self.step or self.running or self.waiting) or (self.model is not None and not self.ready)


@dataclass
class SimResult:
    records: list[RequestRecord]
    policy: str
    mig_instances: int
    series: dict
    trajectory: dict
    placements: list[dict]
    c2c_charged: float
    c2c_granted: float
    prefill_log: list[tuple[float, int, int]]
    end_time: float


class Simulator:
    def __init__(self, chip: SuperchipProfile, mig_instances: int, policy: str, catalog: list[ModelSpec],
                 config: SimConfig = SimConfig(), calibration: Calibration | None = None,
                 repo: KernelRepository | None = None, table: ProfilingTable | None = None):
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
        if policy == "timeshare":
            mig_instances = 1
        self.chip = chip
        self.policy = policy
        self.config = config
        self.models = catalog_by_id(catalog)
        self.cal = calibration or calibrated(chip.name)
        self.repo = repo or KernelRepository.default(self.cal.gamma)
        self.mig = mig_profile(chip, mig_instances)
        self.baseline = policy != "c2cserve"
        self.weight_location = "hbm" if self.baseline else "cpu"
        self.table = table
        if not self.baseline and table is None:
            self.table = build_profiling_table(
                catalog, chip, [mig_instances], self.repo, config.chunk_candidates, config.overheads,
                config.reference_prompt, switch_dense=config.switch_dense, switch_moe=config.switch_moe)
        self.link = chip.link_bandwidth
        self.cost_cache: dict[tuple, StepCost] = {}

    # setup

    def _check(self, trace: list[Request]):
        prev = -INF
        for r in trace:
            if r.arrival_time < prev:
                raise ConfigError("trace must be sorted by arrival time")
            prev = r.arrival_time
            if r.model_id not in self.models:
                raise ConfigError(f"trace references unknown model {r.model_id!r}")
        for mid in sorted({r.model_id for r in trace}):
            m = self.models[mid]
            if m.param_footprint_total > self.chip.cpu_mem_capacity:
                raise ConfigError(f"{mid} exceeds the CPU memory pool of {self.chip.name}")
            if not self.baseline and required_c2c_bw(m) > self.link:
                raise ConfigError(
                    f"{mid} needs {required_c2c_bw(m) / 1e9:.1f} GB/s of C2C for its TPOT target, "
                    f"link sustains {self.link / 1e9:.1f} GB/s")

    def run(self, trace: list[Request]) -> SimResult:
        self._check(trace)
        cfg = self.config
        self.now = 0.0
        self.seq = 0
        self.heap: list = []
        res = InstanceResources.of(self.chip, self.mig)
        self.instances = [_Instance(i, self.mig, res) for i in range(self.mig.instance_count)]
        self.placement = PlacementState(self.link if not self.baseline else INF)
        self.queues: dict[str, deque[_Req]] = {}
        self.fifo: deque[_Req] = deque()
        self.loaded_once: set[str] = set()
        self.records: list[RequestRecord] = []
        self.placements: list[dict] = []
        self.c2c_charged = 0.0
        self.c2c_granted = 0.0
        self.prefill_log: list[tuple[float, int, int]] = []
        self.meter = UtilizationMeter({i.id: res.hbm_bandwidth for i in self.instances})
        self.tick_pending = False
        self.tick_index = 0
        self.series = {k: array("d") for k in ("t", "instance", "u_hbm", "u_c2c", "alpha")}
        self.traj = {k: array("d") for k in ("t", "instance", "alpha", "delta", "latency")}
        for iid, mid in cfg.preload:
            inst = self.instances[iid]
            self._install(inst, self.models[mid])
            inst.ready = True
            self.loaded_once.add(mid)
        for r in trace:
            self._push(r.arrival_time, "arrival", r)
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            self._advance(t)
            getattr(self, "_on_" + kind)(payload)
        for r in self._unserved():
            self._finish(r, failed=True)
        self.records.sort(key=lambda rec: (rec.request.arrival_time, rec.request.model_id))
        return SimResult(self.records, self.policy, self.mig.instance_count,
                         {k: v.tolist() for k, v in self.series.items()},
                         {k: v.tolist() for k, v in self.traj.items()},
                         self.placements, self.c2c_charged, self.c2c_granted, self.prefill_log, self.now)

    def _unserved(self):
        left = list(self.fifo)
        for q in self.queues.values():
            left.extend(q)
        for inst in self.instances:
            left.extend(inst.waiting)
            left.extend(inst.running)
        return left

    def _push(self, t: float, kind: str, payload):
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    # fluid link

    def _advance(self, t: float):
        dt = t - self.now
        if dt < 0:
            raise AssertionError("event time went backwards")
        if dt > 0:
            for inst in self.instances:
                step = inst.step
                if step is None:
                    self.meter.record(inst.id, dt, 0.0, 0.0, inst.avail)
                    continue
                step.frac += step.rate * dt
                self.c2c_granted += step.grant * dt
                self.meter.record(inst.id, dt, step.grant, step.cost.hbm_bytes * step.rate, inst.avail)
        self.now = t

    def _reallocate(self):
        demands = {}
        for inst in self.instances:
            if inst.step is not None and inst.step.cost.c2c_bytes > 0:
                demands[inst.id] = inst.step.cost.c2c_bytes / inst.step.cost.floor
        weights = None
        if self.config.arbitration == "reserved":
            weights = {i.id: required_c2c_bw(i.model) for i in self.instances if i.model is not None}
        grants = allocate(C2cLinkState(self.link, demands, self.now, weights))
        for inst in self.instances:
            if inst.model is not None:
                probe = dict(demands)
                probe[inst.id] = INF
                inst.avail = allocate(C2cLinkState(self.link, probe, self.now, weights))[inst.id]
            else:
                inst.avail = 0.0
            step = inst.step
            if step is None:
                continue
            if step.cost.c2c_bytes > 0:
                grant = grants[inst.id]
                rate = grant / step.cost.c2c_bytes
            else:
                grant, rate = 0.0, 1.0 / step.cost.floor
            if rate != step.rate or step.version == 0:
                step.grant, step.rate = grant, rate
                step.version += 1
                remaining = max(0.0, 1.0 - step.frac)
                self._push(self.now + remaining / rate, "step_done", (inst.id, step, step.version))

    # arrivals and placement

    def _on_arrival(self, r: Request):
        req = _Req(r, self.models[r.model_id])
        if self.policy == "timeshare":
            self._timeshare_arrival(req)
        else:
            self._place(req)
        self._ensure_tick()

    def _views(self):
        return [InstanceView(i.id, i.model.id if i.model else None, i.busy(), i.last_used) for i in self.instances]

    def _place(self, req: _Req, from_queue: bool = False) -> bool:
        """Route or place ``req``; False if it is (or stays) queued."""
        mid = req.model.id
        if self.baseline and req.model.param_footprint_total > self.mig.hbm_per_instance:
            self._finish(req, failed=True)
            return True
        if not from_queue and self.queues.get(mid):
            self.queues[mid].append(req)
            return False
        decision = self._decide(req)
        if decision is None:
            if not from_queue:
                self.queues.setdefault(mid, deque()).append(req)
            return False
        inst = self.instances[decision[0]]
        action = decision[1]
        if action == "route_warm":
            if not inst.ready:
                req.start_class = inst.pending_class
            inst.waiting.append(req)
            self._try_start(inst)
            return True
        if action == "model_switch":
            self.placement.evict(inst.id)
            self._uninstall(inst)
        cls = "switch" if action == "model_switch" else "cold"
        delay = cold_start_timeline(cls, req.model, self.chip, self.policy, self.config,
                                    None if self.policy == "c2cserve" else self.mig.hbm_per_instance)
        self._install(inst, req.model)
        inst.pending_class = cls
        req.start_class = cls
        inst.waiting.append(req)
        self.loaded_once.add(mid)
        self.placements.append({"t": self.now, "instance": inst.id, "model": mid, "class": cls, "latency": delay})
        self._push(self.now + delay, "placement_done", inst.id)
        return True

    def _decide(self, req: _Req):
        model = req.model
        if self.policy == "c2cserve":
            d = schedule(req.req, self.placement, self.table, self._views(), self.models, self.chip,
                         self.mig.instance_count)
            return None if d is None else (d.instance_id, d.action)
        views = self._views()
        for v in views:
            if v.resident_model == model.id:
                return (v.id, "route_warm")
        for v in views:
            if v.resident_model is None:
                return (v.id, "cold_start")
        if self.policy == "mig_resident":
            idle = sorted((v for v in views if not v.busy), key=lambda v: (v.last_used, v.id))
            if idle:
                return (idle[0].id, "model_switch")
        return None

    def _install(self, inst: _Instance, model: ModelSpec):
        cfg = self.config
        inst.model = model
        inst.ready = False
        inst.mig.resident_model = model.id
        inst.mig.state = "switching"
        if not self.baseline:
            self.placement.place(inst.id, model)
            entry = self.table.lookup(model.id, self.mig.instance_count)
            inst.chunk = cfg.fixed_chunk or entry.chunk_size
            kernels = model_kernels(model, self.mig.instance_count, self.repo)
        else:
            self.placement.active_set[inst.id] = model.id
            self.placement.demand[model.id] = 0.0
            inst.chunk = cfg.fixed_chunk or cfg.baseline_chunk
            kernels = {c: (replace(k, alpha=1.0), g) for c, (k, g) in
                       model_kernels(model, self.mig.instance_count, self.repo).items()}
        if cfg.fixed_kernel is not None:
            kernels = {c: (cfg.fixed_kernel, g) for c, (k, g) in kernels.items()}
        inst.kernels = kernels
        weights_in_hbm = model.param_footprint_total if self.baseline else 0.0
        kv_bytes = self.mig.hbm_per_instance * cfg.kv_fraction - weights_in_hbm
        inst.kv_capacity = max(0.0, kv_bytes) / model.kv_bytes_per_token() if model.kv_dim else INF
        inst.mig.hbm_reserved = min(self.mig.hbm_per_instance, max(0.0, kv_bytes))
        inst.controllers = {}
        if self.policy == "c2cserve" and cfg.controller_enabled and cfg.fixed_kernel is None:
            probe = forward_cost(model, 1, 1, kernels, inst.res, self.weight_location, cfg.overheads)
            classes = [c for c in CONTROLLED if c in probe.class_floor]
            total = sum(probe.class_floor[c] for c in classes)
            inst.class_share = {c: probe.class_floor[c] / total for c in classes}
            budgets = assign_budgets(model.tpot_slo, [probe.class_floor[c] for c in classes])
            for c, b in zip(classes, budgets):
                inst.controllers[c] = BoundaryController(ControllerState.initial(b, cfg.controller, kernels[c][0].alpha))

    def _uninstall(self, inst: _Instance):
        if self.baseline:
            self.placement.active_set.pop(inst.id, None)
        inst.model = None
        inst.ready = False
        inst.controllers = {}
        inst.mig.resident_model = None
        inst.mig.state = "idle"
        inst.mig.hbm_reserved = 0.0

    def _on_placement_done(self, iid: int):
        inst = self.instances[iid]
        inst.ready = True
        inst.mig.state = "active"
        if self.policy == "timeshare":
            self._timeshare_admit(inst)
        self._reallocate()
        self._try_start(inst)

    def _retry_queues(self):
        heads = sorted((q[0].req.arrival_time, mid) for mid, q in self.queues.items() if q)
        for _, mid in heads:
            q = self.queues[mid]
            while q:
                req = q.popleft()
                if not self._place(req, from_queue=True):
                    q.appendleft(req)
                    break

    # timeshare: one full-GPU instance, reload whenever the model changes

    def _timeshare_arrival(self, req: _Req):
        inst = self.instances[0]
        if req.model.param_footprint_total > self.mig.hbm_per_instance:
            self._finish(req, failed=True)
            return
        if inst.model is req.model and inst.ready and not self.fifo:
            inst.waiting.append(req)
            self._try_start(inst)
            return
        if inst.model is req.model and not inst.ready:
            req.start_class = inst.pending_class
        self.fifo.append(req)
        self._timeshare_dispatch()

    def _timeshare_dispatch(self):
        inst = self.instances[0]
        if not self.fifo or inst.busy():
            return
        head = self.fifo[0]
        if inst.model is not head.model:
            cls = "switch" if head.model.id in self.loaded_once else "cold"
            delay = cold_start_timeline(cls, head.model, self.chip, self.policy, self.config, self.mig.hbm_per_instance)
            if inst.model is not None:
                self._uninstall(inst)
            self._install(inst, head.model)
            self.loaded_once.add(head.model.id)
            inst.pending_class = cls
            self.placements.append({"t": self.now, "instance": 0, "model": head.model.id, "class": cls,
                                    "latency": delay})
            for r in self.fifo:
                if r.model is head.model:
                    r.start_class = cls
            self._push(self.now + delay, "placement_done", 0)
            return
        self._timeshare_admit(inst)
        self._try_start(inst)

    def _timeshare_admit(self, inst: _Instance):
        keep = deque()
        for r in self.fifo:
            (inst.waiting if r.model is inst.model else keep).append(r)
        self.fifo = keep

    # steps

    def _try_start(self, inst: _Instance):
        if inst.step is not None or not inst.ready:
            return
        cfg = self.config
        while inst.waiting and len(inst.running) < cfg.max_batch:
            nxt = inst.waiting[0]
            if inst.running and inst.kv_used + nxt.kv_tokens > inst.kv_capacity:
                break
            inst.waiting.popleft()
            inst.kv_used += nxt.kv_tokens
            inst.running.append(nxt)
        if not inst.running:
            self._release(inst)
            return
        budget = inst.chunk
        prefill, decode = [], []
        seqs = 0
        for r in inst.running:
            left = r.req.prompt_tokens - r.prefilled
            if left > 0:
                if budget > 0:
                    take = min(left, budget)
                    budget -= take
                    prefill.append((r, take))
                    seqs += take == left
            else:
                decode.append(r)
        tokens = sum(t for _, t in prefill) + len(decode)
        alphas = tuple((c, ctl.alpha) for c, ctl in inst.controllers.items())
        key = (inst.model.id, tokens, seqs + len(decode), alphas)
        cost = self.cost_cache.get(key)
        if cost is None:
            kernels = dict(inst.kernels)
            for c, alpha in alphas:
                kernels[c] = (replace(kernels[c][0], alpha=alpha), kernels[c][1])
            cost = forward_cost(inst.model, tokens, seqs + len(decode), kernels, inst.res, self.weight_location,
                                cfg.overheads)
            self.cost_cache[key] = cost
        inst.step = _Step(self.now, cost, prefill, decode)
        self.c2c_charged += cost.c2c_bytes
        self._reallocate()
        self._ensure_tick()

    def _on_step_done(self, payload):
        iid, step, version = payload
        inst = self.instances[iid]
        if inst.step is not step or step.version != version:
            return
        if step.frac < 1.0 - 1e-6:
            raise AssertionError(f"step finished at fraction {step.frac}")
        inst.step = None
        inst.last_step_time = self.now - step.start
        now = self.now
        done = []
        prefilled = 0
        for r, take in step.prefill:
            r.prefilled += take
            prefilled += take
            if r.prefilled == r.req.prompt_tokens:
                self._emit(r, now)
                if r.generated == r.req.output_tokens:
                    done.append(r)
        for r in step.decode:
            self._emit(r, now)
            if r.generated == r.req.output_tokens:
                done.append(r)
        if prefilled:
            self.prefill_log.append((now, iid, prefilled))
        for r in done:
            inst.running.remove(r)
            inst.kv_used -= r.kv_tokens
            self._finish(r)
        for ctl in inst.controllers.values():
            ctl.boundary()
        self._reallocate()
        self._try_start(inst)

    def _emit(self, r: _Req, now: float):
        if r.generated == 0:
            r.ttft = now - r.req.arrival_time
            r.lat.append(r.ttft)
        else:
            r.lat.append(now - r.last)
        r.last = now
        r.generated += 1

    def _release(self, inst: _Instance):
        inst.last_used = self.now
        if self.policy == "timeshare":
            self._timeshare_dispatch()
        else:
            self._retry_queues()

    def _finish(self, r: _Req, failed: bool = False):
        m = r.model
        if failed or r.generated < r.req.output_tokens:
            self.records.append(RequestRecord(r.req, INF, INF, [], "failed", False, False))
            return
        gaps = r.lat[1:]
        tpot = sum(gaps) / len(gaps) if gaps else 0.0
        self.records.append(RequestRecord(r.req, r.ttft, tpot, r.lat, r.start_class,
                                          r.ttft <= m.ttft_slo, tpot <= m.tpot_slo))

    # control loop

    def _ensure_tick(self):
        if self.tick_pending or not self.config.record_series and not any(i.controllers for i in self.instances):
            return
        if not any(i.step for i in self.instances):
            return
        w = self.config.window
        self.tick_pending = True
        self.tick_index = max(self.tick_index + 1, math.floor(self.now / w) + 1)
        self._push(self.tick_index * w, "control_tick", None)

    def _on_control_tick(self, _):
        self.tick_pending = False
        for inst in self.instances:
            elapsed = self.meter.elapsed[inst.id]
            if elapsed <= 0:
                continue
            sample = self.meter.sample_utilization(inst.id, elapsed)
            if inst.model is None or not inst.ready:
                continue
            alpha = 1.0 if self.baseline else 0.0
            in_flight = inst.step is not None
            for c, ctl in inst.controllers.items():
                lat = inst.last_step_time * inst.class_share[c]
                ctl.observe(ControlObservation(lat, sample.u_hbm, sample.u_c2c, self.now), in_flight)
            if "mlp" in inst.controllers:
                ctl = inst.controllers["mlp"]
                alpha = ctl.alpha
                for k, v in (("t", self.now), ("instance", inst.id), ("alpha", ctl.state.alpha),
                             ("delta", ctl.state.delta), ("latency", ctl.state.ema_latency)):
                    self.traj[k].append(v)
            elif self.config.fixed_kernel is not None:
                alpha = self.config.fixed_kernel.alpha
            if self.config.record_series:
                for k, v in (("t", self.now), ("instance", inst.id), ("u_hbm", sample.u_hbm),
                             ("u_c2c", sample.u_c2c), ("alpha", alpha)):
                    self.series[k].append(v)
        self._ensure_tick()


# Reporting

@dataclass
class RunReport:
    policy: str
    mig_instances: int
    n_requests: int
    n_failed: int
    p95_ttft: float
    p95_tpot: float
    ttft_attainment: float
    tpot_attainment: float
    cold_start_latency_mean: float
    model_switch_latency_mean: float
    cold_starts: int
    model_switches: int
    utilization: dict = field(default_factory=dict, repr=False)

    def to_dict(self, with_series: bool = False) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "utilization"}
        if with_series:
            d["utilization"] = {k: list(v) for k, v in self.utilization.items()}
        return d

    def summary(self) -> str:
        def ms(x):
            return "n/a" if x is None or not math.isfinite(x) else f"{x * 1e3:.1f} ms"

        return "\n".join([
            f"policy {self.policy} on {self.mig_instances} instance(s)",
            f"requests {self.n_requests} (failed {self.n_failed})",
            f"p95 TTFT {ms(self.p95_ttft)}, p95 TPOT {ms(self.p95_tpot)}",
            f"TTFT attainment {self.ttft_attainment:.3f}, TPOT attainment {self.tpot_attainment:.3f}",
            f"cold starts {self.cold_starts}, mean cold-start latency {ms(self.cold_start_latency_mean)}",
            f"model switches {self.model_switches}, mean switch latency {ms(self.model_switch_latency_mean)}",
        ])


def nearest_rank(values, q: float) -> float:
    ordered = sorted(values)
    if not ordered:
        return math.nan
    return ordered[max(0, math.ceil(q * len(ordered)) - 1)]


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else math.nan


def report(records: list[RequestRecord], windows: dict | None = None, placements: list[dict] = (),
           policy: str = "", mig_instances: int = 0) -> RunReport:
    """Cold-start latency is arrival to first token for requests that
    triggered (or waited on) a cold start; switch latency is the switch
    overhead itself."""
    n = len(records)
    switches = [p["latency"] for p in placements if p["class"] == "switch"]
    return RunReport(
        policy=policy,
        mig_instances=mig_instances,
        n_requests=n,
        n_failed=sum(r.start_class == "failed" for r in records),
        p95_ttft=nearest_rank([r.ttft for r in records], 0.95),
        p95_tpot=nearest_rank([r.tpot_mean for r in records], 0.95),
        ttft_attainment=sum(r.slo_met_ttft for r in records) / n if n else 1.0,
        tpot_attainment=sum(r.slo_met_tpot for r in records) / n if n else 1.0,
        cold_start_latency_mean=_mean(r.ttft for r in records if r.start_class == "cold"),
        model_switch_latency_mean=_mean(switches),
        cold_starts=sum(p["class"] == "cold" for p in placements),
        model_switches=len(switches),
        utilization=dict(windows or {}),
    )


def run(trace: list[Request], chip: SuperchipProfile, mig_instances: int, policy: str,
        config: SimConfig = SimConfig(), catalog: list[ModelSpec] | None = None) -> RunReport:
    sim = Simulator(chip, mig_instances, policy, catalog or default_catalog(), config)
    result = sim.run(trace)
    return report(result.records, result.series, result.placements, result.policy, result.mig_instances)


# Two-instance co-run experiments

def corun_gap(models: list[ModelSpec], chunk: int, chip: SuperchipProfile | None = None, mig_instances: int = 2,
              kernel: KernelConfig = KernelConfig(alpha=1.0), prompt: int = 8192, requests: int = 4,
              config: SimConfig = SimConfig()) -> float:
    """Interference gap of prefill throughput when ``models`` run side by
    side, one per instance, against each running alone.

    Co-run throughput is measured over the window in which every instance
    is still busy.
    """
    chip = chip or calibrated("gh200").chip
    cfg = replace(config, fixed_kernel=kernel, fixed_chunk=chunk, arbitration="maxmin", controller_enabled=False,
                  record_series=False)
    models = [replace(m, id=f"{m.id}@{i}") for i, m in enumerate(models)]
    catalog = models

    def simulate(pairs):
        cfgp = replace(cfg, preload=tuple(pairs))
        sim = Simulator(chip, mig_instances, "c2cserve", catalog, cfgp)
        trace = sorted((Request(0.0, mid, prompt, 1) for _, mid in pairs for _ in range(requests)),
                       key=lambda r: r.model_id)
        return sim.run(trace).prefill_log

    solo = []
    for i, m in enumerate(models):
        log = simulate([(i, m.id)])
        solo.append(sum(t for _, _, t in log) / log[-1][0])
    log = simulate([(i, m.id) for i, m in enumerate(models)])
    horizon = min(max(t for t, iid, _ in log if iid == i) for i in range(len(models)))
    tokens = 0.0
    for i in range(len(models)):
        prev = 0.0
        for t, _, n in (e for e in log if e[1] == i):
            if t <= horizon:
                tokens += n
                prev = t
            else:
                # Credit the chunk in flight at the horizon by elapsed fraction.
                tokens += n * (horizon - prev) / (t - prev)
                break
    return interference_gap(solo, tokens / horizon)


def result_json(rep: RunReport, header: dict) -> str:
    return json.dumps({"meta": header, "report": rep.to_dict()}, indent=2, sort_keys=True, default=str)
