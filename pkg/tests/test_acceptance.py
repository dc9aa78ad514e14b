"""End-to-end checks with pinned tolerances, one test per criterion.

Each test records a one-line detail; the terminal summary prints a
PASS/FAIL line per criterion.
"""

import math
import random
import time
from dataclasses import replace

import pytest

from c2csim.controller import ControlObservation, ControllerState, update
from c2csim.engine import SimConfig, Simulator, cold_start_timeline, corun_gap, report
from c2csim.gemm import (
    ANCHOR_SHAPE, GammaCoefficients, GemmWorkload, KernelConfig, KernelRepository, calibrate, latency, latency_terms, tiling_oracle,
    traffic_asym, traffic_hybrid, traffic_sym,
)
from c2csim.hw import InstanceResources, builtin_profile, mig_profile
from c2csim.scheduler import (
    InstanceView, PlacementState, admit, build_profiling_table, required_c2c_bw, schedule,
)
from c2csim.workload import (
    BurstParams, Request, default_catalog, generate_trace, pick_models, trace_stats, variant_catalog,
)

GB = 1e9
WEEK = 7 * 24 * 3600.0
UNIT = GammaCoefficients()


@pytest.fixture(scope="module")
def cal():
    return calibrate(builtin_profile("gh200"))


class Clock:
    def __init__(self, limit):
        self.limit = limit
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def check(self):
        assert self.elapsed < self.limit, f"took {self.elapsed:.2f} s, limit {self.limit} s"


def within(value, target, rel):
    return abs(value / target - 1) <= rel


def test_criterion_01_traffic_anchors(record_property):
    clock = Clock(1.0)
    c = calibrate(builtin_profile("gh200"))
    sym = traffic_hybrid(ANCHOR_SHAPE, KernelConfig(alpha=1.0), c.gamma)
    asym = traffic_hybrid(ANCHOR_SHAPE, KernelConfig(alpha=0.0), c.gamma)
    got = {"sym_c2c": sym.c2c_bytes, "asym_c2c": asym.c2c_bytes, "sym_hbm": sym.hbm_bytes, "asym_hbm": asym.hbm_bytes}
    record_property("detail", ", ".join(f"{k} {v / GB:.3f} GB" for k, v in got.items()))
    assert within(got["sym_c2c"], 5.37 * GB, 0.02)
    assert within(got["asym_c2c"], 0.13 * GB, 0.05)
    assert within(got["sym_hbm"], 1.23 * GB, 0.10)
    assert within(got["asym_hbm"], 5.18 * GB, 0.10)
    clock.check()


def test_criterion_02_latency_anchors(record_property, cal):
    clock = Clock(1.0)
    chip = cal.chip
    lat = {}
    for count in (1, 7):
        res = InstanceResources.of(chip, mig_profile(chip, count))
        for name, alpha in (("sym", 1.0), ("asym", 0.0)):
            lat[name, count] = latency(ANCHOR_SHAPE, KernelConfig(alpha=alpha), res, chip.link_bandwidth, cal.gamma)
    record_property("detail", ", ".join(f"{n}@{c} {v * 1e3:.1f} ms" for (n, c), v in sorted(lat.items())))
    assert within(lat["sym", 1], 16.4e-3, 0.15)
    assert within(lat["asym", 1], 4.0e-3, 0.15)
    assert lat["asym", 1] < lat["sym", 1]
    assert lat["sym", 7] <= lat["asym", 7]
    clock.check()


def test_criterion_03_boundary_and_monotonicity(record_property, cal):
    clock = Clock(10.0)
    rng = random.Random(1103)
    g = cal.gamma
    seen = set()
    while len(seen) < 1200:
        w = GemmWorkload(rng.randint(1, 65536), rng.randint(1, 65536), rng.randint(1, 65536),
                         rng.choice([1, 2, 4]), rng.choice(["cpu", "hbm"]))
        cfg = KernelConfig(t_m=rng.choice([64, 128, 256]), t_n=rng.choice([64, 128, 256]),
                           t_k=rng.choice([64, 256, 512]))
        seen.add(w)
        assert traffic_hybrid(w, replace(cfg, alpha=1.0), g) == traffic_sym(w, cfg, g)
        assert traffic_hybrid(w, replace(cfg, alpha=0.0), g) == traffic_asym(w, cfg, g)
        alphas = sorted([0.0, 1.0] + [rng.random() for _ in range(6)])
        runs = [traffic_hybrid(w, replace(cfg, alpha=a), g) for a in alphas]
        assert all(x.c2c_bytes <= y.c2c_bytes for x, y in zip(runs, runs[1:]))
        assert {t.flops for t in runs} == {2 * w.m * w.k * w.n}
    record_property("detail", f"{len(seen)} distinct shapes, 8 split ratios each, in {clock.elapsed:.2f} s")
    clock.check()


def test_criterion_04_oracle_equivalence(record_property):
    clock = Clock(30.0)
    rng = random.Random(20240604)
    cases = 0
    for _ in range(240):
        cfg = KernelConfig(t_m=rng.choice([16, 64, 128]), t_n=rng.choice([16, 64, 128]), t_k=rng.choice([16, 64]))
        dims = []
        for tile in (cfg.t_m, cfg.t_k, cfg.t_n):
            n_tiles = rng.randint(1, 64)
            dims.append((n_tiles - 1) * tile + rng.randint(1, tile))
        m, k, n = dims
        # Keep the brute-force walk affordable.
        while math.ceil(m / cfg.t_m) * math.ceil(n / cfg.t_n) * math.ceil(k / cfg.t_k) > 40_000:
            k = max(1, k // 2)
        w = GemmWorkload(m, k, n, rng.choice([1, 2, 4]), "cpu")
        assert traffic_sym(w, cfg, UNIT).c2c_bytes == tiling_oracle(w, cfg, "sym").c2c_bytes
        assert traffic_asym(w, cfg, UNIT).c2c_bytes == tiling_oracle(w, cfg, "asym").c2c_bytes
        cases += 1
    record_property("detail", f"{cases} shapes exact in {clock.elapsed:.1f} s")
    assert cases >= 200
    clock.check()


def _plant(cal, count):
    """Utilizations of the reference GEMM on one slice with a 1/count link share."""
    chip = cal.chip
    res = InstanceResources.of(chip, mig_profile(chip, count))

    def observe(alpha, t):
        terms = latency_terms(ANCHOR_SHAPE, KernelConfig(alpha=alpha), res, chip.link_bandwidth / count, cal.gamma)
        step = max(terms.values())
        return ControlObservation(step, terms["hbm"] / step, terms["c2c"] / step, t)

    return observe


def test_criterion_05_controller(record_property, cal):
    clock = Clock(5.0)
    s = ControllerState.initial(1.0, alpha=0.5)
    # dead band
    assert update(s, ControlObservation(0.1, 0.50, 0.59, 0)).alpha == 0.5
    # sign and step size gating
    assert update(s, ControlObservation(0.1, 0.2, 0.9, 0)).alpha == pytest.approx(0.5 - s.eta_slow)
    assert update(s, ControlObservation(2.0, 0.2, 0.9, 0)).alpha == pytest.approx(0.5 - s.eta_fast)
    assert update(s, ControlObservation(0.1, 0.9, 0.2, 0)).alpha == pytest.approx(0.5 + s.eta_slow)
    assert update(s, ControlObservation(2.0, 0.9, 0.2, 0)).alpha == pytest.approx(0.5 + s.eta_fast)
    # clipping
    assert update(ControllerState.initial(1.0, alpha=0.01), ControlObservation(2.0, 0, 1, 0)).alpha == 0.0
    assert update(ControllerState.initial(1.0, alpha=0.99), ControlObservation(2.0, 1, 0, 0)).alpha == 1.0

    # closed loop under a static imbalance
    limit = math.ceil(1 / s.eta_slow)
    settled = {}
    for count in (1, 3, 7):
        observe = _plant(cal, count)
        for start in (0.0, 1.0):
            st_ = ControllerState.initial(l_budget=1.0, alpha=start)
            history = []
            for i in range(4 * limit):
                st_ = update(st_, observe(st_.alpha, float(i)))
                history.append(st_.alpha)
            changes = [i for i in range(1, len(history)) if history[i] != history[i - 1]]
            last = (changes[-1] + 1) if changes else 0
            settled[count, start] = last
            assert last <= limit, f"mig {count} from {start}: still moving at boundary {last}"
            assert abs(st_.delta) < st_.tau or st_.alpha in (0.0, 1.0)
    record_property("detail", f"settled within {max(settled.values())} of {limit} boundaries")
    clock.check()


def test_criterion_06_placement_feasibility(record_property):
    clock = Clock(10.0)
    chip = builtin_profile("gh200")
    base = [m for m in default_catalog() if m.id != "llama-3.1-70b"]
    rng = random.Random(7)
    events = rejects = 0
    for trial in range(300):
        avail = rng.uniform(50, 400) * GB
        state = PlacementState(avail)
        models = {}
        for i, m in enumerate(base):
            v = replace(m, id=f"{m.id}#{trial}", tpot_slo=rng.uniform(0.05, 0.5))
            models[v.id] = v
        n_inst = rng.choice([1, 2, 3, 4, 7])
        resident: dict[int, str] = {}
        for _ in range(30):
            model = models[rng.choice(sorted(models))]
            if resident and rng.random() < 0.3:
                iid = rng.choice(sorted(resident))
                state.evict(iid)
                resident.pop(iid)
            free = [i for i in range(n_inst) if i not in resident]
            if not free:
                continue
            iid = free[0]
            used = sum(required_c2c_bw(models[mid]) for mid in resident.values())
            if admit(model, state):
                state.place(iid, model)
                resident[iid] = model.id
            else:
                rejects += 1
                assert used + required_c2c_bw(model) > avail
            total = sum(required_c2c_bw(models[mid]) for mid in resident.values())
            assert total <= avail * (1 + 1e-9)
            events += 1

    # The same invariant through the full routing path.
    catalog = variant_catalog(12)
    by_id = {m.id: m for m in catalog}
    table = build_profiling_table(catalog, chip, [7], KernelRepository.default(UNIT))
    for trial in range(50):
        state = PlacementState(chip.c2c_bandwidth * rng.uniform(0.2, 0.8))
        residents: dict[int, str] = {}
        for t in range(40):
            req = Request(float(t), rng.choice(sorted(by_id)), 128, 8)
            busy = {i for i in residents if rng.random() < 0.5}
            views = [InstanceView(i, residents.get(i), i in busy, rng.random()) for i in range(7)]
            d = schedule(req, state, table, views, by_id, chip, 7)
            need = required_c2c_bw(by_id[req.model_id])
            used = state.c2c_budget_used
            if d is None:
                rejects += 1
                for v in views:
                    if v.resident_model is None:
                        assert used + need > state.available
                    elif not v.busy:
                        assert used - state.demand[v.resident_model] + need > state.available
            elif d.action != "route_warm":
                if d.evicted:
                    state.evict(d.instance_id)
                state.place(d.instance_id, by_id[req.model_id])
                residents[d.instance_id] = req.model_id
            assert state.c2c_budget_used <= state.available * (1 + 1e-9)
            events += 1
    record_property("detail", f"{events} events, {rejects} rejections, all within budget")
    assert rejects > 0
    clock.check()


def test_criterion_07_contention_trends(record_property):
    clock = Clock(30.0)
    one, three, eight = pick_models(["llama-3.2-1b", "llama-3.2-3b", "llama-3.1-8b"])
    chunks = [512, 1024, 2048, 4096, 8192]
    by_chunk = [corun_gap([one, one], c) for c in chunks]
    levels = [[one, one], [one, three], [three, three], [three, eight], [eight, eight]]
    by_footprint = [corun_gap(pair, 512) for pair in levels]
    record_property("detail", "chunk " + " ".join(f"{g:.3f}" for g in by_chunk)
                    + " | footprint " + " ".join(f"{g:.3f}" for g in by_footprint))
    assert all(b >= a - 1e-9 for a, b in zip(by_chunk, by_chunk[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(by_footprint, by_footprint[1:]))
    assert by_chunk[0] < 0.10
    assert by_chunk[-1] > 0.25
    clock.check()


E2E_MODELS = ["llama-3.2-1b", "llama-3.2-3b", "llama-3.1-8b"]
E2E_BURST = BurstParams(burst_mean=300, idle_median=150, idle_sigma=0, rate=0.2)


def _e2e(policy, catalog, trace):
    chip = calibrate(builtin_profile("gh200")).chip
    result = Simulator(chip, 3, policy, catalog, SimConfig()).run(trace)
    return result, report(result.records, None, result.placements, policy, result.mig_instances)


def test_criterion_08_trace_replay(record_property):
    clock = Clock(120.0)
    catalog = pick_models(E2E_MODELS)
    assert all(m.ttft_slo == 1.0 and m.tpot_slo == 0.1 for m in catalog)
    trace = generate_trace(catalog, 1200.0, 42, E2E_BURST)
    assert trace == generate_trace(catalog, 1200.0, 42, E2E_BURST)
    ours, rep = _e2e("c2cserve", catalog, trace)
    _, ts = _e2e("timeshare", catalog, trace)
    again, _ = _e2e("c2cserve", catalog, trace)
    ratio = ts.cold_start_latency_mean / rep.cold_start_latency_mean
    record_property("detail", f"{len(trace)} requests; c2cserve TTFT {rep.ttft_attainment:.3f} TPOT "
                    f"{rep.tpot_attainment:.3f}; timeshare TTFT {ts.ttft_attainment:.3f} TPOT "
                    f"{ts.tpot_attainment:.3f}; cold-start ratio {ratio:.1f}x; {clock.elapsed:.0f} s")
    assert again.records == ours.records
    assert rep.ttft_attainment >= 0.95 and rep.tpot_attainment >= 0.95
    assert ts.ttft_attainment < 0.80
    assert ratio >= 3.0
    clock.check()


def test_criterion_09_switch_constants(record_property):
    clock = Clock(10.0)
    chip = calibrate(builtin_profile("gh200")).chip
    eight, mix = pick_models(["llama-3.1-8b", "mixtral-8x7b"])
    quiet = SimConfig(controller_enabled=False, record_series=False)
    observed = {}
    for resident, incoming in ((mix, eight), (eight, mix)):
        cfg = replace(quiet, preload=((0, resident.id),))
        result = Simulator(chip, 1, "c2cserve", [eight, mix], cfg).run([Request(0.0, incoming.id, 64, 2)])
        (p,) = result.placements
        assert p["class"] == "switch"
        observed[incoming.kind] = p["latency"]
    assert observed == {"dense": 0.050, "moe": 0.318}

    ratios = {}
    for m in default_catalog():
        ours = cold_start_timeline("switch", m, chip, "c2cserve")
        staged = cold_start_timeline("switch", m, chip, "mig_resident")
        ratios[m.id] = staged / ours
    # Simulated staged switch on the full GPU for a model that fits in HBM.
    one = pick_models(["llama-3.2-1b"])[0]
    cfg = replace(quiet, preload=((0, one.id),))
    result = Simulator(chip, 1, "mig_resident", [one, eight], cfg).run([Request(0.0, eight.id, 64, 2)])
    (p,) = result.placements
    assert p["class"] == "switch" and p["latency"] / 0.050 >= 10
    record_property("detail", f"dense {observed['dense'] * 1e3:.0f} ms, moe {observed['moe'] * 1e3:.0f} ms; "
                    f"staged/ours min {min(ratios.values()):.1f}x")
    assert min(ratios.values()) >= 10
    clock.check()


def test_criterion_10_workload_statistics(record_property):
    clock = Clock(30.0)
    catalog = variant_catalog(89)
    idle, tail = [], []
    for seed in range(1, 6):
        trace = generate_trace(catalog, 3 * WEEK, seed)
        s = trace_stats(trace, duration=3 * WEEK)
        idle.append(s.median_idle_fraction)
        tail.append(s.long_tail_fraction)
    record_property("detail", f"median idle min {min(idle):.3f}, long tail min {min(tail):.3f} over seeds 1-5")
    assert min(idle) >= 0.90
    assert min(tail) >= 0.80
    clock.check()
