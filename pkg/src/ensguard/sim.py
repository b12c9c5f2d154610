"""Virtual-time simulation of a periodic inference loop under bit-flip faults.

Frames arrive every ``frame_period_ms``. Each frame runs the strategy's
detection and inference, charged in virtual milliseconds from the pass
counters it actually performed, and must finish within ``deadline_ms`` of its
arrival. Fault events are injected at the arrival of their frame. The guard
strategy additionally picks which healthy models to run with
``select_models`` and spends the slack before the next arrival on
layer-sized recovery chunks.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ProfilingError
from .inject import HIGH_BER, InjectionConfig, inject
from .nn import Dataset, NetworkSpec, TrainConfig, evaluate, forward, gen_synthetic, load_csv, train_independent
from .params import ModelParams, load_model
from .strategies import STRATEGY_NAMES, GuardStrategy, ProtectionStrategy, make_strategy

CSV_SCHEMA = "#schema=1"


# ------------------------------------------------------------------ costs

@dataclass(frozen=True)
class CostProfile:
    """Per-model detection and inference cost, recovery cost per layer (ms)."""

    c_dt: Mapping[int, float]
    c_in: Mapping[int, float]
    c_rec_layer: float | None = None  # None: the strategy never recovers
    margin: float = 1.0

    def __post_init__(self):
        if self.margin < 1.0:
            raise ContractError("margin must be >= 1.0")
        if set(self.c_dt) != set(self.c_in):
            raise ContractError("detection and inference costs must cover the same models")
        if any(not math.isfinite(v) or v < 0 for v in self.c_dt.values()):
            raise ContractError("detection costs must be finite and >= 0")
        if any(not math.isfinite(v) or v <= 0 for v in self.c_in.values()):
            raise ContractError("inference costs must be finite and > 0")
        if self.c_rec_layer is not None and not self.c_rec_layer > 0:
            raise ContractError("recovery cost per layer must be > 0")

    def cost(self, m: int) -> float:
        return self.c_dt[m] + self.c_in[m]


@dataclass(frozen=True)
class VirtualCosts:
    """Unit costs of the virtual clock, in ms, for one full-model pass.

    Pass counters are per layer, so each layer pass costs ``1/L`` of a full
    pass. Inference scales with a model's parameter count relative to the
    reference model. A majority vote reads three copies and is charged 1.5
    comparison passes per layer.
    """

    compare_pass: float = 40.0
    checksum_pass: float = 24.0
    inference: float = 20.0
    vote_layer: float = 15.0
    copy_layer: float = 5.0
    recover_layer: float = 28.0
    disk_latency_per_layer: float = 150.0


def virtual_profile(strategy: ProtectionStrategy, vc: VirtualCosts, ref_params: int) -> CostProfile:
    models = _cost_models(strategy)
    c_in = {i: vc.inference * m.n_params / ref_params for i, m in enumerate(models)}
    name = strategy.name
    if name == "guard":
        c_dt = {i: (0.0 if i == 0 else vc.compare_pass) for i in c_in}
        rec = vc.recover_layer
    elif name in ("tmr", "dro"):
        c_dt = {0: 2 * vc.compare_pass}
        rec = vc.vote_layer if name == "tmr" else vc.copy_layer
    elif name == "cbr":
        c_dt = {0: vc.checksum_pass}
        rec = vc.disk_latency_per_layer
    else:
        c_dt = {i: 0.0 for i in c_in}
        rec = None
    return CostProfile(c_dt, c_in, rec)


def tmr_wcet(vc: VirtualCosts, n_layers: int, c_in: float | None = None) -> float:
    """Two comparisons per layer, a vote on every layer, one inference."""
    return 2 * vc.compare_pass + n_layers * vc.vote_layer + (vc.inference if c_in is None else c_in)


def _cost_models(strategy: ProtectionStrategy) -> list[ModelParams]:
    if isinstance(strategy, GuardStrategy):
        return list(strategy.g.models)
    return list(strategy.serving_models())


def profile_costs(strategy: ProtectionStrategy, x=None, runs: int = 5, margin: float = 1.0,
                  table: Mapping | None = None, clock: Callable[[], float] = time.perf_counter) -> CostProfile:
    """Worst observed cost over ``runs`` timed executions, times ``margin``.

    With ``table`` (``{"c_dt": ..., "c_in": ..., "c_rec_layer": ...}``, values
    either per-model maps or scalars) no timing happens and the table is
    returned scaled by ``margin``.
    """
    models = _cost_models(strategy)
    ids = range(len(models))
    if table is not None:
        def per_model(v):
            return {i: float(v[i] if isinstance(v, Mapping) else v) * margin for i in ids}

        rec = table.get("c_rec_layer")
        return CostProfile(per_model(table["c_dt"]), per_model(table["c_in"]),
                           None if rec is None else float(rec) * margin, margin)
    if runs < 3:
        raise ContractError("profiling needs at least 3 runs")
    if x is None:
        raise ContractError("wall-clock profiling needs an input sample")

    def worst(fn) -> float:
        samples = []
        for _ in range(runs):
            t0 = clock()
            fn()
            samples.append((clock() - t0) * 1e3)
        w = max(samples)
        if w <= 0.0:
            raise ProfilingError("measured zero duration; clock resolution too coarse")
        return w * margin

    c_dt = {i: worst(lambda: strategy.probe_detect(i)) for i in ids}
    c_in = {i: worst(lambda: forward(models[i], x)) for i in ids}
    rec = worst(strategy.probe_recover_layer) if strategy.probe_recover_layer() else None
    return CostProfile(c_dt, c_in, rec, margin)


# ------------------------------------------------------------ accuracy table

class AccuracyTable:
    def __init__(self, acc: Mapping[frozenset, float]):
        self.acc = {frozenset(k): float(v) for k, v in acc.items()}

    def __getitem__(self, subset: Iterable[int]) -> float:
        key = frozenset(subset)
        if key not in self.acc:
            raise ContractError(f"accuracy table has no entry for {sorted(key)}")
        return self.acc[key]

    def __contains__(self, subset) -> bool:
        return frozenset(subset) in self.acc

    def items(self):
        return sorted(self.acc.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))


def build_accuracy_table(models: Sequence[ModelParams], validation: Dataset) -> AccuracyTable:
    acc = {}
    for r in range(1, len(models) + 1):
        for ids in itertools.combinations(range(len(models)), r):
            acc[frozenset(ids)] = evaluate([models[i] for i in ids], validation)
    return AccuracyTable(acc)


# --------------------------------------------------------------- selection

@dataclass(frozen=True)
class Selection:
    running: tuple[int, ...]
    waiting: tuple[int, ...]
    chosen: tuple[int, ...]  # in the order they were added
    feasible: bool
    accuracy: float
    cost: float

    @property
    def models(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.running) | set(self.chosen)))


def _key(acc: float, cost: float, ids: Sequence[int]):
    return (-acc, cost, tuple(sorted(ids)))


def _complete(I, chosen, cost, J, tau, costs, table):
    """Ratio-greedy completion: best gain per unit cost among strict improvements that fit."""
    chosen, cost = list(chosen), cost
    while True:
        cur = table[set(I) | set(chosen)]
        best = None
        for j in J:
            if j in chosen:
                continue
            c = costs.cost(j)
            if cost + c > tau:
                continue
            gain = table[set(I) | set(chosen) | {j}] - cur
            if gain <= 0:
                continue
            ratio = math.inf if c == 0 else gain / c
            k = (-ratio, j)
            if best is None or k < best[0]:
                best = (k, j, c)
        if best is None:
            return chosen, cost
        chosen.append(best[1])
        cost += best[2]


def _chain_ok(I, order, tau, costs, table) -> float | None:
    """Total cost if adding ``order`` one by one always fits and strictly improves."""
    cost, cur, sel = 0.0, table[I], set(I)
    for j in order:
        cost += costs.cost(j)
        nxt = table[sel | {j}]
        if cost > tau or not nxt > cur:
            return None
        sel.add(j)
        cur = nxt
    return cost


def select_models(I: Sequence[int], J: Sequence[int], tau: float, costs: CostProfile,
                  table: AccuracyTable, a_th: float) -> Selection:
    """Pick additions from ``J`` under the time budget ``tau``.

    Every addition must fit the remaining budget and strictly raise the table
    accuracy. Greedy by gain per unit cost, started from every feasible
    ordered anchor of up to two models so that small instances reach the
    exhaustive optimum; the best result by (accuracy, -cost, ids) wins.
    """
    I, J = tuple(sorted(I)), tuple(sorted(set(J) - set(I)))
    if not I and not J:
        raise ContractError("no models to select from")
    if not I:
        raise ContractError("the running set must not be empty")
    best = None
    for r in range(0, min(2, len(J)) + 1):
        for anchor in itertools.permutations(J, r):
            c = _chain_ok(I, anchor, tau, costs, table)
            if c is None:
                continue
            chosen, cost = _complete(I, anchor, c, J, tau, costs, table)
            acc = table[set(I) | set(chosen)]
            k = _key(acc, cost, chosen)
            if best is None or k < best[0]:
                best = (k, tuple(chosen), acc, cost)
    _, chosen, acc, cost = best
    return Selection(I, J, chosen, acc >= a_th, acc, cost)


def exhaustive_select(I, J, tau, costs, table, a_th) -> Selection:
    """Reference optimum: every ordered subset of ``J`` meeting the constraints."""
    I, J = tuple(sorted(I)), tuple(sorted(set(J) - set(I)))
    best = None
    for r in range(len(J) + 1):
        for order in itertools.permutations(J, r):
            c = _chain_ok(I, order, tau, costs, table)
            if c is None:
                continue
            acc = table[set(I) | set(order)]
            k = _key(acc, c, order)
            if best is None or k < best[0]:
                best = (k, order, acc, c)
    _, chosen, acc, cost = best
    return Selection(I, J, chosen, acc >= a_th, acc, cost)


# ------------------------------------------------------------------ config

@dataclass
class SimConfig:
    strategy: str = "guard"
    frame_period_ms: float = 250.0
    deadline_ms: float | None = None  # None: virtual TMR worst case
    n_frames: int = 50
    fault_frames: tuple[int, ...] | None = None  # None: n_fault_events seeded frames
    n_fault_events: int = 5
    fault_ber: float = HIGH_BER
    fault_mode: str = "fixed"
    fault_groups: tuple[str, ...] = ()  # injection selector per event; drawn at random when empty
    a_threshold: float = 0.0
    seed: int = 0
    eval_mode: str = "table"  # or "real": evaluate current parameters every frame
    compare_pass_ms: float = VirtualCosts.compare_pass
    checksum_pass_ms: float = VirtualCosts.checksum_pass
    inference_ms: float = VirtualCosts.inference
    vote_layer_ms: float = VirtualCosts.vote_layer
    copy_layer_ms: float = VirtualCosts.copy_layer
    recover_layer_ms: float = VirtualCosts.recover_layer
    disk_latency_ms: float = VirtualCosts.disk_latency_per_layer
    # optional model and data files; the built-in scenario is trained otherwise
    base_model: str | None = None
    redundant_models: tuple[str, ...] = ()
    eft_models: tuple[str, ...] = ()
    val_data: str | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"strategy: unknown {self.strategy!r}, expected one of {STRATEGY_NAMES}")
        if not self.frame_period_ms > 0:
            raise ConfigError("frame_period_ms must be > 0")
        if self.deadline_ms is not None and not self.deadline_ms > 0:
            raise ConfigError("deadline_ms must be > 0")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.fault_frames is not None:
            self.fault_frames = tuple(int(f) for f in self.fault_frames)
            if any(not 0 <= f < self.n_frames for f in self.fault_frames):
                raise ConfigError(f"fault_frames must lie in [0, {self.n_frames})")
        elif not 0 <= self.n_fault_events < self.n_frames:
            raise ConfigError("n_fault_events must be in [0, n_frames)")
        self.fault_groups = tuple(self.fault_groups)
        n_events = len(self.fault_frames) if self.fault_frames is not None else self.n_fault_events
        if self.fault_groups and len(self.fault_groups) != n_events:
            raise ConfigError(f"fault_groups lists {len(self.fault_groups)} groups for {n_events} events")
        if not 0.0 <= self.a_threshold <= 1.0:
            raise ConfigError("a_threshold must be in [0, 1]")
        if self.eval_mode not in ("table", "real"):
            raise ConfigError("eval_mode must be 'table' or 'real'")
        for f in ("compare_pass_ms", "checksum_pass_ms", "inference_ms", "vote_layer_ms", "copy_layer_ms",
                  "recover_layer_ms", "disk_latency_ms"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be > 0")
        InjectionConfig(self.fault_ber, self.seed, self.fault_mode)  # validates ber and mode

    @property
    def virtual_costs(self) -> VirtualCosts:
        return VirtualCosts(self.compare_pass_ms, self.checksum_pass_ms, self.inference_ms, self.vote_layer_ms,
                            self.copy_layer_ms, self.recover_layer_ms, self.disk_latency_ms)

    def schedule(self) -> list[tuple[int, int, int]]:
        """(frame, group draw, injection seed) per fault event, same for every strategy.

        Events keep their listed order, so ``fault_groups[i]`` belongs to event i.
        """
        rng = np.random.default_rng(self.seed)
        if self.fault_frames is not None:
            frames = list(self.fault_frames)
        else:
            frames = sorted(int(f) for f in rng.choice(np.arange(1, self.n_frames), self.n_fault_events,
                                                       replace=False))
        return [(f, int(rng.integers(2**31)), int(rng.integers(2**63))) for f in frames]

    def event_group(self, i: int, draw: int, groups: Sequence[str]) -> str:
        return self.fault_groups[i] if self.fault_groups else groups[draw % len(groups)]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or v == ():
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_TUPLE_KEYS = {"fault_frames": int, "fault_groups": str, "redundant_models": str, "eft_models": str}


def parse_sim_config(text: str, **overrides) -> SimConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(SimConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, val, types[key])
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    values.update(overrides)
    return SimConfig(**values)


def _convert(key: str, val: str, typ: str):
    if key in _TUPLE_KEYS:
        conv = _TUPLE_KEYS[key]
        return tuple(conv(v.strip()) for v in val.split(",") if v.strip())
    if val.lower() in ("", "none"):
        return None
    if typ.startswith("int"):
        return int(val)
    if typ.startswith("float"):
        return float(val)
    return val


def load_sim_config(path, **overrides) -> SimConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_sim_config(p.read_text(), **overrides)


# ---------------------------------------------------------------- scenario

@dataclass
class Scenario:
    """Trained models and the validation split a simulation runs on."""

    models: list[ModelParams]  # base first, then redundant models
    eft_members: list[ModelParams]
    validation: Dataset

    @property
    def n_classes(self) -> int:
        return self.validation.n_classes


DEFAULT_HIDDEN = 64
EFT_WIDTHS = (16, 32, 64)


def default_scenario(seed: int = 0, epochs: int = 30) -> Scenario:
    data = gen_synthetic(seed, 3000, 16, 10, 1.4)
    train, val = data.split(2000)

    def fit(width, s):
        spec = NetworkSpec((16, width, width, width, 10))
        return train_independent(spec, train, TrainConfig(seed=s, epochs=epochs))

    models = [fit(DEFAULT_HIDDEN, 1000 + seed), fit(DEFAULT_HIDDEN, 2000 + seed)]
    eft = [fit(w, 3000 + 10 * seed + i) for i, w in enumerate(EFT_WIDTHS)]
    return Scenario(models, eft, val)


def scenario_from_config(cfg: SimConfig) -> Scenario:
    if cfg.base_model is None:
        return default_scenario(cfg.seed)
    if not cfg.redundant_models or cfg.val_data is None:
        raise ConfigError("base_model needs redundant_models and val_data as well")
    for p in (cfg.base_model, *cfg.redundant_models, *cfg.eft_models, cfg.val_data):
        if not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")
    models = [load_model(cfg.base_model)] + [load_model(p) for p in cfg.redundant_models]
    eft = [load_model(p) for p in cfg.eft_models] or models
    val = load_csv(cfg.val_data, n_classes=NetworkSpec.of(models[0]).n_classes)
    return Scenario(models, eft, val)


# -------------------------------------------------------------------- trace

@dataclass
class FrameRecord:
    frame: int
    arrival_t: float
    output_t: float | None
    deadline_met: bool
    models_used: list[int]
    accuracy_proxy: float
    events: list[dict] = field(default_factory=list)


@dataclass
class SimTrace:
    strategy: str
    deadline_ms: float
    frames: list[FrameRecord]
    recovery_latencies: list[float]
    unrecovered_events: int = 0
    recovers: bool = True  # False for strategies without any recovery

    @property
    def deadline_met_pct(self) -> float:
        return 100.0 * sum(f.deadline_met for f in self.frames) / len(self.frames)

    @property
    def mean_accuracy_proxy(self) -> float:
        return float(np.mean([f.accuracy_proxy for f in self.frames]))

    @property
    def max_recovery_ms(self) -> float:
        if not self.recovers:
            return math.nan
        if self.unrecovered_events:
            return math.inf
        return max(self.recovery_latencies, default=0.0)

    def accuracy_curve(self) -> list[float]:
        return [f.accuracy_proxy for f in self.frames]

    def jsonl(self) -> str:
        return "".join(json.dumps(asdict(f), sort_keys=True) + "\n" for f in self.frames)

    SUMMARY_HEADER = ("strategy", "deadline_met_pct", "mean_acc_proxy", "max_recovery_ms")

    def summary_row(self) -> list:
        return [self.strategy, f"{self.deadline_met_pct:.1f}", f"{self.mean_accuracy_proxy:.6f}",
                f"{self.max_recovery_ms:.3f}"]

    def summary_csv(self) -> str:
        return write_csv([self.SUMMARY_HEADER, self.summary_row()])

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"sim_{self.strategy}"
        trace, summary = out / f"{stem}.trace.jsonl", out / f"{stem}.summary.csv"
        trace.write_text(self.jsonl())
        summary.write_text(self.summary_csv())
        return trace, summary


def write_csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# --------------------------------------------------------------- simulator

VERIFIED = ("guard", "tmr", "dro", "cbr")


class _Sim:
    def __init__(self, cfg: SimConfig, sc: Scenario, table: AccuracyTable | None):
        self.cfg = cfg
        self.sc = sc
        models = sc.eft_members if cfg.strategy == "eft" else sc.models
        self.strategy = make_strategy(cfg.strategy, models)
        self.vc = cfg.virtual_costs
        ref = sc.models[0].n_params
        self.costs = virtual_profile(self.strategy, self.vc, ref)
        self.L = sc.models[0].n_layers
        self.deadline = cfg.deadline_ms if cfg.deadline_ms is not None else tmr_wcet(self.vc, self.L)
        self.table = table if table is not None else build_accuracy_table(sc.models, sc.validation)
        self.floor = 1.0 / sc.n_classes
        self.x = sc.validation.features[0]
        self._real_acc = None
        self.fault_start = None
        self.latencies: list[float] = []

    # cost of pass counters in virtual ms
    def detection_cost(self, comps: int, chks: int) -> float:
        return (comps * self.vc.compare_pass + chks * self.vc.checksum_pass) / self.L

    def accuracy(self, used: Sequence[int]) -> float:
        if self.cfg.eval_mode == "real" or self.cfg.strategy not in VERIFIED:
            if self._real_acc is None:
                self._real_acc = evaluate(self.strategy.serving_models(), self.sc.validation)
            return self._real_acc
        if self.cfg.strategy == "guard":
            return self.table[used]
        return self.table[{0}]

    def apply_faults(self, events, t, log):
        for group, inj_seed in events:
            cfg = InjectionConfig(self.cfg.fault_ber, inj_seed, self.cfg.fault_mode, (group,))
            ev = inject(self.strategy.stores(), cfg, time=t)
            log.append({"kind": "fault", "t": t, "group": group, "flips": len(ev.locations)})
            self._real_acc = None

    def mark_detected(self, t: float):
        if self.fault_start is None:
            self.fault_start = t

    def mark_healthy(self, t: float):
        if self.fault_start is not None:
            self.latencies.append(t - self.fault_start)
            self.fault_start = None

    def frame_generic(self, arrival, log):
        s = self.strategy
        res = s.step(self.x)
        t = arrival + self.detection_cost(res.comparison_passes, res.checksum_passes)
        if res.faulty_layers:
            self.mark_detected(t)
            log.append({"kind": "detect", "t": t, "layers": res.faulty_layers})
        if res.repaired_layers:
            t += res.repaired_layers * self.costs.c_rec_layer
            log.append({"kind": "repair", "t": t, "layers": res.repaired_layers})
            self._real_acc = None
        if res.faulty_layers and not res.unrecoverable:
            self.mark_healthy(t)
        if res.scores is None:
            return None, []
        t += sum(self.costs.c_in[i] for i in res.models_used)
        return t, list(res.models_used)

    def recover_chunk(self, t_from: float, budget_ms: float, log) -> float:
        s = self.strategy
        if s.pending_layers() == 0 or budget_ms < self.costs.c_rec_layer:
            return t_from
        layers = int(budget_ms // self.costs.c_rec_layer)
        lost = set(s.lost)
        p = s.recover(layers)
        t = t_from + p.layers_recovered * self.costs.c_rec_layer
        log.append({"kind": "recover", "t_start": t_from, "t_end": t, "layers": p.layers_recovered,
                    "remaining": p.remaining})
        for m in sorted(s.lost - lost):
            log.append({"kind": "unrecoverable", "t": t, "model": m})
        if p.remaining == 0 and not s.lost:
            self.mark_healthy(t)
        return t

    def frame_guard(self, arrival, log):
        s: GuardStrategy = self.strategy
        g = s.g
        before = g.counters.snapshot()
        rep = g.detect_all()
        comps, chks = s._delta(before)
        t = arrival + self.detection_cost(comps, chks)
        if rep.faults:
            self.mark_detected(t)
            log.append({"kind": "detect", "t": t, "layers": sorted({v.layer for v in rep.faults})})
        end = arrival + self.deadline

        sel_costs = CostProfile({i: 0.0 for i in self.costs.c_in}, self.costs.c_in)
        sel = self._select(t, end, sel_costs)
        if sel is None or not sel.feasible:
            # nothing healthy, or quality below threshold: recover before inferring
            budget = end - t - min(self.costs.c_in.values())
            t = self.recover_chunk(t, budget, log)
            sel = self._select(t, end, sel_costs)
        if sel is None:
            return None, []
        used = list(sel.models)
        t += sum(self.costs.c_in[i] for i in used)
        return t, used

    def _select(self, t, end, sel_costs):
        healthy = [i for i, a in enumerate(self.strategy.g.model_active) if a]
        if not healthy:
            return None
        I, J = healthy[:1], healthy[1:]
        tau = end - t - self.costs.c_in[I[0]]
        return select_models(I, J, tau, sel_costs, self.table, self.cfg.a_threshold)

    def run(self) -> SimTrace:
        cfg = self.cfg
        by_frame: dict[int, list] = {}
        groups = self.strategy.store_groups()
        for i, (f, draw, inj_seed) in enumerate(cfg.schedule()):
            by_frame.setdefault(f, []).append((cfg.event_group(i, draw, groups), inj_seed))
        records = []
        for k in range(cfg.n_frames):
            arrival = k * cfg.frame_period_ms
            log: list[dict] = []
            self.apply_faults(by_frame.get(k, []), arrival, log)
            if cfg.strategy == "guard":
                out_t, used = self.frame_guard(arrival, log)
            else:
                out_t, used = self.frame_generic(arrival, log)
            met = out_t is not None and out_t <= arrival + self.deadline
            acc = self.accuracy(used) if met else self.floor
            if cfg.strategy == "guard":
                nxt = (k + 1) * cfg.frame_period_ms
                start = out_t if out_t is not None else arrival + self.deadline
                self.recover_chunk(start, nxt - start, log)
            records.append(FrameRecord(k, arrival, out_t, met, used, acc, log))
        unrecovered = int(self.fault_start is not None)
        return SimTrace(cfg.strategy, self.deadline, records, self.latencies, unrecovered,
                        self.costs.c_rec_layer is not None)


def run_sim(cfg: SimConfig, scenario: Scenario | None = None, table: AccuracyTable | None = None) -> SimTrace:
    """Simulate ``cfg.n_frames`` frames; fully determined by ``cfg`` and the scenario."""
    sc = scenario if scenario is not None else scenario_from_config(cfg)
    return _Sim(cfg, sc, table).run()
