"""Protection strategies behind one interface.

Every strategy owns its parameter copies, exposes them as injectable stores,
runs detection and inference in ``step`` and reports pass counters so the
simulator and the benchmark can charge costs uniformly.

``tmr``          three copies, two comparisons per layer, inline majority repair
``dro``          three copies, two comparisons per layer, whole-layer copy repair
``cbr``          one copy, per-layer checksum, reload the layer from a file
``eft``          fixed heterogeneous ensemble, no detection or recovery
``unprotected``  one copy, nothing else
``guard``        relation-tensor ensemble protection (see ``guard``)
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError, UnrecoverableError
from .guard import Counters, GuardedEnsemble, RecoveryProgress, Verdict, relation_holds, relation_inverse
from .nn import combine_scores, forward, layer_forward
from .params import LayerParams, ModelParams, layer_checksum, load_model, save_model, words

CHECKSUM_BYTES = 16  # u64 int_sum + f64 value_sum


@dataclass(frozen=True)
class MemoryReport:
    strategy: str
    base_bytes: int
    redundancy_bytes: int
    metadata_bytes: int

    @property
    def overhead_percent(self) -> float:
        return 100.0 * (self.redundancy_bytes + self.metadata_bytes) / self.base_bytes

    @property
    def redundancy_percent(self) -> float:
        return 100.0 * self.redundancy_bytes / self.base_bytes

    @property
    def metadata_percent(self) -> float:
        return 100.0 * self.metadata_bytes / self.base_bytes

    CSV_HEADER = ("strategy", "base_bytes", "redundancy_bytes", "metadata_bytes", "overhead_percent")

    def csv_row(self) -> list:
        return [self.strategy, self.base_bytes, self.redundancy_bytes, self.metadata_bytes,
                f"{self.overhead_percent:.3f}"]


@dataclass
class StepResult:
    scores: np.ndarray | None
    models_used: tuple[int, ...]
    faulty_layers: list[int]
    repaired_layers: int = 0
    comparison_passes: int = 0
    checksum_passes: int = 0
    unrecoverable: bool = False
    report: object = None  # FaultReport for the guard


def _model_stores(prefix: str, m: ModelParams) -> dict[str, np.ndarray]:
    return {f"{prefix}/{n}/{part}": t for n, part, t in m.tensors()}


def _copy_layer(dst: LayerParams, src: LayerParams):
    np.copyto(dst.weights, src.weights)
    np.copyto(dst.bias, src.bias)


def _layers_equal(a: LayerParams, b: LayerParams) -> bool:
    return all(kernels.first_mismatch(words(x), words(y)) < 0 for (_, x), (_, y) in zip(a.parts(), b.parts()))


class ProtectionStrategy:
    name = "abstract"

    def __init__(self):
        self.counters = Counters()

    # subclasses fill these in
    @property
    def n_layers(self) -> int:
        raise NotImplementedError

    def stores(self, include_metadata: bool = False) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def store_groups(self) -> list[str]:
        """Injection selectors, one per independently stored copy."""
        raise NotImplementedError

    def serving_models(self) -> list[ModelParams]:
        """Current parameters of the models whose outputs are averaged."""
        raise NotImplementedError

    def step(self, x) -> StepResult:
        raise NotImplementedError

    def recover(self, layer_budget: int) -> RecoveryProgress:
        return RecoveryProgress(0, 0)

    def pending_layers(self) -> int:
        return 0

    def memory_report(self) -> MemoryReport:
        raise NotImplementedError

    # Profiling hooks: the work of fault-free detection for model ``m`` and
    # of recovering one layer, done on scratch buffers so no state changes.
    def probe_detect(self, m: int) -> None:
        pass

    def probe_recover_layer(self) -> bool:
        """Return False when the strategy has no recovery to time."""
        return False

    def _delta(self, before: tuple[int, int]) -> tuple[int, int]:
        c, s = self.counters.snapshot()
        return c - before[0], s - before[1]


class _Replicated(ProtectionStrategy):
    """Three bit-identical copies; copy 0 serves inference."""

    def __init__(self, model: ModelParams):
        super().__init__()
        self.copies = [model.copy() for _ in range(3)]

    @property
    def n_layers(self) -> int:
        return self.copies[0].n_layers

    def stores(self, include_metadata=False):
        out = {}
        for i, c in enumerate(self.copies):
            out.update(_model_stores(f"copy{i}", c))
        return out

    def store_groups(self):
        return [f"copy{i}" for i in range(3)]

    def serving_models(self):
        return [self.copies[0]]

    def memory_report(self):
        nb = self.copies[0].nbytes
        return MemoryReport(self.name, nb, 2 * nb, 0)

    def _repair_layer(self, n: int, eq01: bool, eq02: bool) -> bool:
        raise NotImplementedError

    def probe_detect(self, m):
        for c0, c1, c2 in zip(*(c.layers for c in self.copies)):
            _layers_equal(c0, c1)
            _layers_equal(c0, c2)

    def step(self, x) -> StepResult:
        before = self.counters.snapshot()
        h = np.asarray(x, dtype=np.float32)
        faulty, repaired, bad = [], 0, False
        last = self.n_layers - 1
        for n in range(self.n_layers):
            c0, c1, c2 = (c.layers[n] for c in self.copies)
            self.counters.comparison_passes += 2
            eq01, eq02 = _layers_equal(c0, c1), _layers_equal(c0, c2)
            if not (eq01 and eq02):
                faulty.append(n)
                if self._repair_layer(n, eq01, eq02):
                    repaired += 1
                else:
                    bad = True
            if not bad:
                h = layer_forward(self.copies[0].layers[n], h, n == last)
        comps, chks = self._delta(before)
        if bad:
            return StepResult(None, (), faulty, repaired, comps, chks, unrecoverable=True)
        return StepResult(h, (0,), faulty, repaired, comps, chks)


class TMRStrategy(_Replicated):
    name = "tmr"

    def _repair_layer(self, n: int, eq01: bool, eq02: bool) -> bool:
        # element-wise vote; a conflicted part is left untouched
        c = [cp.layers[n] for cp in self.copies]
        for part in ("weights", "bias"):
            ws = [words(getattr(l, part)) for l in c]
            _, conflict = kernels.majority_repair(*ws)
            if conflict >= 0:
                return False
        return True

    def probe_recover_layer(self):
        layer = self.copies[0].layers[0]
        for _, t in layer.parts():
            w = words(t)
            kernels.majority_repair(w.copy(), w.copy(), w.copy())
        return True


class DROStrategy(_Replicated):
    name = "dro"

    def _repair_layer(self, n: int, eq01: bool, eq02: bool) -> bool:
        c0, c1, c2 = (cp.layers[n] for cp in self.copies)
        if eq01:
            _copy_layer(c2, c0)
        elif eq02:
            _copy_layer(c1, c0)
        else:
            self.counters.comparison_passes += 1
            if not _layers_equal(c1, c2):
                return False
            _copy_layer(c0, c1)
        return True

    def probe_recover_layer(self):
        _copy_layer(self.copies[0].layers[0].copy(), self.copies[1].layers[0])
        return True


class CBRStrategy(ProtectionStrategy):
    """Checksum detection with layer reload from a healthy copy on disk."""

    name = "cbr"

    def __init__(self, model: ModelParams, disk_path=None):
        super().__init__()
        self.model = model.copy()
        if disk_path is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="ensguard-cbr-")
            disk_path = Path(self._tmp.name) / "model.napm"
        self.disk_path = Path(disk_path)
        save_model(self.model, self.disk_path)
        self.sums = [layer_checksum(l).int_sum for l in self.model.layers]

    @property
    def n_layers(self):
        return self.model.n_layers

    def stores(self, include_metadata=False):
        return _model_stores("model", self.model)

    def store_groups(self):
        return ["model"]

    def serving_models(self):
        return [self.model]

    def memory_report(self):
        return MemoryReport(self.name, self.model.nbytes, 0, CHECKSUM_BYTES * self.n_layers)

    def probe_detect(self, m):
        for layer in self.model.layers:
            layer_checksum(layer)

    def probe_recover_layer(self):
        load_model(self.disk_path)
        return True

    def step(self, x) -> StepResult:
        before = self.counters.snapshot()
        h = np.asarray(x, dtype=np.float32)
        faulty, disk = [], None
        last = self.n_layers - 1
        for n, layer in enumerate(self.model.layers):
            self.counters.checksum_passes += 1
            if layer_checksum(layer).int_sum != self.sums[n]:
                faulty.append(n)
                if disk is None:
                    disk = load_model(self.disk_path)
                _copy_layer(layer, disk.layers[n])
            h = layer_forward(layer, h, n == last)
        comps, chks = self._delta(before)
        return StepResult(h, (0,), faulty, len(faulty), comps, chks)


class EFTStrategy(ProtectionStrategy):
    """Fixed ensemble of heterogeneous members; faults go unnoticed."""

    name = "eft"

    def __init__(self, members: Sequence[ModelParams]):
        super().__init__()
        if len(members) < 2:
            raise ContractError("a fixed ensemble needs at least two members")
        self.members = [m.copy() for m in members]

    @property
    def n_layers(self):
        return max(m.n_layers for m in self.members)

    def stores(self, include_metadata=False):
        out = {}
        for i, m in enumerate(self.members):
            out.update(_model_stores(f"m{i}", m))
        return out

    def store_groups(self):
        return [f"m{i}" for i in range(len(self.members))]

    def serving_models(self):
        return self.members

    def memory_report(self):
        base = self.members[0].nbytes
        return MemoryReport(self.name, base, sum(m.nbytes for m in self.members[1:]), 0)

    def step(self, x) -> StepResult:
        scores = combine_scores([forward(m, x) for m in self.members])
        return StepResult(scores, tuple(range(len(self.members))), [])


class UnprotectedStrategy(ProtectionStrategy):
    name = "unprotected"

    def __init__(self, model: ModelParams):
        super().__init__()
        self.model = model.copy()

    @property
    def n_layers(self):
        return self.model.n_layers

    def stores(self, include_metadata=False):
        return _model_stores("model", self.model)

    def store_groups(self):
        return ["model"]

    def serving_models(self):
        return [self.model]

    def memory_report(self):
        return MemoryReport(self.name, self.model.nbytes, 0, 0)

    def step(self, x) -> StepResult:
        return StepResult(forward(self.model, x), (0,), [])


class GuardStrategy(ProtectionStrategy):
    """Adapter over a ``GuardedEnsemble``."""

    name = "guard"

    def __init__(self, g: GuardedEnsemble):
        super().__init__()
        self.g = g
        self.counters = g.counters
        self.lost: set[int] = set()  # models whose recovery escalated

    @property
    def n_layers(self):
        return self.g.n_layers

    def stores(self, include_metadata=False):
        return self.g.stores(include_metadata)

    def store_groups(self):
        return ["base"] + [f"red{m}" for m in range(1, self.g.M + 1)] + [f"delta{m}" for m in range(1, self.g.M + 1)]

    def serving_models(self):
        return [self.g.models[i] for i, a in enumerate(self.g.model_active) if a]

    def memory_report(self):
        nb = self.g.base.nbytes
        metadata = CHECKSUM_BYTES * len(self.g._slots)
        # redundant models plus one relation tensor set per redundant model
        return MemoryReport(self.name, nb, 2 * self.g.M * nb, metadata)

    def probe_detect(self, m):
        g = self.g
        pair = max(m, 1)
        for n in range(g.n_layers):
            relation_holds(g.base.layers[n], g.models[pair].layers[n], g.deltas[pair - 1].layers[n], g.relation)

    def probe_recover_layer(self):
        g = self.g
        d, r = g.deltas[0].layers[0], g.redundants[0].layers[0]
        for s in ("base", "red1", "delta1"):
            layer_checksum(g.layer_of(s, 0))
        for part in ("weights", "bias"):
            relation_inverse(getattr(d, part), getattr(r, part), g.relation)
        return True

    def step(self, x, use: Sequence[int] | None = None) -> StepResult:
        before = self.counters.snapshot()
        scores, rep = self.g.guarded_inference(x, use)
        comps, chks = self._delta(before)
        faulty = sorted({v.layer for v in rep.faults})
        bad = any(v.result is Verdict.UNRECOVERABLE for v in rep.faults)
        return StepResult(scores, rep.models_used, faulty, 0, comps, chks, bad, rep)

    def recovery_order(self) -> list[int]:
        """Faulted models, fewest remaining faulted layers first."""
        todo = [(len(self.g.faulted_layers(i)), i) for i in range(len(self.g.models)) if i not in self.lost]
        return [i for k, i in sorted(todo) if k]

    def pending_layers(self) -> int:
        """Faulted layers still worth recovering (lost models excluded)."""
        return sum(len(self.g.faulted_layers(i)) for i in range(len(self.g.models)) if i not in self.lost)

    def recover(self, layer_budget: int) -> RecoveryProgress:
        done = 0
        for i in self.recovery_order():
            if done >= layer_budget:
                break
            before = len(self.g.faulted_layers(i))
            try:
                self.g.recover_model(i, layer_budget - done)
            except UnrecoverableError:
                self.lost.add(i)
            done += before - len(self.g.faulted_layers(i))
        return RecoveryProgress(done, self.pending_layers())


STRATEGY_NAMES = ("guard", "tmr", "dro", "cbr", "eft", "unprotected")


def make_strategy(name: str, models: Sequence[ModelParams], **kw) -> ProtectionStrategy:
    """Build a strategy from trained models.

    ``guard`` uses ``models[0]`` as base and the rest as redundant models;
    ``eft`` uses all of them as members; the others protect ``models[0]``.
    """
    if not models:
        raise ContractError("no models given")
    if name == "guard":
        return GuardStrategy(GuardedEnsemble(models[0].copy(), [m.copy() for m in models[1:]], **kw))
    if name == "tmr":
        return TMRStrategy(models[0])
    if name == "dro":
        return DROStrategy(models[0])
    if name == "cbr":
        return CBRStrategy(models[0], **kw)
    if name == "eft":
        return EFTStrategy(models)
    if name == "unprotected":
        return UnprotectedStrategy(models[0])
    raise ContractError(f"unknown strategy {name!r}, expected one of {STRATEGY_NAMES}")
