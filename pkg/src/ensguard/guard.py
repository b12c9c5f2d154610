"""Ensemble-redundancy protection: relation tensors, two-step detection, recovery.

A guard protects a base model and M redundant models of the same shape. For
every redundant model m and layer n it stores a relation tensor

    delta[m][n] = base[n] (+) red_m[n]

plus per-layer checksums of every store. Detection first re-checks the
relation (one pass over both models at once); only when that fails are the
two model checksums consulted to find the corrupted store. Recovery inverts
the relation for a model layer or recomputes it for a relation layer.

Relation arithmetic
-------------------
``relation="bits"`` (default) adds the 32-bit encodings modulo 2**32. It is
exactly invertible, so recovery is always bit-exact and every single-bit flip
changes the relation. ``relation="float"`` uses IEEE float32 addition; a flip
can then be absorbed by rounding (``audit`` still catches it) and inversion
is only exact when the sum did not round.

A store counts as intact when its recomputed checksum matches on both the
integer and the value sum (``checksum_field="both"``); ``"int"`` or
``"value"`` select one of them.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError, FormatError, UnrecoverableError
from .nn import combine_scores, layer_forward
from .params import (
    Checksum,
    LayerParams,
    ModelParams,
    _Reader,
    decode_layer,
    encode_layer,
    layer_checksum,
    tensor_add,
    tensor_sub,
    words,
)

NAPG_MAGIC = b"NAPG"
NAPG_VERSION = 1
RELATION_CODES = {"bits": 0, "float": 1}


class Status(enum.Enum):
    HEALTHY = "healthy"
    FAULTY = "faulty"
    RECOVERING = "recovering"


class Verdict(enum.Enum):
    HEALTHY = "healthy"
    FAULT_IN_BASE = "fault_in_base"
    FAULT_IN_REDUNDANT = "fault_in_redundant"
    FAULT_IN_DELTA = "fault_in_delta"
    UNRECOVERABLE = "unrecoverable"


class OutputMode(enum.Enum):
    FULL_ENSEMBLE = "full_ensemble"
    PARTIAL_ENSEMBLE = "partial_ensemble"
    SINGLE_MODEL = "single_model"
    NO_OUTPUT = "no_output"


@dataclass(frozen=True)
class LayerVerdict:
    layer: int
    result: Verdict
    redundant: int | None = None  # m of the pairing that produced the verdict
    stores: tuple[str, ...] = ()  # implicated stores, set for UNRECOVERABLE when known

    def halts(self) -> set[int]:
        """Model ids that may not be used for inference at this layer."""
        r = self.result
        if r is Verdict.FAULT_IN_BASE:
            return {0}
        if r in (Verdict.FAULT_IN_REDUNDANT, Verdict.FAULT_IN_DELTA):
            # a redundant model without an intact relation layer is unverifiable
            return {self.redundant}
        if r is Verdict.UNRECOVERABLE:
            if self.stores:
                return {0 if s == "base" else _model_of(s) for s in self.stores}
            return {0, self.redundant} if self.redundant is not None else {0}
        return set()

    def to_dict(self) -> dict:
        d = {"layer": self.layer, "result": self.result.value, "redundant": self.redundant}
        if self.stores:
            d["stores"] = list(self.stores)
        return d


@dataclass
class FaultReport:
    verdicts: list[LayerVerdict]
    models_halted: set[int]
    output_mode: OutputMode
    models_used: tuple[int, ...] = ()

    @property
    def faults(self) -> list[LayerVerdict]:
        return [v for v in self.verdicts if v.result is not Verdict.HEALTHY]

    def to_dict(self) -> dict:
        return {
            "verdicts": [v.to_dict() for v in self.faults],
            "models_halted": sorted(self.models_halted),
            "output_mode": self.output_mode.value,
            "models_used": list(self.models_used),
        }


@dataclass
class Counters:
    comparison_passes: int = 0
    checksum_passes: int = 0

    def snapshot(self) -> tuple[int, int]:
        return self.comparison_passes, self.checksum_passes


@dataclass(frozen=True)
class RecoveryProgress:
    layers_recovered: int
    remaining: int


def output_mode_for(used: Sequence[int], n_models: int) -> OutputMode:
    if not used:
        return OutputMode.NO_OUTPUT
    if len(used) == 1:
        return OutputMode.SINGLE_MODEL if n_models > 1 else OutputMode.FULL_ENSEMBLE
    if len(used) == n_models:
        return OutputMode.FULL_ENSEMBLE
    return OutputMode.PARTIAL_ENSEMBLE


# ------------------------------------------------------------ relation maths

def relation_tensor(a: np.ndarray, b: np.ndarray, relation: str) -> np.ndarray:
    if relation == "bits":
        return (words(a) + words(b)).view(np.float32).reshape(a.shape)
    return tensor_add(a, b)


def relation_inverse(d: np.ndarray, other: np.ndarray, relation: str) -> np.ndarray:
    if relation == "bits":
        return (words(d) - words(other)).view(np.float32).reshape(d.shape)
    return tensor_sub(d, other)


def relation_layer(a: LayerParams, b: LayerParams, relation: str) -> LayerParams:
    return LayerParams(relation_tensor(a.weights, b.weights, relation),
                       relation_tensor(a.bias, b.bias, relation))


def relation_holds(a: LayerParams, b: LayerParams, d: LayerParams, relation: str) -> bool:
    for (_, x), (_, y), (_, z) in zip(a.parts(), b.parts(), d.parts()):
        if relation == "bits":
            i = kernels.relation_mismatch_bits(words(x), words(y), words(z))
        else:
            i = kernels.relation_mismatch_float(words(x).view(np.float32), words(y).view(np.float32), words(z))
        if i >= 0:
            return False
    return True


def _store_name(kind: str, m: int) -> str:
    if kind == "model":
        return "base" if m == 0 else f"red{m}"
    return f"delta{m}"


class GuardedEnsemble:
    """Base model, redundant models, relation tensors, checksums and health state."""

    def __init__(self, base: ModelParams, redundants: Sequence[ModelParams],
                 relation: str = "bits", checksum_field: str = "both"):
        if not redundants:
            raise ContractError("a guard needs at least one redundant model")
        if relation not in RELATION_CODES:
            raise ContractError(f"unknown relation {relation!r}")
        if checksum_field not in ("int", "value", "both"):
            raise ContractError(f"unknown checksum field {checksum_field!r}")
        for r in redundants:
            if not base.same_shape(r):
                raise ContractError("all models of a guard must share one network shape")
        self.models: list[ModelParams] = [base, *redundants]
        self.relation = relation
        self.checksum_field = checksum_field
        self.counters = Counters()
        self._lock = threading.RLock()
        self.deltas: list[ModelParams] = [
            ModelParams([relation_layer(bl, rl, relation) for bl, rl in zip(base.layers, r.layers)])
            for r in redundants
        ]
        names = [self.store_name(i) for i in range(len(self.models))]
        names += [_store_name("delta", m) for m in range(1, self.M + 1)]
        self._slots = {(s, n): i for i, (s, n) in enumerate((s, n) for s in names for n in range(self.n_layers))}
        self._csum_int = np.zeros(len(self._slots), dtype=np.uint64)
        self._csum_val = np.zeros(len(self._slots), dtype=np.float64)
        for (s, n), i in self._slots.items():
            c = layer_checksum(self.layer_of(s, n))
            self._csum_int[i] = c.int_sum
            self._csum_val[i] = c.value_sum
        self.status = {key: Status.HEALTHY for key in self._slots}
        self.model_active = [True] * len(self.models)
        self.pending: dict[tuple[str, int], LayerVerdict] = {}

    # -------------------------------------------------------------- layout

    @property
    def base(self) -> ModelParams:
        return self.models[0]

    @property
    def redundants(self) -> list[ModelParams]:
        return self.models[1:]

    @property
    def M(self) -> int:
        return len(self.models) - 1

    @property
    def n_layers(self) -> int:
        return self.base.n_layers

    @staticmethod
    def store_name(model_id: int) -> str:
        return _store_name("model", model_id)

    def layer_of(self, store: str, n: int) -> LayerParams:
        if store == "base":
            return self.models[0].layers[n]
        if store.startswith("red"):
            return self.models[int(store[3:])].layers[n]
        if store.startswith("delta"):
            return self.deltas[int(store[5:]) - 1].layers[n]
        raise ContractError(f"unknown store {store!r}")

    def stored_checksum(self, store: str, n: int) -> Checksum:
        i = self._slots[(store, n)]
        return Checksum(int(self._csum_int[i]), float(self._csum_val[i]))

    def stores(self, include_metadata: bool = False) -> dict[str, np.ndarray]:
        """Every injectable 32-bit array keyed ``store/layer/part``."""
        out = {}
        for s, n in self._slots:
            for part, t in self.layer_of(s, n).parts():
                out[f"{s}/{n}/{part}"] = t
        if include_metadata:
            out["meta/checksums"] = self._csum_int.view(np.uint32)
        return out

    # ----------------------------------------------------------- detection

    def verify_store(self, store: str, n: int) -> bool:
        self.counters.checksum_passes += 1
        c = layer_checksum(self.layer_of(store, n))
        ref = self.stored_checksum(store, n)
        int_ok = c.int_sum == ref.int_sum
        if self.checksum_field == "int":
            return int_ok
        value_ok = struct.pack("<d", c.value_sum) == struct.pack("<d", ref.value_sum)
        if self.checksum_field == "value":
            return value_ok
        # flips of the same bit in opposite directions cancel in int_sum alone
        return int_ok and value_ok

    def detect_layer(self, m: int, n: int) -> LayerVerdict:
        """Two-step check of the (base, red_m, delta_m) triple at layer ``n``."""
        if not 1 <= m <= self.M or not 0 <= n < self.n_layers:
            raise ContractError(f"no pairing m={m} layer={n}")
        self.counters.comparison_passes += 1
        if relation_holds(self.base.layers[n], self.models[m].layers[n], self.deltas[m - 1].layers[n],
                          self.relation):
            return LayerVerdict(n, Verdict.HEALTHY, m)
        base_ok = self.verify_store("base", n)
        red_ok = self.verify_store(self.store_name(m), n)
        if base_ok and red_ok:
            return LayerVerdict(n, Verdict.FAULT_IN_DELTA, m)
        if red_ok:
            return LayerVerdict(n, Verdict.FAULT_IN_BASE, m)
        if base_ok:
            return LayerVerdict(n, Verdict.FAULT_IN_REDUNDANT, m)
        return LayerVerdict(n, Verdict.UNRECOVERABLE, m, ("base", self.store_name(m)))

    def _triple(self, m: int) -> tuple[str, str, str]:
        return "base", self.store_name(m), _store_name("delta", m)

    def _check_pairing(self, m: int, n: int) -> tuple[LayerVerdict, list[str] | None]:
        """detect_layer when the triple is healthy; otherwise checksum the healthy stores.

        Also returns the stores newly found bad (None means all implicated).
        """
        triple = self._triple(m)
        with self._lock:
            known_bad = [s for s in triple if self.status[(s, n)] is not Status.HEALTHY]
        if not known_bad:
            return self.detect_layer(m, n), None
        fresh = [s for s in triple if s not in known_bad and not self.verify_store(s, n)]
        bad = [s for s in triple if s in known_bad or s in fresh]
        # known faults are reported again until recovered
        if len(bad) >= 2:
            return LayerVerdict(n, Verdict.UNRECOVERABLE, m, tuple(bad)), fresh
        return LayerVerdict(n, _VERDICT_FOR_STORE[triple.index(bad[0])], m), fresh

    def _mark(self, v: LayerVerdict, only: list[str] | None = None) -> set[int]:
        """Record ``v`` and return the models it halts.

        With ``only``, status changes are limited to those stores: a re-reported
        fault may have been recovered concurrently and must not be re-marked.
        """
        if v.result is Verdict.HEALTHY:
            return set()
        base, red, delta = self._triple(v.redundant) if v.redundant is not None else ("base", None, None)
        with self._lock:
            if v.result is Verdict.FAULT_IN_BASE:
                bad = [base]
            elif v.result is Verdict.FAULT_IN_REDUNDANT:
                bad = [red]
            elif v.result is Verdict.FAULT_IN_DELTA:
                bad = [delta]
            elif v.stores:
                bad = list(v.stores)
            else:
                bad = [s for s in (base, red, delta)
                       if s is not None and (self.status[(s, v.layer)] is not Status.HEALTHY
                                             or s in (base, red))]
            if only is not None:
                bad = [s for s in bad if s in only]
            for s in bad:
                self.status[(s, v.layer)] = Status.FAULTY
                prev = self.pending.get((s, v.layer))
                if prev is None or v.result is Verdict.UNRECOVERABLE:
                    self.pending[(s, v.layer)] = v
            halted = v.halts()
            if bad:
                for mid in halted:
                    self.model_active[mid] = False
        return halted

    def _report(self, verdicts, halted, used) -> FaultReport:
        return FaultReport(verdicts, halted, output_mode_for(used, len(self.models)), tuple(used))

    def detect_all(self) -> FaultReport:
        """Run the detection sweep over every layer and pairing without inference."""
        verdicts, halted = [], set()
        for n in range(self.n_layers):
            for m in range(1, self.M + 1):
                v, fresh = self._check_pairing(m, n)
                verdicts.append(v)
                halted |= self._mark(v, fresh)
        used = [i for i, a in enumerate(self.model_active) if a]
        return self._report(verdicts, halted, used)

    def guarded_inference(self, x, use: Sequence[int] | None = None):
        """Layer-interleaved detection and inference.

        Returns ``(scores, report)``; ``scores`` is None when no model survives.
        ``use`` restricts which healthy models compute (detection still covers
        every pairing).
        """
        with self._lock:
            running = [i for i, a in enumerate(self.model_active) if a]
        if use is not None:
            running = [i for i in running if i in set(use)]
        h = {i: np.asarray(x, dtype=np.float32) for i in running}
        verdicts, halted = [], set()
        last = self.n_layers - 1
        for n in range(self.n_layers):
            for m in range(1, self.M + 1):
                v, fresh = self._check_pairing(m, n)
                verdicts.append(v)
                halted |= self._mark(v, fresh)
            for i in list(h):
                if i in halted:
                    del h[i]  # partial activations are discarded
                else:
                    h[i] = layer_forward(self.models[i].layers[n], h[i], n == last)
        used = sorted(h)
        scores = combine_scores([h[i] for i in used]) if used else None
        return scores, self._report(verdicts, halted, used)

    def audit(self) -> FaultReport:
        """Checksum every store independently of the relation."""
        verdicts, halted = [], set()
        for n in range(self.n_layers):
            base_bad = False
            with self._lock:
                base_known = self.status[("base", n)] is not Status.HEALTHY
            if not base_known:
                base_bad = not self.verify_store("base", n)
            for m in range(1, self.M + 1):
                triple = self._triple(m)
                bad = []
                for s in triple[1:]:
                    with self._lock:
                        known = self.status[(s, n)] is not Status.HEALTHY
                    if known or not self.verify_store(s, n):
                        bad.append(s)
                if base_known or base_bad:
                    bad.insert(0, "base")
                if not bad:
                    v = LayerVerdict(n, Verdict.HEALTHY, m)
                elif len(bad) >= 2:
                    v = LayerVerdict(n, Verdict.UNRECOVERABLE, m, tuple(bad))
                else:
                    v = LayerVerdict(n, _VERDICT_FOR_STORE[triple.index(bad[0])], m)
                halted |= self._mark(v)
                verdicts.append(v)
        used = [i for i, a in enumerate(self.model_active) if a]
        return self._report(verdicts, halted, used)

    # ------------------------------------------------------------ recovery

    def faulted_layers(self, model_id: int) -> list[int]:
        if model_id == 0:
            stores = ["base"]
        else:
            stores = [self.store_name(model_id), _store_name("delta", model_id)]
        with self._lock:
            return sorted({n for s in stores for n in range(self.n_layers)
                           if self.status[(s, n)] is not Status.HEALTHY})

    def _donor_pairing(self, n: int, exclude: str) -> int | None:
        """First m whose stores (other than ``exclude``) are healthy at layer n."""
        for m in range(1, self.M + 1):
            triple = [s for s in self._triple(m) if s != exclude]
            with self._lock:
                if all(self.status[(s, n)] is Status.HEALTHY for s in triple):
                    return m
        return None

    def recover_layer(self, verdict: LayerVerdict) -> None:
        r, n = verdict.result, verdict.layer
        if r is Verdict.HEALTHY:
            return
        if r is Verdict.UNRECOVERABLE:
            raise UnrecoverableError(f"layer {n}: more than one store corrupted")
        if r is Verdict.FAULT_IN_BASE:
            target = "base"
            m = self._donor_pairing(n, "base")
            if m is None:
                self._escalate(verdict, "no intact pairing to restore the base layer")
        else:
            m = verdict.redundant
            target = self.store_name(m) if r is Verdict.FAULT_IN_REDUNDANT else _store_name("delta", m)
        base, red, delta = self._triple(m)
        with self._lock:
            if self.status[(target, n)] is Status.HEALTHY and self.verify_store(target, n):
                return
        for s in (base, red, delta):
            if s != target and not self.verify_store(s, n):
                self._escalate(LayerVerdict(n, Verdict.UNRECOVERABLE, m, (target, s)),
                               f"{s} layer {n} no longer matches its checksum")
        with self._lock:
            self.status[(target, n)] = Status.RECOVERING
        dst = self.layer_of(target, n)
        bl, rl, dl = (self.layer_of(s, n) for s in (base, red, delta))
        for part in ("weights", "bias"):
            b, rr, d = getattr(bl, part), getattr(rl, part), getattr(dl, part)
            if target == base:
                new = relation_inverse(d, rr, self.relation)
            elif target == red:
                new = relation_inverse(d, b, self.relation)
            else:
                new = relation_tensor(b, rr, self.relation)
            # in place: callers and injectors hold references to these arrays
            np.copyto(getattr(dst, part), new)
        if not self.verify_store(target, n):
            with self._lock:
                self.status[(target, n)] = Status.FAULTY
            raise UnrecoverableError(f"{target} layer {n}: recovered values do not match the checksum")
        with self._lock:
            self.status[(target, n)] = Status.HEALTHY
            self.pending.pop((target, n), None)
            self._refresh_active()

    def _escalate(self, verdict: LayerVerdict, why: str):
        self._mark(verdict)
        raise UnrecoverableError(f"layer {verdict.layer}: {why}")

    def _refresh_active(self):
        for i in range(len(self.models)):
            if not self.model_active[i] and not self.faulted_layers(i):
                self.model_active[i] = True

    def recover_model(self, model_id: int, layer_budget: int) -> RecoveryProgress:
        """Recover up to ``layer_budget`` faulted layers of one model, lowest first."""
        if layer_budget < 0:
            raise ContractError("layer budget must be >= 0")
        done = 0
        for n in self.faulted_layers(model_id)[:layer_budget]:
            stores = ["base"] if model_id == 0 else [self.store_name(model_id), _store_name("delta", model_id)]
            for s in stores:
                v = self.pending.get((s, n))
                if v is not None:
                    self.recover_layer(_retarget(v, s))
            done += 1
        remaining = len(self.faulted_layers(model_id))
        if remaining == 0:
            with self._lock:
                self.model_active[model_id] = True
        return RecoveryProgress(done, remaining)

    def fully_healthy(self) -> bool:
        return all(s is Status.HEALTHY for s in self.status.values()) and all(self.model_active)


_VERDICT_FOR_STORE = (Verdict.FAULT_IN_BASE, Verdict.FAULT_IN_REDUNDANT, Verdict.FAULT_IN_DELTA)


def _model_of(store: str) -> int:
    return int(store[3:]) if store.startswith("red") else int(store[5:])


def _retarget(v: LayerVerdict, store: str) -> LayerVerdict:
    """Turn a pending verdict into the single-store recovery for ``store``."""
    if v.result is Verdict.UNRECOVERABLE:
        return v
    if store == "base":
        return LayerVerdict(v.layer, Verdict.FAULT_IN_BASE, v.redundant)
    if store.startswith("red"):
        return LayerVerdict(v.layer, Verdict.FAULT_IN_REDUNDANT, int(store[3:]))
    return LayerVerdict(v.layer, Verdict.FAULT_IN_DELTA, int(store[5:]))


# ---------------------------------------------------- functional wrappers

def build_guard(base: ModelParams, redundants: Sequence[ModelParams], **kw) -> GuardedEnsemble:
    return GuardedEnsemble(base, redundants, **kw)


def detect_layer(g: GuardedEnsemble, m: int, n: int) -> LayerVerdict:
    return g.detect_layer(m, n)


def guarded_inference(g: GuardedEnsemble, x):
    return g.guarded_inference(x)


def recover_layer(g: GuardedEnsemble, verdict: LayerVerdict) -> None:
    g.recover_layer(verdict)


def recover_model(g: GuardedEnsemble, m: int, layer_budget: int) -> RecoveryProgress:
    return g.recover_model(m, layer_budget)


def audit(g: GuardedEnsemble) -> FaultReport:
    return g.audit()


# ------------------------------------------------------------- NAPG files

def encode_guard(g: GuardedEnsemble) -> bytes:
    out = [NAPG_MAGIC, struct.pack("<HHHH", NAPG_VERSION, g.M, g.n_layers, RELATION_CODES[g.relation])]
    for m in range(1, g.M + 1):
        for n in range(g.n_layers):
            out.append(encode_layer(g.deltas[m - 1].layers[n]))
            for s in g._triple(m):
                c = g.stored_checksum(s, n)
                out.append(struct.pack("<Qd", c.int_sum, c.value_sum))
    return b"".join(out)


def decode_guard(buf: bytes, base: ModelParams, redundants: Sequence[ModelParams]) -> GuardedEnsemble:
    """Rebuild a guard from a NAPG buffer and the model files it protects.

    Relation tensors and checksums come from the file, not from the models, so
    models corrupted after the guard was built are detected.
    """
    r = _Reader(buf)
    if r.take(4, "magic") != NAPG_MAGIC:
        raise FormatError("bad magic, expected b'NAPG'", 0)
    version, M, n_layers, rel = r.unpack("<HHHH", "header")
    if version != NAPG_VERSION:
        raise FormatError(f"unsupported NAPG version {version}", 4)
    relation = {v: k for k, v in RELATION_CODES.items()}.get(rel)
    if relation is None:
        raise FormatError(f"unknown relation code {rel}", 10)
    if M != len(redundants) or n_layers != base.n_layers:
        raise FormatError(f"guard is for M={M}, {n_layers} layers; got {len(redundants)} redundant "
                          f"models with {base.n_layers} layers")
    # build with placeholder relations and checksums, then overwrite from the file
    g = GuardedEnsemble(base, list(redundants), relation=relation)
    for m in range(1, M + 1):
        for n in range(n_layers):
            start = r.pos
            layer = decode_layer(r, f"delta{m} layer {n}")
            dst = g.deltas[m - 1].layers[n]
            if layer.weights.shape != dst.weights.shape:
                raise FormatError(f"delta{m} layer {n} shape {layer.weights.shape} does not match models", start)
            np.copyto(dst.weights, layer.weights)
            np.copyto(dst.bias, layer.bias)
            for s in g._triple(m):
                isum, vsum = r.unpack("<Qd", f"checksum {s} layer {n}")
                i = g._slots[(s, n)]
                g._csum_int[i] = isum
                g._csum_val[i] = vsum
    if not r.at_end():
        raise FormatError("trailing bytes after last record", r.pos)
    return g


def save_guard(g: GuardedEnsemble, path) -> None:
    Path(path).write_bytes(encode_guard(g))


def load_guard(path, base: ModelParams, redundants: Sequence[ModelParams]) -> GuardedEnsemble:
    return decode_guard(Path(path).read_bytes(), base, redundants)
