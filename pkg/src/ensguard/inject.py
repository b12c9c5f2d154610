"""Seeded bit-flip injection into named parameter stores.

Stores are flat collections of 32-bit arrays keyed by name, for example the
output of ``GuardedEnsemble.stores()`` (``base/0/weights``, ``delta1/2/bias``,
...). A plan is a list of ``BitLocation`` over the concatenated bit space of
the targeted stores; applying it flips each bit once.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import AddressingError, ConfigError
from .params import BitLocation, flip_bit

BER_MIN, BER_MAX = 1e-9, 1e-3
LOW_BER = 1e-7
HIGH_BER = 1e-5
PRESETS = {"low": LOW_BER, "high": HIGH_BER}
MODES = ("fixed", "bernoulli")
METADATA_PREFIX = "meta"


@dataclass(frozen=True)
class InjectionConfig:
    ber: float
    seed: int
    mode: str = "fixed"
    targets: tuple[str, ...] = ("all",)
    include_metadata: bool = False

    def __post_init__(self):
        if isinstance(self.targets, str):
            object.__setattr__(self, "targets", (self.targets,))
        if not BER_MIN <= self.ber <= BER_MAX:
            raise ConfigError(f"ber {self.ber} outside accepted range [{BER_MIN}, {BER_MAX}]")
        if self.mode not in MODES:
            raise ConfigError(f"unknown injection mode {self.mode!r}, expected one of {MODES}")
        if not self.targets:
            raise ConfigError("injection needs at least one target selector")

    @classmethod
    def preset(cls, name: str, seed: int, **kw) -> InjectionConfig:
        try:
            return cls(PRESETS[name], seed, **kw)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}") from None


@dataclass
class FaultEvent:
    time: float
    locations: list[BitLocation] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [json.dumps({"time": self.time, "store": l.store, "elem": l.elem, "bit": l.bit})
                for l in self.locations]


def _matches(key: str, selector: str) -> bool:
    return key == selector or key.startswith(selector + "/")


def select_stores(keys: Sequence[str], targets: Sequence[str], include_metadata: bool = False) -> list[str]:
    """Keys addressed by ``targets``; ``all`` means every non-metadata store."""
    out = []
    for k in sorted(keys):
        is_meta = _matches(k, METADATA_PREFIX)
        if is_meta and not include_metadata:
            continue
        if any((t == "all" and not is_meta) or _matches(k, t) for t in targets):
            out.append(k)
    if include_metadata:
        out += [k for k in sorted(keys) if _matches(k, METADATA_PREFIX) and k not in out]
    return out


def plan_injection(cfg: InjectionConfig, store_sizes: Mapping[str, int]) -> list[BitLocation]:
    """Draw distinct bit locations uniformly over the targeted stores.

    ``store_sizes`` maps store name to its size in bits (a multiple of 32).
    """
    names = select_stores(list(store_sizes), cfg.targets, cfg.include_metadata)
    if not names:
        raise ConfigError(f"targets {list(cfg.targets)} match no store")
    sizes = np.array([store_sizes[k] for k in names], dtype=np.int64)
    if (sizes <= 0).any() or (sizes % 32).any():
        raise ConfigError("store sizes must be positive multiples of 32 bits")
    total = int(sizes.sum())
    rng = np.random.default_rng(cfg.seed)
    if cfg.mode == "fixed":
        count = max(1, round(total * cfg.ber))
    else:
        # a binomial count of distinct uniform positions is the same
        # distribution as flipping every bit independently
        count = int(rng.binomial(total, cfg.ber))
    count = min(count, total)
    flat = np.sort(rng.choice(total, size=count, replace=False)) if count else np.empty(0, np.int64)
    bounds = np.cumsum(sizes)
    which = np.searchsorted(bounds, flat, side="right")
    offsets = flat - (bounds - sizes)[which]
    return [BitLocation(names[s], int(o) // 32, int(o) % 32) for s, o in zip(which.tolist(), offsets.tolist())]


def store_bit_sizes(stores: Mapping[str, np.ndarray]) -> dict[str, int]:
    return {k: 32 * v.size for k, v in stores.items()}


def apply_injection(stores: Mapping[str, np.ndarray], plan: Sequence[BitLocation],
                    time: float | None = None) -> FaultEvent:
    """Flip every planned bit. The whole plan is validated before any write."""
    for loc in plan:
        t = stores.get(loc.store)
        if t is None:
            raise AddressingError(f"no store named {loc.store!r}")
        if not 0 <= loc.elem < t.size or not 0 <= loc.bit <= 31:
            raise AddressingError(f"{loc.store}: element {loc.elem} bit {loc.bit} out of range")
    if len(set(plan)) != len(plan):
        raise AddressingError("plan lists a bit location twice")
    for loc in plan:
        flip_bit(stores[loc.store], loc.elem, loc.bit)
    return FaultEvent(_time.time() if time is None else time, list(plan))


def inject(stores: Mapping[str, np.ndarray], cfg: InjectionConfig, time: float | None = None) -> FaultEvent:
    return apply_injection(stores, plan_injection(cfg, store_bit_sizes(stores)), time)
