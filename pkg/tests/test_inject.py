import json

import numpy as np
import pytest

from ensguard.errors import AddressingError, ConfigError
from ensguard.guard import Verdict, build_guard
from ensguard.inject import (
    HIGH_BER,
    LOW_BER,
    InjectionConfig,
    apply_injection,
    inject,
    plan_injection,
    select_stores,
    store_bit_sizes,
)
from ensguard.params import BitLocation, LayerParams, ModelParams, bit_equal, checksum


def test_fixed_count_one_location():
    plan = plan_injection(InjectionConfig(1e-7, seed=0), {"a": 10**7})
    assert len(plan) == 1


def test_fixed_count_rounding_and_minimum():
    assert len(plan_injection(InjectionConfig(1e-5, seed=1), {"a": 3_200_000})) == 32
    assert len(plan_injection(InjectionConfig(1e-9, seed=1), {"a": 320})) == 1


def test_plan_is_deterministic():
    cfg = InjectionConfig(1e-4, seed=42)
    sizes = {"a": 32 * 1000, "b": 32 * 3000}
    assert plan_injection(cfg, sizes) == plan_injection(cfg, sizes)
    assert plan_injection(cfg, sizes) != plan_injection(InjectionConfig(1e-4, seed=43), sizes)


def test_plan_locations_distinct_and_in_range():
    sizes = {"a": 32 * 10, "b": 32 * 7}
    plan = plan_injection(InjectionConfig(1e-3, seed=3), {k: v * 100 for k, v in sizes.items()})
    assert len(set(plan)) == len(plan)
    for loc in plan:
        assert 0 <= loc.elem < sizes[loc.store] * 100 // 32 and 0 <= loc.bit < 32


def test_bernoulli_counts():
    counts = [len(plan_injection(InjectionConfig(1e-5, seed=s, mode="bernoulli"), {"a": 10**6 // 32 * 32}))
              for s in range(1000)]
    assert min(counts) >= 0 and max(counts) <= 60
    assert 9.0 <= np.mean(counts) <= 11.0


def test_uniform_over_stores():
    sizes = {"small": 32 * 1000, "large": 32 * 3000}
    hits = {"small": 0, "large": 0}
    for s in range(10_000):
        (loc,) = plan_injection(InjectionConfig(1e-9, seed=s), sizes)
        hits[loc.store] += 1
    n, p = 10_000, 0.25
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(hits["small"] - n * p) <= 3 * sigma


def test_config_validation():
    for bad in (0.0, 1e-10, 2e-3, 1.0):
        with pytest.raises(ConfigError):
            InjectionConfig(bad, seed=0)
    with pytest.raises(ConfigError):
        InjectionConfig(1e-5, seed=0, mode="burst")
    with pytest.raises(ConfigError):
        InjectionConfig(1e-5, seed=0, targets=())
    assert InjectionConfig.preset("low", 0).ber == LOW_BER
    assert InjectionConfig.preset("high", 0).ber == HIGH_BER
    with pytest.raises(ConfigError):
        InjectionConfig.preset("medium", 0)


def test_selectors():
    keys = ["base/0/weights", "base/0/bias", "red1/0/weights", "delta1/0/weights", "meta/checksums"]
    assert select_stores(keys, ["all"]) == sorted(keys[:4])
    assert select_stores(keys, ["base"]) == ["base/0/bias", "base/0/weights"]
    assert select_stores(keys, ["red1/0/weights"]) == ["red1/0/weights"]
    assert "meta/checksums" in select_stores(keys, ["all"], include_metadata=True)
    with pytest.raises(ConfigError):
        plan_injection(InjectionConfig(1e-5, seed=0, targets=("red7",)), {k: 320 for k in keys})


def small_stores():
    rng = np.random.default_rng(0)
    return {"x": rng.standard_normal(50).astype(np.float32), "y": rng.standard_normal((4, 5)).astype(np.float32)}


def test_empty_plan_is_noop():
    stores = small_stores()
    before = {k: v.copy() for k, v in stores.items()}
    ev = apply_injection(stores, [], time=1.5)
    assert ev.locations == [] and ev.time == 1.5
    assert all(bit_equal(stores[k], before[k]).equal for k in stores)


def test_apply_twice_restores():
    stores = small_stores()
    before = {k: v.copy() for k, v in stores.items()}
    plan = plan_injection(InjectionConfig(1e-2 / 10, seed=5), store_bit_sizes(stores))
    apply_injection(stores, plan)
    assert not all(bit_equal(stores[k], before[k]).equal for k in stores)
    apply_injection(stores, plan)
    assert all(bit_equal(stores[k], before[k]).equal for k in stores)


def test_invalid_plan_applies_nothing():
    stores = small_stores()
    before = {k: v.copy() for k, v in stores.items()}
    plan = [BitLocation("x", 0, 3), BitLocation("y", 20, 0)]
    with pytest.raises(AddressingError):
        apply_injection(stores, plan)
    assert all(bit_equal(stores[k], before[k]).equal for k in stores)
    with pytest.raises(AddressingError):
        apply_injection(stores, [BitLocation("z", 0, 0)])
    with pytest.raises(AddressingError):
        apply_injection(stores, [BitLocation("x", 0, 32)])


def test_single_flip_breaks_one_checksum():
    rng = np.random.default_rng(1)
    mk = lambda: ModelParams([LayerParams(rng.standard_normal((4, 4)), rng.standard_normal(4)) for _ in range(2)])
    g = build_guard(mk(), [mk()])
    stores = g.stores()
    before = {k: checksum(v).int_sum for k, v in stores.items()}
    apply_injection(stores, [BitLocation("base/1/weights", 3, 17)])
    changed = [k for k, v in stores.items() if checksum(v).int_sum != before[k]]
    assert changed == ["base/1/weights"]
    assert g.detect_layer(1, 1).result is Verdict.FAULT_IN_BASE


def test_metadata_injection_hits_checksum_table():
    rng = np.random.default_rng(2)
    m = ModelParams([LayerParams(rng.standard_normal((4, 4)), rng.standard_normal(4))])
    g = build_guard(m, [m.copy()])
    stores = g.stores(include_metadata=True)
    cfg = InjectionConfig(1e-3, seed=0, targets=("meta",), include_metadata=True)
    ev = inject(stores, cfg)
    assert {l.store for l in ev.locations} == {"meta/checksums"}
    assert g.audit().faults


def test_event_log_lines():
    ev = apply_injection(small_stores(), [BitLocation("x", 2, 9)], time=3.0)
    assert [json.loads(l) for l in ev.log_lines()] == [{"time": 3.0, "store": "x", "elem": 2, "bit": 9}]
