import threading

import numpy as np
import pytest

from ensguard.errors import ContractError, FormatError, UnrecoverableError
from ensguard.guard import (
    GuardedEnsemble,
    LayerVerdict,
    OutputMode,
    Status,
    Verdict,
    audit,
    build_guard,
    decode_guard,
    detect_layer,
    encode_guard,
    guarded_inference,
    load_guard,
    recover_layer,
    recover_model,
    save_guard,
)
from ensguard.nn import ensemble_infer, forward
from ensguard.params import LayerParams, ModelParams, bit_equal, flip_bit, words


def rand_model(rng, sizes, scale=0.2):
    return ModelParams([LayerParams(rng.normal(0, scale, (a, b)), rng.normal(0, scale, b))
                        for a, b in zip(sizes, sizes[1:])])


def snapshot(g):
    return {k: v.copy() for k, v in g.stores().items()}


def same_state(g, snap):
    return all(bit_equal(v, snap[k]).equal for k, v in g.stores().items())


def one_layer(w, b):
    return ModelParams([LayerParams(np.array([w], dtype=np.float32), b)])


# ---------------------------------------------------------------- build

def test_build_float_relation_values():
    g = build_guard(one_layer([1.0, 2.0], [0.0, 0.0]), [one_layer([0.5, -1.0], [0.0, 0.0])], relation="float")
    np.testing.assert_array_equal(g.deltas[0].layers[0].weights, [[1.5, 1.0]])


def test_build_identical_models_doubles():
    rng = np.random.default_rng(0)
    m = rand_model(rng, (4, 3))
    g = build_guard(m, [m.copy()], relation="float")
    np.testing.assert_array_equal(g.deltas[0].layers[0].weights, 2 * m.layers[0].weights)


def test_build_bits_relation_is_wrapping_word_sum():
    rng = np.random.default_rng(1)
    a, b = rand_model(rng, (5, 4, 3)), rand_model(rng, (5, 4, 3))
    g = build_guard(a, [b])
    for n in range(2):
        w = words(a.layers[n].weights) + words(b.layers[n].weights)
        assert (words(g.deltas[0].layers[n].weights) == w).all()


def test_build_errors():
    rng = np.random.default_rng(2)
    with pytest.raises(ContractError):
        build_guard(rand_model(rng, (4, 3)), [rand_model(rng, (4, 2))])
    with pytest.raises(ContractError):
        build_guard(rand_model(rng, (4, 3)), [])


@pytest.mark.parametrize("relation", ["bits", "float"])
def test_fresh_guard_is_healthy(relation):
    rng = np.random.default_rng(3)
    g = build_guard(rand_model(rng, (6, 5, 4, 3)), [rand_model(rng, (6, 5, 4, 3)) for _ in range(2)],
                    relation=relation)
    assert all(detect_layer(g, m, n).result is Verdict.HEALTHY for m in (1, 2) for n in range(3))
    assert not audit(g).faults


def test_healthy_detect_counts_one_comparison():
    rng = np.random.default_rng(4)
    g = build_guard(rand_model(rng, (4, 3)), [rand_model(rng, (4, 3))])
    assert detect_layer(g, 1, 0).result is Verdict.HEALTHY
    assert g.counters.snapshot() == (1, 0)


# ------------------------------------------------------------ detection

@pytest.mark.parametrize("relation", ["bits", "float"])
def test_sign_flip_in_base(relation):
    rng = np.random.default_rng(5)
    g = build_guard(rand_model(rng, (4, 3, 2)), [rand_model(rng, (4, 3, 2))], relation=relation)
    flip_bit(g.base.layers[1].weights, 2, 31)
    v = detect_layer(g, 1, 1)
    assert v.result is Verdict.FAULT_IN_BASE
    assert g.counters.snapshot() == (1, 2)


@pytest.mark.parametrize("relation", ["bits", "float"])
def test_flip_in_delta(relation):
    rng = np.random.default_rng(6)
    g = build_guard(rand_model(rng, (4, 3, 2)), [rand_model(rng, (4, 3, 2))], relation=relation)
    flip_bit(g.deltas[0].layers[0].bias, 1, 7)
    assert detect_layer(g, 1, 0) == LayerVerdict(0, Verdict.FAULT_IN_DELTA, 1)


def test_both_models_corrupt_is_unrecoverable():
    rng = np.random.default_rng(7)
    g = build_guard(rand_model(rng, (4, 3)), [rand_model(rng, (4, 3))])
    flip_bit(g.base.layers[0].weights, 0, 3)
    flip_bit(g.redundants[0].layers[0].weights, 5, 3)
    v = detect_layer(g, 1, 0)
    assert v.result is Verdict.UNRECOVERABLE
    with pytest.raises(UnrecoverableError):
        recover_layer(g, v)


def test_detect_layer_bad_index():
    rng = np.random.default_rng(8)
    g = build_guard(rand_model(rng, (4, 3)), [rand_model(rng, (4, 3))])
    with pytest.raises(ContractError):
        detect_layer(g, 2, 0)
    with pytest.raises(ContractError):
        detect_layer(g, 1, 1)


@pytest.mark.parametrize("relation", ["bits", "float"])
def test_exhaustive_single_flip_attribution(relation):
    rng = np.random.default_rng(9)
    g = build_guard(rand_model(rng, (4, 3, 2)), [rand_model(rng, (4, 3, 2))], relation=relation)
    expected = {"base": Verdict.FAULT_IN_BASE, "red1": Verdict.FAULT_IN_REDUNDANT, "delta1": Verdict.FAULT_IN_DELTA}
    absorbed = 0
    for key, t in g.stores().items():
        store, n = key.split("/")[0], int(key.split("/")[1])
        for e in range(t.size):
            for bit in range(32):
                flip_bit(t, e, bit)
                v = detect_layer(g, 1, n)
                if v.result is Verdict.HEALTHY:
                    absorbed += 1
                    assert audit(g).faults[0].result is expected[store]
                    g.status = {k: Status.HEALTHY for k in g.status}
                    g.model_active = [True, True]
                    g.pending.clear()
                else:
                    assert v.result is expected[store], (key, e, bit)
                flip_bit(t, e, bit)
    if relation == "bits":
        assert absorbed == 0


def test_float_rounding_absorption_caught_by_audit():
    base = one_layer([1.0e20], [0.0])
    red = one_layer([1.0], [0.0])
    g = build_guard(base, [red], relation="float")
    flip_bit(g.redundants[0].layers[0].weights, 0, 0)
    assert detect_layer(g, 1, 0).result is Verdict.HEALTHY
    rep = audit(g)
    assert [v.result for v in rep.faults] == [Verdict.FAULT_IN_REDUNDANT]
    assert rep.models_halted == {1}


def test_bits_relation_never_absorbs():
    g = build_guard(one_layer([1.0e20], [0.0]), [one_layer([1.0], [0.0])])
    flip_bit(g.redundants[0].layers[0].weights, 0, 0)
    assert detect_layer(g, 1, 0).result is Verdict.FAULT_IN_REDUNDANT


def test_audit_flags_delta():
    rng = np.random.default_rng(10)
    g = build_guard(rand_model(rng, (4, 3, 2)), [rand_model(rng, (4, 3, 2))])
    flip_bit(g.deltas[0].layers[1].weights, 0, 12)
    rep = audit(g)
    assert [(v.layer, v.result) for v in rep.faults] == [(1, Verdict.FAULT_IN_DELTA)]
    assert rep.models_halted


# ------------------------------------------------------------ inference

def three_layer_guard(seed, relation="bits"):
    rng = np.random.default_rng(seed)
    sizes = (6, 8, 8, 4)
    return build_guard(rand_model(rng, sizes), [rand_model(rng, sizes)], relation=relation), rng


def test_guarded_inference_healthy_matches_ensemble():
    g, rng = three_layer_guard(11)
    x = rng.standard_normal(6)
    scores, rep = guarded_inference(g, x)
    assert bit_equal(scores, ensemble_infer(g.models, x)).equal
    assert rep.output_mode is OutputMode.FULL_ENSEMBLE
    assert not rep.models_halted and not rep.faults
    assert g.counters.snapshot() == (3, 0)


def test_guarded_inference_base_fault_layer_two():
    g, rng = three_layer_guard(12)
    x = rng.standard_normal(6)
    for e in (0, 5, 9):
        flip_bit(g.base.layers[1].weights, e, 30)
    scores, rep = guarded_inference(g, x)
    assert bit_equal(scores, forward(g.redundants[0], x)).equal
    assert [(v.layer, v.result) for v in rep.faults] == [(1, Verdict.FAULT_IN_BASE)]
    assert rep.output_mode is OutputMode.SINGLE_MODEL and rep.models_used == (1,)
    assert g.status[("base", 1)] is Status.FAULTY and not g.model_active[0]


def test_guarded_inference_no_output():
    g, rng = three_layer_guard(13)
    flip_bit(g.base.layers[0].weights, 3, 20)
    flip_bit(g.redundants[0].layers[2].bias, 1, 20)
    scores, rep = guarded_inference(g, rng.standard_normal(6))
    assert scores is None
    assert rep.output_mode is OutputMode.NO_OUTPUT
    assert rep.models_halted == {0, 1}
    assert {(v.layer, v.result) for v in rep.faults} == {(0, Verdict.FAULT_IN_BASE), (2, Verdict.FAULT_IN_REDUNDANT)}


def test_detection_continues_after_halt():
    g, rng = three_layer_guard(14)
    flip_bit(g.base.layers[0].weights, 0, 25)
    flip_bit(g.base.layers[2].weights, 0, 25)
    _, rep = guarded_inference(g, rng.standard_normal(6))
    assert [v.layer for v in rep.faults] == [0, 2]
    assert g.faulted_layers(0) == [0, 2]


def test_availability_with_two_redundants():
    rng = np.random.default_rng(15)
    sizes = (5, 6, 3)
    g = build_guard(rand_model(rng, sizes), [rand_model(rng, sizes) for _ in range(2)])
    flip_bit(g.base.layers[0].weights, 1, 29)
    flip_bit(g.redundants[0].layers[1].weights, 1, 29)
    x = rng.standard_normal(5)
    scores, rep = guarded_inference(g, x)
    assert bit_equal(scores, forward(g.models[2], x)).equal
    assert rep.output_mode is OutputMode.SINGLE_MODEL
    assert rep.models_halted == {0, 1}


# -------------------------------------------------------------- recovery

def test_recover_float_example():
    g = build_guard(one_layer([1.0, 2.0], [0.0, 0.0]), [one_layer([0.5, -1.0], [0.0, 0.0])], relation="float")
    g.base.layers[0].weights[0, 0] = 123.0
    v = detect_layer(g, 1, 0)
    assert v.result is Verdict.FAULT_IN_BASE
    recover_layer(g, v)
    np.testing.assert_array_equal(g.base.layers[0].weights, [[1.0, 2.0]])
    assert detect_layer(g, 1, 0).result is Verdict.HEALTHY


@pytest.mark.parametrize("relation", ["bits", "float"])
def test_recover_delta_bit_exact(relation):
    g, _ = three_layer_guard(16, relation)
    snap = snapshot(g)
    flip_bit(g.deltas[0].layers[2].weights, 4, 9)
    recover_layer(g, detect_layer(g, 1, 2))
    assert same_state(g, snap)


def test_recover_layer_keeps_array_identity():
    g, _ = three_layer_guard(17)
    w = g.base.layers[0].weights
    flip_bit(w, 0, 31)
    recover_layer(g, detect_layer(g, 1, 0))
    assert g.base.layers[0].weights is w


def test_recover_healthy_is_noop():
    g, _ = three_layer_guard(18)
    snap = snapshot(g)
    recover_layer(g, LayerVerdict(1, Verdict.HEALTHY, 1))
    recover_layer(g, LayerVerdict(1, Verdict.FAULT_IN_BASE, 1))  # stale verdict, layer is intact
    assert same_state(g, snap)


def test_recover_precheck_escalates():
    g, _ = three_layer_guard(19)
    flip_bit(g.base.layers[1].weights, 0, 10)
    v = detect_layer(g, 1, 1)
    flip_bit(g.redundants[0].layers[1].weights, 0, 10)  # second store hit after detection
    before = snapshot(g)
    with pytest.raises(UnrecoverableError):
        recover_layer(g, v)
    assert same_state(g, before)


def test_escalation_spares_verified_base():
    g, rng = three_layer_guard(21)
    flip_bit(g.redundants[0].layers[1].weights, 0, 10)
    g.detect_all()
    flip_bit(g.deltas[0].layers[1].bias, 0, 10)
    with pytest.raises(UnrecoverableError):
        recover_model(g, 1, 3)
    assert g.status[("base", 1)] is Status.HEALTHY
    assert g.model_active == [True, False]
    scores, rep = g.guarded_inference(rng.standard_normal(6))
    assert rep.models_used == (0,) and scores is not None
    assert [v.stores for v in rep.faults] == [("red1", "delta1")]


@pytest.mark.parametrize("seed", range(200))
def test_randomized_single_store_recovery(seed):
    rng = np.random.default_rng(seed)
    sizes = (8, 8, 8, 8, 4)
    g = build_guard(rand_model(rng, sizes), [rand_model(rng, sizes)])
    snap = snapshot(g)
    for n in range(4):
        store = ["base", "red1", "delta1"][rng.integers(3)]
        layer = g.layer_of(store, n)
        for _ in range(int(rng.integers(1, 6))):
            t = layer.weights if rng.random() < 0.8 else layer.bias
            flip_bit(t, int(rng.integers(t.size)), int(rng.integers(32)))
    g.detect_all()
    for mid in (0, 1):
        recover_model(g, mid, 10)
    assert same_state(g, snap)
    assert g.fully_healthy()


def test_recover_model_chunking():
    rng = np.random.default_rng(20)
    sizes = (4, 4, 4, 4)
    g = build_guard(rand_model(rng, sizes), [rand_model(rng, sizes)])
    snap = snapshot(g)
    for n in range(3):
        flip_bit(g.base.layers[n].weights, n, 17)
    g.detect_all()
    before = snapshot(g)
    assert recover_model(g, 0, 0).remaining == 3
    assert same_state(g, before)
    p = recover_model(g, 0, 2)
    assert (p.layers_recovered, p.remaining) == (2, 1)
    assert not g.model_active[0]
    p = recover_model(g, 0, 2)
    assert (p.layers_recovered, p.remaining) == (1, 0)
    assert g.model_active[0] and same_state(g, snap)
    assert all(detect_layer(g, 1, n).result is Verdict.HEALTHY for n in range(3))
    with pytest.raises(ContractError):
        recover_model(g, 0, -1)


def test_recover_redundant_via_model_id():
    g, _ = three_layer_guard(21)
    snap = snapshot(g)
    flip_bit(g.redundants[0].layers[0].bias, 2, 31)
    flip_bit(g.deltas[0].layers[2].weights, 7, 1)
    g.detect_all()
    assert g.faulted_layers(1) == [0, 2]
    assert recover_model(g, 1, 5).remaining == 0
    assert same_state(g, snap) and g.fully_healthy()


def test_recovery_concurrent_with_inference():
    rng = np.random.default_rng(22)
    sizes = (32, 64, 64, 10)
    g = build_guard(rand_model(rng, sizes), [rand_model(rng, sizes)])
    snap = snapshot(g)
    for n in range(3):
        flip_bit(g.base.layers[n].weights, 11, 30)
    x = rng.standard_normal(32)
    g.detect_all()
    expected = forward(g.redundants[0], x)
    errors = []

    def serve():
        for _ in range(50):
            scores, rep = g.guarded_inference(x)
            if scores is None:
                errors.append("no output")
            elif rep.models_used == (1,) and not bit_equal(scores, expected).equal:
                errors.append("wrong single-model output")

    t = threading.Thread(target=serve)
    t.start()
    for _ in range(3):
        recover_model(g, 0, 1)
    t.join()
    assert not errors
    assert same_state(g, snap) and g.fully_healthy()


# ----------------------------------------------------------------- files

@pytest.mark.parametrize("relation", ["bits", "float"])
def test_napg_round_trip(tmp_path, relation):
    rng = np.random.default_rng(23)
    sizes = (5, 4, 3)
    g = build_guard(rand_model(rng, sizes), [rand_model(rng, sizes) for _ in range(2)], relation=relation)
    save_guard(g, tmp_path / "g.napg")
    h = load_guard(tmp_path / "g.napg", g.base, g.redundants)
    assert h.relation == relation
    assert encode_guard(h) == encode_guard(g)


def test_napg_detects_models_corrupted_after_save():
    g, _ = three_layer_guard(24)
    buf = encode_guard(g)
    base = g.base.copy()
    flip_bit(base.layers[1].weights, 3, 22)
    h = decode_guard(buf, base, [r.copy() for r in g.redundants])
    assert detect_layer(h, 1, 1).result is Verdict.FAULT_IN_BASE


def test_napg_layout_header():
    g, _ = three_layer_guard(25)
    buf = encode_guard(g)
    assert buf[:4] == b"NAPG"
    assert buf[4:12] == bytes([1, 0, 1, 0, 3, 0, 0, 0])


def test_napg_errors():
    g, _ = three_layer_guard(26)
    buf = encode_guard(g)
    with pytest.raises(FormatError):
        decode_guard(b"NAPX" + buf[4:], g.base, g.redundants)
    with pytest.raises(FormatError):
        decode_guard(buf[:-3], g.base, g.redundants)
    with pytest.raises(FormatError):
        decode_guard(buf + b"\0", g.base, g.redundants)
    with pytest.raises(FormatError):
        decode_guard(buf, g.base, g.redundants * 2)


def test_cancelling_flips_still_attributed():
    # bit 1 set in one word and cleared in another: int_sum alone is unchanged
    rng = np.random.default_rng(27)
    g = build_guard(rand_model(rng, (4, 4)), [rand_model(rng, (4, 4))])
    w = words(g.base.layers[0].weights)
    i = int(np.flatnonzero(w & 2 == 0)[0])
    j = int(np.flatnonzero(w & 2 != 0)[0])
    w[i] ^= 2
    w[j] ^= 2
    assert detect_layer(g, 1, 0).result is Verdict.FAULT_IN_BASE
    g_int = build_guard(rand_model(rng, (4, 4)), [rand_model(rng, (4, 4))], checksum_field="int")
    w = words(g_int.base.layers[0].weights)
    i = int(np.flatnonzero(w & 2 == 0)[0])
    j = int(np.flatnonzero(w & 2 != 0)[0])
    w[i] ^= 2
    w[j] ^= 2
    assert detect_layer(g_int, 1, 0).result is Verdict.FAULT_IN_DELTA
