"""Slot engine contracts: bookkeeping rules, collective ops, metering."""

import concurrent.futures
import json

import numpy as np
import pytest

from packedhe import engine
from packedhe.engine import (CapacityError, EngineError, KeyMismatchError,
                             LevelExhaustedError, MissingPartyError)


def make_ctx(**kw):
    params = dict(ring_dim=64, initial_level=6, initial_scale=2.0 ** 40,
                  party_count=3)
    params.update(kw)
    return engine.new_context(**params)


# ------------------------------------------------------------------ contexts

def test_context_parameters_large():
    ctx = engine.new_context(2 ** 13, 6, 2.0 ** 40, 10)
    assert ctx.slot_count == 4096
    assert ctx.initial_level == 6


def test_context_minimal():
    ctx = engine.new_context(8, 1, 2.0, 1)
    assert ctx.slot_count == 4

def test_context_even_larger_ring():
    ctx = engine.new_context(2 ** 14, 6, 2.0 ** 40, 50)
    assert ctx.slot_count == 8192
    assert len(ctx.parties) == 50


@pytest.mark.parametrize("ring", [7, 12, 100, 6])
def test_context_rejects_non_power_of_two(ring):
    with pytest.raises(EngineError):
        engine.new_context(ring)


def test_context_rejects_zero_parties():
    with pytest.raises(EngineError):
        engine.new_context(64, party_count=0)


def test_context_rejects_bad_level_and_scale():
    with pytest.raises(EngineError):
        engine.new_context(64, initial_level=0)
    with pytest.raises(EngineError):
        engine.new_context(64, initial_scale=1.0)


# ------------------------------------------------------------- encode/decode

def test_encode_zero_pads():
    ctx = engine.new_context(8)
    pt = ctx.encode([1, 2, 3])
    assert ctx.decode(pt).tolist() == [1, 2, 3, 0]


def test_encode_decode_round_trip():
    ctx = engine.new_context(8)
    out = ctx.decode(ctx.encode([0.5, -0.25]))
    assert out.tolist() == [0.5, -0.25, 0, 0]


def test_encode_capacity_bound():
    ctx = make_ctx(ring_dim=2 ** 13)
    with pytest.raises(CapacityError):
        ctx.encode(np.zeros(4097))


# ----------------------------------------------------------- encrypt/decrypt

def test_encrypt_ddec_round_trip():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([1, 2, 3]))
    out = ctx.decode(ctx.ddec(ct, ctx.parties))
    assert out[:4].tolist() == [1, 2, 3, 0]


def test_ddec_partial_roster_rejected():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([1.0]))
    with pytest.raises(MissingPartyError):
        ctx.ddec(ct, ctx.parties[:2])


def test_fresh_ciphertext_level_and_scale():
    ctx = engine.new_context(2 ** 13, 6, 2.0 ** 40, 10)
    ct = ctx.encrypt(ctx.encode([1.0]))
    assert ct.level == 6
    assert ct.scale == 2.0 ** 40


def test_every_proper_subset_rejected():
    ctx = make_ctx(party_count=4)
    ct = ctx.encrypt(ctx.encode([1.0]))
    parties = list(ctx.parties)
    for drop in range(len(parties)):
        subset = parties[:drop] + parties[drop + 1:]
        with pytest.raises(MissingPartyError):
            ctx.ddec(ct, subset)
        with pytest.raises(MissingPartyError):
            ctx.dbootstrap(ct, subset)
        with pytest.raises(MissingPartyError):
            ctx.dkey_switch(ct, ctx.SERVER_KEY, subset)


# -------------------------------------------------------------- add/sub/muls

def test_add_values_and_bookkeeping():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1, 2]))
    b = ctx.encrypt(ctx.encode([3, 4]))
    out = ctx.add(a, b)
    assert ctx.decode(ctx.ddec(out, ctx.parties))[:2].tolist() == [4, 6]


def test_add_level_takes_min():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.0]))
    b = ctx.encrypt(ctx.encode([1.0]))
    a = ctx.rescale(a)  # level 5
    for _ in range(3):
        b = ctx.rescale(b)  # level 3
    assert ctx.add(a, b).level == 3
    assert ctx.add(a, b).scale == max(a.scale, b.scale)


def test_sub_self_is_zero():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.5, -2.5]))
    out = ctx.sub(a, a)
    assert np.all(out.slots == 0)
    assert out.level == a.level


def test_add_rejects_key_mismatch():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.0]), ctx.DEFAULT_KEY)
    ctx.register_key("other", ctx.parties)
    b = ctx.encrypt(ctx.encode([1.0]), "other")
    with pytest.raises(KeyMismatchError):
        ctx.add(a, b)


def test_add_rejects_context_mismatch():
    ctx1, ctx2 = make_ctx(), make_ctx()
    a = ctx1.encrypt(ctx1.encode([1.0]))
    b = ctx2.encrypt(ctx2.encode([1.0]))
    with pytest.raises(EngineError):
        ctx1.add(a, b)


def test_mul_pt_values():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([2, 3]))
    out = ctx.mul_pt(ct, ctx.encode([5, 5]))
    assert ctx.decode(ctx.ddec(out, ctx.parties))[:2].tolist() == [10, 15]


def test_mul_ct_scale_product():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([2.0]))
    b = ctx.encrypt(ctx.encode([3.0]))
    out = ctx.mul_ct(a, b)
    assert out.scale == 2.0 ** 80
    assert out.slots[0] == 6.0


def test_mul_at_level_zero_rejected():
    ctx = make_ctx(initial_level=1)
    a = ctx.encrypt(ctx.encode([1.0]))
    a0 = ctx.rescale(a)
    assert a0.level == 0
    with pytest.raises(LevelExhaustedError):
        ctx.mul_ct(a0, a)
    with pytest.raises(LevelExhaustedError):
        ctx.mul_pt(a0, ctx.encode([1.0]))


# ------------------------------------------------------------------ rotation

def test_rot_left_by_one():
    ctx = engine.new_context(8)
    ct = ctx.encrypt(ctx.encode([1, 2, 3, 4]))
    assert ctx.rot(ct, 1).slots.tolist() == [2, 3, 4, 1]


def test_rot_identity_and_inverse():
    ctx = engine.new_context(8)
    ct = ctx.encrypt(ctx.encode([1, 2, 3, 4]))
    assert ctx.rot(ct, 0).slots.tolist() == ct.slots.tolist()
    n = ctx.slot_count
    assert ctx.rot(ctx.rot(ct, 1), n - 1).slots.tolist() == ct.slots.tolist()


def test_rot_negative_equals_complement():
    ctx = engine.new_context(8)
    ct = ctx.encrypt(ctx.encode([1, 2, 3, 4]))
    assert ctx.rot(ct, -1).slots.tolist() == ctx.rot(ct, 3).slots.tolist()


def test_rotation_group_property():
    rng = np.random.default_rng(11)
    ctx = engine.new_context(32)
    n = ctx.slot_count
    for _ in range(50):
        v = ctx.encrypt(ctx.encode(rng.standard_normal(n)))
        k1, k2 = rng.integers(-2 * n, 2 * n, size=2)
        left = ctx.rot(ctx.rot(v, int(k1)), int(k2))
        right = ctx.rot(v, int(k1 + k2) % n)
        assert np.array_equal(left.slots, right.slots)


# ------------------------------------------------------------------- rescale

def test_rescale_drops_level_and_scale():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.0]))
    b = ctx.mul_ct(a, a)
    assert (b.level, b.scale) == (6, 2.0 ** 80)
    out = ctx.rescale(b)
    assert (out.level, out.scale) == (5, 2.0 ** 40)
    assert np.array_equal(out.slots, b.slots)


def test_rescale_at_level_zero_rejected():
    ctx = make_ctx(initial_level=1)
    ct = ctx.rescale(ctx.encrypt(ctx.encode([1.0])))
    with pytest.raises(LevelExhaustedError):
        ctx.rescale(ct)


# ----------------------------------------------------------------- bootstrap

def test_dbootstrap_resets_budget():
    ctx = engine.new_context(2 ** 13, 6, 2.0 ** 40, 10)
    ct = ctx.encrypt(ctx.encode([1.25, -3.5]))
    low = ct
    for _ in range(5):
        low = ctx.rescale(ctx.mul_ct(low, ct))
    assert low.level == 1
    fresh = ctx.dbootstrap(low, ctx.parties)
    assert fresh.level == 6
    assert fresh.scale == 2.0 ** 40
    assert np.array_equal(fresh.slots, low.slots)


def test_dbootstrap_partial_roster():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([1.0]))
    with pytest.raises(MissingPartyError):
        ctx.dbootstrap(ct, ctx.parties[1:])


# ---------------------------------------------------------------- key switch

def test_dkey_switch_then_server_decrypt():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([7.0, -1.0]))
    switched = ctx.dkey_switch(ct, ctx.SERVER_KEY, ctx.parties)
    assert switched.key_tag == ctx.SERVER_KEY
    assert switched.level == ct.level and switched.scale == ct.scale
    out = ctx.decode(ctx.ddec(switched, ("server",)))
    assert out[:2].tolist() == [7.0, -1.0]


def test_server_decrypt_without_switch_fails():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([7.0]))
    with pytest.raises(MissingPartyError):
        ctx.ddec(ct, ("server",))


def test_dkey_switch_partial_roster():
    ctx = engine.new_context(64, party_count=10)
    ct = ctx.encrypt(ctx.encode([1.0]))
    with pytest.raises(MissingPartyError):
        ctx.dkey_switch(ct, ctx.SERVER_KEY, ctx.parties[:9])


def test_dkey_switch_unknown_target():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([1.0]))
    with pytest.raises(KeyMismatchError):
        ctx.dkey_switch(ct, "nonexistent", ctx.parties)


# -------------------------------------------------------------------- meter

def test_meter_exactness_per_call():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.0]))
    b = ctx.encrypt(ctx.encode([2.0]))
    calls = [
        ("adds", lambda: ctx.add(a, b)),
        ("subs", lambda: ctx.sub(a, b)),
        ("mul_pt", lambda: ctx.mul_pt(a, ctx.encode([1.0]))),
        ("mul_ct", lambda: ctx.mul_ct(a, b)),
        ("rotations", lambda: ctx.rot(a, 1)),
        ("rescales", lambda: ctx.rescale(a)),
        ("bootstraps", lambda: ctx.dbootstrap(a, ctx.parties)),
        ("keyswitches", lambda: ctx.dkey_switch(a, ctx.SERVER_KEY, ctx.parties)),
    ]
    for field, fn in calls:
        before = ctx.meter.snapshot()
        fn()
        after = ctx.meter.snapshot()
        diff = {k: after[k] - before[k] for k in after}
        assert diff.pop(field) == 1
        assert all(v == 0 for v in diff.values()), (field, diff)


def test_meter_scope_isolation_and_reset():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.0]))
    ctx.rot(a, 1)
    with ctx.meter_scope() as outer:
        ctx.rot(a, 1)
        with ctx.meter_scope() as inner:
            ctx.rot(a, 2)
        assert inner.rotations == 1
    assert outer.rotations == 2
    assert ctx.meter.rotations == 3
    ctx.meter.reset()
    assert ctx.meter.rotations == 0


def test_meter_scopes_concurrent_threads():
    ctx = make_ctx()
    a = ctx.encrypt(ctx.encode([1.0]))

    def work(k):
        with ctx.meter_scope() as scope:
            for _ in range(k):
                ctx.rot(a, 1)
            return scope.rotations

    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
        counts = list(pool.map(work, [10, 20, 30, 40]))
    assert counts == [10, 20, 30, 40]
    assert ctx.meter.rotations == 100


def test_meter_json_snapshot_keys():
    ctx = make_ctx()
    snapshot = json.loads(ctx.meter.to_json())
    for key in ("adds", "mul_pt", "mul_ct", "rotations", "rescales",
                "bootstraps", "keyswitches"):
        assert key in snapshot


# -------------------------------------------------------------- homomorphism

def _random_expression_check(seed):
    rng = np.random.default_rng(seed)
    ctx = engine.new_context(32, initial_level=6)
    n = ctx.slot_count

    plain = [rng.uniform(-1e3, 1e3, n) for _ in range(3)]
    cts = [ctx.encrypt(ctx.encode(p)) for p in plain]
    vals = list(plain)

    for _ in range(12):
        op = rng.integers(0, 5)
        i, j = rng.integers(0, len(cts), 2)
        if op == 0:
            cts.append(ctx.add(cts[i], cts[j]))
            vals.append(vals[i] + vals[j])
        elif op == 1:
            cts.append(ctx.sub(cts[i], cts[j]))
            vals.append(vals[i] - vals[j])
        elif op == 2:
            k = int(rng.integers(0, n))
            cts.append(ctx.rot(cts[i], k))
            vals.append(np.roll(vals[i], -k))
        elif op == 3:
            mask = rng.uniform(-1, 1, n)
            cts.append(ctx.mul_pt(cts[i], ctx.encode(mask)))
            vals.append(vals[i] * mask)
        else:
            if cts[i].level >= 2 and cts[j].level >= 2:
                prod = ctx.rescale(ctx.mul_ct(cts[i], cts[j]))
                cts.append(prod)
                vals.append(vals[i] * vals[j])
    for ct, val in zip(cts, vals):
        got = ctx.decode(ctx.ddec(ct, ctx.parties))
        scale = np.maximum(np.abs(val), 1.0)
        assert np.max(np.abs(got - val) / scale) < 1e-9


@pytest.mark.parametrize("seed", range(8))
def test_homomorphism_random_expressions(seed):
    _random_expression_check(seed)


def test_level_never_increases_without_bootstrap():
    rng = np.random.default_rng(5)
    ctx = engine.new_context(32)
    ct = ctx.encrypt(ctx.encode(rng.standard_normal(4)))
    level = ct.level
    for op in (lambda c: ctx.add(c, c), lambda c: ctx.rot(c, 3),
               lambda c: ctx.mul_pt(c, ctx.encode([1.0])),
               lambda c: ctx.rescale(c)):
        ct = op(ct)
        assert ct.level <= level
        level = ct.level


# ------------------------------------------------------------- gaussian mode

def test_gaussian_noise_bounded():
    sigma = 1e-6
    ctx = engine.new_context(2 ** 10, party_count=2, noise_mode="gaussian",
                             noise_sigma=sigma, noise_seed=42)
    values = np.linspace(-1, 1, ctx.slot_count)
    ct = ctx.encrypt(ctx.encode(values))
    out = ctx.decode(ctx.ddec(ct, ctx.parties))
    assert np.max(np.abs(out - values)) <= 6 * sigma
    prod = ctx.mul_ct(ct, ctx.encrypt(ctx.encode(np.ones(ctx.slot_count))))
    out2 = ctx.decode(ctx.ddec(prod, ctx.parties))
    assert np.max(np.abs(out2 - out)) <= 6 * sigma


def test_gaussian_mode_requires_sigma():
    with pytest.raises(EngineError):
        engine.new_context(64, noise_mode="gaussian")


def test_slots_are_immutable():
    ctx = make_ctx()
    ct = ctx.encrypt(ctx.encode([1.0, 2.0]))
    with pytest.raises(ValueError):
        ct.slots[0] = 99.0
