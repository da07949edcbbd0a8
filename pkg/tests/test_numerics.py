import math
import os
import struct

import numpy as np
import pytest

from numerics import (
    B16, ContractError, Grid, accumulate_f32, add_b16_pair, add_to_b16, b16_bits, b16_from_bits, bf16_add,
    check_f32_conformance, decode_b16, dot_hp, dot_lp, encode_b16, low_bits_rate, matmul_accumulate, on_grid,
    prefix_error_trace, round_to_b16, round_to_grid, rounding_bit_table, ulp_b16,
)

GOLDEN = os.path.join(os.path.dirname(__file__), "fixtures", "b16_golden.txt")

WORKED_P = [1.0, 0.515625, 1.0]
WORKED_V = [-2.40625, -0.001678466796875, -2.296875]
WORKED_EXACT = -4.703990459442139
WORKED_ERROR = -0.014759540557861328


def golden_vectors():
    with open(GOLDEN) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            x_hex, b_hex = line.strip().split(",")
            yield struct.unpack(">d", bytes.fromhex(x_hex))[0], int(b_hex, 16)


@pytest.mark.parametrize("x,bits", list(golden_vectors()))
def test_golden_vectors(x, bits):
    assert encode_b16(x).bits == bits


def test_f32_conformance():
    check_f32_conformance()


@pytest.mark.parametrize("x,pattern,value", [
    (WORKED_EXACT, "1 10000001 0010111", -4.71875),
    (1.0, "0 01111111 0000000", 1.0),
    (2.40625, "0 10000000 0011010", 2.40625),
])
def test_encode_examples(x, pattern, value):
    b = encode_b16(x)
    assert str(b) == pattern
    assert decode_b16(b) == value


def test_decode_examples():
    assert decode_b16(B16.from_string("1 10000000 0010011")) == -2.296875
    zero = decode_b16(B16(0))
    assert zero == 0.0 and math.copysign(1.0, zero) == 1.0
    assert decode_b16(B16.from_string("1 10000001 0010111")) == -4.71875


def test_exhaustive_round_trip():
    bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
    values = b16_from_bits(bits)
    keep = ~np.isnan(values)
    assert np.array_equal(b16_bits(values[keep]), bits[keep])


def test_nan_is_canonical():
    assert encode_b16(float("nan")).bits == 0x7FC0
    assert encode_b16(-float("nan")).bits == 0x7FC0


def test_midpoints_round_to_even():
    rng = np.random.default_rng(3)
    bits = rng.integers(0x0001, 0x7F7F, size=20000).astype(np.uint16)
    low = b16_from_bits(bits)
    high = b16_from_bits(bits + np.uint16(1))
    mid = 0.5 * (low + high)
    for sign in (1.0, -1.0):
        rounded = b16_bits(sign * mid)
        assert np.all((rounded & 1) == 0)


def test_monotone():
    rng = np.random.default_rng(4)
    x = np.sort(rng.standard_normal(50000) * 10.0 ** rng.uniform(-30, 30, 50000))
    assert np.all(np.diff(round_to_b16(x)) >= 0)


def test_half_ulp_bound():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(50000) * 10.0 ** rng.uniform(-20, 20, 50000)
    assert np.all(np.abs(round_to_b16(x) - x) <= ulp_b16(x) / 2)


def test_overflow_and_subnormals():
    assert round_to_b16(3.5e38) == np.inf
    assert round_to_b16(-3.5e38) == -np.inf
    assert round_to_b16(2.0 ** -133) == 2.0 ** -133
    assert round_to_b16(3 * 2.0 ** -134) == 2.0 ** -132


def test_on_grid():
    assert on_grid([1.0, 2.40625], Grid.B16)
    assert not on_grid([1.0 + 2.0 ** -10], Grid.B16)
    assert on_grid([1.0 + 2.0 ** -10], Grid.F32)
    assert not on_grid([float("nan")], Grid.F64)
    assert np.array_equal(round_to_grid([0.1], Grid.F64), [0.1])


def test_pair_addition_ties_to_even():
    result, event = add_b16_pair(encode_b16(-2.40625), encode_b16(-2.296875))
    assert result.value == -4.6875
    assert event.exact == -4.703125
    assert event.rounding_bit == 1
    assert not event.sticky
    assert event.overflow_shift
    assert event.error == -4.6875 - -4.703125
    assert not event.rounded_up


def test_pair_addition_identities():
    result, event = add_b16_pair(encode_b16(1.5), encode_b16(0.0))
    assert result.value == 1.5 and event.error == 0.0 and not event.overflow_shift

    result, event = add_b16_pair(encode_b16(1.0), encode_b16(1.0))
    assert result.value == 2.0 and event.error == 0.0 and event.overflow_shift


def test_pair_addition_rejects_inf():
    with pytest.raises(ContractError):
        add_b16_pair(encode_b16(float("inf")), encode_b16(1.0))


def test_worked_example_with_sticky_residual():
    walk = add_to_b16(-2.4071154594421387, -2.296875)
    assert walk.exact == WORKED_EXACT
    assert str(walk.result) == "1 10000001 0010111"
    assert walk.result.value == -4.71875
    assert walk.error == WORKED_ERROR
    assert walk.rounding_bit == 1
    assert walk.sticky
    assert walk.event.rounded_up
    assert "round up" in walk.decision


def test_add_to_b16_checks_operands():
    with pytest.raises(ContractError):
        add_to_b16(0.1, 1.0)
    with pytest.raises(ContractError):
        add_to_b16(1.0, 1.0 + 2.0 ** -10)


def test_sticky_forces_round_up():
    rng = np.random.default_rng(6)
    for _ in range(2000):
        a = float(np.float32(rng.uniform(-8, 8)))
        b = float(round_to_b16(rng.uniform(-8, 8)))
        walk = bf16_add(a, b)
        ev = walk.event
        if ev.exact != 0.0:
            assert ev.error == walk.result.value - ev.exact
        if ev.rounding_bit and ev.sticky:
            assert ev.rounded_up


def test_rounding_bit_table():
    table = rounding_bit_table()
    assert len(table) == 10
    assert len({(e.a, e.b) for e in table}) == 10
    for entry in table:
        total = int(entry.a, 2) + int(entry.b, 2)
        assert entry.rounding_bit == total & 1
        assert int(entry.kept, 2) == (total >> 1) & 0b11


def test_dot_lp_worked_example():
    result, exact = dot_lp(WORKED_P, WORKED_V)
    assert result.value == -4.71875
    assert exact == WORKED_EXACT
    assert result.value - exact == WORKED_ERROR
    assert dot_hp(WORKED_P, WORKED_V) == WORKED_EXACT


def test_dot_lp_contract():
    with pytest.raises(ContractError):
        dot_lp([1.0, 2.0], [1.0])
    with pytest.raises(ContractError):
        dot_lp([0.1], [1.0])


def test_prefix_trace_worked_example():
    events = prefix_error_trace(WORKED_P, WORKED_V)
    assert [e.position for e in events] == [0, 1, 2]
    assert events[0].error == 0.0
    assert events[2].exact == WORKED_EXACT
    assert events[2].error == WORKED_ERROR
    assert events[2].overflow_shift
    assert not events[1].overflow_shift
    assert events[2].sticky and events[2].rounding_bit == 1


def test_prefix_trace_steps_negative_at_second_unit_probability():
    # 2.40625 + 2^-8 + 2.296875 = 4.70703125 sits 0.625 of an ulp above 4.6875
    events = prefix_error_trace([1.0, 2.0 ** -9, 1.0], [-2.40625, -2.0, -2.296875])
    assert [e.error for e in events] == [0.0, 0.00390625, -0.01171875]
    assert events[2].overflow_shift and events[2].rounded_up
    assert events[2].rounding_bit == 1 and events[2].sticky


def test_prefix_trace_is_unbiased_below_one():
    errors = []
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        p = round_to_b16(rng.uniform(0.0, 0.99, 16))
        v = round_to_b16(rng.uniform(-3.0, -1.0, 16))
        last = prefix_error_trace(p, v)[-1]
        errors.append(last.error / ulp_b16(last.exact))
    assert abs(np.mean(errors)) < 0.1


def test_prefix_trace_exact_inputs_has_no_error():
    events = prefix_error_trace([1.0, 1.0, 1.0], [0.5, 0.25, 0.125])
    assert all(e.error == 0.0 for e in events)


def test_per_step_accumulation_rounds_every_prefix():
    terms = np.array([[1.0, 2.0 ** -9, 2.0 ** -9, 2.0 ** -9, 2.0 ** -9]])
    assert accumulate_f32(terms)[0] == 1.0 + 4 * 2.0 ** -9
    # each 2^-9 addition is below half a BF16 ulp at 1.0 and is lost
    assert accumulate_f32(terms, per_step=True)[0] == 1.0


def test_accumulate_continues_from_init():
    rng = np.random.default_rng(7)
    terms = rng.standard_normal((4, 10))
    full = accumulate_f32(terms)
    part = accumulate_f32(terms[:, :6])
    assert np.array_equal(accumulate_f32(terms[:, 6:], init=part), full)

    a, b = rng.standard_normal((3, 8)), rng.standard_normal((8, 2))
    head = matmul_accumulate(a[:, :5], b[:5], Grid.F32)
    assert np.array_equal(matmul_accumulate(a[:, 5:], b[5:], Grid.F32, init=head), matmul_accumulate(a, b, Grid.F32))


def test_low_bits_rate():
    # the middle product is the residual of the worked example; zero products are ignored
    assert low_bits_rate([1.0, 0.515625, 0.0], [-2.40625, -0.001678466796875, 3.0]) == 0.5
    assert low_bits_rate(np.ones((2, 1)), np.array([[0.5, 0.25]])) == 0.0
    assert low_bits_rate([0.0], [1.0]) == 0.0
    with pytest.raises(ContractError):
        low_bits_rate([0.1], [1.0])
