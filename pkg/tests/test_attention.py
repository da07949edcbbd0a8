import numpy as np
import pytest

from attention import (
    ABLATIONS, DeltaSource, PrecisionPlan, backward, default_alpha, delta_diff, forward, read_tape, safe_softmax,
    write_tape,
)
from linalg import Mat, Mode, same_bits
from numerics import ContractError, Grid, on_grid

EXACT = PrecisionPlan.all_exact()


def qkv(seed, n=6, d=4, grid=Grid.B16, scale=1.0):
    rng = np.random.default_rng(seed)
    return tuple(Mat.rounded(rng.standard_normal((n, d)) * scale, grid) for _ in range(3))


def reference_attention(q, k, v, causal=False):
    s = default_alpha(q.shape[1]) * q @ k.T
    if causal:
        s = np.where(np.triu(np.ones_like(s, dtype=bool), 1), -np.inf, s)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    return (p / p.sum(axis=1, keepdims=True)) @ v


@pytest.mark.parametrize("causal", [False, True])
def test_exact_forward_matches_reference(causal):
    q, k, v = qkv(0, n=7, d=5, grid=Grid.F64)
    tape = forward(q, k, v, plan=EXACT, causal=causal)
    np.testing.assert_allclose(tape.O.data, reference_attention(q.data, k.data, v.data, causal), rtol=1e-12, atol=1e-12)


def test_lp_forward_grids():
    q, k, v = qkv(1)
    tape = forward(q, k, v)
    assert on_grid(tape.O_lp.data, Grid.B16)
    assert on_grid(tape.O_hp.data, Grid.F32)
    assert on_grid(tape.P_bar.data, Grid.B16)
    assert tape.L.grid is Grid.F32
    np.testing.assert_allclose(tape.O_lp.data, tape.O_hp.data, atol=0.05)


def test_lp_forward_needs_b16_inputs():
    q, k, v = qkv(2, grid=Grid.F64)
    with pytest.raises(ContractError):
        forward(q, k, v)
    forward(q, k, v, plan=EXACT)


def test_shape_contract():
    q, k, v = qkv(3)
    with pytest.raises(ContractError):
        forward(q, Mat.rounded(np.ones((6, 3)), Grid.B16), v)
    with pytest.raises(ContractError):
        forward(q.block(0, 3), k, v, causal=True)


def test_causal_first_row_copies_first_value():
    q, k, v = qkv(4, grid=Grid.F64)
    tape = forward(q, k, v, plan=EXACT, causal=True)
    assert same_bits(tape.O.data[0], v.data[0])
    assert np.all(tape.P.data[0, 1:] == 0.0)


def test_safe_softmax_maps_row_max_to_one():
    rng = np.random.default_rng(5)
    s = Mat.rounded(rng.standard_normal((20, 9)) * 4, Grid.B16)
    p_bar, m, l = safe_softmax(s, Mode.LP)
    top = np.argmax(s.data, axis=1)
    assert np.all(p_bar.data[np.arange(20), top] == 1.0)
    assert np.all(p_bar.data <= 1.0)
    assert np.all(l.data >= 1.0)
    with pytest.raises(ContractError):
        safe_softmax(Mat([[np.inf, 0.0]]))


@pytest.mark.parametrize("source", list(DeltaSource))
def test_delta_sources_agree_in_exact_arithmetic(source):
    plan = PrecisionPlan(Mode.EXACT, Mode.EXACT, Mode.EXACT, Mode.EXACT, source, Mode.EXACT)
    rng = np.random.default_rng(6)
    for trial in range(100):
        n = int(rng.integers(2, 24))
        q, k, v = qkv(100 + trial, n=n, d=4, grid=Grid.F64, scale=2.0)
        d_o = Mat(rng.standard_normal((n, 4)))
        tape = forward(q, k, v, plan=plan)
        reference = backward(tape, d_o, plan=EXACT)
        grads = backward(tape, d_o)
        np.testing.assert_allclose(grads.delta.data, reference.delta.data, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(grads.dQ.data, reference.dQ.data, rtol=1e-6, atol=1e-6)


def test_exact_plan_has_no_output_gap():
    q, k, v = qkv(7, grid=Grid.F64)
    tape = forward(q, k, v, plan=EXACT)
    assert tape.O_lp.same_bits(tape.O_hp)
    gap = delta_diff(tape, Mat(np.ones(tape.O.shape)))
    assert np.all(gap.data == 0.0)


def test_tied_row_with_negative_values_has_positive_delta_gap():
    # scores [2, -2, 2]: two probabilities of exactly one, values all negative
    q = Mat([[1.0, 0.0]], Grid.B16)
    k = Mat([[2.0, 0.0], [-2.0, 0.0], [2.0, 0.0]], Grid.B16)
    v = Mat([[-2.40625], [-2.0], [-2.296875]], Grid.B16)
    tape = forward(q, k, v, alpha=1.0)
    assert list(tape.P_bar.data[0]) == [1.0, 0.018310546875, 1.0]
    output_error = tape.O_lp.data[0, 0] - tape.O_hp.data[0, 0]
    assert output_error < 0.0
    gap = delta_diff(tape, Mat([[-1.0]]))
    assert gap.data[0] > 0.0
    assert gap.data[0] == -output_error


def test_exact_gradients_match_finite_differences():
    q, k, v = qkv(8, n=5, d=3, grid=Grid.F64)
    g = np.random.default_rng(9).standard_normal((5, 3))
    grads = backward(forward(q, k, v, plan=EXACT), Mat(g))

    def loss(qd, kd, vd):
        return float(np.sum(forward(Mat(qd), Mat(kd), Mat(vd), plan=EXACT).O.data * g))

    h = 1e-6
    for name, target, analytic in (("q", 0, grads.dQ), ("k", 1, grads.dK), ("v", 2, grads.dV)):
        for i in range(5):
            for j in range(3):
                plus = [q.data.copy(), k.data.copy(), v.data.copy()]
                minus = [q.data.copy(), k.data.copy(), v.data.copy()]
                plus[target][i, j] += h
                minus[target][i, j] -= h
                numeric = (loss(*plus) - loss(*minus)) / (2 * h)
                assert abs(numeric - analytic.data[i, j]) <= 1e-6 * max(1.0, abs(numeric)), (name, i, j)


def test_backward_checks_shapes():
    q, k, v = qkv(10)
    tape = forward(q, k, v)
    with pytest.raises(ContractError):
        backward(tape, Mat(np.ones((2, 4))))


def test_lp_gradients_are_f32():
    q, k, v = qkv(11)
    tape = forward(q, k, v)
    grads = backward(tape, Mat.rounded(np.ones(tape.O.shape) * 0.1, Grid.B16))
    assert grads.dQ.grid is Grid.F32
    assert on_grid(grads.dK.data, Grid.F32)


def test_tape_round_trip(tmp_path):
    q, k, v = qkv(12)
    plan = ABLATIONS["delta_recompute_pv"]
    tape = forward(q, k, v, plan=plan, causal=True)
    path = tmp_path / "tape.bin"
    write_tape(path, tape)
    loaded = read_tape(path)
    assert loaded.plan == plan
    assert loaded.causal and loaded.alpha == tape.alpha
    for name in ("q", "k", "v", "S", "P_bar", "P", "O_lp", "O_hp", "m", "l", "L"):
        assert getattr(loaded, name).same_bits(getattr(tape, name)), name


def test_plans():
    assert set(ABLATIONS) >= {"baseline", "delta_o_hp", "delta_dp_p", "delta_recompute_pv", "pv_hp", "all_hp"}
    assert ABLATIONS["baseline"].uses_lp()
    assert not PrecisionPlan.all_hp().uses_lp()
    assert PrecisionPlan.all_lp().backward_mode is Mode.LP
    assert PrecisionPlan().to_dict()["delta_source"] == "dO_O_lp"
    with pytest.raises(ContractError):
        PrecisionPlan(score_mode="fast")
