import dataclasses

import numpy as np
import pandas as pd
import pytest

from attention import DeltaSource, PrecisionPlan, backward, forward
from diagnostics import (
    NormSeries, bias_cumsum, decompose_grad_error, grad_error_report, norm_tracker, read_report_json, recompose,
    report_from_dict, report_to_dict, similarity_summary, write_report_csv, write_report_json,
)
from linalg import Mat, Mode, Vec, same_bits
from numerics import ContractError, Grid

# BF16 forward, float64 backward: the two backward passes differ only through δ
LP_FORWARD = PrecisionPlan(backward_mode=Mode.EXACT)


def instance(seed, n=12, d=4, model_dim=6):
    rng = np.random.default_rng(seed)
    q, k, v = (Mat.rounded(rng.standard_normal((n, d)), Grid.B16) for _ in range(3))
    d_o = Mat(rng.standard_normal((n, d)) * 0.1)
    x = Mat(rng.standard_normal((n, model_dim)))
    return q, k, v, d_o, x


def test_query_gradient_error_matches_two_backward_passes():
    rng = np.random.default_rng(0)
    for trial in range(20):
        q, k, v, d_o, x = instance(trial, n=int(rng.integers(4, 33)))
        tape = forward(q, k, v, plan=LP_FORWARD)
        lp = backward(tape, d_o)
        hp = backward(tape, d_o, plan=dataclasses.replace(LP_FORWARD, delta_source=DeltaSource.DO_O_HP))
        report = grad_error_report(tape, d_o, x)
        expected = hp.dQ.data - lp.dQ.data
        np.testing.assert_allclose(report.dq_diff.data, expected, rtol=0, atol=1e-8)
        np.testing.assert_allclose(report.dwq_diff.data, expected.T @ x.data, rtol=0, atol=1e-8)
        assert report.dwq_diff.shape == (4, 6)


def test_recompose_rebuilds_weight_gradient_error():
    q, k, v, d_o, x = instance(1)
    report = grad_error_report(forward(q, k, v), d_o, x)
    scale = max(1.0, np.abs(report.dwq_diff.data).max())
    np.testing.assert_allclose(recompose(report).data, report.dwq_diff.data, rtol=0, atol=1e-10 * scale)


def test_zero_coefficient_removes_exactly_one_term():
    q, k, v, d_o, x = instance(2)
    tape = forward(q, k, v)
    report = grad_error_report(tape, d_o, x)
    t = 3
    coeffs = report.coeffs.data.copy()
    coeffs[t] = 0.0
    without = decompose_grad_error(Vec(coeffs), tape.P, tape.k, x, tape.alpha)
    removed = report.dwq_diff.data - without.dwq_diff.data
    expected = tape.alpha * report.coeffs.data[t] * report.rank1_terms[t].data
    np.testing.assert_allclose(removed, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(recompose(report, drop=t).data, without.dwq_diff.data, rtol=0, atol=1e-12)


def test_exact_plan_has_no_gradient_error():
    q, k, v, d_o, x = instance(3)
    report = grad_error_report(forward(q, k, v, plan=PrecisionPlan.all_exact()), d_o, x)
    assert np.all(report.coeffs.data == 0.0)
    assert np.all(report.dwq_diff.data == 0.0)
    assert report.bias_sum == 0.0


def test_bias_sum_is_sum_of_coefficients():
    q, k, v, d_o, x = instance(4)
    report = grad_error_report(forward(q, k, v), d_o, x)
    assert report.n_tokens == 12
    assert report.bias_sum == pytest.approx(report.coeffs.data.sum(), abs=1e-15)


def test_identical_terms_are_fully_similar():
    n = 5
    p = Mat(np.full((n, n), 1.0 / n))
    k = Mat(np.arange(1.0, 2 * n + 1).reshape(n, 2))
    x = Mat(np.tile([1.0, -2.0, 0.5], (n, 1)))
    report = decompose_grad_error(Vec(np.ones(n)), p, k, x, 0.5)
    np.testing.assert_allclose(report.similarity.data, np.ones((n, n)), atol=1e-12)
    assert similarity_summary(report) == 1.0
    assert report.r_hat_residual < 1e-12


def test_orthogonal_terms_are_dissimilar():
    n = 4
    report = decompose_grad_error(Vec(np.ones(n)), Mat.identity(n), Mat(np.ones((n, 3))), Mat.identity(n), 0.5)
    assert np.all(np.diag(report.similarity.data) == 1.0)
    assert similarity_summary(report, threshold=0.5) == 0.0


def test_zero_terms_are_excluded():
    q, k, v, d_o, x = instance(5)
    xd = x.data.copy()
    xd[2] = 0.0
    report = grad_error_report(forward(q, k, v), d_o, Mat(xd))
    assert report.zero_terms == 1
    sim = report.similarity.data
    assert sim[2, 2] == 1.0
    assert np.all(np.delete(sim[2], 2) == 0.0)
    assert np.all(report.rank1_terms[2].data == 0.0)
    assert 0.0 <= similarity_summary(report) <= 1.0


def test_report_without_terms():
    q, k, v, d_o, x = instance(6)
    tape = forward(q, k, v)
    full = grad_error_report(tape, d_o, x)
    light = decompose_grad_error(full.coeffs, tape.P, tape.k, x, tape.alpha, with_terms=False)
    assert light.similarity.shape == (0, 0)
    assert light.dwq_diff.same_bits(full.dwq_diff)
    with pytest.raises(ContractError):
        recompose(light)
    with pytest.raises(ContractError):
        similarity_summary(light)


def test_decompose_checks_shapes():
    q, k, v, d_o, x = instance(7)
    tape = forward(q, k, v)
    with pytest.raises(ContractError):
        decompose_grad_error(Vec(np.ones(3)), tape.P, tape.k, x, tape.alpha)
    with pytest.raises(ContractError):
        grad_error_report(tape, d_o, x, K=Mat(np.ones((3, 4))))


def test_bias_cumsum():
    assert list(bias_cumsum([0.25])) == [0.25]
    assert list(bias_cumsum([1.0, -1.0, 1.0, -1.0])) == [1.0, 0.0, 1.0, 0.0]
    with pytest.raises(ContractError):
        bias_cumsum([])


def test_norm_tracker():
    series = None
    for step in range(3):
        series = norm_tracker([Mat.identity(3), Mat(np.eye(3) * 2.0 ** step)], step, series, names=["W_Q", "W_K"])
    assert series.steps == (0, 1, 2)
    np.testing.assert_allclose(series.norms["W_Q"], [1.0, 1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(series.norms["W_K"], [1.0, 2.0, 4.0], atol=1e-12)
    assert abs(series.growth_slope("W_Q")) < 1e-9
    assert series.growth_slope("W_K") > 1.0
    assert series.final("W_K") == pytest.approx(4.0)
    assert list(series.to_frame().columns) == ["step", "norm_W_Q", "norm_W_K"]
    with pytest.raises(ContractError):
        norm_tracker([Mat.identity(2)], 3, series)
    with pytest.raises(ContractError):
        NormSeries((0, 1), {"W_Q": (1.0,)})


def test_norm_tracker_default_names():
    series = norm_tracker([Mat.identity(2)] * 3, 0)
    assert list(series.norms) == ["W_Q", "W_K", "W_V"]


def test_report_json_round_trip(tmp_path):
    q, k, v, d_o, x = instance(8)
    report = grad_error_report(forward(q, k, v), d_o, x)
    path = tmp_path / "report.json"
    write_report_json(report, path)
    loaded = read_report_json(path)
    assert loaded.coeffs.same_bits(report.coeffs)
    assert loaded.dwq_diff.same_bits(report.dwq_diff)
    assert loaded.similarity.same_bits(report.similarity)
    assert same_bits(loaded.rank1_terms[5].data, report.rank1_terms[5].data)
    assert loaded.bias_sum == report.bias_sum
    with pytest.raises(ContractError):
        report_from_dict({**report_to_dict(report), "schema": "other/1"})


def test_report_csv(tmp_path):
    q, k, v, d_o, x = instance(9)
    report = grad_error_report(forward(q, k, v), d_o, x)
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    df = pd.read_csv(path)
    assert list(df.columns) == ["token", "coeff", "term_norm", "weighted_norm", "zero_term"]
    assert len(df) == 12
