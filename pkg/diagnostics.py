"""
Gradient-error forensics.

The only term that differs between the low- and high-precision backward
passes is δ. Its per-token difference (the "coefficients") scales row T of
α·P·K, so the query-gradient error is α·diag(coeffs)·(P K) and the W_Q
gradient error is a coefficient-weighted sum of rank-1 matrices
(P K)[T]ᵀ X[T]. This module builds those pieces, measures how alike the
rank-1 terms are, and tracks bias and spectral norms over training.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from attention import AttnTape, delta_diff
from linalg import Mat, Vec, spectral_norm
from numerics import ContractError, accumulate_f64

REPORT_SCHEMA = "grad-error-report/1"
DEFAULT_WEIGHT_NAMES = ("W_Q", "W_K", "W_V")


@dataclass(frozen=True, eq=False)
class GradErrorReport:
    coeffs: Vec
    dq_diff: Mat
    dwq_diff: Mat
    rank1_terms: list[Mat]
    similarity: Mat
    bias_sum: float
    r_hat: Mat
    r_hat_residual: float
    zero_terms: int
    alpha: float
    term_norms: Vec | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.coeffs)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None], norms


def decompose_grad_error(coeffs: Vec, P: Mat, K: Mat, X: Mat, alpha: float,
                         with_terms: bool = True) -> GradErrorReport:
    """Split the W_Q gradient error into per-token rank-1 terms.

    Everything is float64. With with_terms=False the rank-1 matrices and the
    similarity matrix are skipped; coefficients, diffs, bias and r_hat are
    still filled in.
    """
    c = coeffs.data
    n = len(c)
    if P.shape != (n, K.rows):
        raise ContractError(f"P shape {P.shape} does not match {n} coefficients and {K.rows} keys")
    if X.rows != n:
        raise ContractError(f"X has {X.rows} rows, expected {n}")

    pk = P.data @ K.data
    dq_diff = alpha * c[:, None] * pk
    dwq_diff = dq_diff.T @ X.data

    pk_unit, pk_norms = _unit_rows(pk)
    x_unit, x_norms = _unit_rows(X.data)
    term_norms = pk_norms * x_norms
    live = term_norms > 0
    zero_terms = int(n - live.sum())

    # Frobenius-normalised outer products average to (pk_unit)ᵀ x_unit / count
    if live.any():
        r_hat = pk_unit[live].T @ x_unit[live] / live.sum()
    else:
        r_hat = np.zeros((K.cols, X.cols))
    r_hat_residual = _projection_residual(dwq_diff, r_hat)

    rank1_terms: list[Mat] = []
    similarity = np.zeros((0, 0))
    if with_terms:
        rank1_terms = [Mat(np.outer(pk[t], X.data[t])) for t in range(n)]
        # <a bᵀ, c dᵀ>_F = (a·c)(b·d)
        similarity = (pk_unit @ pk_unit.T) * (x_unit @ x_unit.T)
        similarity[~live, :] = 0.0
        similarity[:, ~live] = 0.0
        np.fill_diagonal(similarity, 1.0)

    return GradErrorReport(
        coeffs=coeffs,
        dq_diff=Mat(dq_diff),
        dwq_diff=Mat(dwq_diff),
        rank1_terms=rank1_terms,
        similarity=Mat(similarity),
        bias_sum=float(accumulate_f64(c)),
        r_hat=Mat(r_hat),
        r_hat_residual=r_hat_residual,
        zero_terms=zero_terms,
        alpha=float(alpha),
        term_norms=Vec(term_norms),
    )


def _projection_residual(target: np.ndarray, basis: np.ndarray) -> float:
    """Relative error of the best multiple of `basis` approximating `target`."""
    t_norm = np.linalg.norm(target)
    if t_norm == 0.0:
        return 0.0
    b_sq = float(np.sum(basis * basis))
    if b_sq == 0.0:
        return 1.0
    scale = float(np.sum(target * basis)) / b_sq
    return float(np.linalg.norm(target - scale * basis) / t_norm)


def grad_error_report(tape: AttnTape, dO: Mat, X: Mat, K: Mat | None = None,
                      alpha: float | None = None) -> GradErrorReport:
    """Gradient-error report for one attention call (dq_diff = dQ_hp - dQ_lp)."""
    K = tape.k if K is None else K
    alpha = tape.alpha if alpha is None else alpha
    if K.shape != tape.k.shape:
        raise ContractError(f"K shape {K.shape} does not match the tape's keys {tape.k.shape}")
    coeffs = delta_diff(tape, dO)
    return decompose_grad_error(coeffs, tape.P, K, X, alpha)


def recompose(report: GradErrorReport, drop: int | None = None) -> Mat:
    """α Σ_T coeffs[T]·rank1_terms[T], optionally leaving out token `drop`."""
    if not report.rank1_terms:
        raise ContractError("report was built without rank-1 terms")
    total = np.zeros_like(report.rank1_terms[0].data)
    for t, term in enumerate(report.rank1_terms):
        if t == drop:
            continue
        total = total + report.alpha * report.coeffs.data[t] * term.data
    return Mat(total)


def bias_cumsum(reports) -> np.ndarray:
    """Running sum of bias_sum; accepts reports or plain bias values."""
    values = [r.bias_sum if isinstance(r, GradErrorReport) else float(r) for r in reports]
    if not values:
        raise ContractError("bias_cumsum needs at least one report")
    return np.cumsum(np.array(values, dtype=np.float64))


def similarity_summary(report: GradErrorReport, threshold: float = 0.9) -> float:
    """Fraction of token pairs (both non-zero) whose rank-1 terms have cosine > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    sim = report.similarity.data
    if sim.shape[0] != report.n_tokens:
        raise ContractError("report was built without the similarity matrix")
    live = report.term_norms.data > 0 if report.term_norms is not None else np.ones(report.n_tokens, bool)
    idx = np.flatnonzero(live)
    if len(idx) < 2:
        return 0.0
    sub = sim[np.ix_(idx, idx)]
    upper = sub[np.triu_indices(len(idx), k=1)]
    return float(np.mean(upper > threshold))


# ---------------------------------------------------------------------------
# Spectral norm series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormSeries:
    steps: tuple[int, ...] = ()
    norms: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for name, values in self.norms.items():
            if len(values) != len(self.steps):
                raise ContractError(f"norm series {name} has {len(values)} entries for {len(self.steps)} steps")

    def final(self, name: str) -> float:
        return self.norms[name][-1]

    def growth_slope(self, name: str) -> float:
        """Least-squares slope of the series against the step index."""
        if len(self.steps) < 2:
            return 0.0
        slope, _ = np.polyfit(np.array(self.steps, dtype=float), np.array(self.norms[name]), 1)
        return float(slope)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"step": list(self.steps), **{f"norm_{k}": list(v) for k, v in self.norms.items()}})


def norm_tracker(weights: list[Mat], step: int, series: NormSeries | None = None,
                 names: list[str] | None = None) -> NormSeries:
    """Append the spectral norm of each weight at `step`; returns a new series."""
    series = series or NormSeries()
    if names is None:
        names = list(series.norms) or (
            list(DEFAULT_WEIGHT_NAMES[:len(weights)]) if len(weights) <= 3 else [f"W_{i}" for i in range(len(weights))]
        )
    if len(names) != len(weights):
        raise ContractError(f"{len(weights)} weights but {len(names)} names")
    if series.norms and set(names) != set(series.norms):
        raise ContractError(f"weight names {names} do not match the series {list(series.norms)}")

    norms = {name: series.norms.get(name, ()) + (spectral_norm(w).value,) for name, w in zip(names, weights)}
    return NormSeries(series.steps + (int(step),), norms)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def report_to_dict(report: GradErrorReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "alpha": report.alpha,
        "bias_sum": report.bias_sum,
        "zero_terms": report.zero_terms,
        "r_hat_residual": report.r_hat_residual,
        "coeffs": report.coeffs.data.tolist(),
        "term_norms": None if report.term_norms is None else report.term_norms.data.tolist(),
        "dq_diff": report.dq_diff.data.tolist(),
        "dwq_diff": report.dwq_diff.data.tolist(),
        "r_hat": report.r_hat.data.tolist(),
        "similarity": report.similarity.data.tolist(),
        "rank1_terms": [t.data.tolist() for t in report.rank1_terms],
    }


def _mat(values, cols: int = 0) -> Mat:
    arr = np.array(values, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, cols)
    return Mat(arr)


def report_from_dict(data: dict) -> GradErrorReport:
    if data.get("schema") != REPORT_SCHEMA:
        raise ContractError(f"expected schema {REPORT_SCHEMA}, got {data.get('schema')!r}")
    return GradErrorReport(
        coeffs=Vec(np.array(data["coeffs"], dtype=np.float64)),
        dq_diff=_mat(data["dq_diff"]),
        dwq_diff=_mat(data["dwq_diff"]),
        rank1_terms=[_mat(t) for t in data["rank1_terms"]],
        similarity=_mat(data["similarity"]),
        bias_sum=float(data["bias_sum"]),
        r_hat=_mat(data["r_hat"]),
        r_hat_residual=float(data["r_hat_residual"]),
        zero_terms=int(data["zero_terms"]),
        alpha=float(data["alpha"]),
        term_norms=None if data.get("term_norms") is None else Vec(np.array(data["term_norms"], dtype=np.float64)),
    )


def write_report_json(report: GradErrorReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=1)


def read_report_json(path) -> GradErrorReport:
    with open(path, "r", encoding="utf-8") as f:
        return report_from_dict(json.load(f))


def report_summary_frame(report: GradErrorReport) -> pd.DataFrame:
    c = report.coeffs.data
    norms = report.term_norms.data if report.term_norms is not None else np.full(len(c), np.nan)
    return pd.DataFrame({
        "token": np.arange(len(c)),
        "coeff": c,
        "term_norm": norms,
        "weighted_norm": np.abs(report.alpha * c) * norms,
        "zero_term": norms == 0,
    })


def write_report_csv(report: GradErrorReport, path) -> None:
    report_summary_frame(report).to_csv(path, index=False)
