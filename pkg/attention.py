"""
Reference (non-tiled) attention with per-operation precision control.

The block-level helpers here (scores, online_step, pv_step, finish_rows,
probabilities, row_dot, ds_block, mm) are the single implementation of each
arithmetic step; flash.py calls the same helpers block by block, which is
what makes a single-block tiling bit-identical to this module.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from linalg import Mat, Mode, Vec, read_container, rowmax, write_container
from numerics import ContractError, Grid, accumulate, accumulate_f64, matmul_accumulate, round_to_grid


class DeltaSource(str, Enum):
    """Where the backward pass takes δ = rowsum(dO ∘ O) from."""

    DO_O_LP = "dO_O_lp"
    DO_O_HP = "dO_O_hp"
    DP_P = "dP_P"
    RECOMPUTE_PV_HP = "recompute_PV_hp"


class Accumulation(str, Enum):
    FINAL = "final"
    PER_STEP = "per_step"


@dataclass(frozen=True)
class PrecisionPlan:
    """Precision of each stage of attention. Defaults: BF16 forward, FP32 backward."""

    score_mode: Mode = Mode.LP
    softmax_mode: Mode = Mode.LP
    pv_mode: Mode = Mode.LP
    normalize_mode: Mode = Mode.LP
    delta_source: DeltaSource = DeltaSource.DO_O_LP
    backward_mode: Mode = Mode.HP
    lp_accumulation: Accumulation = Accumulation.FINAL

    def __post_init__(self):
        try:
            for name in ("score_mode", "softmax_mode", "pv_mode", "normalize_mode", "backward_mode"):
                object.__setattr__(self, name, Mode(getattr(self, name)))
            object.__setattr__(self, "delta_source", DeltaSource(self.delta_source))
            object.__setattr__(self, "lp_accumulation", Accumulation(self.lp_accumulation))
        except ValueError as e:
            raise ContractError(f"invalid precision plan: {e}") from e

    @classmethod
    def all_lp(cls) -> "PrecisionPlan":
        return cls(backward_mode=Mode.LP)

    @classmethod
    def all_hp(cls) -> "PrecisionPlan":
        return cls(Mode.HP, Mode.HP, Mode.HP, Mode.HP, DeltaSource.DO_O_HP, Mode.HP)

    @classmethod
    def all_exact(cls) -> "PrecisionPlan":
        return cls(Mode.EXACT, Mode.EXACT, Mode.EXACT, Mode.EXACT, DeltaSource.DO_O_HP, Mode.EXACT)

    @property
    def forward_modes(self) -> tuple[Mode, ...]:
        return (self.score_mode, self.softmax_mode, self.pv_mode, self.normalize_mode)

    def uses_lp(self) -> bool:
        return Mode.LP in self.forward_modes or self.backward_mode is Mode.LP

    @property
    def per_step(self) -> bool:
        return self.lp_accumulation is Accumulation.PER_STEP

    def to_dict(self) -> dict:
        return {k: v.value for k, v in asdict(self).items()}


# Ablations of the low-precision run: each swaps one computation for its
# high-precision or reformulated counterpart.
ABLATIONS: dict[str, PrecisionPlan] = {
    "baseline": PrecisionPlan(),
    "delta_o_hp": PrecisionPlan(delta_source=DeltaSource.DO_O_HP),
    "delta_dp_p": PrecisionPlan(delta_source=DeltaSource.DP_P),
    "delta_recompute_pv": PrecisionPlan(delta_source=DeltaSource.RECOMPUTE_PV_HP),
    "pv_hp": PrecisionPlan(pv_mode=Mode.HP),
    "all_hp": PrecisionPlan.all_hp(),
    "all_exact": PrecisionPlan.all_exact(),
}


@dataclass(frozen=True, eq=False)
class AttnTape:
    """Forward intermediates kept for backward and diagnostics.

    O_lp is the output as the plan computes it; O_hp is the same output with
    the P̄V product and normalisation promoted to high precision.
    """

    q: Mat
    k: Mat
    v: Mat
    S: Mat
    P_bar: Mat
    P: Mat
    O_lp: Mat
    O_hp: Mat | None
    m: Vec
    l: Vec
    L: Vec
    alpha: float
    plan: PrecisionPlan
    causal: bool = False

    @property
    def O(self) -> Mat:
        return self.O_lp


@dataclass(frozen=True, eq=False)
class AttnGrads:
    dQ: Mat
    dK: Mat
    dV: Mat
    dS: Mat
    dP: Mat
    delta: Vec


def default_alpha(d: int) -> float:
    return 1.0 / math.sqrt(d)


def check_inputs(q: Mat, k: Mat, v: Mat, plan: PrecisionPlan) -> None:
    if q.cols != k.cols:
        raise ContractError(f"q and k head dims differ: {q.shape} vs {k.shape}")
    if k.rows != v.rows:
        raise ContractError(f"k and v lengths differ: {k.shape} vs {v.shape}")
    if q.rows == 0 or k.rows == 0 or q.cols == 0:
        raise ContractError("attention needs at least one query, key and feature")
    if Mode.LP in plan.forward_modes:
        for name, x in (("q", q), ("k", k), ("v", v)):
            if x.grid is not Grid.B16:
                raise ContractError(f"{name} must be on the b16 grid when a forward stage runs in lp")


# ---------------------------------------------------------------------------
# Block-level steps shared with the tiled implementation
# ---------------------------------------------------------------------------

def scores(q: np.ndarray, k: np.ndarray, alpha: float, mode: Mode) -> np.ndarray:
    """alpha * q kᵀ: folded in the accumulator of `mode`, then rounded once to its grid."""
    acc = matmul_accumulate(round_to_grid(q, mode.grid), round_to_grid(k, mode.grid).T, mode.accumulator)
    return round_to_grid(acc * alpha, mode.grid)


def causal_mask(s: np.ndarray, row0: int, col0: int) -> np.ndarray:
    rows = row0 + np.arange(s.shape[0])[:, None]
    cols = col0 + np.arange(s.shape[1])[None, :]
    return np.where(cols > rows, -np.inf, s)


def online_step(s, m_prev, l_prev, m_block, mode: Mode):
    """Merge one score block into the running (m, l) of each row.

    Returns (m_new, scale, p_bar, l_new): p_bar = exp(s - m_new) on the grid
    of `mode`, scale = exp(m_prev - m_new), l_new = scale * l_prev + rowsum(p_bar).
    """
    m_new = np.maximum(m_prev, m_block)
    live = np.isfinite(m_new)
    shift = np.where(live, m_new, 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        p_bar = round_to_grid(np.exp(s - shift[:, None]), mode.grid)
        scale = np.where(np.isfinite(m_prev), np.exp(m_prev - shift), 0.0)
    scale = round_to_grid(scale, mode.accumulator)
    l_init = round_to_grid(scale * l_prev, mode.accumulator)
    l_new = accumulate(p_bar, mode.accumulator, init=l_init)
    return m_new, scale, p_bar, l_new


def pv_step(p_bar, v, o_prev, o_prev_hp, scale, plan: PrecisionPlan):
    """Rescale the output accumulators and fold in p_bar @ v.

    The second accumulator runs the same product in the promoted mode.
    """
    mode = plan.pv_mode
    init = round_to_grid(scale[:, None] * o_prev, mode.accumulator)
    o_acc = matmul_accumulate(
        round_to_grid(p_bar, mode.grid), round_to_grid(v, mode.grid), mode.accumulator, init,
        plan.per_step and mode is Mode.LP,
    )
    dual = mode.promoted()
    init_hp = round_to_grid(scale[:, None] * o_prev_hp, dual.accumulator)
    o_acc_hp = matmul_accumulate(round_to_grid(p_bar, dual.grid), round_to_grid(v, dual.grid), dual.accumulator, init_hp)
    return o_acc, o_acc_hp


def finish_rows(o_acc, o_acc_hp, m, l, plan: PrecisionPlan):
    """Final rounding and normalisation: returns (O, O_hp, L)."""
    o_bar = round_to_grid(o_acc, plan.pv_mode.grid)
    o = round_to_grid(o_bar / l[:, None], plan.normalize_mode.grid)
    o_bar_hp = round_to_grid(o_acc_hp, plan.pv_mode.promoted().grid)
    o_hp = round_to_grid(o_bar_hp / l[:, None], plan.normalize_mode.promoted().grid)
    with np.errstate(divide="ignore"):
        lse = round_to_grid(m + np.log(l), plan.softmax_mode.accumulator)
    return o, o_hp, lse


def probabilities(s, lse, mode: Mode) -> np.ndarray:
    """P = exp(s - L) on the grid of `mode`; masked entries give 0."""
    with np.errstate(invalid="ignore", over="ignore"):
        return round_to_grid(np.exp(s - lse[:, None]), mode.grid)


def mm(a, b, mode: Mode, init=None) -> np.ndarray:
    """Unrounded accumulator of a @ b with operands cast to the grid of `mode`."""
    return matmul_accumulate(round_to_grid(a, mode.grid), round_to_grid(b, mode.grid), mode.accumulator, init)


def row_dot(a, b, mode: Mode, init=None) -> np.ndarray:
    """rowsum(a ∘ b) with products and the fold in the accumulator of `mode`."""
    terms = round_to_grid(a * b, mode.accumulator)
    return accumulate(terms, mode.accumulator, init=init)


def ds_block(p, dp, delta, alpha: float, mode: Mode) -> np.ndarray:
    """dS = alpha * P ∘ (dP - δ), rounded once to the grid of `mode`."""
    return round_to_grid(alpha * (p * (dp - delta[:, None])), mode.grid)


def delta_from_output(source: DeltaSource, d_o, o_lp, o_hp, mode: Mode, init=None) -> np.ndarray:
    if source is DeltaSource.DO_O_LP:
        return row_dot(d_o, o_lp, mode, init)
    if o_hp is None:
        raise ContractError("delta source dO_O_hp needs the high-precision output")
    return row_dot(d_o, o_hp, mode, init)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def safe_softmax(s: Mat, mode: Mode = Mode.EXACT) -> tuple[Mat, Vec, Vec]:
    """exp(s - rowmax(s)) with its row sums; every row's maximum maps to exactly 1."""
    mode = Mode(mode)
    if np.isnan(s.data).any() or np.isposinf(s.data).any():
        raise ContractError("safe_softmax needs finite scores")
    rows = s.rows
    m = s.data.max(axis=1)
    m_new, _, p_bar, l = online_step(s.data, np.full(rows, -np.inf), np.zeros(rows), m, mode)
    return Mat(p_bar, mode.grid), Vec(m_new, s.grid), Vec(l, mode.accumulator)


def forward(q: Mat, k: Mat, v: Mat, alpha: float | None = None,
            plan: PrecisionPlan = PrecisionPlan(), causal: bool = False) -> AttnTape:
    """Softmax(alpha q kᵀ) v computed in one block under `plan`."""
    check_inputs(q, k, v, plan)
    if causal and q.rows != k.rows:
        raise ContractError("causal attention needs as many queries as keys")
    alpha = default_alpha(q.cols) if alpha is None else float(alpha)
    s = scores(q.data, k.data, alpha, plan.score_mode)
    if not np.isfinite(s).all():
        raise ContractError("non-finite attention scores")
    if causal:
        s = causal_mask(s, 0, 0)

    rows = q.rows
    m_block = rowmax(Mat(s, plan.score_mode.grid)).data
    m_new, scale, p_bar, l = online_step(s, np.full(rows, -np.inf), np.zeros(rows), m_block, plan.softmax_mode)
    zeros = np.zeros((rows, v.cols))
    o_acc, o_acc_hp = pv_step(p_bar, v.data, zeros, zeros, scale, plan)
    o, o_hp, lse = finish_rows(o_acc, o_acc_hp, m_new, l, plan)
    p = probabilities(s, lse, plan.backward_mode)

    return AttnTape(
        q=q, k=k, v=v,
        S=Mat(s, plan.score_mode.grid),
        P_bar=Mat(p_bar, plan.softmax_mode.grid),
        P=Mat(p, plan.backward_mode.grid),
        O_lp=Mat(o, plan.normalize_mode.grid),
        O_hp=Mat(o_hp, plan.normalize_mode.promoted().grid),
        m=Vec(m_new, plan.score_mode.grid),
        l=Vec(l, plan.softmax_mode.accumulator),
        L=Vec(lse, plan.softmax_mode.accumulator),
        alpha=alpha,
        plan=plan,
        causal=causal,
    )


def backward(tape: AttnTape, dO: Mat, plan: PrecisionPlan | None = None) -> AttnGrads:
    """Gradients of the attention output with δ taken from plan.delta_source."""
    plan = tape.plan if plan is None else plan
    bm = plan.backward_mode
    if dO.shape != tape.O_lp.shape:
        raise ContractError(f"dO shape {dO.shape} does not match O {tape.O_lp.shape}")
    d_o = round_to_grid(dO.data, bm.grid)
    q, k, v, p = tape.q.data, tape.k.data, tape.v.data, tape.P.data

    dp = round_to_grid(mm(d_o, v.T, bm), bm.grid)
    source = plan.delta_source
    if source is DeltaSource.DP_P:
        delta = row_dot(dp, p, bm)
    elif source is DeltaSource.RECOMPUTE_PV_HP:
        dual = bm.promoted()
        o_re = round_to_grid(mm(p, v, dual), dual.grid)
        delta = row_dot(d_o, o_re, bm)
    else:
        o_hp = None if tape.O_hp is None else tape.O_hp.data
        delta = delta_from_output(source, d_o, tape.O_lp.data, o_hp, bm)

    ds = ds_block(p, dp, delta, tape.alpha, bm)
    return AttnGrads(
        dQ=Mat(round_to_grid(mm(ds, k, bm), bm.grid), bm.grid),
        dK=Mat(round_to_grid(mm(ds.T, q, bm), bm.grid), bm.grid),
        dV=Mat(round_to_grid(mm(p.T, d_o, bm), bm.grid), bm.grid),
        dS=Mat(ds, bm.grid),
        dP=Mat(dp, bm.grid),
        delta=Vec(delta, bm.accumulator),
    )


def delta_diff(tape: AttnTape, dO: Mat) -> Vec:
    """(δ_lp - δ_hp) per token, both rowsums taken in float64."""
    if tape.O_hp is None:
        raise ContractError("delta_diff needs both the low- and high-precision outputs")
    return delta_gap(dO, tape.O_lp, tape.O_hp)


def delta_gap(dO: Mat, o_lp: Mat, o_hp: Mat) -> Vec:
    if not dO.shape == o_lp.shape == o_hp.shape:
        raise ContractError(f"dO shape {dO.shape} does not match O {o_lp.shape}")
    return Vec(accumulate_f64(dO.data * o_lp.data) - accumulate_f64(dO.data * o_hp.data))


# ---------------------------------------------------------------------------
# Tape files
# ---------------------------------------------------------------------------

_PLAN_FIELDS = ("score_mode", "softmax_mode", "pv_mode", "normalize_mode", "delta_source",
                "backward_mode", "lp_accumulation")


def _encode_plan(plan: PrecisionPlan) -> list[float]:
    codes = []
    for name in _PLAN_FIELDS:
        value = getattr(plan, name)
        codes.append(float(list(type(value)).index(value)))
    return codes


def _decode_plan(codes) -> PrecisionPlan:
    kwargs = {}
    for name, code in zip(_PLAN_FIELDS, codes):
        enum = type(getattr(PrecisionPlan(), name))
        kwargs[name] = list(enum)[int(code)]
    return PrecisionPlan(**kwargs)


def write_tape(path, tape: AttnTape) -> None:
    sections = {
        "q": tape.q, "k": tape.k, "v": tape.v, "S": tape.S, "P_bar": tape.P_bar, "P": tape.P,
        "O_lp": tape.O_lp, "m": tape.m, "l": tape.l, "L": tape.L,
        "config": Vec(np.array([tape.alpha, float(tape.causal), *_encode_plan(tape.plan)])),
    }
    if tape.O_hp is not None:
        sections["O_hp"] = tape.O_hp
    write_container(path, sections)


def read_tape(path) -> AttnTape:
    sections = read_container(path)
    config = sections.pop("config").data
    return AttnTape(
        alpha=float(config[0]),
        causal=bool(config[1]),
        plan=_decode_plan(config[2:]),
        O_hp=sections.pop("O_hp", None),
        **sections,
    )
