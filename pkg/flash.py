"""
Tiled attention.

flash_forward walks query blocks (outer) and key blocks (inner) with an
online softmax; stabilized_flash_forward swaps the per-block row maximum for
stabilized_rowmax so that repeated maxima never produce an exp() of exactly
one. flash_backward recomputes P from L block by block with key blocks as
the outer loop. All accumulators continue their ascending folds across
blocks, so the backward is bit-identical to attention.backward for any
tiling and the forward is bit-identical at block size N.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from attention import (
    AttnGrads, DeltaSource, PrecisionPlan, causal_mask, check_inputs, default_alpha, delta_from_output,
    ds_block, finish_rows, mm, online_step, probabilities, pv_step, row_dot, scores,
)
from linalg import Mat, Vec, rowmax, rowsum_eq
from numerics import ContractError, round_to_grid

DEFAULT_BETA = 7.0
RECOMMENDED_BETA = (2.0, 8.0)
# Running maximum used for a repeated all-zero maximum in strict mode
STRICT_ZERO_SHIFT = 1.0
# Largest m - r_m; exp(-80) is still a normal BF16 and binary32 number
MAX_SHIFT = 80.0


class StaleStatisticsError(ValueError):
    """L handed to the backward pass is not the one the forward produced."""


@dataclass(frozen=True)
class TileConfig:
    block_rows: int
    block_cols: int
    beta: float = DEFAULT_BETA
    stabilized: bool = False
    strict_zero: bool = False
    gamma: float = 0.0

    def validate(self, n_rows: int, n_cols: int) -> None:
        if not 1 <= self.block_rows <= n_rows:
            raise ContractError(f"block_rows must be in [1, {n_rows}], got {self.block_rows}")
        if not 1 <= self.block_cols <= n_cols:
            raise ContractError(f"block_cols must be in [1, {n_cols}], got {self.block_cols}")
        if self.stabilized and not self.beta > 1.0:
            raise ContractError(f"beta must exceed 1, got {self.beta}")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must be in [0, 1), got {self.gamma}")


@dataclass
class RunningState:
    """Per query block accumulators of the online softmax."""

    O_acc: np.ndarray
    O_acc_hp: np.ndarray
    l: np.ndarray
    m: np.ndarray

    @classmethod
    def start(cls, rows: int, cols: int) -> "RunningState":
        return cls(np.zeros((rows, cols)), np.zeros((rows, cols)), np.zeros(rows), np.full(rows, -np.inf))


class FlashOutput(NamedTuple):
    O: Mat
    L: Vec
    O_hp: Mat
    checksum: int


def lse_checksum(L: Vec) -> int:
    return zlib.crc32(np.ascontiguousarray(L.data, dtype="<f8").tobytes())


def stabilized_rowmax(s_block: Mat, beta: float, strict_zero: bool = False, gamma: float = 0.0) -> Vec:
    """Row maximum with repeated maxima pushed out of exp()'s fixed point.

    Repeated positive maximum r_m -> beta * r_m; repeated negative maximum ->
    gamma * r_m (0 by default). A repeated zero maximum is left alone unless
    strict_zero is set. The shift m - r_m is capped at MAX_SHIFT so the
    row maximum never underflows to an all-zero row.
    """
    if not beta > 1.0:
        raise ContractError(f"beta must exceed 1, got {beta}")
    r_m = rowmax(s_block)
    r_s = rowsum_eq(s_block, r_m).data
    rm = r_m.data
    repeated = (r_s > 1) & np.isfinite(rm)
    m = np.where(repeated & (rm > 0), beta * rm, rm)
    m = np.where(repeated & (rm < 0), gamma * rm, m)
    if strict_zero:
        m = np.where(repeated & (rm == 0), STRICT_ZERO_SHIFT, m)
    m = np.where(repeated, np.minimum(m, rm + MAX_SHIFT), m)
    return Vec(m)


def _blocks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def flash_forward(q: Mat, k: Mat, v: Mat, alpha: float | None = None, cfg: TileConfig | None = None,
                  plan: PrecisionPlan = PrecisionPlan(), causal: bool = False) -> FlashOutput:
    check_inputs(q, k, v, plan)
    if causal and q.rows != k.rows:
        raise ContractError("causal attention needs as many queries as keys")
    cfg = cfg or TileConfig(q.rows, k.rows)
    cfg.validate(q.rows, k.rows)
    alpha = default_alpha(q.cols) if alpha is None else float(alpha)
    grid = plan.score_mode.grid

    o = np.empty((q.rows, v.cols))
    o_hp = np.empty((q.rows, v.cols))
    lse = np.empty(q.rows)
    for r0, r1 in _blocks(q.rows, cfg.block_rows):
        state = RunningState.start(r1 - r0, v.cols)
        for c0, c1 in _blocks(k.rows, cfg.block_cols):
            if causal and c0 > r1 - 1:
                break
            s = scores(q.data[r0:r1], k.data[c0:c1], alpha, plan.score_mode)
            if not np.isfinite(s).all():
                raise ContractError("non-finite attention scores")
            if causal:
                s = causal_mask(s, r0, c0)
            block = Mat(s, grid)
            if cfg.stabilized:
                m_block = stabilized_rowmax(block, cfg.beta, cfg.strict_zero, cfg.gamma).data
            else:
                m_block = rowmax(block).data
            m_new, scale, p_bar, l_new = online_step(s, state.m, state.l, m_block, plan.softmax_mode)
            o_acc, o_acc_hp = pv_step(p_bar, v.data[c0:c1], state.O_acc, state.O_acc_hp, scale, plan)
            state = RunningState(o_acc, o_acc_hp, l_new, m_new)
        o[r0:r1], o_hp[r0:r1], lse[r0:r1] = finish_rows(state.O_acc, state.O_acc_hp, state.m, state.l, plan)

    L = Vec(lse, plan.softmax_mode.accumulator)
    return FlashOutput(
        O=Mat(o, plan.normalize_mode.grid),
        L=L,
        O_hp=Mat(o_hp, plan.normalize_mode.promoted().grid),
        checksum=lse_checksum(L),
    )


def stabilized_flash_forward(q: Mat, k: Mat, v: Mat, alpha: float | None = None, cfg: TileConfig | None = None,
                             plan: PrecisionPlan = PrecisionPlan(), causal: bool = False) -> FlashOutput:
    cfg = cfg or TileConfig(q.rows, k.rows, stabilized=True)
    if not cfg.stabilized:
        raise ContractError("stabilized_flash_forward needs a stabilized TileConfig")
    return flash_forward(q, k, v, alpha, cfg, plan, causal)


def recompute_probabilities(q: Mat, k: Mat, L: Vec, alpha: float | None = None,
                            plan: PrecisionPlan = PrecisionPlan(), causal: bool = False) -> Mat:
    """Full attention probabilities exp(S - L) on the backward grid."""
    alpha = default_alpha(q.cols) if alpha is None else float(alpha)
    s = scores(q.data, k.data, alpha, plan.score_mode)
    if causal:
        s = causal_mask(s, 0, 0)
    return Mat(probabilities(s, L.data, plan.backward_mode), plan.backward_mode.grid)


def flash_backward(q: Mat, k: Mat, v: Mat, O: Mat, dO: Mat, L: Vec, cfg: TileConfig | None = None,
                   plan: PrecisionPlan = PrecisionPlan(), causal: bool = False, alpha: float | None = None,
                   o_hp: Mat | None = None, l_checksum: int | None = None) -> AttnGrads:
    """Tiled gradients: key blocks outer, query blocks inner; never stabilized."""
    if l_checksum is not None and lse_checksum(L) != l_checksum:
        raise StaleStatisticsError("L does not match the forward pass that produced the checksum")
    if dO.shape != O.shape:
        raise ContractError(f"dO shape {dO.shape} does not match O {O.shape}")
    if len(L) != q.rows:
        raise ContractError(f"L has {len(L)} rows, expected {q.rows}")
    cfg = cfg or TileConfig(q.rows, k.rows)
    cfg.validate(q.rows, k.rows)
    alpha = default_alpha(q.cols) if alpha is None else float(alpha)
    bm = plan.backward_mode
    d_o = round_to_grid(dO.data, bm.grid)
    lse = L.data

    def p_block(r0, r1, c0, c1):
        s = scores(q.data[r0:r1], k.data[c0:c1], alpha, plan.score_mode)
        if causal:
            s = causal_mask(s, r0, c0)
        return probabilities(s, lse[r0:r1], bm)

    def dp_block(r0, r1, c0, c1):
        return round_to_grid(mm(d_o[r0:r1], v.data[c0:c1].T, bm), bm.grid)

    source = plan.delta_source
    if source in (DeltaSource.DO_O_LP, DeltaSource.DO_O_HP):
        delta = delta_from_output(source, d_o, O.data, None if o_hp is None else o_hp.data, bm)
    else:
        delta = np.empty(q.rows)
        dual = bm.promoted()
        for r0, r1 in _blocks(q.rows, cfg.block_rows):
            acc = None
            for c0, c1 in _blocks(k.rows, cfg.block_cols):
                p = p_block(r0, r1, c0, c1)
                if source is DeltaSource.DP_P:
                    acc = row_dot(dp_block(r0, r1, c0, c1), p, bm, init=acc)
                else:
                    acc = mm(p, v.data[c0:c1], dual, init=acc)
            if source is DeltaSource.DP_P:
                delta[r0:r1] = acc
            else:
                delta[r0:r1] = row_dot(d_o[r0:r1], round_to_grid(acc, dual.grid), bm)

    dq = np.zeros((q.rows, q.cols))
    dk = np.empty((k.rows, k.cols))
    dv = np.empty((k.rows, v.cols))
    ds_full = np.empty((q.rows, k.rows))
    dp_full = np.empty((q.rows, k.rows))
    for c0, c1 in _blocks(k.rows, cfg.block_cols):
        dk_acc = np.zeros((c1 - c0, k.cols))
        dv_acc = np.zeros((c1 - c0, v.cols))
        for r0, r1 in _blocks(q.rows, cfg.block_rows):
            p = p_block(r0, r1, c0, c1)
            dv_acc = mm(p.T, d_o[r0:r1], bm, init=dv_acc)
            dp = dp_block(r0, r1, c0, c1)
            ds = ds_block(p, dp, delta[r0:r1], alpha, bm)
            dq[r0:r1] = mm(ds, k.data[c0:c1], bm, init=dq[r0:r1])
            dk_acc = mm(ds.T, q.data[r0:r1], bm, init=dk_acc)
            ds_full[r0:r1, c0:c1] = ds
            dp_full[r0:r1, c0:c1] = dp
        dk[c0:c1] = dk_acc
        dv[c0:c1] = dv_acc

    return AttnGrads(
        dQ=Mat(round_to_grid(dq, bm.grid), bm.grid),
        dK=Mat(round_to_grid(dk, bm.grid), bm.grid),
        dV=Mat(round_to_grid(dv, bm.grid), bm.grid),
        dS=Mat(ds_full, bm.grid),
        dP=Mat(dp_full, bm.grid),
        delta=Vec(delta, bm.accumulator),
    )
