"""
Desk-scale training harness.

gen_workload builds single-head attention inputs that reproduce the
failure condition on purpose: a sink token whose key dominates every row,
a few near-copies of it whose keys round to the same BF16 scores (repeated
row maxima, so several P̄ entries are exactly 1) while their values differ,
and value columns that are predominantly negative. train_step runs one
tiled forward/backward and an AdamW update while recording the δ gap;
run_experiment replays one batch sequence through two arms.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

from attention import ABLATIONS, PrecisionPlan, default_alpha, delta_gap, finish_rows, pv_step, scores
from diagnostics import GradErrorReport, NormSeries, bias_cumsum, decompose_grad_error, norm_tracker
from experiment_config import output_dir
from flash import TileConfig, flash_backward, flash_forward, recompute_probabilities
from linalg import Mat, Mode, Vec, matmul, read_container, rowmax, rowsum_eq, write_container
from numerics import ContractError, Grid, accumulate_f32, round_to_b16, round_to_f32

# Scale of the shared input direction and of the per-token noise
BASE_SCALE = 0.5
NULL_OFFSET_NORM = 0.5
TARGET_MARGIN = 1.0
VALUE_RANGE = (-3.0, -1.0)
BISECTION_STEPS = 40
TIE_TOLERANCE = 0.2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
CLIP_NORM = 1.0
COSINE_WARMUP = 2000
COSINE_MIN_LR = 1e-5

METRICS_COLUMNS = ["arm", "step", "loss", "bias_sum", "bias_cumsum", "norm_W_Q", "norm_W_K", "norm_W_V"]
COMPARISON_SCHEMA = "comparison-report/1"


class TrainingHalted(RuntimeError):
    """Loss went non-finite; `dump` names the diagnostic container."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


# ---------------------------------------------------------------------------
# Workload
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadSpec:
    n: int
    d: int
    model_dim: int
    seed: int = 0
    tie_rate: float = 0.05
    value_sign_bias: float = 0.5
    sink_strength: float = 6.0
    group_size: int = 2
    noise_scale: float = 0.3

    def __post_init__(self):
        for name in ("n", "d", "model_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be at least 1")
        for name in ("tie_rate", "value_sign_bias"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be in [0, 1]")
        if not 0 <= self.group_size < self.n:
            raise ContractError(f"group_size must be in [0, {self.n - 1}]")
        if self.sink_strength < 0 or self.noise_scale < 0:
            raise ContractError("sink_strength and noise_scale must be non-negative")

    @classmethod
    def from_config(cls, section: dict) -> "WorkloadSpec":
        return cls(**section)


class Weights(NamedTuple):
    W_Q: Mat
    W_K: Mat
    W_V: Mat


class Workload(NamedTuple):
    X: Mat
    targets: Mat
    weights: Weights
    affected: tuple[int, ...]
    copies: tuple[int, ...]
    offset: float
    tie_rate_measured: float
    sink_rate_measured: float
    tie_rate_reachable: bool


class _Structure(NamedTuple):
    weights: Weights
    base: np.ndarray
    sink: np.ndarray
    null_offsets: np.ndarray
    key_offsets: np.ndarray
    copies: tuple[int, ...]
    affected: tuple[int, ...]


def _null_projector(w: np.ndarray) -> np.ndarray:
    return np.eye(w.shape[1]) - np.linalg.pinv(w) @ w


def _top_right_singular(w: np.ndarray) -> np.ndarray:
    """Leading right-singular vector, signed so its largest entry is positive."""
    v = np.linalg.svd(w)[2][0]
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def _scaled(x: np.ndarray, norm: float) -> np.ndarray:
    size = np.linalg.norm(x)
    return x * (norm / size) if size > 1e-9 else np.zeros_like(x)


def copy_positions(n: int, group_size: int) -> tuple[int, ...]:
    """Positions of the sink's near-copies, spread over 1..n-1."""
    positions = []
    for k in range(group_size):
        p = min(max(int(round((k + 1) * n / (group_size + 1))), 1), n - 1)
        while p in positions:
            p = p + 1 if p + 1 < n else 1
        positions.append(p)
    return tuple(sorted(positions))


@lru_cache(maxsize=16)
def _structure(spec: WorkloadSpec) -> _Structure:
    rng = np.random.default_rng(spec.seed)
    d, D = spec.d, spec.model_dim
    w_q = round_to_f32(rng.standard_normal((d, D)) / math.sqrt(D))
    w_k = round_to_f32(rng.standard_normal((d, D)) / math.sqrt(D))
    # Shared direction along W_Q's top singular pair: the tie bias in dW_Q then
    # lands on the largest singular value
    b = round_to_f32(_scaled(_top_right_singular(w_q), BASE_SCALE * math.sqrt(D)))

    # Sink direction: raises the sink's key score but is invisible to queries
    a = w_k.T @ (w_q @ b)
    u = _null_projector(w_q) @ a
    if np.linalg.norm(u) < 1e-9 * max(np.linalg.norm(a), 1e-300):
        u = a
    boost = default_alpha(d) * np.linalg.norm(u)
    sink = round_to_f32(b + (spec.sink_strength / boost if boost > 0 else 0.0) * _scaled(u, 1.0))

    copies = copy_positions(spec.n, spec.group_size)
    null_k = _null_projector(w_k)
    row_k = np.eye(D) - null_k
    null_offsets = np.array([_scaled(null_k @ rng.standard_normal(D), NULL_OFFSET_NORM) for _ in copies]).reshape(-1, D)
    key_offsets = np.array([_scaled(row_k @ rng.standard_normal(D), 1.0) for _ in copies]).reshape(-1, D)
    # LAPACK results differ in the last bits between builds; binary32 hides that
    null_offsets, key_offsets = round_to_f32(null_offsets), round_to_f32(key_offsets)

    w_v = rng.standard_normal((d, D)) * (BASE_SCALE / math.sqrt(D))
    affected = tuple(int(i) for i in np.flatnonzero(rng.random(d) < spec.value_sign_bias))
    pinned = np.stack([b, sink - b])
    lift = np.linalg.pinv(pinned)
    for i in affected:
        target = rng.uniform(*VALUE_RANGE)
        free = w_v[i] - lift @ (pinned @ w_v[i])
        w_v[i] = free + lift @ np.array([target, 0.0])

    weights = Weights(*(Mat(round_to_f32(w), Grid.F32) for w in (w_q, w_k, w_v)))
    for arr in (b, sink, null_offsets, key_offsets):
        arr.setflags(write=False)
    return _Structure(weights, b, sink, null_offsets, key_offsets, copies, affected)


def _inputs(spec: WorkloadSpec, structure: _Structure, offset: float, step: int) -> tuple[Mat, Mat]:
    rng = np.random.default_rng([spec.seed, step])
    x = structure.base + spec.noise_scale * BASE_SCALE * rng.standard_normal((spec.n, spec.model_dim))
    x[0] = structure.sink
    for j, p in enumerate(structure.copies):
        x[p] = structure.sink + structure.null_offsets[j] + offset * structure.key_offsets[j]
    y = BASE_SCALE * rng.standard_normal((spec.n, spec.d))
    y[:, list(structure.affected)] = TARGET_MARGIN
    return Mat.rounded(x, Grid.B16), Mat(y)


def project(x: Mat, w: Mat, grid: Grid) -> Mat:
    """x Wᵀ folded exactly, rounded once to `grid`."""
    return Mat.rounded(matmul(x.to(Grid.F64), w.T.to(Grid.F64), Mode.EXACT).data, grid)


def input_grid(plan: PrecisionPlan) -> Grid:
    modes = plan.forward_modes
    if Mode.LP in modes:
        return Grid.B16
    return Grid.F32 if Mode.HP in modes else Grid.F64


def _score_stats(x: Mat, weights: Weights) -> tuple[float, float]:
    """(fraction of rows with a repeated maximum, fraction whose maximum is column 0) on BF16 scores."""
    q = project(x, weights.W_Q, Grid.B16)
    k = project(x, weights.W_K, Grid.B16)
    s = Mat(scores(q.data, k.data, default_alpha(q.cols), Mode.LP), Grid.B16)
    m = rowmax(s)
    ties = rowsum_eq(s, m).data > 1
    sink = s.data[:, 0] == m.data
    return float(ties.mean()), float(sink.mean())


@lru_cache(maxsize=16)
def calibrate_offset(spec: WorkloadSpec) -> tuple[float, float, float, bool]:
    """Bisect the key-visible copy offset until the BF16 tie rate meets spec.tie_rate.

    Returns (offset, tie_rate, sink_rate, reachable).
    """
    structure = _structure(spec)

    def stats(offset):
        return _score_stats(_inputs(spec, structure, offset, 0)[0], structure.weights)

    target = spec.tie_rate
    lo, hi = 0.0, 1.0
    if stats(lo)[0] > target:
        for _ in range(60):
            if stats(hi)[0] <= target:
                break
            lo, hi = hi, hi * 2.0
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            if stats(mid)[0] > target:
                lo = mid
            else:
                hi = mid
        candidates = [(abs(stats(c)[0] - target), c) for c in (hi, lo)]
        offset = min(candidates)[1]
    else:
        offset = 0.0

    tie, sink = stats(offset)
    if target == 0.0:
        reachable = tie <= 0.01
    else:
        reachable = abs(tie - target) <= TIE_TOLERANCE * target
    return offset, tie, sink, reachable


def gen_workload(spec: WorkloadSpec, step: int = 0) -> Workload:
    """Inputs and targets for batch `step`; the same (spec, step) always gives the same bits."""
    structure = _structure(spec)
    offset, tie, sink, reachable = calibrate_offset(spec)
    x, y = _inputs(spec, structure, offset, step)
    if step != 0:
        tie, sink = _score_stats(x, structure.weights)
    return Workload(x, y, structure.weights, structure.affected, structure.copies, offset, tie, sink, reachable)


class EngineeredTrial(NamedTuple):
    output_error: float
    delta_diff: float


def engineered_row(seed: int, trial: int = 0, n_tokens: int = 16, unit_count: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """(p_bar, v) for one attention row with `unit_count` probabilities of exactly 1.

    The remaining probabilities are tiny BF16 values and every value is in [-3, -1].
    """
    if not 1 <= unit_count <= n_tokens:
        raise ContractError(f"unit_count must be in [1, {n_tokens}]")
    rng = np.random.default_rng([seed, trial])
    p_bar = round_to_b16(np.exp(-rng.uniform(8.0, 12.0, n_tokens)))
    p_bar[rng.choice(n_tokens, unit_count, replace=False)] = 1.0
    v = round_to_b16(rng.uniform(*VALUE_RANGE, n_tokens))
    return p_bar, v


def engineered_trials(n_trials: int = 1000, seed: int = 0, n_tokens: int = 16, unit_count: int = 2) -> pd.DataFrame:
    """Output error O_lp - O_hp and the δ gap for dO = -1, one engineered row per trial."""
    plan = PrecisionPlan()
    rows = []
    for trial in range(n_trials):
        p_bar, v = engineered_row(seed, trial, n_tokens, unit_count)
        l = accumulate_f32(p_bar[None, :])
        zeros = np.zeros((1, 1))
        o_acc, o_acc_hp = pv_step(p_bar[None, :], v[:, None], zeros, zeros, np.ones(1), plan)
        o_lp, o_hp, _ = finish_rows(o_acc, o_acc_hp, np.zeros(1), l, plan)
        d_o = Mat([[-1.0]])
        gap = delta_gap(d_o, Mat(o_lp), Mat(o_hp)).data[0]
        rows.append(EngineeredTrial(float(o_lp[0, 0] - o_hp[0, 0]), float(gap)))
    return pd.DataFrame(rows, columns=list(EngineeredTrial._fields))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    steps: int = 200
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = 0.0
    clip_norm: float = CLIP_NORM
    schedule: str = "constant"
    warmup_steps: int = COSINE_WARMUP
    min_lr: float = COSINE_MIN_LR
    tiles: TileConfig | None = None
    causal: bool = False
    dump_dir: str | None = None

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0 or self.steps < 0 or self.clip_norm <= 0:
            raise ContractError("lr and steps must be non-negative and clip_norm positive")

    @classmethod
    def from_config(cls, config: dict) -> "TrainConfig":
        training = dict(config["training"])
        tiles = config["tiles"]
        n = config["workload"]["n"]
        tile = TileConfig(
            tiles["block_rows"] or n, tiles["block_cols"] or n,
            beta=tiles["beta"], strict_zero=tiles["strict_zero"], gamma=tiles["gamma"],
        )
        return cls(tiles=tile, **training)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class Arm:
    name: str
    plan: PrecisionPlan = PrecisionPlan()
    stabilized: bool = False


ARM_PRESETS: dict[str, Arm] = {
    "lp": Arm("lp"),
    "stabilized_lp": Arm("stabilized_lp", stabilized=True),
    "hp_delta": Arm("hp_delta", ABLATIONS["delta_o_hp"]),
    "hp": Arm("hp", PrecisionPlan.all_hp()),
    "exact": Arm("exact", PrecisionPlan.all_exact()),
    **{name: Arm(name, plan) for name, plan in ABLATIONS.items() if name not in ("all_hp", "all_exact")},
}


def make_arm(name: str, normalize: Mode | str | None = None) -> Arm:
    """Preset arm; `normalize` replaces a low-precision normalisation step."""
    try:
        arm = ARM_PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown arm {name!r}; choose from {', '.join(ARM_PRESETS)}") from None
    if normalize is None or arm.plan.normalize_mode is not Mode.LP:
        return arm
    try:
        mode = Mode(normalize)
    except ValueError:
        raise ContractError(f"unknown normalize mode {normalize!r}") from None
    return replace(arm, plan=replace(arm.plan, normalize_mode=mode))


class Batch(NamedTuple):
    step: int
    X: Mat
    targets: Mat


@dataclass(frozen=True, eq=False)
class TrainState:
    weights: Weights
    first_moment: tuple[np.ndarray, ...]
    second_moment: tuple[np.ndarray, ...]
    step: int = 0
    batch_log: tuple[int, ...] = ()
    last_loss: float = float("nan")


def init_state(spec: WorkloadSpec) -> TrainState:
    weights = _structure(spec).weights
    zeros = tuple(np.zeros(w.shape) for w in weights)
    return TrainState(weights, zeros, zeros)


def batch_for(spec: WorkloadSpec, step: int) -> Batch:
    work = gen_workload(spec, step)
    return Batch(step, work.X, work.targets)


def clip_grads(grads: list[np.ndarray], max_norm: float = CLIP_NORM) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their global norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return list(grads), total
    scale = max_norm / total
    return [g * scale for g in grads], total


def adamw_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
                 cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected AdamW step (t counts from 1); weights stay on the F32 grid."""
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * w
    return round_to_f32(w - lr * update), m, v


def _dump_halt(state: TrainState, batch: Batch, loss: float, dump_dir: str | None) -> str:
    folder = dump_dir or output_dir()
    os.makedirs(folder, exist_ok=True)
    base = os.path.join(folder, f"halt_step{state.step}")
    write_container(base + ".bin", {
        "W_Q": state.weights.W_Q, "W_K": state.weights.W_K, "W_V": state.weights.W_V,
        "X": batch.X, "targets": batch.targets,
    })
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump({"step": state.step, "batch": batch.step, "loss": repr(loss)}, f, indent=1)
    return base + ".bin"


def train_step(state: TrainState, batch: Batch, arm: Arm, cfg: TrainConfig) -> tuple[TrainState, GradErrorReport]:
    plan = arm.plan
    w_q, w_k, w_v = state.weights
    grid = input_grid(plan)
    q = project(batch.X, w_q, grid)
    k = project(batch.X, w_k, grid)
    v = project(batch.X, w_v, grid)
    tiles = cfg.tiles or TileConfig(q.rows, k.rows)
    tiles = replace(tiles, stabilized=arm.stabilized)

    out = flash_forward(q, k, v, cfg=tiles, plan=plan, causal=cfg.causal)
    residual = out.O.data - batch.targets.data
    loss = float(np.mean(residual * residual))
    if not math.isfinite(loss):
        dump = _dump_halt(state, batch, loss, cfg.dump_dir)
        raise TrainingHalted(f"non-finite loss at step {state.step}; state written to {dump}", dump)

    bm = plan.backward_mode
    d_o = Mat.rounded(2.0 * residual / residual.size, bm.grid)
    grads = flash_backward(q, k, v, out.O, d_o, out.L, tiles, plan, causal=cfg.causal,
                           o_hp=out.O_hp, l_checksum=out.checksum)
    p = recompute_probabilities(q, k, out.L, plan=plan, causal=cfg.causal)
    coeffs = delta_gap(d_o, out.O, out.O_hp)
    report = decompose_grad_error(coeffs, p, k, batch.X, default_alpha(q.cols), with_terms=False)

    x = batch.X.to(Grid.F64)
    raw = [matmul(g.T.to(Grid.F64), x, Mode.EXACT).data for g in (grads.dQ, grads.dK, grads.dV)]
    clipped, _ = clip_grads(raw, cfg.clip_norm)
    lr = lr_at(cfg, state.step)
    t = state.step + 1
    new_w, new_m, new_v = [], [], []
    for w, g, m1, m2 in zip(state.weights, clipped, state.first_moment, state.second_moment):
        w_next, m1, m2 = adamw_update(w.data, g, m1, m2, t, lr, cfg)
        new_w.append(Mat(w_next, Grid.F32))
        new_m.append(m1)
        new_v.append(m2)

    new_state = TrainState(
        weights=Weights(*new_w),
        first_moment=tuple(new_m),
        second_moment=tuple(new_v),
        step=t,
        batch_log=state.batch_log + (batch.step,),
        last_loss=loss,
    )
    return new_state, report


# ---------------------------------------------------------------------------
# Batch logs
# ---------------------------------------------------------------------------

def record_batches(path, batches: list[Batch]) -> None:
    sections = {"steps": Vec(np.array([b.step for b in batches], dtype=np.float64))}
    for i, b in enumerate(batches):
        sections[f"X_{i}"] = b.X
        sections[f"targets_{i}"] = b.targets
    write_container(path, sections)


def replay_batches(path) -> Iterator[Batch]:
    sections = read_container(path)
    for i, step in enumerate(sections["steps"].data):
        yield Batch(int(step), sections[f"X_{i}"], sections[f"targets_{i}"])


# ---------------------------------------------------------------------------
# Paired experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ArmResult:
    name: str
    losses: np.ndarray
    bias_sums: np.ndarray
    bias_cumsum: np.ndarray
    norms: NormSeries
    final_state: TrainState | None = None


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    spec: WorkloadSpec
    arms: tuple[ArmResult, ArmResult]
    bias_reduction: float
    norm_growth: dict[str, float]
    workload: dict = field(default_factory=dict)

    def arm(self, name: str) -> ArmResult:
        for result in self.arms:
            if result.name == name:
                return result
        raise KeyError(name)


def run_arm(spec: WorkloadSpec, arm: Arm, batches: list[Batch], cfg: TrainConfig, name: str | None = None) -> ArmResult:
    state = init_state(spec)
    losses, biases = [], []
    series = NormSeries()
    for i, batch in enumerate(batches):
        state, report = train_step(state, batch, arm, cfg)
        losses.append(state.last_loss)
        biases.append(report.bias_sum)
        series = norm_tracker(list(state.weights), batch.step, series)
        if (i + 1) % 50 == 0 or i + 1 == len(batches):
            print(f"  [{name or arm.name}] step {i + 1}/{len(batches)}  loss={state.last_loss:.6g}  bias_sum={report.bias_sum:+.3e}")
    bias = np.array(biases, dtype=np.float64)
    cum = bias_cumsum(bias) if len(bias) else np.zeros(0)
    return ArmResult(name or arm.name, np.array(losses, dtype=np.float64), bias, cum, series, state)


def _reduction(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0:
        return float("nan")
    top, bottom = abs(a[-1]), abs(b[-1])
    if bottom == 0.0:
        return math.inf if top > 0.0 else 1.0
    return float(top / bottom)


def run_experiment(spec: WorkloadSpec, arm_a: Arm, arm_b: Arm, steps: int, cfg: TrainConfig,
                   batch_log: str | None = None) -> ComparisonReport:
    """Train both arms from the same weights over the same recorded batches."""
    offset, tie, sink, reachable = calibrate_offset(spec)
    print(f"✓ Workload calibrated: copy offset={offset:.6g}, tie rate={tie:.3f}, sink rate={sink:.3f}")
    if not reachable:
        print(f"⚠️ Target tie rate {spec.tie_rate} not reached (measured {tie:.3f})")

    batches = [batch_for(spec, s) for s in range(steps)]
    if batch_log:
        record_batches(batch_log, batches)
        batches = list(replay_batches(batch_log))
        print(f"✓ Batch log written to {batch_log}")

    name_a, name_b = arm_a.name, arm_b.name
    if name_a == name_b:
        name_a, name_b = f"{name_a}_a", f"{name_b}_b"
    result_a = run_arm(spec, arm_a, batches, cfg, name_a)
    result_b = run_arm(spec, arm_b, batches, cfg, name_b)
    return ComparisonReport(
        spec=spec,
        arms=(result_a, result_b),
        bias_reduction=_reduction(result_a.bias_cumsum, result_b.bias_cumsum),
        norm_growth={r.name: r.norms.growth_slope("W_Q") for r in (result_a, result_b)},
        workload={"copy_offset": offset, "tie_rate_measured": tie, "sink_rate_measured": sink,
                  "tie_rate_reachable": reachable},
    )


def metrics_frame(report: ComparisonReport) -> pd.DataFrame:
    rows = []
    for result in report.arms:
        for i, step in enumerate(result.norms.steps):
            rows.append([
                result.name, step, result.losses[i], result.bias_sums[i], result.bias_cumsum[i],
                result.norms.norms["W_Q"][i], result.norms.norms["W_K"][i], result.norms.norms["W_V"][i],
            ])
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def write_metrics_csv(report: ComparisonReport, path) -> None:
    metrics_frame(report).to_csv(path, index=False)


def read_metrics_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def comparison_to_dict(report: ComparisonReport) -> dict:
    return {
        "schema": COMPARISON_SCHEMA,
        "workload_spec": report.spec.__dict__,
        "workload": report.workload,
        "bias_reduction": report.bias_reduction,
        "norm_growth": report.norm_growth,
        "arms": {
            r.name: {
                "final_bias_cumsum": float(r.bias_cumsum[-1]) if len(r.bias_cumsum) else 0.0,
                "final_loss": float(r.losses[-1]) if len(r.losses) else None,
                "final_norms": {k: v[-1] for k, v in r.norms.norms.items()},
            }
            for r in report.arms
        },
    }


def write_comparison_json(report: ComparisonReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(comparison_to_dict(report), f, indent=1)
