"""
BF16 / FP32 bit-exact arithmetic.

BF16 values travel as float64 numbers lying on the BF16 grid (array API) or
as B16 bit patterns (scalar API). FP32 arithmetic is the host's IEEE-754
binary32 through numpy.float32, checked once per process by
check_f32_conformance().
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

# BF16 layout: 1 sign, 8 exponent, 7 fraction bits
B16_FRACTION_BITS = 7
B16_PRECISION = B16_FRACTION_BITS + 1
B16_MIN_FREXP_EXP = -125          # frexp exponent of 2**-126, the smallest normal
B16_MIN_SUBNORMAL_EXP = -133      # exponent of the smallest subnormal, 2**-133
B16_MAX = (2.0 - 2.0 ** -7) * 2.0 ** 127
B16_CANONICAL_NAN = 0x7FC0


class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class Grid(str, Enum):
    """Which set of representable numbers a payload lies on."""

    B16 = "b16"
    F32 = "f32"
    F64 = "f64"

    @property
    def rank(self) -> int:
        return {"b16": 0, "f32": 1, "f64": 2}[self.value]

    def within(self, other: "Grid") -> bool:
        """True when every value on this grid also lies on `other`."""
        return self.rank <= other.rank


# ---------------------------------------------------------------------------
# Array rounding
# ---------------------------------------------------------------------------

def round_to_b16(x) -> np.ndarray:
    """Round float64 values to the nearest BF16 value, ties to even.

    Rounding is done once, directly from float64, so no double rounding
    through binary32 can occur. Subnormals are kept, overflow goes to +-inf,
    NaN and inf pass through.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.array(x, dtype=np.float64, copy=True)
    mask = np.isfinite(x) & (x != 0.0)
    if not mask.any():
        return out
    xs = x[mask]
    _, e = np.frexp(xs)
    e = np.maximum(e, B16_MIN_FREXP_EXP)
    quantum = np.ldexp(1.0, e - B16_PRECISION)
    r = np.rint(xs / quantum) * quantum
    overflow = np.abs(r) > B16_MAX
    r[overflow] = np.copysign(np.inf, r[overflow])
    out[mask] = r
    return out


def round_to_f32(x) -> np.ndarray:
    """Round float64 values to binary32 (RNE) and widen back to float64."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def round_to_grid(x, grid: Grid) -> np.ndarray:
    grid = Grid(grid)
    if grid is Grid.B16:
        return round_to_b16(x)
    if grid is Grid.F32:
        return round_to_f32(x)
    return np.array(x, dtype=np.float64, copy=True)


def on_grid(x, grid: Grid) -> bool:
    """True when every element is exactly representable on `grid` (NaN never is)."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        return False
    return bool(np.array_equal(round_to_grid(x, grid), x))


def b16_bits(x) -> np.ndarray:
    """BF16 bit patterns (uint16) of the rounded values."""
    r = np.atleast_1d(round_to_b16(x))
    bits = (r.astype(np.float32).view(np.uint32) >> 16).astype(np.uint16)
    bits[np.isnan(r)] = B16_CANONICAL_NAN
    return bits.reshape(np.shape(x))


def b16_from_bits(bits) -> np.ndarray:
    """Exact float64 values of BF16 bit patterns."""
    wide = np.ascontiguousarray(np.asarray(bits, dtype=np.uint32) << 16, dtype=np.uint32)
    return wide.view(np.float32).astype(np.float64)


def ulp_b16(x) -> np.ndarray:
    """Spacing of the BF16 grid at the magnitude of x."""
    x = np.asarray(x, dtype=np.float64)
    _, e = np.frexp(np.where(np.isfinite(x), x, 0.0))
    e = np.where(x == 0.0, B16_MIN_FREXP_EXP, np.maximum(e, B16_MIN_FREXP_EXP))
    return np.ldexp(1.0, e - B16_PRECISION)


# ---------------------------------------------------------------------------
# Scalar BF16
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class B16:
    """A single BF16 bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= int(self.bits) <= 0xFFFF:
            raise ContractError(f"B16 pattern out of range: {self.bits!r}")

    @classmethod
    def from_string(cls, text: str) -> "B16":
        """Parse a pattern written as 's eeeeeeee fffffff' (spaces optional)."""
        digits = text.replace(" ", "")
        if len(digits) != 16 or set(digits) - {"0", "1"}:
            raise ContractError(f"not a 16-bit pattern: {text!r}")
        return cls(int(digits, 2))

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent(self) -> int:
        return (self.bits >> B16_FRACTION_BITS) & 0xFF

    @property
    def fraction(self) -> int:
        return self.bits & 0x7F

    @property
    def value(self) -> float:
        return float(b16_from_bits([self.bits])[0])

    def is_nan(self) -> bool:
        return self.exponent == 0xFF and self.fraction != 0

    def __str__(self) -> str:
        return f"{self.sign} {self.exponent:08b} {self.fraction:07b}"


def encode_b16(x: float) -> B16:
    """Nearest BF16 pattern, ties to even; NaN maps to the canonical pattern."""
    return B16(int(b16_bits(np.float64(x))))


def decode_b16(b: B16) -> float:
    return b.value


# ---------------------------------------------------------------------------
# FP32 helpers
# ---------------------------------------------------------------------------

def f32_bits(x: float) -> int:
    return struct.unpack(">I", struct.pack(">f", x))[0]


def f32_bit_string(x: float) -> str:
    """'s eeeeeeee fffffff ffffffffffffffff': BF16 fraction bits, then the rest."""
    b = f32_bits(x)
    frac = b & 0x7FFFFF
    return f"{b >> 31} {(b >> 23) & 0xFF:08b} {frac >> 16:07b} {frac & 0xFFFF:016b}"


def check_f32_conformance() -> None:
    """Verify the host rounds binary32 arithmetic the IEEE-754 way.

    Raises RuntimeError naming the first failing golden vector.
    """
    one = np.float32(1.0)
    with np.errstate(over="ignore", under="ignore"):
        golden = [
            ("tie to even below", one + np.float32(2.0 ** -24), 1.0),
            ("tie to even above", one + np.float32(3 * 2.0 ** -24), 1.0 + 2.0 ** -22),
            ("sticky breaks tie", one + np.float32(2.0 ** -24 + 2.0 ** -47), 1.0 + 2.0 ** -23),
            ("gradual underflow", np.float32(2.0 ** -126) * np.float32(0.5), 2.0 ** -127),
            ("subnormal tie to zero", np.float32(2.0 ** -149) * np.float32(0.5), 0.0),
            ("overflow to inf", np.float32(3.4028234663852886e38) * np.float32(2.0), math.inf),
            ("worked example sum",
             np.float32(-2.4071154594421387) + np.float32(-2.296875), -4.703990459442139),
        ]
    for name, got, want in golden:
        if float(got) != want or np.asarray(got).dtype != np.float32:
            raise RuntimeError(
                f"host FP32 arithmetic is not IEEE-754 compliant ({name}: got {float(got)!r}, want {want!r})"
            )


# ---------------------------------------------------------------------------
# Bit-level addition
# ---------------------------------------------------------------------------

class RoundingEvent(NamedTuple):
    position: int
    exact: float
    rounded: B16
    error: float
    rounded_up: bool
    overflow_shift: bool
    rounding_bit: int = 0
    sticky: bool = False


@dataclass(frozen=True)
class AdditionWalkthrough:
    """Every intermediate of one align / add / normalize / round addition."""

    a: float
    b: float
    a_bits: str
    b_bits: str
    alignment_shift: int
    aligned_a: str
    aligned_b: str
    raw_sum: str
    normalize_shift: int
    kept: int
    rounding_bit: int
    sticky: bool
    decision: str
    result: B16
    exact: float
    event: RoundingEvent

    @property
    def error(self) -> float:
        return self.event.error


def _split(x: float) -> tuple[int, int, int]:
    """(sign, odd significand, exponent) with |x| == significand * 2**exponent."""
    sign = 1 if math.copysign(1.0, x) < 0 else 0
    if x == 0.0:
        return sign, 0, 0
    m, e = math.frexp(abs(x))
    sig, exp = int(m * 2 ** 53), e - 53
    tz = (sig & -sig).bit_length() - 1
    return sign, sig >> tz, exp + tz


def _top(sig: int, exp: int) -> int:
    return exp + sig.bit_length() - 1


def _binary(magnitude: int, low: int, point: int, high: int) -> str:
    """Bits of magnitude * 2**low from exponent `high` down to `low`, point after `point`."""
    out = []
    for e in range(max(high, point), low - 1, -1):
        out.append(str((magnitude >> (e - low)) & 1))
        if e == point and e != low:
            out.append(".")
    return "".join(out)


def _bits_of(x: float) -> str:
    if on_grid(x, Grid.B16):
        return str(encode_b16(x))
    return f32_bit_string(x)


def bf16_add(a: float, b: float, position: int = 0) -> AdditionWalkthrough:
    """Add two finite values exactly and round the sum once to BF16.

    Operands may be BF16 values or binary32 accumulators; significands are
    handled as exact integers, so the sticky bit sees every discarded bit.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ContractError("bf16_add needs finite operands")
    sa, ma, ea = _split(a)
    sb, mb, eb = _split(b)
    nonzero = [(m, e) for m, e in ((ma, ea), (mb, eb)) if m]
    low = min((e for _, e in nonzero), default=0)
    ia = (ma << (ea - low)) if ma else 0
    ib = (mb << (eb - low)) if mb else 0
    total = (-ia if sa else ia) + (-ib if sb else ib)
    exact = math.ldexp(total, low)
    operand_top = max((_top(m, e) for m, e in nonzero), default=0)

    mag = abs(total)
    if mag == 0:
        neg_zero = bool(sa and sb)
        result = encode_b16(-0.0 if neg_zero else 0.0)
        event = RoundingEvent(position, exact, result, 0.0, False, False, 0, False)
        return AdditionWalkthrough(
            a, b, _bits_of(a), _bits_of(b), abs(ea - eb) if ma and mb else 0,
            _binary(ia, low, operand_top, operand_top), _binary(ib, low, operand_top, operand_top),
            "0", 0, 0, 0, False, "exact zero", result, exact, event,
        )

    top = _top(mag, low)
    lsb = max(top - B16_FRACTION_BITS, B16_MIN_SUBNORMAL_EXP)
    shift = lsb - low
    if shift <= 0:
        kept, rounding_bit, sticky = mag << -shift, 0, False
        decision = "exact, nothing shifted out"
        rounded_kept = kept
    else:
        kept = mag >> shift
        rounding_bit = (mag >> (shift - 1)) & 1
        sticky = (mag & ((1 << (shift - 1)) - 1)) != 0
        if not rounding_bit:
            decision = "rounding bit 0: truncate"
            rounded_kept = kept
        elif sticky:
            decision = "rounding bit 1 with sticky residual: round up"
            rounded_kept = kept + 1
        elif kept & 1:
            decision = "tie, odd last bit: round to even (up)"
            rounded_kept = kept + 1
        else:
            decision = "tie, even last bit: round to even (keep)"
            rounded_kept = kept

    value = math.ldexp(rounded_kept, lsb)
    result = encode_b16(-value if total < 0 else value)
    rounded = result.value
    error = rounded - exact
    overflow_shift = top > operand_top and len(nonzero) == 2
    event = RoundingEvent(
        position, exact, result, error,
        abs(rounded) > abs(exact), overflow_shift, rounding_bit, sticky,
    )
    return AdditionWalkthrough(
        a=a,
        b=b,
        a_bits=_bits_of(a),
        b_bits=_bits_of(b),
        alignment_shift=abs(_top(ma, ea) - _top(mb, eb)) if ma and mb else 0,
        aligned_a=_binary(ia, low, operand_top, operand_top),
        aligned_b=_binary(ib, low, operand_top, operand_top),
        raw_sum=_binary(mag, low, operand_top, top),
        normalize_shift=top - operand_top,
        kept=kept,
        rounding_bit=rounding_bit,
        sticky=sticky,
        decision=decision,
        result=result,
        exact=exact,
        event=event,
    )


def add_b16_pair(a: B16, b: B16) -> tuple[B16, RoundingEvent]:
    """Add two BF16 patterns with BF16 rounding of the exact sum."""
    if a.is_nan() or b.is_nan() or a.exponent == 0xFF or b.exponent == 0xFF:
        raise ContractError("add_b16_pair needs finite operands")
    walk = bf16_add(a.value, b.value)
    return walk.result, walk.event


def add_to_b16(acc: float, b: float, position: int = 0) -> AdditionWalkthrough:
    """Add a BF16 value to a binary32 accumulator and round the sum to BF16."""
    if not on_grid(acc, Grid.F32):
        raise ContractError(f"accumulator {acc!r} is not a binary32 value")
    if not on_grid(b, Grid.B16):
        raise ContractError(f"operand {b!r} is not a BF16 value")
    return bf16_add(acc, b, position)


class RoundingBitEntry(NamedTuple):
    a: str
    b: str
    kept: str
    rounding_bit: int


def rounding_bit_table() -> list[RoundingBitEntry]:
    """Last-two-bit additions of same-exponent operands and the bit shifted out.

    Each entry runs 1.00000aa + 1.00000bb through the bit-level adder; the
    significand overflows, so one bit leaves on normalization.
    """
    entries = []
    for a in range(4):
        for b in range(a, 4):
            walk = bf16_add(1.0 + a * 2.0 ** -7, 1.0 + b * 2.0 ** -7)
            entries.append(RoundingBitEntry(f"{a:02b}", f"{b:02b}", format(walk.kept & 0b11, "b"), walk.rounding_bit))
    return entries


# ---------------------------------------------------------------------------
# Ordered accumulation
# ---------------------------------------------------------------------------

def accumulate_f32(terms, init=None, per_step: bool = False) -> np.ndarray:
    """Left-fold `terms` along the last axis in binary32, ascending index.

    `init` continues an existing accumulator. With per_step the running sum
    is rounded to BF16 after every addition.
    """
    terms = np.asarray(terms, dtype=np.float32)
    acc = np.zeros(terms.shape[:-1], dtype=np.float32) if init is None else np.array(init, dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(terms.shape[-1]):
            acc = acc + terms[..., k]
            if per_step:
                acc = round_to_b16(acc).astype(np.float32)
    return acc.astype(np.float64)


def accumulate_f64(terms, init=None) -> np.ndarray:
    terms = np.asarray(terms, dtype=np.float64)
    acc = np.zeros(terms.shape[:-1]) if init is None else np.array(init, dtype=np.float64)
    for k in range(terms.shape[-1]):
        acc = acc + terms[..., k]
    return acc


def accumulate(terms, precision: Grid, init=None, per_step: bool = False) -> np.ndarray:
    if Grid(precision) is Grid.F64:
        return accumulate_f64(terms, init)
    return accumulate_f32(terms, init, per_step)


def matmul_accumulate(a, b, precision: Grid, init=None, per_step: bool = False) -> np.ndarray:
    """Fold a @ b over the inner index in ascending order.

    Products and sums are rounded to `precision` (F32 or F64) at every step;
    `init` is an existing accumulator to continue from.
    """
    dtype = np.float64 if Grid(precision) is Grid.F64 else np.float32
    a = np.asarray(a, dtype=np.float64).astype(dtype)
    b = np.asarray(b, dtype=np.float64).astype(dtype)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if init is None:
        acc = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    else:
        acc = np.array(init, dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(a.shape[1]):
            acc = acc + a[:, k, None] * b[None, k, :]
            if per_step:
                acc = round_to_b16(acc).astype(dtype)
    return acc.astype(np.float64)


def _as_vector(x, grid: Grid, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"{name} must be a non-empty vector")
    if not on_grid(arr, grid):
        raise ContractError(f"{name} is not on the {grid.value} grid")
    return arr


def _pair(p, v, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    p = _as_vector(p, grid, "p")
    v = _as_vector(v, grid, "v")
    if p.shape != v.shape:
        raise ContractError(f"length mismatch: {p.size} vs {v.size}")
    return p, v


def dot_lp(p, v, per_step: bool = False) -> tuple[B16, float]:
    """BF16 dot product: binary32 products and sums, one final BF16 rounding.

    Returns the BF16 result and the exact value of the binary32 accumulation.
    """
    p, v = _pair(p, v, Grid.B16)
    total = float(accumulate_f32(p.astype(np.float32) * v.astype(np.float32), per_step=per_step))
    return encode_b16(total), total


def dot_hp(p, v) -> float:
    """Binary32 dot product without final BF16 rounding."""
    p, v = _pair(p, v, Grid.F32)
    return float(accumulate_f32(p.astype(np.float32) * v.astype(np.float32)))


def low_bits_rate(p, v) -> float:
    """Share of nonzero binary32 products p * v with a nonzero low half-word.

    Those are the products that cannot be stored in BF16 without rounding.
    p and v broadcast against each other and must lie on the BF16 grid.
    """
    p, v = np.asarray(p, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if not (on_grid(p, Grid.B16) and on_grid(v, Grid.B16)):
        raise ContractError("low_bits_rate needs BF16 operands")
    products = (p.astype(np.float32) * v.astype(np.float32)).ravel()
    products = products[products != 0]
    if products.size == 0:
        return 0.0
    low = products.view(np.uint32) & np.uint32(0xFFFF)
    return float(np.count_nonzero(low)) / products.size


def _frexp_exp(x: float) -> int:
    return math.frexp(x)[1]


def prefix_error_trace(p, v, per_step: bool = False) -> list[RoundingEvent]:
    """Rounding error of every prefix of the BF16 dot product p . v.

    Event t holds the binary32 prefix sum over positions 0..t and the error
    of rounding it to BF16. With per_step the rounded prefix feeds the next
    addition.
    """
    p, v = _pair(p, v, Grid.B16)
    terms = p.astype(np.float32) * v.astype(np.float32)
    events = []
    acc = np.float32(0.0)
    for t, term in enumerate(terms):
        prev = float(acc)
        acc = np.float32(acc + term)
        exact = float(acc)
        rounded = encode_b16(exact)
        value = rounded.value
        bits = f32_bits(exact)
        overflow = (
            prev != 0.0 and float(term) != 0.0 and exact != 0.0
            and math.copysign(1.0, prev) == math.copysign(1.0, float(term))
            and _frexp_exp(exact) > max(_frexp_exp(prev), _frexp_exp(float(term)))
        )
        events.append(RoundingEvent(
            position=t,
            exact=exact,
            rounded=rounded,
            error=value - exact,
            rounded_up=exact != 0.0 and abs(value) > abs(exact),
            overflow_shift=overflow,
            rounding_bit=(bits >> 15) & 1,
            sticky=(bits & 0x7FFF) != 0,
        ))
        if per_step:
            acc = np.float32(value)
    return events
