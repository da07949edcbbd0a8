"""
Precision-tagged dense matrices.

Every payload is float64; the grid tag says which narrower set of numbers
the values are guaranteed to lie on. Products fold the inner index in
ascending order, so results are reproducible bit for bit.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Union

import numpy as np
import pandas as pd

from numerics import ContractError, Grid, accumulate, matmul_accumulate, on_grid, round_to_grid

CONTAINER_MAGIC = b"BF16LAB1"
GRID_TAGS = {Grid.B16: 0, Grid.F32: 1, Grid.F64: 2}
KIND_MAT, KIND_VEC = 0, 1


class ChecksumError(ValueError):
    """A binary container is truncated or corrupt."""


class Mode(str, Enum):
    """Arithmetic path for one operation."""

    LP = "lp"
    HP = "hp"
    EXACT = "exact"

    @property
    def grid(self) -> Grid:
        """Grid of operands and results."""
        return {Mode.LP: Grid.B16, Mode.HP: Grid.F32, Mode.EXACT: Grid.F64}[self]

    @property
    def accumulator(self) -> Grid:
        return Grid.F64 if self is Mode.EXACT else Grid.F32

    def promoted(self) -> "Mode":
        """The high-precision dual of this mode."""
        return Mode.HP if self is Mode.LP else self


def _validated(data, grid: Grid, ndim: int, what: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractError(f"{what} needs {ndim} dimensions, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise ContractError(f"{what} contains NaN")
    finite = arr[np.isfinite(arr)]
    if not on_grid(finite, grid):
        raise ContractError(f"{what} has values off the {grid.value} grid")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Mat:
    data: np.ndarray
    grid: Grid = Grid.F64

    def __post_init__(self):
        grid = Grid(self.grid)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "data", _validated(self.data, grid, 2, "Mat"))

    @classmethod
    def rounded(cls, data, grid: Grid) -> "Mat":
        """Round arbitrary float64 data onto `grid`."""
        return cls(round_to_grid(data, grid), grid)

    @classmethod
    def zeros(cls, rows: int, cols: int, grid: Grid = Grid.F64) -> "Mat":
        return cls(np.zeros((rows, cols)), grid)

    @classmethod
    def identity(cls, n: int, grid: Grid = Grid.F64) -> "Mat":
        return cls(np.eye(n), grid)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Mat":
        return Mat(self.data.T, self.grid)

    def to(self, grid: Grid) -> "Mat":
        grid = Grid(grid)
        if self.grid.within(grid):
            return Mat(self.data, grid)
        return Mat.rounded(self.data, grid)

    def block(self, r0: int, r1: int, c0: int = 0, c1: int | None = None) -> "Mat":
        return Mat(self.data[r0:r1, c0:c1], self.grid)

    def same_bits(self, other: "Mat") -> bool:
        return same_bits(self.data, other.data)


@dataclass(frozen=True, eq=False)
class Vec:
    data: np.ndarray
    grid: Grid = Grid.F64

    def __post_init__(self):
        grid = Grid(self.grid)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "data", _validated(self.data, grid, 1, "Vec"))

    @classmethod
    def rounded(cls, data, grid: Grid) -> "Vec":
        return cls(round_to_grid(data, grid), grid)

    def __len__(self) -> int:
        return self.data.shape[0]

    def to(self, grid: Grid) -> "Vec":
        grid = Grid(grid)
        if self.grid.within(grid):
            return Vec(self.data, grid)
        return Vec.rounded(self.data, grid)

    def same_bits(self, other: "Vec") -> bool:
        return same_bits(self.data, other.data)


def same_bits(a, b) -> bool:
    """Bitwise equality of two float64 arrays (distinguishes -0.0 from 0.0)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return a.shape == b.shape and bool(np.array_equal(a.view(np.uint64), b.view(np.uint64)))


# ---------------------------------------------------------------------------
# Products and reductions
# ---------------------------------------------------------------------------

def matmul(a: Mat, b: Mat, mode: Mode = Mode.EXACT, init=None, per_step: bool = False) -> Mat:
    """a @ b with the accumulation contract of `mode`.

    lp: binary32 products and sums, final BF16 rounding (operands must be
    BF16). hp: binary32 throughout. exact: float64 fold. The inner index is
    always folded in ascending order; `init` continues an accumulator.
    """
    mode = Mode(mode)
    if a.cols != b.rows:
        raise ContractError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    for name, operand in (("left", a), ("right", b)):
        if not operand.grid.within(mode.grid):
            raise ContractError(f"{mode.value} matmul needs {mode.grid.value} operands, {name} is {operand.grid.value}")
    acc = matmul_accumulate(a.data, b.data, mode.accumulator, init, per_step and mode is Mode.LP)
    return Mat(round_to_grid(acc, mode.grid), mode.grid)


def _check_rows(s: Mat) -> None:
    if s.cols == 0 or s.rows == 0:
        raise ContractError("rows must be non-empty")
    if np.isposinf(s.data).any():
        raise ContractError("row reductions need finite inputs")


def rowmax(s: Mat) -> Vec:
    _check_rows(s)
    return Vec(s.data.max(axis=1), s.grid)


def rowsum(s: Mat, mode: Mode = Mode.EXACT) -> Vec:
    """Row sums folded left to right in the accumulator of `mode`."""
    _check_rows(s)
    mode = Mode(mode)
    total = accumulate(s.data, mode.accumulator)
    return Vec(round_to_grid(total, mode.grid), mode.grid)


def rowsum_eq(s: Mat, m: Vec) -> Vec:
    """Per-row count of entries bitwise equal to m."""
    _check_rows(s)
    if len(m) != s.rows:
        raise ContractError(f"rowsum_eq needs {s.rows} maxima, got {len(m)}")
    data = np.ascontiguousarray(s.data).view(np.uint64)
    ref = np.ascontiguousarray(m.data).view(np.uint64)
    return Vec((data == ref[:, None]).sum(axis=1).astype(np.float64))


def rank1_outer(u: Vec, v: Vec) -> Mat:
    return Mat(np.outer(u.data, v.data))


class SpectralNorm(NamedTuple):
    value: float
    iterations: int
    converged: bool


def _matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (a * x[None, :]).sum(axis=1)


def spectral_norm(w: Mat, tol: float = 1e-13, max_iter: int = 10000) -> SpectralNorm:
    """Largest singular value by power iteration on WᵀW.

    Starts from the normalised all-ones vector; when that vector is
    annihilated by W, 1e-3 is added to its first entry before renormalising.
    """
    a = w.data
    if a.size == 0:
        raise ContractError("spectral_norm needs a non-empty matrix")
    if tol <= 0:
        raise ContractError("tol must be positive")
    if not np.any(a):
        return SpectralNorm(0.0, 0, True)

    x = np.ones(a.shape[1]) / np.sqrt(a.shape[1])
    if not np.any(_matvec(a, x)):
        x[0] += 1e-3
        x /= np.linalg.norm(x)
    sigma = float(np.linalg.norm(_matvec(a, x)))
    for it in range(1, max_iter + 1):
        y = _matvec(a.T, _matvec(a, x))
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return SpectralNorm(sigma, it, True)
        x = y / norm
        estimate = float(np.linalg.norm(_matvec(a, x)))
        if abs(estimate - sigma) < tol:
            return SpectralNorm(estimate, it, True)
        sigma = estimate
    return SpectralNorm(sigma, max_iter, False)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_mat_csv(mat: Mat, path) -> None:
    """Plain numeric CSV, no header; floats use the shortest round-trip repr."""
    pd.DataFrame(mat.data).to_csv(path, header=False, index=False)


def read_mat_csv(path, grid: Grid = Grid.F64) -> Mat:
    df = pd.read_csv(path, header=None, float_precision="round_trip")
    return Mat(df.to_numpy(dtype=np.float64), grid)


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

Section = Union[Mat, Vec]


def pack_sections(sections: dict[str, Section]) -> bytes:
    """Serialise named matrices/vectors; see docs/formats.md for the layout."""
    index = []
    payload = []
    offset = 0
    for name, item in sections.items():
        kind = KIND_VEC if isinstance(item, Vec) else KIND_MAT
        rows, cols = (1, len(item)) if kind == KIND_VEC else item.shape
        raw = np.ascontiguousarray(item.data, dtype="<f8").tobytes()
        encoded = name.encode("utf-8")
        index.append(struct.pack("<H", len(encoded)) + encoded
                     + struct.pack("<BBIIQ", kind, GRID_TAGS[item.grid], rows, cols, offset))
        payload.append(raw)
        offset += len(raw)
    body = CONTAINER_MAGIC + struct.pack("<I", len(sections)) + b"".join(index) + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_sections(blob: bytes) -> dict[str, Section]:
    if len(blob) < len(CONTAINER_MAGIC) + 8:
        raise ChecksumError("container is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("container checksum mismatch")
    if body[:len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise ChecksumError("not a BF16LAB1 container")

    pos = len(CONTAINER_MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        kind, tag, rows, cols, offset = struct.unpack_from("<BBIIQ", body, pos)
        pos += struct.calcsize("<BBIIQ")
        entries.append((name, kind, tag, rows, cols, offset))

    grids = {v: k for k, v in GRID_TAGS.items()}
    sections: dict[str, Section] = {}
    for name, kind, tag, rows, cols, offset in entries:
        start = pos + offset
        data = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=start).astype(np.float64)
        if kind == KIND_VEC:
            sections[name] = Vec(data, grids[tag])
        else:
            sections[name] = Mat(data.reshape(rows, cols), grids[tag])
    return sections


def write_container(path, sections: dict[str, Section]) -> None:
    with open(path, "wb") as f:
        f.write(pack_sections(sections))


def read_container(path) -> dict[str, Section]:
    with open(path, "rb") as f:
        return unpack_sections(f.read())
