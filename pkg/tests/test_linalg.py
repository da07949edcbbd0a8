import numpy as np
import pytest

from linalg import (
    ChecksumError, Mat, Mode, Vec, matmul, pack_sections, rank1_outer, read_container, read_mat_csv, rowmax,
    rowsum, rowsum_eq, same_bits, spectral_norm, unpack_sections, write_container, write_mat_csv,
)
from numerics import ContractError, Grid, round_to_b16


def b16_mat(rng, rows, cols, scale=1.0):
    return Mat.rounded(rng.standard_normal((rows, cols)) * scale, Grid.B16)


def test_mat_validation():
    with pytest.raises(ContractError):
        Mat([[np.nan, 1.0]])
    with pytest.raises(ContractError):
        Mat([[0.1]], Grid.B16)
    with pytest.raises(ContractError):
        Mat([1.0, 2.0])
    masked = Mat([[-np.inf, 1.0]], Grid.B16)
    assert masked.grid is Grid.B16
    with pytest.raises(ValueError):
        masked.data[0, 0] = 0.0


def test_grid_conversion():
    m = Mat([[0.1, 1.0]])
    assert m.to(Grid.B16).data[0, 0] == float(round_to_b16(0.1))
    b = Mat([[1.5]], Grid.B16)
    assert b.to(Grid.F64).same_bits(b)


def test_matmul_modes():
    rng = np.random.default_rng(0)
    a, b = b16_mat(rng, 5, 7), b16_mat(rng, 7, 3)
    exact = matmul(a, b, Mode.EXACT)
    np.testing.assert_allclose(exact.data, a.data @ b.data, rtol=1e-13, atol=1e-13)
    lp = matmul(a, b, Mode.LP)
    hp = matmul(a, b, Mode.HP)
    assert lp.grid is Grid.B16 and hp.grid is Grid.F32
    assert same_bits(lp.data, round_to_b16(hp.data))


def test_matmul_contract():
    rng = np.random.default_rng(1)
    a = b16_mat(rng, 2, 3)
    with pytest.raises(ContractError):
        matmul(a, b16_mat(rng, 2, 2))
    with pytest.raises(ContractError):
        matmul(Mat.rounded(rng.standard_normal((2, 3)), Grid.F32), b16_mat(rng, 3, 2), Mode.LP)


def test_matmul_init_continues_fold():
    rng = np.random.default_rng(2)
    a, b = b16_mat(rng, 4, 8), b16_mat(rng, 8, 4)
    head = matmul(a.block(0, 4, 0, 5), b.block(0, 5), Mode.HP)
    rest = matmul(a.block(0, 4, 5, 8), b.block(5, 8), Mode.HP, init=head.data)
    assert rest.same_bits(matmul(a, b, Mode.HP))


def test_row_reductions():
    s = Mat([[1.0, 3.0, 3.0], [-np.inf, -2.0, -5.0]], Grid.B16)
    m = rowmax(s)
    assert list(m.data) == [3.0, -2.0]
    assert list(rowsum_eq(s, m).data) == [2.0, 1.0]
    assert list(rowsum(Mat([[1.0, 2.0], [0.5, 0.25]]), Mode.EXACT).data) == [3.0, 0.75]
    with pytest.raises(ContractError):
        rowmax(Mat([[np.inf, 1.0]]))
    with pytest.raises(ContractError):
        rowsum_eq(s, Vec([1.0]))


def test_rank1_outer():
    out = rank1_outer(Vec([1.0, 2.0]), Vec([3.0, 4.0, 5.0]))
    assert out.shape == (2, 3)
    assert list(out.data[1]) == [6.0, 8.0, 10.0]


@pytest.mark.parametrize("shape", [(6, 4), (3, 9), (8, 8)])
def test_spectral_norm_matches_svd(shape):
    rng = np.random.default_rng(sum(shape))
    w = Mat(rng.standard_normal(shape))
    result = spectral_norm(w)
    assert result.converged
    expected = np.linalg.svd(w.data, compute_uv=False)[0]
    assert abs(result.value - expected) <= 1e-9 * expected


@pytest.mark.parametrize("shape", [(6, 4), (3, 9)])
def test_spectral_norm_is_transpose_invariant(shape):
    w = Mat(np.random.default_rng(len(shape) + shape[0]).standard_normal(shape))
    assert spectral_norm(w).value == pytest.approx(spectral_norm(w.T).value, rel=1e-10)


def test_spectral_norm_edge_cases():
    assert spectral_norm(Mat.zeros(3, 2)) == (0.0, 0, True)
    assert abs(spectral_norm(Mat.identity(4)).value - 1.0) < 1e-12
    # all-ones start vector is annihilated here
    annihilated = spectral_norm(Mat([[1.0, -1.0]]))
    assert annihilated.converged
    assert abs(annihilated.value - np.sqrt(2.0)) < 1e-9
    with pytest.raises(ContractError):
        spectral_norm(Mat(np.zeros((0, 2))))


def test_mat_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    m = Mat(rng.standard_normal((4, 3)) * 10.0 ** rng.integers(-200, 200, (4, 3)))
    path = tmp_path / "m.csv"
    write_mat_csv(m, path)
    assert read_mat_csv(path).same_bits(m)


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    sections = {
        "Q": b16_mat(rng, 3, 2),
        "L": Vec.rounded(rng.standard_normal(3), Grid.F32),
        "S": Mat([[-np.inf, 1.0]], Grid.B16),
    }
    path = tmp_path / "tape.bin"
    write_container(path, sections)
    loaded = read_container(path)
    assert list(loaded) == ["Q", "L", "S"]
    for name, item in sections.items():
        assert loaded[name].grid is item.grid
        assert loaded[name].same_bits(item)
    assert isinstance(loaded["L"], Vec)


def test_container_detects_corruption():
    blob = pack_sections({"A": Mat([[1.0, 2.0]])})
    with pytest.raises(ChecksumError):
        unpack_sections(blob[:-7])
    with pytest.raises(ChecksumError):
        unpack_sections(blob[:5])
    flipped = bytearray(blob)
    flipped[20] ^= 0xFF
    with pytest.raises(ChecksumError):
        unpack_sections(bytes(flipped))
