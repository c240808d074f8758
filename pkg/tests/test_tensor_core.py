import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalora import oracles
from metalora.tensor_core import (
    DenseTensor,
    DummyTensorSpec,
    InvalidAxisError,
    NonFiniteError,
    ShapeMismatchError,
    build_dummy_tensor,
    contract,
    conv1d_via_dummy,
    conv2d_forward,
    cp_reconstruct,
    im2col,
    tr_reconstruct,
)

TOL = 1e-12


# DenseTensor


def test_dense_tensor_is_immutable():
    t = DenseTensor([1.0, 2.0, 3.0, 4.0], shape=(2, 2))
    with pytest.raises(ValueError):
        t.array[0, 0] = 5.0
    assert t.order == 2
    assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_dense_tensor_rejects_bad_input():
    with pytest.raises(ShapeMismatchError):
        DenseTensor([1.0, 2.0, 3.0], shape=(2, 2))
    with pytest.raises(NonFiniteError):
        DenseTensor([1.0, np.nan])
    with pytest.raises(ValueError):
        DenseTensor([1.0], dtype="int8")


def test_float32_is_kept():
    assert DenseTensor([1.0], dtype="float32").dtype == np.float32


# contraction


def test_matrix_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert contract(a, b, [(1, 0)]).array.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_empty_pairs_is_outer_product():
    out = contract([1.0, 2.0], [3.0, 4.0, 5.0], [])
    assert out.shape == (2, 3)
    assert out.array.tolist() == [[3.0, 4.0, 5.0], [6.0, 8.0, 10.0]]


def test_full_contraction_is_order_zero():
    out = contract([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [(0, 0)])
    assert out.shape == () and out.order == 0
    assert float(out.array) == 32.0


def test_contract_errors():
    a, b = np.ones((2, 3)), np.ones((4, 2))
    with pytest.raises(ShapeMismatchError):
        contract(a, b, [(1, 0)])
    with pytest.raises(InvalidAxisError):
        contract(a, b, [(2, 0)])
    with pytest.raises(InvalidAxisError):
        contract(a, np.ones((2, 2)), [(0, 0), (0, 1)])


@st.composite
def contraction_case(draw):
    na = draw(st.integers(1, 3))
    nb = draw(st.integers(1, 3))
    sa = draw(st.lists(st.integers(1, 4), min_size=na, max_size=na))
    sb = draw(st.lists(st.integers(1, 4), min_size=nb, max_size=nb))
    k = draw(st.integers(0, min(na, nb)))
    ia = draw(st.permutations(range(na)))[:k]
    ib = draw(st.permutations(range(nb)))[:k]
    for i, j in zip(ia, ib):
        sb[j] = sa[i]
    seed = draw(st.integers(0, 2**32 - 1))
    return sa, sb, list(zip(ia, ib)), seed


@given(contraction_case())
def test_contract_matches_loops(case):
    sa, sb, pairs, seed = case
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(sa), rng.standard_normal(sb)
    got = contract(a, b, pairs)
    assert got.order == len(sa) + len(sb) - 2 * len(pairs)
    assert oracles.rel_error(got.array, oracles.contract(a, b, pairs)) <= TOL


@given(contraction_case())
def test_swapping_operands_permutes_free_axes(case):
    sa, sb, pairs, seed = case
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(sa), rng.standard_normal(sb)
    ab = contract(a, b, pairs).array
    ba = contract(b, a, [(j, i) for i, j in pairs]).array
    na = len(sa) - len(pairs)
    perm = list(range(ab.ndim - na, ab.ndim)) + list(range(ab.ndim - na))
    assert oracles.rel_error(np.transpose(ba, perm) if ab.ndim else ba, ab) <= TOL


# dummy tensor and convolution


def test_conv1d_worked_example():
    # [1,2,3] * [1,1], valid, stride 1 -> [3, 5]
    spec = DummyTensorSpec.for_geometry(3, 2)
    assert conv1d_via_dummy([1.0, 2.0, 3.0], [1.0, 1.0], spec).array.tolist() == [3.0, 5.0]


def test_conv1d_padding_and_stride():
    # padded input [0,1,2,3,4,0], kernel [1,0,-1], stride 2 -> [0-2, 2-4] = [-2, -2]
    spec = DummyTensorSpec.for_geometry(4, 3, stride=2, padding=1)
    assert spec.output_len == 2
    assert conv1d_via_dummy([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, -1.0], spec).array.tolist() == [-2.0, -2.0]


def test_dummy_tensor_small_case():
    P = build_dummy_tensor(DummyTensorSpec(3, 2, 2)).array
    ones = sorted(map(tuple, np.argwhere(P == 1.0).tolist()))
    assert ones == [(0, 0, 0), (1, 0, 1), (1, 1, 0), (2, 1, 1)]


@given(st.integers(1, 12), st.integers(1, 5), st.sampled_from([1, 2, 3]), st.sampled_from([0, 1, 2]))
def test_dummy_law(alpha, beta, s, p):
    try:
        spec = DummyTensorSpec.for_geometry(alpha, beta, s, p)
    except ValueError:
        return
    P = build_dummy_tensor(spec).array
    j, jp, k = np.meshgrid(*[np.arange(n) for n in P.shape], indexing="ij")
    assert np.array_equal(P, (j == s * jp + k - p).astype(float))


def test_spec_rejects_geometry_reading_only_padding():
    with pytest.raises(ValueError):
        DummyTensorSpec.for_geometry(1, 1, 1, 2)
    with pytest.raises(ValueError):
        DummyTensorSpec(4, 3, 2, 0, 0)
    with pytest.raises(ValueError):
        DummyTensorSpec.for_geometry(2, 5)


@given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_conv1d_matches_loops(alpha, beta, s, p, seed):
    try:
        spec = DummyTensorSpec.for_geometry(alpha, beta, s, p)
    except ValueError:
        return
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(alpha), rng.standard_normal(beta)
    want = oracles.conv1d(a, b, s, p, spec.output_len)
    assert oracles.rel_error(conv1d_via_dummy(a, b, spec).array, want) <= TOL


@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**32 - 1))
def test_conv2d_matches_loops(H, W, K, I, O, s, p, seed):
    try:
        DummyTensorSpec.for_geometry(H, K, s, p)
        DummyTensorSpec.for_geometry(W, K, s, p)
    except ValueError:
        return
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((H, W, I)), rng.standard_normal((K, K, I, O))
    got = conv2d_forward(x, w, s, p)
    assert got.shape == ((H + 2 * p - K) // s + 1, (W + 2 * p - K) // s + 1, O)
    assert oracles.rel_error(got.array, oracles.conv2d(x, w, s, p)) <= TOL


@given(st.integers(2, 6), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**32 - 1))
def test_im2col_agrees_with_dummy_conv(H, K, s, p, seed):
    try:
        DummyTensorSpec.for_geometry(H, K, s, p)
    except ValueError:
        return
    rng = np.random.default_rng(seed)
    X, w = rng.standard_normal((2, H, H, 2)), rng.standard_normal((K, K, 2, 3))
    cols = im2col(X, K, s, p)
    got = np.einsum("nhwabi,abio->nhwo", cols, w)
    for n in range(2):
        assert oracles.rel_error(got[n], conv2d_forward(X[n], w, s, p).array) <= TOL


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d_forward(np.ones((3, 3, 2)), np.ones((1, 1, 3, 1)))


# CP and tensor ring


def test_cp_worked_example():
    # a = [1,2], b = [3,4], lambda = 1 -> outer product
    out = cp_reconstruct([np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])], [1.0])
    assert out.array.tolist() == [[3.0, 4.0], [6.0, 8.0]]


def test_tr_rank_one_is_outer_product():
    out = tr_reconstruct([np.array([1.0, 2.0]).reshape(1, 2, 1), np.array([3.0, 4.0]).reshape(1, 2, 1)])
    assert out.array.tolist() == [[3.0, 4.0], [6.0, 8.0]]


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_cp_matches_loops(dims, R, seed):
    rng = np.random.default_rng(seed)
    fs = [rng.standard_normal((d, R)) for d in dims]
    lam = rng.standard_normal(R)
    assert oracles.rel_error(cp_reconstruct(fs, lam).array, oracles.cp(fs, lam)) <= TOL


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 3)), min_size=1, max_size=3), st.integers(0, 2**32 - 1))
def test_tr_matches_loops(spec, seed):
    rng = np.random.default_rng(seed)
    N = len(spec)
    cores = [rng.standard_normal((spec[n][1], spec[n][0], spec[(n + 1) % N][1])) for n in range(N)]
    assert oracles.rel_error(tr_reconstruct(cores).array, oracles.tr(cores)) <= TOL


@given(st.lists(st.integers(1, 4), min_size=2, max_size=3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_cp_is_tr_with_diagonal_cores(dims, R, seed):
    rng = np.random.default_rng(seed)
    fs = [rng.standard_normal((d, R)) for d in dims]
    cores = [np.einsum("ir,rs->ris", f, np.eye(R)) for f in fs]
    assert oracles.rel_error(tr_reconstruct(cores).array, cp_reconstruct(fs, np.ones(R)).array) <= TOL


def test_tr_bond_mismatch():
    with pytest.raises(ShapeMismatchError):
        tr_reconstruct([np.ones((2, 3, 2)), np.ones((3, 3, 2))])
