import io

import numpy as np
import pytest
import scipy.sparse as sp

import config
from conftest import PAULI, dense_controlled, random_unitary
from errors import SerializationError, ShapeError, ValidationError
from matrices import (
    DenseMat, DiagonalMat, IdentityMat, OuterProductMat, PermMat, SparseMat, add, adjoint_mat,
    diagonal, dump_coo, embed, hadamard, isapprox, kron, load_coo, matvec_cols, mul, nnz,
    props, scale_mat, to_dense,
)

ISWAP = PermMat.from_one_based([1, 3, 2, 4], [1, 1j, 1j, 1])


def _samples(rng):
    d = 4
    return {
        "I": IdentityMat(d),
        "D": DiagonalMat(rng.standard_normal(d) + 1j * rng.standard_normal(d)),
        "P": PermMat(rng.permutation(d), rng.standard_normal(d) + 0j),
        "S": SparseMat(sp.random(d, d, density=0.5, random_state=3) + 1j * sp.eye(d)),
        "M": DenseMat(rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))),
    }


def test_promotion_table_examples(rng):
    d = DiagonalMat([1, 2, 3, 4])
    out = mul(IdentityMat(4), d)
    assert out.tag == "D"
    assert np.array_equal(out.diag, d.diag)

    p, q = PermMat([1, 2, 0], [1, 1j, -1]), PermMat([2, 0, 1], [2, 1, 1])
    pq = mul(p, q)
    assert pq.tag == "P"
    assert np.allclose(to_dense(pq), to_dense(p) @ to_dense(q))

    m = DenseMat(rng.standard_normal((4, 4)))
    assert mul(m, IdentityMat(4)) is m

    assert kron(IdentityMat(2), IdentityMat(2)).tag == "I"
    zi = kron(DiagonalMat([1, -1]), IdentityMat(2))
    assert zi.tag == "D"
    assert np.array_equal(zi.diag, [1, 1, -1, -1])

    xx = kron(PermMat([1, 0], [1, 1]), PermMat([1, 0], [1, 1]))
    assert xx.tag == "P"
    assert xx.perm.tolist() == [3, 2, 1, 0]

    ii = add(IdentityMat(2), IdentityMat(2))
    assert ii.tag == "D"
    assert np.array_equal(ii.diag, [2, 2])

    s = SparseMat(sp.eye(4, format="csc"))
    assert add(s, s).tag == "S"


def test_binary_ops_match_dense_products(rng):
    samples = _samples(rng)
    for a in samples.values():
        for b in samples.values():
            da, db = to_dense(a), to_dense(b)
            assert np.allclose(to_dense(mul(a, b)), da @ db)
            assert np.allclose(to_dense(add(a, b)), da + db)
            assert np.allclose(to_dense(hadamard(a, b)), da * db)
            assert np.allclose(to_dense(kron(a, b)), np.kron(da, db))


# Result class of mul / kron / add / hadamard, rows are the left operand.
PROMOTION = """
      I        D        P        S        M
I  I/I/D/I  D/D/D/D  P/P/S/D  S/S/S/D  M/S/M/D
D  D/D/D/D  D/D/D/D  P/P/S/D  S/S/S/D  M/S/M/D
P  P/P/S/D  P/P/S/D  P/P/S/P  S/S/S/P  M/S/M/P
S  S/S/S/D  S/S/S/D  S/S/S/P  S/S/S/S  M/S/M/S
M  M/S/M/D  M/S/M/D  M/S/M/P  M/S/M/S  M/S/M/M
"""


def _promotion_cases():
    header, *rows = PROMOTION.strip().splitlines()
    cols = header.split()
    for row in rows:
        left, *cells = row.split()
        for right, cell in zip(cols, cells):
            yield left, right, dict(zip(("mul", "kron", "add", "hadamard"), cell.split("/")))


def _random_of(tag, d, rng):
    if tag == "I":
        return IdentityMat(d)
    if tag == "D":
        return DiagonalMat(rng.standard_normal(d) + 1j * rng.standard_normal(d))
    if tag == "P":
        return PermMat(rng.permutation(d), rng.standard_normal(d) + 1j * rng.standard_normal(d))
    if tag == "S":
        seed = int(rng.integers(1 << 31))
        return SparseMat(sp.random(d, d, density=0.4, random_state=seed) + 1j * sp.eye(d))
    return DenseMat(rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d)))


DENSE_OPS = {
    "mul": (mul, lambda x, y: x @ y),
    "kron": (kron, np.kron),
    "add": (add, lambda x, y: x + y),
    "hadamard": (hadamard, lambda x, y: x * y),
}


@pytest.mark.parametrize("d", [4, 8])
@pytest.mark.parametrize("left, right, expected", list(_promotion_cases()),
                         ids=[f"{a}{b}" for a, b, _ in _promotion_cases()])
def test_promotion_table(left, right, expected, d, rng):
    a, b = _random_of(left, d, rng), _random_of(right, d, rng)
    assert (a.tag, b.tag) == (left, right)
    for op, (fn, dense_fn) in DENSE_OPS.items():
        out = fn(a, b)
        assert out.tag == expected[op], f"{left} {op} {right}"
        assert np.max(np.abs(to_dense(out) - dense_fn(to_dense(a), to_dense(b)))) <= 1e-12


def test_hadamard_with_identity_keeps_the_diagonal(rng):
    a = DenseMat(rng.standard_normal((4, 4)))
    out = hadamard(a, IdentityMat(4))
    assert out.tag == "D"
    assert np.allclose(out.diag, np.diag(a.data))


def test_adjoint_keeps_format():
    theta = 0.3
    d = adjoint_mat(DiagonalMat([1, np.exp(1j * theta)]))
    assert d.tag == "D"
    assert np.allclose(d.diag, [1, np.exp(-1j * theta)])
    eye = IdentityMat(8)
    assert adjoint_mat(eye) is eye
    dag = adjoint_mat(ISWAP)
    assert dag.tag == "P"
    assert np.allclose(to_dense(dag), np.linalg.inv(to_dense(ISWAP)))


def test_matvec_cols_in_place(rng):
    buf = np.array([[1], [0]], dtype=complex)
    matvec_cols(PermMat([1, 0], [1, 1]), buf)
    assert buf[:, 0].tolist() == [0, 1]

    before = rng.standard_normal((4, 3)) + 0j
    buf = before.copy()
    matvec_cols(IdentityMat(4), buf)
    assert np.array_equal(buf, before)

    u, v = rng.standard_normal((4, 1)), rng.standard_normal((1, 4))
    outer = OuterProductMat(u, v)
    buf = before.copy()
    matvec_cols(outer, buf)
    assert np.allclose(buf, (u @ v) @ before, atol=1e-14)

    with pytest.raises(ShapeError):
        matvec_cols(IdentityMat(2), np.zeros((4, 1), dtype=complex))


def test_matvec_cols_threads_match_serial(rng, monkeypatch):
    m = DenseMat(random_unitary(8, rng))
    buf = rng.standard_normal((8, 256)) + 1j * rng.standard_normal((8, 256))
    serial = buf.copy()
    matvec_cols(m, serial)
    monkeypatch.setattr(config, "THREADS", 4)
    threaded = buf.copy()
    matvec_cols(m, threaded)
    assert np.array_equal(serial, threaded)


def test_outer_product_stays_factored(rng):
    outer = OuterProductMat(rng.standard_normal(4), rng.standard_normal(4))
    d = DiagonalMat(rng.standard_normal(4))
    assert mul(outer, d).tag == "O"
    assert mul(d, outer).tag == "O"
    assert np.allclose(to_dense(mul(d, outer)), to_dense(d) @ to_dense(outer))
    assert add(outer, d).tag == "M"


def test_props():
    x = props(PermMat([1, 0], [1, 1]))
    assert (x.hermitian, x.unitary, x.reflexive) == (True, True, True)
    s = props(DiagonalMat([1, np.exp(0.3j)]))
    assert (s.hermitian, s.unitary, s.reflexive) == (False, True, False)
    i = props(ISWAP)
    assert i.unitary and not i.hermitian


def test_scale_and_diagonal(rng):
    m = DenseMat(rng.standard_normal((4, 4)))
    assert np.allclose(to_dense(scale_mat(m, 2j)), 2j * m.data)
    assert scale_mat(IdentityMat(2), 3).tag == "D"
    assert np.allclose(diagonal(ISWAP), [1, 0, 0, 1])
    assert nnz(ISWAP) == 4
    assert isapprox(scale_mat(IdentityMat(4), 1), IdentityMat(4))


def test_embed_matches_dense_oracle(rng):
    u = random_unitary(2, rng)
    out = embed(DenseMat(u), 3, (2,), (3,), (0,))
    assert np.allclose(to_dense(out), dense_controlled(3, 2, u, (3,), (0,)))

    x = embed(PermMat([1, 0], [1, 1]), 3, (1,), (2, 3), (1, 1))
    assert x.tag == "P"
    assert np.allclose(to_dense(x), dense_controlled(3, 1, PAULI["X"], (2, 3), (1, 1)))

    z = embed(DiagonalMat([1, -1]), 2, (2,))
    assert z.tag == "D"
    assert np.allclose(z.diag, [1, 1, -1, -1])

    swap = PermMat([0, 2, 1, 3], np.ones(4))
    full = to_dense(embed(swap, 3, (3, 1)))
    for idx in range(8):
        b1, b3 = idx & 1, (idx >> 2) & 1
        swapped = (idx & 0b010) | (b1 << 2) | b3
        assert full[swapped, idx] == 1


def test_perm_validation():
    with pytest.raises(ValidationError):
        PermMat([0, 0], [1, 1])
    with pytest.raises(ShapeError):
        DenseMat(np.zeros((2, 3)))


def test_coo_dump_reloads(rng):
    m = embed(DenseMat(random_unitary(2, rng)), 3, (2,))
    fh = io.StringIO()
    count = dump_coo(m, fh)
    assert fh.getvalue().splitlines()[0] == f"dim 8 format {m.tag} nnz {count}"
    fh.seek(0)
    back = load_coo(fh)
    assert np.allclose(to_dense(back), to_dense(m), atol=1e-15)


def test_coo_load_rejects_bad_files():
    with pytest.raises(SerializationError):
        load_coo(io.StringIO("size 2\n"))
    with pytest.raises(SerializationError):
        load_coo(io.StringIO("dim 2 format D nnz 2\n0 0 1.0 0.0\n"))
