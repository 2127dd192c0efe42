import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualvq.codebook import (ClusterAssignment, Codebook, CodebookFormatError, Permutation, balanced_kmeans,
                             check_block_structure, code_distance, load_codebook, load_permutation, nearest_code,
                             nearest_codes, rearrange, save_codebook, save_permutation, within_cluster_cost)
from dualvq.numerics import Rng


def brute(codes, e):
    best, arg = np.inf, -1
    for i, c in enumerate(codes):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(e, c))
        if d < best:
            best, arg = d, i
    return arg


def test_nearest_code_examples():
    codes = Rng(0).normal((10, 3))
    assert nearest_code(Codebook(codes), codes[5]) == 5
    assert nearest_code(Codebook([[0, 0], [10, 10]]), [1, 1]) == 0


def test_nearest_codes_match_exhaustive_scan():
    rng = Rng(1)
    book = Codebook(rng.normal((64, 8)))
    x = rng.normal((1000, 8))
    got = nearest_codes(book, x)
    assert all(got[i] == brute(book.codes, x[i]) for i in range(len(x)))


def test_nearest_code_dimension_mismatch():
    with pytest.raises(ValueError):
        nearest_code(Codebook(np.zeros((3, 2))), [1.0, 2.0, 3.0])


def test_codebook_is_read_only():
    book = Codebook(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        book.codes[0, 0] = 1.0


def test_code_distance():
    book = Codebook([[0, 0], [3, 4]])
    assert code_distance(book, 1, 1) == 0.0
    assert code_distance(book, 0, 1) == 5.0
    assert code_distance(book, 1, 0) == 5.0
    rb = Codebook(Rng(2).normal((20, 5)))
    for i, j in [(0, 3), (7, 19), (4, 4)]:
        assert code_distance(rb, i, j) == pytest.approx(np.linalg.norm(rb.codes[i] - rb.codes[j]), rel=1e-14)
    with pytest.raises(IndexError):
        code_distance(book, 0, 2)
    with pytest.raises(IndexError):
        code_distance(book, -1, 0)


def test_balanced_kmeans_singletons():
    codes = Rng(3).normal((6, 2))
    a = balanced_kmeans(Codebook(codes), 6, Rng(0))
    assert sorted(a.assignment.tolist()) == list(range(6))
    np.testing.assert_allclose(a.centers[a.assignment], codes, atol=1e-15)


def test_balanced_kmeans_four_point_example():
    codes = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    a = balanced_kmeans(Codebook(codes), 2, Rng(0))
    assert a.assignment[0] == a.assignment[1] != a.assignment[2] == a.assignment[3]
    # oracle: the minimum over all three balanced bipartitions
    costs = {}
    for pair in [(0, 1), (0, 2), (0, 3)]:
        lab = np.array([0 if i in pair else 1 for i in range(4)])
        centers = np.stack([codes[lab == c].mean(0) for c in (0, 1)])
        costs[pair] = within_cluster_cost(codes, lab, centers)
    assert min(costs, key=costs.get) == (0, 1)
    assert a.history[-1] == pytest.approx(costs[(0, 1)])


def test_balanced_kmeans_sizes_monotone_and_centers():
    book = Codebook(Rng(4).normal((1024, 8)))
    a = balanced_kmeans(book, 16, Rng(5))
    assert np.all(np.bincount(a.assignment, minlength=16) == 64)
    assert all(b <= x for x, b in zip(a.history, a.history[1:]))
    for c in range(16):
        np.testing.assert_allclose(a.centers[c], book.codes[a.assignment == c].mean(0), atol=1e-12)


@pytest.mark.parametrize("n", [3, 0, 20])
def test_balanced_kmeans_rejects_bad_cluster_count(n):
    with pytest.raises(ValueError):
        balanced_kmeans(Codebook(np.zeros((16, 2))), n, Rng(0))


def test_rearrange_identity_and_four_point():
    codes = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    ident = ClusterAssignment(2, np.array([0, 0, 1, 1]), np.array([[0, .5], [10, .5]]))
    book, perm = rearrange(Codebook(codes), ident)
    np.testing.assert_array_equal(perm.forward, np.arange(4))
    np.testing.assert_array_equal(book.codes, codes)
    a = balanced_kmeans(Codebook(codes), 2, Rng(0))
    new_book, perm = rearrange(Codebook(codes), a)
    assert check_block_structure(a.assignment[perm.inverse], 2)
    assert [tuple(r) for r in new_book.codes] in ([tuple(r) for r in codes], [tuple(r) for r in codes[[2, 3, 0, 1]]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_rearrange_block_invariant_property(n, m, seed):
    rng = Rng(seed)
    codes = rng.normal((n * m, 3))
    labels = np.repeat(np.arange(n), m)[rng.permutation(n * m)]
    centers = np.stack([codes[labels == c].mean(0) for c in range(n)])
    book, perm = rearrange(Codebook(codes), ClusterAssignment(n, labels, centers))
    assert perm.is_bijection()
    new_labels = labels[perm.inverse]
    assert all(new_labels[i] == i // m for i in range(n * m))
    np.testing.assert_array_equal(book.codes[perm.forward], codes)  # multiset preserved, round-trip restores order
    assert check_block_structure(new_labels, m)


def test_permutation_bijection_detection():
    assert Permutation.from_order(np.array([2, 0, 1])).is_bijection()
    assert not Permutation(np.array([0, 0, 1]), np.array([0, 2, 1])).is_bijection()


def test_codebook_file_round_trip(tmp_path):
    rng = Rng(6)
    for count, dim in [(256, 8), (4096, 8), (1, 1)]:
        book = Codebook(rng.normal((count, dim)).astype(np.float32))
        save_codebook(book, tmp_path / "b.sdcb")
        back = load_codebook(tmp_path / "b.sdcb")
        np.testing.assert_array_equal(back.codes, book.codes)
        save_codebook(back, tmp_path / "c.sdcb")
        assert (tmp_path / "b.sdcb").read_bytes() == (tmp_path / "c.sdcb").read_bytes()


def test_codebook_file_errors(tmp_path):
    book = Codebook(Rng(7).normal((4, 2)))
    p = tmp_path / "b.sdcb"
    save_codebook(book, p)
    raw = p.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 99) + raw[8:],
        "truncated": raw[:-3],
        "header": raw[:6],
    }
    messages = set()
    for name, data in cases.items():
        p.write_bytes(data)
        with pytest.raises(CodebookFormatError) as exc:
            load_codebook(p)
        messages.add(str(exc.value).split(":")[-1].strip())
    assert len(messages) == len(cases)


def test_permutation_file_round_trip(tmp_path):
    perm = Permutation.from_order(Rng(8).permutation(37))
    save_permutation(perm, tmp_path / "p.sdpm")
    back = load_permutation(tmp_path / "p.sdpm")
    np.testing.assert_array_equal(back.forward, perm.forward)
    np.testing.assert_array_equal(back.inverse, perm.inverse)
