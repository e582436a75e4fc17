import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from featlock import cipher as cp
from featlock import ndkit as nd
from gradcheck import numeric_grad, rel_err

seeds = st.integers(0, 2**64 - 1)


def key(alpha_one_based):
    return cp.PermutationKey(tuple(a - 1 for a in alpha_one_based))


# ---------------------------------------------------------------------------
# keygen / invert / random_keys
# ---------------------------------------------------------------------------


def test_keygen_single():
    assert cp.keygen(1, 12345).one_based == [1]


@given(st.integers(1, 300), seeds)
def test_keygen_bijective_and_deterministic(L, seed):
    k = cp.keygen(L, seed)
    assert sorted(k.alpha) == list(range(L))
    assert cp.keygen(L, seed) == k
    assert k.seed == seed


def test_keygen_rejects_zero():
    with pytest.raises(cp.CipherError):
        cp.keygen(0, 1)


def test_keygen_uniform_over_s4():
    counts = dict.fromkeys(itertools.permutations(range(4)), 0)
    n = 10_000
    for s in range(n):
        counts[cp.keygen(4, s).alpha] += 1
    p = 1 / 24
    sigma = math.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 3 * sigma for c in counts.values()), counts
    chi2 = sum((c - n * p) ** 2 / (n * p) for c in counts.values())
    assert chi2 < 41.64  # 99th percentile of chi-square with 23 dof


def test_invert_examples():
    assert cp.invert_key(cp.PermutationKey.identity(5)).is_identity()
    assert cp.invert_key(key([2, 3, 1])).one_based == [3, 1, 2]


@given(st.integers(1, 64), seeds)
def test_invert_involution(L, seed):
    k = cp.keygen(L, seed)
    inv = cp.invert_key(k)
    assert cp.invert_key(inv).alpha == k.alpha
    assert all(inv.alpha[a] == i for i, a in enumerate(k.alpha))


def test_permutation_key_rejects_non_bijection():
    with pytest.raises(cp.CipherError):
        cp.PermutationKey((0, 0, 1))


def test_random_keys():
    ks = cp.random_keys(100, 32, seed=9)
    assert all(sorted(k.alpha) == list(range(32)) for k in ks)
    assert len({k.alpha for k in ks}) >= 99
    assert cp.random_keys(1, 32, 9)[0] == cp.keygen(32, nd.derive_seed(9, 0))
    assert cp.random_keys(100, 32, 9) == ks


# ---------------------------------------------------------------------------
# encrypt / decrypt
# ---------------------------------------------------------------------------


def test_cp_identity_and_rotation():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert np.array_equal(cp.encrypt_cp(x, cp.PermutationKey.identity(3)), x)
    y = cp.encrypt_cp(x, key([2, 3, 1]))
    assert np.array_equal(y, x[[1, 2, 0]])


def test_cp_rejects_wrong_length():
    with pytest.raises(cp.CipherError):
        cp.encrypt_cp(np.zeros((4, 2, 2)), cp.PermutationKey.identity(3))


def test_shf_hand_example():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = cp.encrypt_shf(img, 2, key([4, 3, 2, 1]))
    assert out.tolist() == [[[4.0, 3.0], [2.0, 1.0]]]


def test_shf_flatten_order_channel_major():
    # c=2, M=2: block vector is [ch0 row-major, ch1 row-major]
    img = np.arange(8.0).reshape(2, 2, 2)
    k = key([5, 1, 2, 3, 4, 6, 7, 8])  # position 0 reads index 4 = ch1 (0,0)
    out = cp.encrypt_shf(img, 2, k)
    assert out[0, 0, 0] == img[1, 0, 0]
    assert out[0, 0, 1] == img[0, 0, 0]


def test_shf_identity_and_errors():
    img = np.random.default_rng(1).random((3, 8, 8))
    assert np.array_equal(cp.encrypt_shf(img, 4, cp.PermutationKey.identity(48)), img)
    with pytest.raises(cp.CipherError):
        cp.encrypt_shf(img, 3, cp.PermutationKey.identity(27))
    with pytest.raises(cp.CipherError):
        cp.encrypt_shf(img, 4, cp.PermutationKey.identity(47))


def test_shf_same_key_every_block():
    rng = np.random.default_rng(2)
    img = rng.random((3, 8, 8))
    k = cp.keygen(12, 5)
    out = cp.encrypt_shf(img, 2, k)
    for bi in range(4):
        for bj in range(4):
            block = img[:, 2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2]
            assert np.array_equal(out[:, 2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2],
                                  cp.encrypt_shf(block, 2, k))


@given(seeds, st.sampled_from([1, 2, 4, 8]))
def test_shf_batched_matches_single(seed, M):
    rng = np.random.default_rng(seed % 2**32)
    imgs = rng.random((3, 3, 8, 8))
    k = cp.keygen(3 * M * M, seed)
    batch = cp.encrypt_shf(imgs, M, k)
    for i in range(3):
        assert np.array_equal(batch[i], cp.encrypt_shf(imgs[i], M, k))


@given(seeds)
def test_shf_m1_equals_cp(seed):
    img = np.random.default_rng(seed % 2**32).random((3, 6, 4))
    k = cp.keygen(3, seed)
    assert np.array_equal(cp.encrypt_shf(img, 1, k), cp.encrypt_cp(img, k))


@given(seeds, st.sampled_from([("CP", 1), ("SHF", 1), ("SHF", 2), ("SHF", 4)]))
def test_decrypt_roundtrip(seed, kind_m):
    kind, M = kind_m
    c = 3 if kind == "SHF" else 16
    spec = cp.KeySpec(kind, c, M)
    x = np.random.default_rng(seed % 2**32).normal(size=(c, 8, 8))
    k = cp.keygen(spec.L, seed)
    assert np.array_equal(cp.decrypt(cp.encrypt(x, spec, k), spec, k), x)
    assert np.array_equal(cp.decrypt(cp.encrypt(x, spec, cp.PermutationKey.identity(spec.L)),
                                     spec, cp.PermutationKey.identity(spec.L)), x)


@given(seeds, seeds)
def test_decrypt_wrong_key_differs(s1, s2):
    spec = cp.KeySpec("CP", 8)
    x = np.random.default_rng(s1 % 2**32).normal(size=(8, 3, 3))  # all channels distinct
    k1, k2 = cp.keygen(8, s1), cp.keygen(8, s2)
    if k1 == k2:
        return
    assert not np.array_equal(cp.decrypt(cp.encrypt(x, spec, k1), spec, k2), x)


@given(seeds, st.floats(-10, 10), st.floats(-10, 10))
def test_linearity_exact(seed, a, b):
    rng = np.random.default_rng(seed % 2**32)
    x, y = rng.normal(size=(2, 3, 8, 8))
    k = cp.keygen(12, seed)
    lhs = cp.encrypt_shf(a * x + b * y, 2, k)
    rhs = a * cp.encrypt_shf(x, 2, k) + b * cp.encrypt_shf(y, 2, k)
    assert np.array_equal(lhs, rhs)


@given(seeds)
def test_block_multiset_preserved(seed):
    rng = np.random.default_rng(seed % 2**32)
    x = rng.normal(size=(3, 8, 8))
    k = cp.keygen(48, seed)
    y = cp.encrypt_shf(x, 4, k)
    for bi in range(2):
        for bj in range(2):
            sl = np.s_[:, 4 * bi:4 * bi + 4, 4 * bj:4 * bj + 4]
            assert np.array_equal(np.sort(x[sl], axis=None), np.sort(y[sl], axis=None))


def test_spec_invariants():
    assert cp.KeySpec("SHF", 3, 4).L == 48
    with pytest.raises(cp.CipherError):
        cp.KeySpec("CP", 16, 2)
    with pytest.raises(cp.CipherError):
        cp.BlockGrid(3, 8, 8)
    assert cp.BlockGrid(4, 8, 12).blocks == (2, 3)


# ---------------------------------------------------------------------------
# gradient through the CP layer
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_cp_gradient_is_inverse_permuted(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 9))
    k = cp.keygen(c, seed)
    x = nd.Tensor(rng.normal(size=(2, c, 3, 3)), requires_grad=True)
    w = rng.normal(size=(2, c, 3, 3))
    f = lambda t: (nd.relu(t) * nd.Tensor(w)).sum()  # noqa: E731

    y = nd.Tensor(cp.encrypt_cp(x.data, k), requires_grad=True)
    nd.backward(f(y))
    nd.backward(f(cp.encrypt_cp(x, k)))
    np.testing.assert_array_equal(x.grad, cp.encrypt_cp(y.grad, cp.invert_key(k)))
    num = numeric_grad(lambda: f(cp.encrypt_cp(nd.Tensor(x.data), k)).item(), x.data)
    assert rel_err(x.grad, num) <= 1e-6


# ---------------------------------------------------------------------------
# key space
# ---------------------------------------------------------------------------


def test_key_space_values():
    assert cp.key_space(cp.KeySpec("SHF", 3, 1))[0] == 6
    exact, lg = cp.key_space(cp.KeySpec("CP", 256))
    assert 1683 <= lg <= 1685
    assert exact == math.factorial(256)
    assert cp.key_space(cp.KeySpec("SHF", 3, 4))[0] == math.factorial(48)


@pytest.mark.parametrize("c", range(1, 9))
def test_enumerated_cp_outputs_equal_key_space(c):
    x = np.arange(1.0, c + 1).reshape(c, 1, 1)
    outs = {cp.encrypt_cp(x, cp.PermutationKey(p)).tobytes() for p in itertools.permutations(range(c))}
    assert len(outs) == cp.key_space(cp.KeySpec("CP", c))[0]


# ---------------------------------------------------------------------------
# key files
# ---------------------------------------------------------------------------


def test_key_file_roundtrip(tmp_path):
    spec = cp.KeySpec("SHF", 3, 2)
    k = cp.keygen(12, 2**63 + 5)
    p = tmp_path / "k.json"
    cp.write_key(p, k, spec)
    doc = json.loads(p.read_text())
    assert doc == {"version": 1, "kind": "SHF", "L": 12, "M": 2, "seed": str(2**63 + 5),
                   "alpha": k.one_based}
    assert cp.read_key(p) == (k, spec)


def test_key_file_bytes_stable(tmp_path):
    for name in ("a.json", "b.json"):
        cp.write_key(tmp_path / name, cp.keygen(32, 7), cp.KeySpec("CP", 32))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_key_file_validation():
    good = json.loads(cp.key_to_json(cp.keygen(4, 1), cp.KeySpec("CP", 4)))
    bad = dict(good, alpha=[1, 1, 2, 3])
    with pytest.raises(cp.CipherError):
        cp.key_from_json(json.dumps(bad))
    tampered = dict(good, alpha=list(reversed(good["alpha"])))
    if tampered["alpha"] != good["alpha"]:
        with pytest.raises(cp.CipherError, match="seed"):
            cp.key_from_json(json.dumps(tampered))
    no_seed = {k: v for k, v in tampered.items() if k != "seed"}
    assert cp.key_from_json(json.dumps(no_seed))[0].one_based == tampered["alpha"]
