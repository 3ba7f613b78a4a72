import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlolab.errors import DegenerateLink, DimensionMismatch, InvalidDirection
from dlolab.quatchain import (
    QuatChainState,
    RopeState,
    canonicalize,
    decode_chain,
    decode_vectors,
    encode_chain,
    encode_positions,
    flatten,
    normalize_blocks,
    quat_rotate,
    shortest_arc,
    state_dim,
    unflatten,
)

X, Y, Z = np.eye(3)


def random_chain(rng, L, ell=10.0):
    d = rng.standard_normal((L - 1, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    base = rng.uniform(-100, 100, 3)
    return np.vstack([base, base + ell * np.cumsum(d, axis=0)])


def rodrigues(u, v):
    """Rotation matrix taking unit u to unit v about u x v (independent of quaternions)."""
    axis = np.cross(u, v)
    s, c = np.linalg.norm(axis), float(np.dot(u, v))
    if s < 1e-12:
        return np.eye(3)
    k = axis / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * K + (1 - c) * K @ K


def test_state_dim_at_seventy_points():
    assert state_dim(70) == 279
    assert state_dim(2) == 7


def test_shortest_arc_quarter_turn():
    np.testing.assert_allclose(shortest_arc(X, Y), [np.sqrt(0.5), 0, 0, np.sqrt(0.5)], atol=1e-15)


def test_shortest_arc_antiparallel():
    np.testing.assert_allclose(shortest_arc(X, -X), [0, 0, 0, 1], atol=1e-15)


def test_shortest_arc_identity():
    np.testing.assert_array_equal(shortest_arc(Z, Z), [1, 0, 0, 0])


def test_shortest_arc_rejects_non_unit():
    with pytest.raises(InvalidDirection):
        shortest_arc(2 * X, Y)


def test_canonical_sign():
    q = canonicalize(np.array([-0.5, 0.5, -0.5, 0.5]))
    assert q[0] > 0
    q = canonicalize(np.array([0.0, -1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(q, [0, 1, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_shortest_arc_matches_rodrigues(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 3))
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)
    q = shortest_arc(u, v)
    assert q[0] >= 0
    assert abs(np.linalg.norm(q) - 1) < 1e-12
    R = rodrigues(u, v)
    w = rng.standard_normal(3)
    np.testing.assert_allclose(quat_rotate(q, w), R @ w, atol=1e-9)
    # zero twist: the rotation axis is perpendicular to u
    assert abs(np.dot(q[1:], u)) < 1e-9


def test_straight_chain_along_x_is_identity():
    p = np.stack([np.arange(5) * 10.0, np.zeros(5), np.zeros(5)], axis=1)
    v = encode_positions(p)
    np.testing.assert_array_equal(v[:3], 0)
    np.testing.assert_allclose(v[3:].reshape(4, 4), np.tile([1, 0, 0, 0], (4, 1)))


def test_first_rotation_relative_to_x():
    p = np.array([[0, 0, 0], [0, 10, 0], [0, 20, 0.0]])
    q = encode_positions(p)[3:].reshape(2, 4)
    np.testing.assert_allclose(q[0], shortest_arc(X, Y))
    np.testing.assert_allclose(q[1], [1, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("L", [2, 3, 20, 70])
def test_roundtrip(L):
    rng = np.random.default_rng(L)
    for _ in range(20):
        p = random_chain(rng, L)
        back = decode_vectors(encode_positions(p), L, 10.0)
        assert np.max(np.abs(back - p)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_decode_gives_exact_links_for_any_vector(L, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(state_dim(L)) * 3
    p = decode_vectors(v, L, 7.5)
    np.testing.assert_allclose(np.linalg.norm(np.diff(p, axis=0), axis=1), 7.5, atol=1e-9)


def test_batched_encode_matches_single():
    rng = np.random.default_rng(1)
    p = np.stack([random_chain(rng, 6) for _ in range(4)])
    batched = encode_positions(p)
    for k in range(4):
        np.testing.assert_array_equal(batched[k], encode_positions(p[k]))


def test_degenerate_link_rejected():
    p = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0.0]])
    with pytest.raises(DegenerateLink):
        encode_positions(p)


def test_normalize_blocks_zero_block_is_identity():
    v = np.zeros(state_dim(3))
    base, q, degenerate = normalize_blocks(v, 3)
    np.testing.assert_array_equal(q, np.tile([1, 0, 0, 0], (2, 1)))
    assert degenerate


def test_normalize_blocks_length_checked():
    with pytest.raises(DimensionMismatch):
        normalize_blocks(np.zeros(10), 3)


def test_flatten_unflatten_bit_exact():
    rng = np.random.default_rng(3)
    state = RopeState(random_chain(rng, 12))
    qcs = encode_chain(state, 10.0)
    back = unflatten(flatten(qcs), 12, 10.0)
    np.testing.assert_array_equal(back.base, qcs.base)
    np.testing.assert_array_equal(back.rotations, qcs.rotations)
    assert isinstance(back, QuatChainState) and not back.degenerate
    np.testing.assert_allclose(decode_chain(back).positions, state.positions, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigid_translation_only_moves_base(seed):
    rng = np.random.default_rng(seed)
    p = random_chain(rng, 8)
    shift = rng.uniform(-50, 50, 3)
    a, b = encode_positions(p), encode_positions(p + shift)
    np.testing.assert_allclose(b[:3] - a[:3], shift, atol=1e-9)
    np.testing.assert_allclose(b[3:], a[3:], atol=1e-12)
