import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisy_i2i.errors import InvalidInputError, InvalidSpecError
from noisy_i2i.noise import (NoiseKind, NoiseSpec, TransitionMatrix, apply_noise, build_asymmetric,
                             build_symmetric, corrupt, corrupt_multilabel, load_sidecar, save_sidecar)


def test_symmetric_matrix_entries():
    T = build_symmetric(4, 0.3).entries
    assert np.allclose(np.diag(T), 0.7)
    assert np.allclose(T[~np.eye(4, dtype=bool)], 0.1)


def test_asymmetric_flips_to_next_class():
    T = build_asymmetric(3, 0.3).entries
    expected = np.array([[0.7, 0.3, 0.0], [0.0, 0.7, 0.3], [0.3, 0.0, 0.7]])
    assert np.allclose(T, expected)


@settings(max_examples=60, deadline=None)
@given(c=st.integers(2, 12), mu=st.floats(0, 1))
def test_matrices_are_row_stochastic(c, mu):
    for T in (build_symmetric(c, mu), build_asymmetric(c, mu)):
        assert np.allclose(T.entries.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(np.diag(T.entries), 1 - mu)


@pytest.mark.parametrize("entries", [
    [[0.5, 0.5]],  # not square
    [[1.2, -0.2], [0.0, 1.0]],  # out of range
    [[0.6, 0.3], [0.0, 1.0]],  # row sum
    [[1.0]],
])
def test_transition_matrix_validation(entries):
    with pytest.raises(InvalidSpecError):
        TransitionMatrix(entries)


def test_transition_matrix_is_read_only():
    T = build_symmetric(3, 0.5)
    with pytest.raises(ValueError):
        T.entries[0, 0] = 1.0


@pytest.mark.parametrize("c,mu", [(1, 0.1), (3, -0.1), (3, 1.5)])
def test_bad_builder_args(c, mu):
    with pytest.raises(InvalidSpecError):
        build_symmetric(c, mu)


def test_corrupt_identity_keeps_labels(rng):
    labels = rng.integers(0, 5, 1000)
    assert np.array_equal(corrupt(labels, build_symmetric(5, 0.0), rng), labels)


def test_corrupt_is_deterministic_by_seed():
    labels = np.arange(300) % 3
    spec = NoiseSpec("symmetric", 0.5, 3)
    assert np.array_equal(apply_noise(labels, spec, 7), apply_noise(labels, spec, 7))
    assert not np.array_equal(apply_noise(labels, spec, 7), apply_noise(labels, spec, 8))


def test_corrupt_full_symmetric_never_keeps(rng):
    labels = rng.integers(0, 4, 2000)
    noisy = corrupt(labels, build_symmetric(4, 1.0), rng)
    assert np.all(noisy != labels)


def test_corrupt_frequencies_match_rows(rng):
    T = build_asymmetric(5, 0.3)
    labels = np.repeat(np.arange(5), 20000)
    noisy = corrupt(labels, T, rng)
    for i in range(5):
        row = noisy[labels == i]
        freq = np.bincount(row, minlength=5) / len(row)
        se = np.sqrt(T.entries[i] * (1 - T.entries[i]) / len(row))
        # 4 SE: ten nonzero cells are compared at once
        assert np.all(np.abs(freq - T.entries[i]) <= 4 * se + 1e-12)


def test_corrupt_rejects_out_of_range(rng):
    with pytest.raises(InvalidInputError):
        corrupt([0, 3], build_symmetric(3, 0.2), rng)


def test_multilabel_flip_rate(rng):
    labels = rng.integers(0, 2, (20000, 5))
    noisy = corrupt_multilabel(labels, 0.2, rng)
    rate = (noisy != labels).mean()
    assert abs(rate - 0.2) < 3 * np.sqrt(0.2 * 0.8 / labels.size)


@pytest.mark.parametrize("labels", [[[0, 1], [1]], [0, 1, 1], [[0, 2]]])
def test_multilabel_rejects_bad_input(labels, rng):
    with pytest.raises(InvalidInputError):
        corrupt_multilabel(labels, 0.1, rng)


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        NoiseSpec("none", 0.2, 3)
    with pytest.raises(InvalidSpecError):
        NoiseSpec("symmetric", 1.2, 3)
    with pytest.raises(ValueError):
        NoiseSpec("gaussian", 0.2, 3)
    with pytest.raises(InvalidSpecError):
        NoiseSpec(NoiseKind.PER_ATTRIBUTE_FLIP, 0.1, 3).transition_matrix()
    assert NoiseSpec().transition_matrix() == TransitionMatrix(np.eye(3))


def test_sidecar_round_trip(tmp_path):
    ids = ["a", "b", "c"]
    save_sidecar(tmp_path / "labels.json", ids, [0, 1, 2], np.array([1, 1, 0]))
    assert load_sidecar(tmp_path / "labels.json") == {
        "a": {"clean": 0, "noisy": 1}, "b": {"clean": 1, "noisy": 1}, "c": {"clean": 2, "noisy": 0}}
    with pytest.raises(InvalidInputError):
        save_sidecar(tmp_path / "x.json", ids, [0], [0])
