#!/usr/bin/env python3
"""
Тесты обучения модели с выравниванием поворотов
"""
import logging
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import align
from align import (GaussianPoseModel, alignment_objective, fit_coefficients, init_mean_tk, optimal_angles,
                   ppca_closed_form, prior_weights, rotate, train_aligned_model, unrotate, update_rotation)
from config import GrowthSchedule
from conftest import make_model, sample_poses
from errors import InsufficientDataError, InvariantViolationError, RankDeficientError
from skeleton import rotation_matrix


def _angle_gap(a, b):
    return abs(math.remainder(a - b, 2 * math.pi))


def _projector(model: GaussianPoseModel) -> np.ndarray:
    W = model.basis_matrix
    return W @ W.T


def test_optimal_angle_recovers_rotation(rng):
    X = rng.normal(size=(3, 10))
    for theta in (0.0, 0.7, 3.0, 5.9):
        P = rotation_matrix(theta) @ X
        assert _angle_gap(update_rotation(P, X).theta, theta) < 1e-10


def test_optimal_angles_beat_dense_grid(rng):
    P = rng.normal(size=(6, 3, 9))
    X = rng.normal(size=(6, 3, 9))
    best = optimal_angles(P, X)
    grid = np.linspace(0.0, 2 * math.pi, 4000, endpoint=False)
    for p, x, theta in zip(P, X, best):
        costs = [np.sum((p - rotation_matrix(t) @ x) ** 2) for t in grid]
        assert np.sum((p - rotation_matrix(theta) @ x) ** 2) <= min(costs) + 1e-9
        assert 0.0 <= theta < 2 * math.pi


def test_optimal_angle_degenerate_returns_zero(rng):
    P = np.zeros((3, 5))
    P[1] = rng.normal(size=5)
    assert update_rotation(P, P).theta == 0.0


def test_rotate_unrotate_inverse(rng):
    P = rng.normal(size=(4, 3, 7))
    thetas = rng.uniform(0, 2 * math.pi, size=4)
    np.testing.assert_allclose(unrotate(rotate(P, thetas), thetas), P, atol=1e-12)


def test_init_mean_matches_first_sample_up_to_rotation(rng):
    """Без вариаций формы среднее ТК совпадает с первой позой с точностью до поворота вокруг y"""
    mean = rng.normal(size=(3, 12))
    mean -= mean.mean(axis=1, keepdims=True)
    thetas = rng.uniform(0, 2 * math.pi, size=20)
    poses = rotate(np.broadcast_to(mean, (20, 3, 12)).copy(), thetas)

    mean0 = init_mean_tk(poses)
    theta = update_rotation(poses[0], mean0).theta
    np.testing.assert_allclose(rotation_matrix(theta) @ mean0, poses[0], atol=1e-6)
    np.testing.assert_allclose(mean0[1], mean[1], atol=1e-12)


def test_init_mean_rank_deficient():
    poses = np.zeros((5, 3, 6))
    poses[:, 1] = 1.0
    with pytest.raises(RankDeficientError):
        init_mean_tk(poses)


def test_init_mean_needs_two_poses(rng):
    with pytest.raises(InsufficientDataError):
        init_mean_tk(rng.normal(size=(1, 3, 6)))


def test_prior_weights_modes():
    sigma = np.array([2.0, 0.5])
    np.testing.assert_allclose(prior_weights(sigma), [0.25, 4.0])
    np.testing.assert_allclose(prior_weights(sigma, "sigma_scaled"), [4.0, 0.25])
    with pytest.raises(ValueError):
        prior_weights(sigma, "other")


def test_ppca_recovers_subspace_and_variances(rng):
    model = make_model(rng, L=8, J=3, sigma_top=0.3)
    poses, _, _ = sample_poses(model, 5000, rng, noise_std=0.01, rotate_poses=False)
    poses = poses - poses.mean(axis=2, keepdims=True)

    fitted = ppca_closed_form(poses, 3)
    fitted.check_invariants()
    assert np.linalg.norm(_projector(fitted) - _projector(model)) < 0.05
    np.testing.assert_allclose(fitted.sigma, model.sigma, rtol=0.1)
    assert 0.5e-4 < fitted.noise_var < 2e-4


def test_ppca_sign_convention(rng):
    model = make_model(rng, L=6, J=2)
    poses, _, _ = sample_poses(model, 200, rng, rotate_poses=False)
    fitted = ppca_closed_form(poses, 2)
    W = fitted.basis_matrix
    for j in range(2):
        assert W[np.argmax(np.abs(W[:, j])), j] > 0


def test_ppca_insufficient_data(rng):
    with pytest.raises(InsufficientDataError):
        ppca_closed_form(rng.normal(size=(3, 3, 6)), 3)


def test_fit_coefficients_shrink_projection(rng):
    model = make_model(rng, L=6, J=2)
    coeffs = np.array([[0.2, -0.1]])
    aligned = model.reconstruct(coeffs)
    expected = coeffs / (1.0 + prior_weights(model.sigma))
    np.testing.assert_allclose(fit_coefficients(aligned, model), expected, atol=1e-12)


def test_check_invariants_rejects_increasing_sigma(rng):
    model = make_model(rng, L=6, J=2)
    bad = GaussianPoseModel(mean=model.mean, basis=model.basis, sigma=model.sigma[::-1].copy(),
                            noise_var=model.noise_var)
    with pytest.raises(InvariantViolationError) as info:
        bad.check_invariants()
    assert info.value.invariant == "sigma non-increasing"


def test_training_recovers_relative_rotations(rng):
    model = make_model(rng, L=10, J=3, sigma_top=0.3, mean_scale=1.0)
    poses, thetas, _ = sample_poses(model, 300, rng)

    fitted, state = train_aligned_model(poses, 3, GrowthSchedule(rounds_per_step=2, max_rounds=60))
    fitted.check_invariants()
    assert fitted.J == 3
    assert len(state.rotations) == 300
    assert state.coefficients.shape == (300, 3)

    # Глобальный поворот не определён: сравниваем разности с истинными углами
    gaps = np.exp(1j * (state.thetas - thetas))
    assert abs(gaps.mean()) > 0.99


def test_training_objective_monotone_within_basis_size(rng):
    model = make_model(rng, L=8, J=2)
    poses, _, _ = sample_poses(model, 150, rng, noise_std=0.01)
    poses = poses - poses.mean(axis=2, keepdims=True)

    _, state = train_aligned_model(poses, 2, GrowthSchedule(rounds_per_step=3, max_rounds=40))
    for (j_prev, prev), (j_next, nxt) in zip(state.history, state.history[1:]):
        if j_prev == j_next:
            assert nxt <= prev + 1e-9 * max(1.0, abs(prev))
    assert state.history[-1][0] == 2


def test_training_state_objective_consistent(rng):
    model = make_model(rng, L=8, J=2)
    poses, _, _ = sample_poses(model, 100, rng)
    fitted, state = train_aligned_model(poses, 2, GrowthSchedule(max_rounds=20))
    recomputed = alignment_objective(np.asarray(poses), state.thetas, state.coefficients, fitted)
    assert abs(recomputed - state.objective) <= 1e-8 * max(1.0, abs(state.objective))


def test_training_sigma_scaled_mode_runs(rng):
    model = make_model(rng, L=8, J=2)
    poses, _, _ = sample_poses(model, 80, rng)
    fitted, _ = train_aligned_model(poses, 2, GrowthSchedule(max_rounds=10), regularizer_mode="sigma_scaled")
    fitted.check_invariants()


def test_training_needs_more_poses_than_basis(rng):
    model = make_model(rng, L=8, J=2)
    poses, _, _ = sample_poses(model, 3, rng)
    with pytest.raises(InsufficientDataError):
        train_aligned_model(poses, 3)


def _orthonormal(model: GaussianPoseModel, tol: float = 1e-8) -> bool:
    W = model.basis_matrix
    return bool(np.max(np.abs(W.T @ W - np.eye(model.J))) <= tol)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_ppca_basis_orthonormal(seed, J):
    rng = np.random.default_rng(seed)
    poses = rng.normal(size=(20, 3, 5)) * rng.uniform(0.01, 10.0)
    fitted = ppca_closed_form(poses - poses.mean(axis=2, keepdims=True), J)
    fitted.check_invariants()
    assert _orthonormal(fitted)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_trained_basis_orthonormal(seed):
    rng = np.random.default_rng(seed)
    model = make_model(rng, L=5, J=2)
    poses, _, _ = sample_poses(model, 12, rng, noise_std=0.01)
    poses = poses - poses.mean(axis=2, keepdims=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fitted, _ = train_aligned_model(poses, 2, GrowthSchedule(rounds_per_step=1, max_rounds=4))
    assert _orthonormal(fitted)


def test_rejected_round_advances_basis_size(rng, monkeypatch, caplog):
    model = make_model(rng, L=8, J=2)
    poses, _, _ = sample_poses(model, 60, rng, noise_std=0.01)
    real_round = align.alignment_round
    calls = []

    def _worse_second_round(P, thetas, J, mode):
        calls.append(J)
        model_, thetas_, coeffs_, objective = real_round(P, thetas, J, mode)
        if len(calls) == 2:
            objective += 1e3
        return model_, thetas_, coeffs_, objective

    monkeypatch.setattr(align, "alignment_round", _worse_second_round)
    with caplog.at_level(logging.INFO, logger="align"):
        fitted, state = train_aligned_model(poses, 2, GrowthSchedule(rounds_per_step=3, max_rounds=20))

    assert fitted.J == 2
    assert calls[:3] == [1, 1, 2]
    assert [j for j, _ in state.history[:2]] == [1, 2]
    assert any(r.levelno == logging.INFO and "отклонён при J=1" in r.getMessage() for r in caplog.records)


def _fit_held_out(pose, model, rounds=5):
    reconstruction = model.mean
    for _ in range(rounds):
        theta = update_rotation(pose, reconstruction).theta
        coeffs = fit_coefficients(unrotate(pose[None], np.array([theta])), model)[0]
        reconstruction = model.reconstruct(coeffs)
    return rotation_matrix(theta) @ reconstruction


@pytest.mark.slow
def test_training_round_trip_on_known_model():
    rng = np.random.default_rng(31)
    model = make_model(rng, L=10, J=3, sigma_top=0.3)
    poses, _, _ = sample_poses(model, 5000, rng, noise_std=0.005)
    poses = poses - poses.mean(axis=2, keepdims=True)
    held_out, _, _ = sample_poses(model, 200, rng, noise_std=0.005)

    fitted, state = train_aligned_model(poses, 3, GrowthSchedule(rounds_per_step=3, max_rounds=100))
    fitted.check_invariants()
    for (j_prev, prev), (j_next, nxt) in zip(state.history, state.history[1:]):
        if j_prev == j_next:
            assert nxt <= prev + 1e-9 * max(1.0, abs(prev))

    errors = [np.mean(np.linalg.norm(_fit_held_out(p, fitted) - p, axis=0)) for p in held_out]
    assert np.mean(errors) < 0.025
