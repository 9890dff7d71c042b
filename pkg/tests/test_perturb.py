import math

import numpy as np
import pytest

from overfitmeter.nn import BlackBoxModel, CapabilityError, ModelPoolSpec, build_model, reference_recipe
from overfitmeter.perturb import (
    CorruptionSpec,
    SpatialParams,
    corrupt,
    disk_kernel,
    fgsm,
    gaussian_noise,
    spatial_attack,
    spatial_grid,
    spatial_transform,
)

from conftest import linear_model, logistic_model


def random_conv_model(seed, regularized=False):
    return build_model(ModelPoolSpec(regularized), (8, 8, 1), 3, reference_recipe(regularized, seed=seed))


# --------------------------------------------------------------------- FGSM

def test_fgsm_zero_epsilon_is_bit_identical():
    model = random_conv_model(0)
    x = np.random.default_rng(0).uniform(0, 255, size=(5, 8, 8, 1))
    out = fgsm(model, x, [0, 1, 2, 0, 1], 0.0)
    assert out.tobytes() == x.tobytes() and out is not x


def test_fgsm_stays_in_box_and_range():
    rng = np.random.default_rng(1)
    for trial in range(30):
        d = int(rng.integers(1, 6))
        model = linear_model(rng.standard_normal((d, 3)), rng.standard_normal(3), (1, 1, d))
        x = rng.uniform(0, 1, size=(4, 1, 1, d))
        eps = float(rng.uniform(0, 0.5))
        out = fgsm(model, x, rng.integers(0, 3, size=4), eps)
        assert np.all(np.abs(out - x) <= eps + 1e-12)
        assert out.min() >= 0 and out.max() <= 1


def test_fgsm_flips_logistic_model_past_margin():
    w = np.array([1.0, -2.0, 0.5])
    margin = 0.07
    x = np.full((1, 1, 1, 3), 0.5)
    b = margin - float(w @ x.reshape(-1))
    model = logistic_model(w, b)
    threshold = margin / np.abs(w).sum()

    def predicted(eps):
        adv = fgsm(model, x, [1], eps)
        return int(np.argmax(model.predict_logits(adv)))

    assert predicted(0.0) == 1
    assert predicted(0.99 * threshold) == 1
    assert predicted(1.01 * threshold) == 0
    adv = fgsm(model, x, [1], 0.02)
    np.testing.assert_allclose(adv.reshape(-1), 0.5 - 0.02 * np.sign(w))


def test_fgsm_needs_gradients():
    bb = BlackBoxModel(lambda x: np.zeros((len(x), 2)), (1, 1, 1), 2)
    with pytest.raises(CapabilityError):
        fgsm(bb, np.zeros((1, 1, 1, 1)), [0], 0.1)


def test_fgsm_does_not_touch_parameters():
    model = random_conv_model(2, regularized=True)
    before = model.checksum()
    fgsm(model, np.random.default_rng(0).uniform(size=(4, 8, 8, 1)), [0, 1, 2, 0], 0.1, "unit")
    assert model.checksum() == before


# ------------------------------------------------------------------ spatial

def test_grid_for_unit_budget_has_27_candidates():
    grid = spatial_grid(SpatialParams(1.0, shift_step=1, angle_step=1.0))
    assert len(grid) == 27
    assert grid[0] == (-1, -1, -1.0) and grid[-1] == (1, 1, 1.0)
    assert len(spatial_grid(SpatialParams(0.0))) == 1


def test_default_angle_step_is_quarter_budget():
    angles = sorted({a for _, _, a in spatial_grid(SpatialParams(2.0))})
    assert angles == [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]


def test_zero_budget_is_identity():
    model = random_conv_model(0)
    x = np.random.default_rng(0).uniform(0, 255, size=(4, 8, 8, 1))
    for mode in ("worst_case", "random"):
        out = spatial_attack(model, x, [0, 1, 2, 0], SpatialParams(0.0, mode=mode))
        np.testing.assert_array_equal(out, x)


def test_worst_case_picks_the_worst_candidate():
    rng = np.random.default_rng(4)
    model = linear_model(rng.standard_normal((64, 3)), rng.standard_normal(3), (8, 8, 1))
    x = rng.uniform(size=(6, 8, 8, 1))
    y = rng.integers(0, 3, size=6)
    params = SpatialParams(1.0, angle_step=1.0)
    out, choice = spatial_attack(model, x, y, params, return_choice=True)
    grid = spatial_grid(params)
    for i in range(6):
        keys = []
        for cand in grid:
            logits = model.predict_logits(np.clip(spatial_transform(x[i : i + 1], *cand), 0, 1))[0]
            wrong = int(np.argmax(logits) != y[i])
            loss = float(np.log(np.exp(logits - logits.max()).sum()) - (logits[y[i]] - logits.max()))
            keys.append((wrong, loss))
        best = max(range(len(grid)), key=lambda c: (keys[c], -c))
        assert choice[i] == best


def test_worst_case_dominates_random_per_sample():
    for seed in range(5):
        model = random_conv_model(seed)
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 255, size=(40, 8, 8, 1))
        y = rng.integers(0, 3, size=40)
        for alpha in (1.0, 2.0):
            worst = spatial_attack(model, x, y, SpatialParams(alpha))
            rand = spatial_attack(model, x, y, SpatialParams(alpha, mode="random"), seed=seed)
            worst_ok = model.predict_logits(worst).argmax(1) == y
            rand_ok = model.predict_logits(rand).argmax(1) == y
            assert not np.any(worst_ok & ~rand_ok)


def test_spatial_attack_uses_outputs_only():
    rng = np.random.default_rng(5)
    inner = linear_model(rng.standard_normal((64, 3)), np.zeros(3), (8, 8, 1))
    bb = BlackBoxModel(inner.predict_logits, (8, 8, 1), 3)
    x = rng.uniform(size=(5, 8, 8, 1))
    y = rng.integers(0, 3, size=5)
    np.testing.assert_array_equal(
        spatial_attack(bb, x, y, SpatialParams(1.0)), spatial_attack(inner, x, y, SpatialParams(1.0))
    )


def test_random_mode_is_seeded():
    model = random_conv_model(1)
    x = np.random.default_rng(0).uniform(0, 255, size=(10, 8, 8, 1))
    y = np.zeros(10, dtype=int)
    a = spatial_attack(model, x, y, SpatialParams(2.0, mode="random"), seed=3)
    b = spatial_attack(model, x, y, SpatialParams(2.0, mode="random"), seed=3)
    np.testing.assert_array_equal(a, b)


def test_spatial_params_validation():
    with pytest.raises(ValueError):
        SpatialParams(-1.0)
    with pytest.raises(ValueError):
        SpatialParams(1.0, mode="greedy")


# ----------------------------------------------------------------- gaussian

def test_gaussian_noise_zero_is_identity():
    x = np.random.default_rng(0).uniform(size=(3, 4, 4, 1))
    np.testing.assert_array_equal(gaussian_noise(x, 0.0, seed=1), x)


def test_gaussian_noise_statistics():
    x = np.full((10_000, 10, 10, 1), 0.5)
    eps = 0.1
    diff = gaussian_noise(x, eps, seed=2) - x
    # clipping never binds this far from the range edges
    n = diff.size
    assert abs(diff.mean()) < 5 * eps / math.sqrt(n)
    assert abs(diff.std() - eps) < 0.01 * eps


def test_gaussian_noise_is_seeded_and_clipped():
    x = np.random.default_rng(0).uniform(size=(3, 4, 4, 1))
    a = gaussian_noise(x, 0.5, seed=9)
    np.testing.assert_array_equal(a, gaussian_noise(x, 0.5, seed=9))
    assert a.min() >= 0 and a.max() <= 1


# -------------------------------------------------------------- corruptions

def test_disk_kernel_sums_to_one():
    for r in (1, 2, 3, 4, 6):
        k = disk_kernel(r)
        assert k.shape == (2 * r + 1, 2 * r + 1)
        assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(disk_kernel(1) * 5, [[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def test_constant_image_survives_blur_and_contrast():
    x = np.full((2, 8, 8, 1), 0.3)
    for sev in range(1, 6):
        np.testing.assert_allclose(corrupt(x, CorruptionSpec("defocus_blur", sev)), x, atol=1e-12)
        np.testing.assert_allclose(corrupt(x, CorruptionSpec("contrast", sev)), x, atol=1e-12)


def test_contrast_and_fog_examples():
    x = np.array([[[[0.0], [1.0]]]])
    np.testing.assert_allclose(corrupt(x, CorruptionSpec("contrast", 5))[0, 0, :, 0], [0.4, 0.6])
    np.testing.assert_allclose(corrupt(x, CorruptionSpec("fog", 5))[0, 0, :, 0], [0.5, 1.0])
    np.testing.assert_allclose(corrupt(x * 255, CorruptionSpec("fog", 1), "byte")[0, 0, :, 0], [25.5, 255.0])


def test_corruption_strength_grows_with_severity():
    x = np.random.default_rng(0).uniform(0.2, 0.8, size=(20, 8, 8, 1))
    for kind in ("gaussian_noise_c", "fog"):
        dist = [np.abs(corrupt(x, CorruptionSpec(kind, s), seed=1) - x).mean() for s in range(1, 6)]
        assert all(b > a for a, b in zip(dist, dist[1:])), kind
    # blur and contrast loss both flatten the image
    for kind in ("defocus_blur", "contrast"):
        spread = [corrupt(x, CorruptionSpec(kind, s)).std(axis=(1, 2, 3)).mean() for s in range(1, 6)]
        assert all(b < a for a, b in zip(spread, spread[1:])), kind


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("snow", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 6)


def test_standard_normal_tensor_moments():
    from overfitmeter.perturb import gaussian_tensor

    n = gaussian_tensor((1000, 1000), seed=0)
    assert abs(n.mean()) < 0.01 and abs(n.var() - 1) < 0.01


def test_defocus_conserves_mass_of_a_delta():
    x = np.zeros((1, 15, 15, 1))
    x[0, 7, 7, 0] = 1.0
    out = corrupt(x, CorruptionSpec("defocus_blur", 1))
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(out) == 5


def test_contrast_contracts_deviations_exactly():
    x = np.random.default_rng(0).uniform(0.3, 0.7, size=(1, 6, 6, 1))
    out = corrupt(x, CorruptionSpec("contrast", 1))
    np.testing.assert_allclose(out - x.mean(), 0.75 * (x - x.mean()), atol=1e-12)


def test_all_perturbations_respect_value_range():
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 255, size=(3, 8, 8, 1))
    for kind in ("gaussian_noise_c", "defocus_blur", "fog", "contrast"):
        out = corrupt(x, CorruptionSpec(kind, 5), "byte", seed=1)
        assert out.min() >= 0 and out.max() <= 255
    out = gaussian_noise(x, 300.0, seed=0, value_range="byte")
    assert out.min() == 0 and out.max() == 255


def test_spatial_attack_leaves_parameters_unchanged():
    model = random_conv_model(3, regularized=True)
    before = model.checksum()
    spatial_attack(model, np.random.default_rng(0).uniform(size=(3, 8, 8, 1)), [0, 1, 2], SpatialParams(1.0), value_range="unit")
    assert model.checksum() == before
