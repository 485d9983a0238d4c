import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointscale.attack_whitebox import (
    CwConfig, PgdConfig, Pipeline, cw_joint, identity_pipeline, loss_and_grad, pgd_joint, pgd_joint_batch,
    pipeline_forward, pipeline_input_grad, regularized_objective, regularizer,
)
from jointscale.classifier import loss_and_input_gradient, predict
from jointscale.defenses import DetectionSpec, apply_prevention, calibrate_threshold, detect_score, median_indices, selection_adjoint
from jointscale.harness import desk
from jointscale.imagecore import make_rng
from jointscale.scaling import ScalerSpec, scale

BILINEAR3 = ScalerSpec.from_ratio("bilinear", (32, 32), 3)


@pytest.fixture(scope="module")
def hr(data):
    _, test = data
    return desk.make_hr(test.images[:20], 3, make_rng(1)), test.labels[:20]


def loss_of(pipe, x, y):
    lr = scale(pipe.scaler, x if pipe.defense is None else apply_prevention(pipe.defense, x))
    return loss_and_input_gradient(pipe.model, lr, y, "ce")[0]


def fd_check(pipe, x, y, coords, h=1e-6):
    g = pipeline_input_grad(pipe, x, y)
    fd = np.empty(len(coords))
    for n, k in enumerate(coords):
        e = np.zeros(x.size)
        e[k] = h
        e = e.reshape(x.shape)
        fd[n] = (loss_of(pipe, x + e, y) - loss_of(pipe, x - e, y)) / (2 * h)
    return np.linalg.norm(fd - g.ravel()[coords]) / max(np.linalg.norm(fd), 1e-300)


def strict_median_image(shape, rng):
    """Distinct, well-spaced pixel values, so every window median is strict."""
    n = int(np.prod(shape))
    return (rng.permutation(n) / n * 0.9 + 0.05).reshape(shape)


def test_shape_chain(model):
    with pytest.raises(ValueError):
        Pipeline(model, ScalerSpec.from_ratio("bilinear", (16, 16), 3))
    with pytest.raises(ValueError):
        Pipeline(model, BILINEAR3, desk.prevention("median", ScalerSpec.from_ratio("bilinear", (32, 32), 4)))


def test_identity_forward(model, data):
    _, test = data
    x = test.images[0]
    assert pipeline_forward(identity_pipeline(model), x)[1] == predict(model, x)


def test_median_constant_same_as_none(model):
    x = np.full(BILINEAR3.in_shape + (1,), 0.4)
    med = Pipeline(model, BILINEAR3, desk.prevention("median", BILINEAR3))
    a, la = pipeline_forward(med, x)
    b, lb = pipeline_forward(Pipeline(model, BILINEAR3), x)
    assert np.array_equal(a, b) and la == lb


def test_expectation_wrapper_repeatable(model, hr):
    S, _ = hr
    pipe = Pipeline(model, BILINEAR3, desk.prevention("randomized", BILINEAR3), expectation=True)
    a, _ = pipeline_forward(pipe, S[0], make_rng(3))
    b, _ = pipeline_forward(pipe, S[0], make_rng(3))
    assert np.array_equal(a, b)


def test_gradient_undefended(model, hr):
    S, y = hr
    coords = make_rng(0).choice(S[0].size, 100, replace=False)
    assert fd_check(Pipeline(model, BILINEAR3), S[0], int(y[0]), coords) <= 1e-3


def test_gradient_median(model, hr):
    _, y = hr
    spec = desk.prevention("median", BILINEAR3)
    pipe = Pipeline(model, BILINEAR3, spec)
    rng = make_rng(1)
    x = strict_median_image(pipe.hr_shape, rng)
    # coordinates that feed some window's median, plus a few others
    med = np.unique(median_indices(spec, x))
    coords = np.concatenate([rng.choice(med, 80, replace=False), rng.choice(x.size, 20, replace=False)])
    assert fd_check(pipe, x, int(y[0]), coords) <= 1e-3


def test_unmasked_identity_term():
    spec = desk.prevention("median", BILINEAR3)
    x = make_rng(2).random(BILINEAR3.in_shape + (1,))
    g = make_rng(3).standard_normal(x.shape)
    g[spec.mask] = 0.0
    assert np.array_equal(selection_adjoint(spec, g, median_indices(spec, x)), g)


def test_cached_gradient_converges(model, hr):
    S, y = hr
    d = desk.prevention("randomized", BILINEAR3)
    cos = []
    for i in range(10):
        a = pipeline_input_grad(Pipeline(model, BILINEAR3, d, eot_samples=20), S[i], int(y[i]), rng=make_rng(i))
        b = pipeline_input_grad(Pipeline(model, BILINEAR3, d, eot_samples=200), S[i], int(y[i]), rng=make_rng(50 + i))
        cos.append(np.sum(a * b) / np.linalg.norm(a) / np.linalg.norm(b))
    assert min(cos) >= 0.8


@given(st.floats(0.05, 3.0), st.integers(1, 6), st.integers(0, 19))
@settings(max_examples=15, deadline=None)
def test_pgd_projection(model, hr, eps, steps, i):
    S, y = hr
    r = pgd_joint(Pipeline(model, BILINEAR3), S[i], int(y[i]), PgdConfig(epsilon=eps, steps=steps))
    assert r.l2 <= eps * (1 + 1e-9)
    assert r.image.min() >= 0 and r.image.max() <= 1


def test_pgd_defaults():
    cfg = PgdConfig(epsilon=2.0)
    assert cfg.steps == 100 and cfg.step_size == pytest.approx(0.2)
    with pytest.raises(ValueError):
        PgdConfig(epsilon=0)


def test_pgd_already_wrong(model, hr):
    S, y = hr
    pipe = Pipeline(model, BILINEAR3)
    wrong = (predict(model, scale(BILINEAR3, S[0])) + 1) % 3
    r = pgd_joint(pipe, S[0], int(wrong), PgdConfig(epsilon=1.0))
    assert r.success and r.l2 == 0


def test_pgd_batch_matches_single(model, hr):
    S, y = hr
    pipe = Pipeline(model, BILINEAR3)
    cfg = PgdConfig(epsilon=1.5, steps=5)
    batch = pgd_joint_batch(pipe, S[:3], y[:3], cfg)
    for i in range(3):
        assert np.allclose(batch[i].image, pgd_joint(pipe, S[i], int(y[i]), cfg).image, atol=1e-12)


def test_cw_already_wrong(model, hr):
    S, y = hr
    pipe = Pipeline(model, BILINEAR3)
    wrong = (predict(model, scale(BILINEAR3, S[0])) + 1) % 3
    r = cw_joint(pipe, S[0], int(wrong), CwConfig(kappa=0, binary_steps=2, max_iterations=5))
    assert r.success and r.l2 == 0


def test_cw_finds_margin(model, hr):
    S, y = hr
    pipe = Pipeline(model, BILINEAR3)
    r = cw_joint(pipe, S[1], int(y[1]), CwConfig(kappa=2.0, binary_steps=6, max_iterations=40))
    assert r.success
    f, _ = loss_and_grad(pipe, r.image[None], [int(y[1])], "cw", make_rng(0), kappa=2.0)
    assert f[0] <= 0


def test_cw_config():
    with pytest.raises(ValueError):
        CwConfig(kappa=-1)
    assert CwConfig().binary_steps == 20 and CwConfig().max_iterations == 100


@pytest.fixture(scope="module")
def detector(data):
    _, test = data
    benign = desk.make_hr(test.images[100:300], 3, make_rng(2))
    return calibrate_threshold(DetectionSpec("unscaling", BILINEAR3), benign, 95)


def test_regularizer_hinge(detector, hr):
    S, _ = hr
    assert regularized_objective(1.25, detector, 0.0, S[0]) == 1.25
    quiet = [x for x in S if detect_score(detector, x) < 0.9 * detector.threshold]
    assert quiet
    vals, grads = regularizer(detector, np.array(quiet))
    assert np.all(vals == 0) and np.all(grads == 0)
    assert regularized_objective(1.25, detector, 1.0, quiet[0]) == 1.25


def test_gamma_zero_is_base_attack(model, hr, detector):
    S, y = hr
    pipe = Pipeline(model, BILINEAR3)
    a = pgd_joint_batch(pipe, S[:4], y[:4], PgdConfig(epsilon=3.0, steps=10))
    b = pgd_joint_batch(pipe, S[:4], y[:4], PgdConfig(epsilon=3.0, steps=10, gamma=0.0, detector=detector))
    assert all(np.array_equal(p.image, q.image) for p, q in zip(a, b))


def test_regularized_attack_evades(model, hr, detector):
    S, y = hr
    pipe = Pipeline(model, BILINEAR3)
    res = pgd_joint_batch(pipe, S, y, PgdConfig(epsilon=3.0, steps=50, gamma=1.0, detector=detector))
    below = np.mean([detect_score(detector, r.image) < detector.threshold for r in res])
    plain = pgd_joint_batch(pipe, S, y, PgdConfig(epsilon=3.0, steps=50))
    assert below >= 0.9
    assert np.mean([r.success for r in res]) >= np.mean([r.success for r in plain]) - 0.1
