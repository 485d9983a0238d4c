import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointscale.attack_blackbox import (
    BlackboxOracle, BudgetExhausted, DegenerateNoiseError, HsjConfig, InitializationError, NoiseSampler, attack,
    boundary_search, estimate_gradient, geometric_step, pipeline_oracle, sample_subspace_noise,
)
from jointscale.attack_whitebox import Pipeline, pipeline_input_grad
from jointscale.harness import desk
from jointscale.imagecore import l2_norm, make_rng
from jointscale.scaling import ScalerSpec, identify_mask, row_space_projector, scale

BILINEAR3 = ScalerSpec.from_ratio("bilinear", (32, 32), 3)


def halfspace_oracle(w, b=0.0, budget=None):
    """Adversarial iff <w, x> > b; label 1 means adversarial for y = 0."""
    return BlackboxOracle(lambda x: (np.tensordot(x, w, axes=w.ndim) > b).astype(int), 0, budget)


@pytest.fixture(scope="module")
def hr(data):
    _, test = data
    return desk.make_hr(test.images[:20], 3, make_rng(1)), test.labels[:20], test


def candidates(test, y, n=10):
    idx = [k for k in range(100, len(test.labels)) if test.labels[k] != y][:n]
    return list(desk.make_hr(test.images[idx], 3, make_rng(9)))


# ---------------------------------------------------------------------------
# oracle and config


def test_oracle_counts_and_budget():
    o = halfspace_oracle(np.ones((2, 2, 1)), budget=5)
    o.labels(np.zeros((3, 2, 2, 1)))
    assert o.count == 3 and o.remaining == 2
    with pytest.raises(BudgetExhausted):
        o.labels(np.zeros((3, 2, 2, 1)))
    assert o.count == 3


def test_config_validation():
    assert HsjConfig().init_batch == 100 and HsjConfig().tolerance == 1e-3
    with pytest.raises(ValueError):
        HsjConfig(budget=50)
    with pytest.raises(ValueError):
        HsjConfig(tolerance=0.2)
    with pytest.raises(ValueError):
        HsjConfig(mode="other")


# ---------------------------------------------------------------------------
# noise


def test_identity_noise_is_normalized_draw():
    spec = ScalerSpec("bilinear", (6, 6), (6, 6))
    x = np.zeros((6, 6, 1))
    u = sample_subspace_noise(spec, None, x, make_rng(4))
    ref = make_rng(4).standard_normal((6, 6, 1))
    assert np.allclose(u, ref / np.linalg.norm(ref))


def test_nearest_noise_on_mask():
    spec = ScalerSpec.from_ratio("nearest", (4, 4), 3)
    mask = identify_mask(spec)
    u = NoiseSampler("lr_subspace", spec, None, np.zeros((12, 12, 1))).draw(make_rng(0), 20)
    assert np.all(u[:, ~mask] == 0)


@given(st.integers(0, 2**31), st.sampled_from(["nearest", "bilinear", "area"]))
@settings(max_examples=30, deadline=None)
def test_noise_positive_and_in_row_space(seed, kind):
    spec = ScalerSpec.from_ratio(kind, (3, 4), 3)
    ns = NoiseSampler("lr_subspace", spec, None, np.zeros(spec.in_shape + (1,)))
    rng = make_rng(seed)
    up = rng.standard_normal(spec.out_shape + (1,))
    u = ns.pull_back(up)
    u = u / np.linalg.norm(u)
    assert np.sum(scale(spec, u) * up) > 0
    assert np.linalg.norm(u - row_space_projector(spec)(u)) <= 1e-6


def test_median_noise_needs_median():
    with pytest.raises(ValueError):
        NoiseSampler("lr_subspace_median", BILINEAR3, None, np.zeros((96, 96, 1)))


def test_degenerate_noise(monkeypatch):
    ns = NoiseSampler("lr_subspace", BILINEAR3, None, np.zeros((96, 96, 1)))
    calls = []
    monkeypatch.setattr(ns, "pull_back", lambda u: calls.append(1) or np.zeros((96, 96, 1)))
    with pytest.raises(DegenerateNoiseError):
        ns.draw(make_rng(0), 1)
    assert len(calls) == 11


def test_median_noise_unit(hr):
    S, _, _ = hr
    ns = NoiseSampler("lr_subspace_median", BILINEAR3, desk.prevention("median", BILINEAR3), S[0])
    u = ns.draw(make_rng(0), 4)
    assert np.allclose(np.sqrt((u**2).sum(axis=(1, 2, 3))), 1)


# ---------------------------------------------------------------------------
# primitives on a half-space oracle


def test_boundary_search_cost_and_result():
    rng = make_rng(0)
    w = rng.standard_normal((4, 4, 1))
    o = halfspace_oracle(w, 0.5)
    x = -0.1 * w / np.linalg.norm(w)
    xa = 3 * w / np.linalg.norm(w)
    out = boundary_search(o, x, xa, 1e-3)
    assert o.count <= math.ceil(math.log2(1e3))
    assert o.is_adversarial(out)
    assert np.sum(w * out) - 0.5 <= 1e-3 * np.sum(w * (xa - x)) + 1e-12


def test_boundary_search_short_segment():
    o = halfspace_oracle(np.ones((2, 2, 1)))
    x = np.zeros((2, 2, 1))
    xa = x + 1e-5
    assert np.array_equal(boundary_search(o, x, xa, 1e-3), xa) and o.count == 0
    with pytest.raises(ValueError):
        boundary_search(o, xa, x, check=True)


def test_estimate_gradient_cost_and_direction():
    rng = make_rng(1)
    w = rng.standard_normal((6, 6, 1))
    w /= np.linalg.norm(w)
    o = halfspace_oracle(w, 0.0)
    xb = 0.5 + np.zeros((6, 6, 1))
    xb = xb - np.sum(w * xb) * w  # on the boundary
    ns = NoiseSampler("hr_naive", ScalerSpec("area", (6, 6), (6, 6)), None, xb)
    v = estimate_gradient(o, xb, 200, ns, rng, 0.05)
    assert o.count == 200
    assert np.sum(v * w) > 0.5


def test_estimate_gradient_one_sided():
    o = BlackboxOracle(lambda x: np.ones(len(x), dtype=int), 0)  # everything adversarial
    ns = NoiseSampler("hr_naive", ScalerSpec("area", (4, 4), (4, 4)), None, np.zeros((4, 4, 1)))
    rng = make_rng(2)
    v = estimate_gradient(o, np.full((4, 4, 1), 0.5), 10, ns, rng, 0.01)
    assert o.count == 20
    u = ns.draw(make_rng(2), 10)  # first batch, then the retry batch
    u2 = ns.draw(make_rng(2), 20)[10:]
    ref = u2.mean(axis=0)
    assert np.allclose(v, ref / np.linalg.norm(ref))
    assert u.shape == (10, 4, 4, 1)


def test_geometric_step_exhaustion():
    o = BlackboxOracle(lambda x: np.zeros(len(x), dtype=int), 0)
    xb = np.full((3, 3, 1), 0.5)
    out = geometric_step(o, xb, np.ones((3, 3, 1)) / 3, np.zeros((3, 3, 1)), 1, max_halvings=20)
    assert np.array_equal(out, xb) and o.count == 21


def test_initialization_failure():
    o = BlackboxOracle(lambda x: np.zeros(len(x), dtype=int), 0)
    with pytest.raises(InitializationError):
        attack(o, ScalerSpec("area", (4, 4), (2, 2)), None, np.full((4, 4, 1), 0.5), HsjConfig(budget=500))
    assert o.count == 200


# ---------------------------------------------------------------------------
# full attacks on the desk model


def run(model, hr, i, mode, budget, defense=None, quantiles=(0.2, 0.8)):
    S, y, test = hr
    o = pipeline_oracle(model, BILINEAR3, defense, int(y[i]))
    cfg = HsjConfig(budget=budget, mode=mode, seed=i, quantiles=quantiles)
    r = attack(o, BILINEAR3, defense, S[i], cfg, candidates(test, y[i]))
    assert r.queries == o.count <= budget
    o.budget = None  # re-verification queries below are outside the attack's budget
    return o, r


@pytest.mark.parametrize("mode", ["hr_naive", "lr_subspace"])
def test_accounting_and_validity(model, hr, mode):
    o, r = run(model, hr, 0, mode, 600)
    assert o.is_adversarial(r.image)
    tr = r.info["trajectory"]
    assert all(a >= b for a, b in zip(tr.scaled_l2, tr.scaled_l2[1:]))
    assert tr.queries == sorted(tr.queries) and tr.queries[-1] <= 600
    for q in (200, 400, 600):
        p = tr.best_image_at(q)
        if p is not None:
            assert o.is_adversarial(p)


def test_nearest_subspace_leaves_safe_pixels(model, hr):
    S, y, test = hr
    spec = ScalerSpec.from_ratio("nearest", (32, 32), 3)
    mask = identify_mask(spec)
    o = pipeline_oracle(model, spec, None, int(y[1]))
    r = attack(o, spec, None, S[1], HsjConfig(budget=500), candidates(test, y[1]))
    assert np.max(np.abs(r.delta[~mask])) <= 1e-9


def test_untrimmed_median_mode(model, hr):
    d = desk.prevention("median", BILINEAR3)
    o, r = run(model, hr, 2, "lr_subspace_median", 500, d, (0.0, 1.0))
    assert o.is_adversarial(r.image)


def test_gradient_estimate_agrees_with_whitebox(model, hr):
    S, y, test = hr
    pipe = Pipeline(model, BILINEAR3)
    agree = 0
    for i in range(10):
        o = pipeline_oracle(model, BILINEAR3, None, int(y[i]))
        xa = candidates(test, y[i], 1)[0]
        xb = boundary_search(o, S[i], xa, 1e-3)
        ns = NoiseSampler("lr_subspace", BILINEAR3, None, xb)
        v = estimate_gradient(o, xb, 100, ns, make_rng(i), l2_norm(xb - S[i]) / math.sqrt(xb.size))
        agree += np.sum(v * pipeline_input_grad(pipe, xb, int(y[i]))) > 0
    assert agree >= 8


def test_geometric_steps_shrink_distance(model, hr):
    S, y, test = hr
    shrunk = total = 0
    for i in range(4):
        o = pipeline_oracle(model, BILINEAR3, None, int(y[i]))
        x = boundary_search(o, S[i], candidates(test, y[i], 1)[0], 1e-3)
        rng = make_rng(i)
        for it in range(1, 8):
            ns = NoiseSampler("lr_subspace", BILINEAR3, None, x)
            before = l2_norm(x - S[i])
            v = estimate_gradient(o, x, int(100 * math.sqrt(it)), ns, rng, before / math.sqrt(x.size))
            x = geometric_step(o, x, v, S[i], it)
            assert o.is_adversarial(x)
            shrunk += l2_norm(x - S[i]) <= before + 1e-12
            total += 1
    assert shrunk >= 0.9 * total
