import math

import numpy as np
import pytest
from scipy import stats

from ecmvae.autodiff import ParamStore, grad_check
from ecmvae.experts import (ExpertSet, jsd_dynamic_prior, mixture_log_prob, moe_kl_upper,
                            moe_sample, poe_combine)
from ecmvae.gaussian import gaussian, kl_closed_form, reparam_sample
from ecmvae.rng import make_rng


def _experts(rng, k=2, shape=(1, 2, 3), spread=1.0):
    return ExpertSet([gaussian(rng.normal(size=shape) * spread, rng.uniform(-1, 1, size=shape))
                      for _ in range(k)])


def test_expert_set_validates_weights():
    rng = make_rng(30)
    e = _experts(rng).experts
    with pytest.raises(ValueError):
        ExpertSet(e, [0.7, 0.7])
    with pytest.raises(ValueError):
        ExpertSet(e, [1.2, -0.2])
    with pytest.raises(ValueError):
        ExpertSet([gaussian(np.zeros(2), np.zeros(2)), gaussian(np.zeros(3), np.zeros(3))])


def test_poe_is_product_of_densities():
    # the log of the product of expert densities minus the PoE log density is constant in x
    rng = make_rng(31)
    s = _experts(rng, k=3, shape=(4,))
    poe = poe_combine(s)
    xs = rng.normal(size=(6, 4)) * 2
    diffs = []
    for x in xs:
        lp = sum(stats.norm.logpdf(x, e.mu.data, np.exp(0.5 * e.logvar.data)) for e in s.experts)
        lq = stats.norm.logpdf(x, poe.mu.data, np.exp(0.5 * poe.logvar.data))
        diffs.append(lp - lq)
    diffs = np.array(diffs)
    np.testing.assert_allclose(diffs, np.broadcast_to(diffs[0], diffs.shape), atol=1e-9)


def test_poe_single_expert_is_identity():
    rng = make_rng(32)
    s = _experts(rng, k=1)
    assert poe_combine(s) is s.experts[0]


def test_moe_sample_picks_one_component_per_item():
    rng = make_rng(33)
    far = ExpertSet([gaussian(np.full((500, 2, 3), -50.0), np.full((500, 2, 3), -8.0)),
                     gaussian(np.full((500, 2, 3), 50.0), np.full((500, 2, 3), -8.0))], [0.3, 0.7])
    z = moe_sample(far, rng).data
    sign = np.sign(z)
    # every item lies in exactly one component
    assert np.all(sign == sign[:, :1, :1])
    frac = (sign[:, 0, 0] > 0).mean()
    assert abs(frac - 0.7) < 4 * math.sqrt(0.21 / 500)


def test_moe_kl_upper_bounds_mixture_kl():
    rng = make_rng(34)
    for _ in range(10):
        q = _experts(rng, shape=(1, 1, 2))
        p = _experts(rng, shape=(1, 1, 2))
        n = 20000
        qj = [gaussian(e.mu.data[0, 0], e.logvar.data[0, 0]) for e in q.experts]
        pj = [gaussian(e.mu.data[0, 0], e.logvar.data[0, 0]) for e in p.experts]
        idx = rng.integers(0, 2, size=n)
        mu = np.stack([e.mu.data for e in qj])[idx]
        sd = np.exp(0.5 * np.stack([e.logvar.data for e in qj]))[idx]
        z = mu + sd * rng.standard_normal((n, 2))

        def mix(es, z):
            comps = [stats.norm.logpdf(z, e.mu.data, np.exp(0.5 * e.logvar.data)).sum(-1) for e in es]
            return np.logaddexp(*comps) - math.log(2)

        w = mix(qj, z) - mix(pj, z)
        mixture_kl, se = w.mean(), w.std(ddof=1) / math.sqrt(n)
        assert moe_kl_upper(q, p).item() >= mixture_kl - 3 * se


def test_mixture_log_prob_matches_scipy():
    rng = make_rng(35)
    s = ExpertSet([gaussian(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) * 0.3) for _ in range(3)],
                  [0.2, 0.5, 0.3])
    x = rng.normal(size=(2, 3))
    comps = [math.log(w) + stats.norm.logpdf(x, e.mu.data, np.exp(0.5 * e.logvar.data))
             for w, e in zip(s.weights, s.experts)]
    per_elem = np.logaddexp.reduce(np.stack(comps), axis=0)
    np.testing.assert_allclose(mixture_log_prob(s, x, elementwise=True).data, per_elem, rtol=1e-12)
    s3 = ExpertSet([gaussian(e.mu.data[None], e.logvar.data[None]) for e in s.experts], s.weights)
    joint = np.logaddexp.reduce(np.stack([math.log(w) + stats.norm.logpdf(x, e.mu.data,
                                          np.exp(0.5 * e.logvar.data)).sum() for w, e in zip(s.weights, s.experts)]))
    assert mixture_log_prob(s3, x[None]).item() == pytest.approx(joint, rel=1e-12)


# ---------------------------------------------------------------- JSD

def test_jsd_of_identical_components_is_zero():
    rng = make_rng(36)
    q = _experts(rng, k=1, shape=(1, 2, 3))
    est, se = jsd_dynamic_prior(q, q, n_samples=64, rng=rng, return_se=True)
    assert abs(est.item()) <= 1e-12 + 3 * se


def test_jsd_saturates_to_ln2_for_disjoint_components():
    q = ExpertSet([gaussian(np.full((1, 1, 1), -40.0), np.zeros((1, 1, 1)))])
    p = ExpertSet([gaussian(np.full((1, 1, 1), 40.0), np.zeros((1, 1, 1)))])
    est = jsd_dynamic_prior(q, p, n_samples=256, rng=make_rng(37)).item()
    assert est == pytest.approx(math.log(2), rel=0.02)


def test_jsd_matches_independent_monte_carlo():
    # weighted-sum form: sum_j pi_j E_{z~j} [log p_j(z) - log mean_i p_i(z)], by scipy per coordinate
    rng = make_rng(38)
    q = _experts(rng, k=2, shape=(1, 1, 2))
    p = _experts(rng, k=2, shape=(1, 1, 2))
    pi = [0.1, 0.2, 0.3, 0.4]
    est, se = jsd_dynamic_prior(q, p, pi=pi, n_samples=20000, rng=make_rng(39), return_se=True)
    comps = list(q.experts) + list(p.experts)
    g = make_rng(40)
    total = 0.0
    for w, c in zip(pi, comps):
        mu, sd = c.mu.data[0, 0], np.exp(0.5 * c.logvar.data[0, 0])
        z = mu + sd * g.standard_normal((40000, 2))
        own = stats.norm.logpdf(z, mu, sd)
        dens = np.stack([stats.norm.logpdf(z, e.mu.data[0, 0], np.exp(0.5 * e.logvar.data[0, 0])) for e in comps])
        mix = np.logaddexp.reduce(dens, axis=0) - math.log(4)
        total += w * (own - mix).sum(-1).mean()
    assert abs(est.item() - total) < 4 * se + 0.01


def test_jsd_gradients_with_frozen_noise():
    rng = make_rng(41)
    store = ParamStore()
    for k in ("qm0", "ql0", "qm1", "ql1", "pm0", "pl0", "pm1", "pl1"):
        store.add(k, rng.normal(size=(1, 2, 2)) * 0.5)
    eps = rng.standard_normal((4, 3, 1, 2, 2))

    def fn():
        q = ExpertSet([gaussian(store["qm0"], store["ql0"]), gaussian(store["qm1"], store["ql1"])])
        p = ExpertSet([gaussian(store["pm0"], store["pl0"]), gaussian(store["pm1"], store["pl1"])])
        return jsd_dynamic_prior(q, p, n_samples=3, eps=eps)

    assert grad_check(fn, store, tol=1e-6).passed


def test_jsd_rejects_bad_weights():
    rng = make_rng(42)
    q = _experts(rng, k=1)
    with pytest.raises(ValueError):
        jsd_dynamic_prior(q, q, pi=[0.9, 0.3], rng=rng)
