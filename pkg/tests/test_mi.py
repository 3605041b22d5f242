import math

import numpy as np
import pytest

from ecmvae import autodiff as ad
from ecmvae.autodiff import ParamStore, forward_backward, grad_check
from ecmvae.factorization import LatentBundle
from ecmvae.mi import GAUSSIAN_ENTROPY, VariationalConditional, gaussian_mi_oracle, i_ba_surrogate, sic_loss
from ecmvae.optim import AdamState, adam_step
from ecmvae.rng import make_rng


def _pairs(rng, rho, n, dim=1):
    x = rng.standard_normal((n, dim))
    y = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal((n, dim))
    return y.reshape(n, 1, dim), x.reshape(n, 1, dim)   # (sc_a, sc_v) as (N, T=1, D)


def test_gaussian_mi_oracle_values():
    assert gaussian_mi_oracle(0.0) == 0.0
    assert gaussian_mi_oracle(0.5) == pytest.approx(0.143841, abs=1e-6)
    assert gaussian_mi_oracle(0.9) == pytest.approx(-0.5 * math.log(0.19), rel=1e-12)
    with pytest.raises(ValueError):
        gaussian_mi_oracle(1.0)


def test_entropy_constant():
    assert GAUSSIAN_ENTROPY == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, rel=1e-15)


def test_surrogate_is_mean_log_density():
    rng = make_rng(60)
    store = ParamStore()
    vc = VariationalConditional(store, "mi", 3, rng)
    a, v = rng.normal(size=(2, 4, 5, 3))
    mu, lv = vc(ad.Tensor(v))
    ref = (-0.5 * (math.log(2 * math.pi) + lv.data + (a - mu.data) ** 2 / np.exp(lv.data))).sum(-1).mean()
    assert i_ba_surrogate(vc, a, v).item() == pytest.approx(ref, rel=1e-12)


def test_surrogate_gradients():
    rng = make_rng(61)
    store = ParamStore()
    vc = VariationalConditional(store, "mi", 4, rng)
    a, v = rng.normal(size=(2, 3, 5, 4))
    store.add("a", a)
    assert grad_check(lambda: i_ba_surrogate(vc, store["a"], v), store, tol=1e-5).passed


def test_sic_loss_weighting():
    rng = make_rng(62)
    store = ParamStore()
    vc = VariationalConditional(store, "mi", 2, rng)
    mk = lambda: LatentBundle(None, None, None, ad.Tensor(rng.normal(size=(3, 5, 2))),
                              ad.Tensor(rng.normal(size=(3, 5, 2))))
    po, pr = mk(), mk()
    loss, i_po, i_pr = sic_loss(vc, po, pr, 0.3)
    assert loss.item() == pytest.approx(-0.3 * i_po.item() - 0.7 * i_pr.item(), rel=1e-12)
    loss1, _, i_pr1 = sic_loss(vc, None, pr, 0.0)
    assert loss1.item() == pytest.approx(-i_pr.item(), rel=1e-12)
    with pytest.raises(ValueError):
        sic_loss(vc, po, pr, 1.5)


def test_bound_tightens_on_correlated_pair():
    rng = make_rng(63)
    store = ParamStore()
    vc = VariationalConditional(store, "mi", 1, make_rng(64))
    state = AdamState.for_store(store, lr=1e-2)
    for step in range(600):
        a, v = _pairs(rng, 0.9, 256)
        forward_backward(lambda: -i_ba_surrogate(vc, a, v), store)
        adam_step(store, state)
    a, v = _pairs(make_rng(65), 0.9, 50_000)
    bound = i_ba_surrogate(vc, a, v).item() + GAUSSIAN_ENTROPY
    assert bound <= gaussian_mi_oracle(0.9) + 0.02
    assert bound > gaussian_mi_oracle(0.9) - 0.15
