import math

import numpy as np
import pytest

from ecmvae.autodiff import ParamStore, Tensor, grad_check
from ecmvae.experts import ExpertSet
from ecmvae.gaussian import gaussian, kl_closed_form
from ecmvae.objective import (COMPONENTS, LossReport, LossWeights, NonFiniteLossError, bce_with_logits,
                              elbo_hat, helbo, rec_loss, shared_regularizer, soft_iou_loss, total_loss)
from ecmvae.rng import make_rng


def _sig(x):
    return 1 / (1 + np.exp(-x))


def test_bce_matches_direct_formula():
    rng = make_rng(70)
    x = rng.normal(size=(2, 3, 4, 4)) * 3
    y = (rng.random(x.shape) < 0.4).astype(float)
    p = _sig(x)
    ref = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))
    assert bce_with_logits(x, y).item() == pytest.approx(ref, rel=1e-12)


def test_bce_is_stable_for_extreme_logits():
    x = np.array([[[-500.0, 500.0]]])
    y = np.array([[[0.0, 1.0]]])
    assert bce_with_logits(x, y).item() < 1e-12


def test_soft_iou_direct_formula_and_limits():
    rng = make_rng(71)
    x = rng.normal(size=(3, 4, 4))
    y = (rng.random(x.shape) < 0.5).astype(float)
    p = _sig(x)
    inter = (p * y).sum((-2, -1))
    union = (p + y - p * y).sum((-2, -1))
    ref = np.mean(1 - (inter + 1) / (union + 1))
    assert soft_iou_loss(x, y).item() == pytest.approx(ref, rel=1e-12)
    perfect = np.where(y > 0, 40.0, -40.0)
    assert soft_iou_loss(perfect, y).item() < 1e-9


def test_rec_loss_sums_paths_and_checks_target():
    rng = make_rng(72)
    y = (rng.random((2, 4, 4)) < 0.5).astype(float)
    a, b = rng.normal(size=(2, 2, 4, 4))
    one = lambda x: bce_with_logits(x, y).item() + soft_iou_loss(x, y).item()
    assert rec_loss([a, b], y).item() == pytest.approx(one(a) + one(b), rel=1e-12)
    with pytest.raises(ValueError):
        rec_loss([a], y * 0.5)
    with pytest.raises(ValueError):
        rec_loss([a[:1]], y)


def _dists(rng, modal: bool, shape=(2, 5, 3)):
    g = lambda: gaussian(rng.normal(size=shape), rng.normal(size=shape) * 0.3)
    c = ExpertSet([g(), g()]) if modal else g()
    return {"c": c, "s_a": g(), "s_v": g()}


def test_elbo_modes_differ_only_in_shared_term():
    rng = make_rng(73)
    qd, pd = _dists(rng, True), _dists(rng, True)
    rec = Tensor(1.25)
    out = {}
    for mode in ("PoE", "MoE", "JS"):
        out[mode] = elbo_hat(rec, qd, pd, 0.1, mode=mode, rng=make_rng(1), batch_size=2)[1]
    for k in ("kl_s_a", "kl_s_v"):
        assert out["PoE"][k].item() == out["JS"][k].item() == out["MoE"][k].item()
    assert len({round(out[m]["reg_c"].item(), 9) for m in out}) == 3
    q1 = {"c": qd["c"].experts[0], "s_a": qd["s_a"], "s_v": qd["s_v"]}
    p1 = {"c": pd["c"].experts[0], "s_a": pd["s_a"], "s_v": pd["s_v"]}
    kl = elbo_hat(rec, q1, p1, 0.1, mode="KL", batch_size=2)[1]
    assert kl["kl_s_a"].item() == out["JS"]["kl_s_a"].item()


def test_elbo_value_is_rec_plus_beta_reg_per_clip():
    rng = make_rng(74)
    qd, pd = _dists(rng, False), _dists(rng, False)
    rec = Tensor(2.0)
    loss, terms = elbo_hat(rec, qd, pd, 0.1, mode="KL", batch_size=2)
    kls = sum(kl_closed_form(qd[k], pd[k]).item() for k in ("c", "s_a", "s_v")) / 2
    assert loss.item() == pytest.approx(2.0 + 0.1 * kls, rel=1e-12)
    assert terms["reg_c"].item() == pytest.approx(kl_closed_form(qd["c"], pd["c"]).item() / 2, rel=1e-12)


def test_unfactorised_elbo_has_zero_specific_terms():
    rng = make_rng(75)
    qd, pd = _dists(rng, False), _dists(rng, False)
    _, terms = elbo_hat(Tensor(0.0), {"c": qd["c"]}, {"c": pd["c"]}, 0.1, mode="KL")
    assert terms["kl_s_a"].item() == 0.0 and terms["kl_s_v"].item() == 0.0


def test_helbo_limits():
    assert helbo(Tensor(1.0), Tensor(5.0), Tensor(0.5), 1.0).item() == 1.5
    assert helbo(Tensor(1.0), Tensor(5.0), Tensor(0.5), 0.0).item() == 5.0
    assert helbo(Tensor(1.0), Tensor(5.0), Tensor(0.5), 0.5).item() == pytest.approx(3.25)
    with pytest.raises(ValueError):
        helbo(Tensor(1.0), Tensor(5.0), Tensor(0.5), 1.2)


def test_total_loss_report_recombines():
    rng = make_rng(76)
    comps = {k: float(v) for k, v in zip(COMPONENTS, rng.random(len(COMPONENTS)) * 3)}
    w = LossWeights(beta=0.2, alpha1=0.3, alpha2=0.6, lambda1=0.01, lambda2=0.1, lambda3=0.5)
    t, rep = total_loss(comps, w)
    assert isinstance(rep, LossReport)
    reg = comps["kl_s_a"] + comps["kl_s_v"] + comps["reg_c"]
    ref = (0.3 * (comps["rec_posterior"] + 0.2 * reg) + 0.7 * comps["rec_prior"]
           + 0.01 * comps["diff"] + 0.1 * comps["sic"] + 0.5 * comps["avm"])
    assert t.item() == pytest.approx(ref, rel=1e-12)
    assert rep.recombine(w) == pytest.approx(rep.total, rel=1e-12)


def test_all_zero_lambdas_reduce_to_helbo():
    comps = {"rec_posterior": 1.0, "rec_prior": 2.0, "reg_c": 3.0, "diff": 100.0, "sic": -50.0, "avm": 7.0}
    w = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    assert total_loss(comps, w)[0].item() == pytest.approx(0.5 * (1 + 0.1 * 3) + 0.5 * 2)


def test_non_finite_component_is_named():
    with pytest.raises(NonFiniteLossError) as ei:
        total_loss({"sic": float("nan")}, LossWeights())
    assert ei.value.component == "sic"


@pytest.mark.parametrize("bad", [{"beta": -1.0}, {"alpha1": 1.5}, {"alpha2": -0.1}, {"lambda2": -1.0}])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(**bad)


def test_defaults():
    w = LossWeights()
    assert (w.beta, w.alpha1, w.alpha2, w.lambda1, w.lambda2, w.lambda3) == (0.1, 0.5, 0.5, 0.001, 0.01, 0.5)


@pytest.mark.parametrize("mode", ["KL", "PoE", "MoE", "JS"])
def test_shared_regularizer_gradients(mode):
    rng = make_rng(77, len(mode))
    store = ParamStore()
    for k in ("q0m", "q0l", "q1m", "q1l", "p0m", "p0l", "p1m", "p1l"):
        store.add(k, rng.normal(size=(1, 2, 3)) * 0.5)
    eps = rng.standard_normal((4, 2, 1, 2, 3))

    def fn():
        q = [gaussian(store["q0m"], store["q0l"]), gaussian(store["q1m"], store["q1l"])]
        p = [gaussian(store["p0m"], store["p0l"]), gaussian(store["p1m"], store["p1l"])]
        if mode == "KL":
            return shared_regularizer(mode, q[0], p[0])
        return shared_regularizer(mode, ExpertSet(q), ExpertSet(p), n_samples=2, eps=eps)

    assert grad_check(fn, store, tol=1e-6).passed


def test_unknown_mode_rejected():
    rng = make_rng(78)
    d = _dists(rng, False)
    with pytest.raises(ValueError):
        elbo_hat(Tensor(0.0), d, d, 0.1, mode="XX")
