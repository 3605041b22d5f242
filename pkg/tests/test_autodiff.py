import numpy as np
import pytest

from ecmvae import autodiff as ad
from ecmvae.autodiff import NonFiniteError, ParamStore, Tensor, forward_backward, grad_check, no_grad
from ecmvae.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from ecmvae.optim import AdamState, adam_step
from ecmvae.rng import make_rng

from conftest import numeric_grad, rel_err

# (name, fn of tensors, input shapes, input sampler)
UNARY = {
    "exp": (ad.exp, None),
    "log": (ad.log, "pos"),
    "tanh": (ad.tanh, None),
    "sigmoid": (ad.sigmoid, None),
    "softplus": (ad.softplus, None),
    "square": (ad.square, None),
    "neg": (ad.neg, None),
    "leaky_relu": (ad.leaky_relu, "nonzero"),
    "sum_axis": (lambda a: ad.tsum(a, axis=1), None),
    "mean": (lambda a: ad.mean(a, axis=0), None),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=1), None),
    "transpose": (lambda a: ad.transpose(a), None),
    "reshape": (lambda a: ad.reshape(a, (-1,)), None),
    "slice": (lambda a: a[1:, ::2], None),
    "fancy_index": (lambda a: a[np.array([0, 2, 2])], None),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), "away_from_clip"),
}


def _sample(rng, shape, kind):
    x = rng.normal(size=shape)
    if kind == "pos":
        x = np.abs(x) + 0.2
    elif kind == "nonzero":
        x = np.sign(x) * (np.abs(x) + 0.05)
    elif kind == "away_from_clip":
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x * 1.3, x)
    return x


def _check_op(fn, inputs, rng):
    w = rng.normal(size=fn(*[Tensor(x) for x in inputs]).shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * w).sum())

    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*ts)
    ad.tsum(out * w).backward()
    for i, t in enumerate(ts):
        def f(xi, i=i):
            arrs = [x for x in inputs]
            arrs[i] = xi
            return scalar(*arrs)
        num = numeric_grad(f, inputs[i].copy())
        assert rel_err(t.grad, num) < 1e-5, (fn, i)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_match_finite_differences(name):
    fn, kind = UNARY[name]
    rng = make_rng(5, len(name))
    for _ in range(100):
        _check_op(fn, [_sample(rng, (3, 4), kind)], rng)


BINARY = {
    "add_broadcast": (ad.add, (3, 4), (4,)),
    "sub_broadcast": (ad.sub, (3, 1), (3, 4)),
    "mul_broadcast": (ad.mul, (2, 3, 4), (3, 1)),
    "div": (ad.div, (3, 4), None),
    "matmul": (ad.matmul, (3, 4), (4, 2)),
    "batched_matmul": (ad.matmul, (2, 3, 4), (2, 4, 5)),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), (3, 2), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_match_finite_differences(name):
    fn, sa, sb = BINARY[name]
    rng = make_rng(6, len(name))
    for _ in range(100):
        a = rng.normal(size=sa)
        b = np.abs(rng.normal(size=sa)) + 0.5 if sb is None else rng.normal(size=sb)
        _check_op(fn, [a, b], rng)


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)])
def test_conv2d_matches_finite_differences(stride, padding, k):
    rng = make_rng(7, stride, padding, k)
    for _ in range(5):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        _check_op(lambda x, w, b: ad.conv2d(x, w, b, stride=stride, padding=padding), [x, w, b], rng)


def test_conv2d_agrees_with_direct_loop():
    rng = make_rng(8)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    out = ad.conv2d(x, w, None, stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 5))
    for i in range(5):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_upsample_and_pool_gradients():
    rng = make_rng(9)
    for _ in range(20):
        _check_op(ad.upsample2x, [rng.normal(size=(1, 2, 3, 3))], rng)
        _check_op(lambda a: ad.avgpool(a, 2), [rng.normal(size=(1, 2, 4, 4))], rng)


def test_gradient_is_linear_in_loss():
    rng = make_rng(10)
    store = ParamStore()
    w = store.add("w", rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))

    def f1():
        return ad.tsum(ad.tanh(ad.matmul(x, w)))

    def f2():
        return ad.tsum(ad.square(ad.matmul(x, w)))

    forward_backward(f1, store)
    g1 = store.grad_of("w").copy()
    forward_backward(f2, store)
    g2 = store.grad_of("w").copy()
    forward_backward(lambda: f1() * 2.0 + f2() * -3.0, store)
    np.testing.assert_allclose(store.grad_of("w"), 2 * g1 - 3 * g2, rtol=1e-12, atol=1e-12)


def test_backward_is_deterministic():
    rng = make_rng(11)
    store = ParamStore()
    store.add("w", rng.normal(size=(3, 3)))
    x = rng.normal(size=(2, 3))
    grads = []
    for _ in range(2):
        forward_backward(lambda: ad.tsum(ad.exp(ad.matmul(x, store["w"]))), store)
        grads.append(store.grad_of("w").copy())
    assert np.array_equal(grads[0], grads[1])


def test_reused_node_accumulates():
    a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.tsum(a * a + a)
    y.backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_unused_parameter_gets_zero_grad():
    store = ParamStore()
    store.add("used", np.ones(2))
    store.add("unused", np.ones(3))
    forward_backward(lambda: ad.tsum(store["used"] * 3.0), store)
    assert np.array_equal(store.grad_of("unused"), np.zeros(3))


def test_non_scalar_loss_rejected():
    store = ParamStore()
    store.add("w", np.ones(3))
    with pytest.raises(ValueError):
        forward_backward(lambda: store["w"] * 2.0, store)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([-1.0])))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad


def test_grad_check_detects_wrong_gradient():
    rng = make_rng(12)
    store = ParamStore()
    store.add("w", rng.normal(size=(3,)))

    def fn():
        return ad.tsum(ad.square(store["w"]))

    assert grad_check(fn, store).passed
    wrong = {"w": 2 * store["w"].data + 0.1}
    rep = grad_check(fn, store, analytic=wrong)
    assert not rep.passed and rep.max_rel_err > 1e-3


def test_grad_check_sampled_coordinates():
    rng = make_rng(13)
    store = ParamStore()
    store.add("a", rng.normal(size=(10, 10)))
    store.add("b", rng.normal(size=(7,)))
    rep = grad_check(lambda: ad.tsum(ad.tanh(store["a"])) + ad.tsum(ad.exp(store["b"])), store,
                     n_coords=20, rng=make_rng(1))
    assert rep.passed and rep.n_checked == 20


# ---------------------------------------------------------------- Adam

def test_adam_first_step_moves_by_lr_times_sign():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0, 3.0]))
    state = AdamState.for_store(store, lr=0.1)
    forward_backward(lambda: ad.tsum(store["w"] * np.array([2.0, -0.5, 0.0])), store)
    adam_step(store, state)
    # bias-corrected m/sqrt(v) = sign(g) on step one; zero gradient stays put
    np.testing.assert_allclose(store["w"].data, [0.9, -1.9, 3.0], atol=1e-7)
    assert state.step == 1


def test_adam_matches_reference_recursion():
    rng = make_rng(14)
    w0 = rng.normal(size=4)
    store = ParamStore()
    store.add("w", w0.copy())
    state = AdamState.for_store(store, lr=0.01)
    w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        forward_backward(lambda: ad.tsum(ad.square(store["w"]) * 0.5), store)
        adam_step(store, state)
        g = w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(store["w"].data, w, rtol=1e-12)


def test_adam_zeroes_grads_after_step():
    store = ParamStore()
    store.add("w", np.ones(2))
    state = AdamState.for_store(store)
    forward_backward(lambda: ad.tsum(store["w"]), store)
    adam_step(store, state)
    assert np.array_equal(store.grad_of("w"), np.zeros(2))


def test_adam_minimises_quadratic():
    store = ParamStore()
    store.add("w", np.array([3.0, -4.0]))
    state = AdamState.for_store(store, lr=0.05)
    for _ in range(2000):
        forward_backward(lambda: ad.tsum(ad.square(store["w"] - np.array([1.0, 2.0]))), store)
        adam_step(store, state)
    np.testing.assert_allclose(store["w"].data, [1.0, 2.0], atol=1e-3)


# ---------------------------------------------------------------- RNG / checkpoints

def test_rng_streams_are_keyed():
    assert np.array_equal(make_rng(1, 2).normal(size=5), make_rng(1, 2).normal(size=5))
    assert not np.array_equal(make_rng(1, 2).normal(size=5), make_rng(2, 1).normal(size=5))


def _store_with_adam():
    rng = make_rng(15)
    store = ParamStore()
    store.add("enc.w", rng.normal(size=(3, 4)))
    store.add("enc.b", rng.normal(size=(4,)))
    state = AdamState.for_store(store, lr=3e-3)
    forward_backward(lambda: ad.tsum(ad.square(store["enc.w"])) + ad.tsum(store["enc.b"]), store)
    adam_step(store, state)
    return store, state


def test_checkpoint_round_trip(tmp_path):
    store, state = _store_with_adam()
    save_checkpoint(tmp_path / "ck", store, state, {"note": "x"})
    fresh = ParamStore()
    fresh.add("enc.w", np.zeros((3, 4)))
    fresh.add("enc.b", np.zeros(4))
    st2 = AdamState.for_store(fresh)
    meta = load_checkpoint(tmp_path / "ck", fresh, st2)
    assert meta["note"] == "x"
    for name in store.names():
        assert np.array_equal(fresh[name].data, store[name].data)
        assert np.array_equal(st2.m[name], state.m[name])
        assert np.array_equal(st2.v[name], state.v[name])
    assert st2.step == state.step and st2.lr == state.lr


def test_checkpoint_rejects_truncation_and_mismatch(tmp_path):
    store, state = _store_with_adam()
    save_checkpoint(tmp_path / "ck", store, state)
    other = ParamStore()
    other.add("enc.w", np.zeros((4, 3)))
    other.add("enc.b", np.zeros(4))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck", other)
    blob = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "ck")
