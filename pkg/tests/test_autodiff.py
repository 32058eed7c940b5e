import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grassnet import autodiff as ad
from grassnet.autodiff import ParamStore, Tape, Tensor
from grassnet.errors import ShapeError


def grad_of(fn, *arrays):
    ts = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    return out, tape.gradient(out, ts)


def test_softplus_values():
    assert float(ad.softplus(Tensor(0.0)).data) == pytest.approx(math.log(2), abs=1e-12)
    big = float(ad.softplus(Tensor(50.0)).data)
    assert math.isfinite(big) and big == pytest.approx(50.0, abs=1e-15)
    assert float(ad.softplus(Tensor(1000.0)).data) == 1000.0


def test_softplus_gradient_at_zero():
    _, (g,) = grad_of(lambda w: ad.softplus(w), 0.0)
    assert float(g) == 0.5


def test_max_abs_value_and_first_maximizer():
    assert float(ad.max_abs(Tensor([2.0, -4.0, 1.0])).data) == 4.0
    _, (g,) = grad_of(ad.max_abs, [3.0, -3.0, 1.0])
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])
    _, (g,) = grad_of(ad.max_abs, [1.0, -3.0, 3.0])
    np.testing.assert_array_equal(g, [0.0, -1.0, 0.0])


def test_sum_of_matvec_gradient():
    x = np.array([[1.0], [-2.0], [0.5]])
    _, (g,) = grad_of(lambda w: ad.sum_(ad.matmul(w, Tensor(x))), np.ones((2, 3)))
    np.testing.assert_array_equal(g, np.outer(np.ones(2), x))


def test_unreachable_parameter_gets_zeros():
    w = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(w * w)
    gw, gp = tape.gradient(loss, [w, p])
    np.testing.assert_array_equal(gp, np.zeros((2, 2)))
    np.testing.assert_array_equal(gw, [2.0, 4.0])


def test_non_scalar_loss_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = w * w
    with pytest.raises(ShapeError):
        tape.gradient(out, [w])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_recording_outside_tape():
    w = Tensor([1.0], requires_grad=True)
    out = w * w
    assert not out.requires_grad


def test_reset_clears_nodes():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        ad.sum_(w * w)
    assert tape.nodes
    tape.reset()
    assert not tape.nodes


def test_cross_entropy_uniform():
    loss = ad.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.array([[50.0, 0.0], [0.0, 50.0]])
    assert float(ad.cross_entropy(Tensor(logits), [0, 1]).data) < 1e-20


def test_cross_entropy_mean_of_identical_rows():
    one = float(ad.cross_entropy(Tensor([[0.3, -1.0, 2.0]]), [1]).data)
    two = float(ad.cross_entropy(Tensor([[0.3, -1.0, 2.0], [0.3, -1.0, 2.0]]), [1, 1]).data)
    assert one == two


def test_cross_entropy_empty():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((0, 3))), [])


def test_row_softmax_rows_sum_to_one():
    out = ad.row_softmax(Tensor(np.random.default_rng(0).normal(size=(5, 3)) * 30))
    np.testing.assert_allclose(out.data.sum(1), 1.0)


# --- gradient checks -------------------------------------------------------------------


def test_fd_sum_of_squares():
    store = ParamStore({"t": Tensor(np.random.default_rng(1).normal(size=7))})
    assert ad.finite_diff_check(lambda s: ad.sum_(s["t"] * s["t"]), store) < 1e-9


def test_fd_softplus_chain():
    store = ParamStore({"t": Tensor(np.random.default_rng(2).normal(size=10))})

    def f(s):
        return ad.sum_(ad.softplus(ad.softplus(ad.softplus(s["t"]))))

    assert ad.finite_diff_check(f, store) < 1e-6


def test_fd_constant():
    store = ParamStore({"t": Tensor(np.ones(3))})
    assert ad.finite_diff_check(lambda s: ad.sum_(Tensor(np.ones(2))), store) == 0.0


def test_fd_every_op():
    rng = np.random.default_rng(3)
    store = ParamStore({
        "a": Tensor(rng.normal(size=(4, 3))),
        "b": Tensor(rng.normal(size=(3,))),
        "c": Tensor(rng.uniform(1, 2, size=(4, 3))),
    })

    def f(s):
        a, b, c = s["a"], s["b"], s["c"]
        h = ad.tanh(a + b) * ad.exp(ad.scalar_mul(a, 0.3)) - ad.div(a, c)
        h = ad.relu(h + 0.1) + ad.softplus(h)
        h = ad.concat_rows([h, ad.reverse_rows(h)])
        h = ad.index_rows(h, [0, 2, 5, 7, 2])
        p = ad.row_softmax(h)
        z = ad.matmul(p, ad.reshape(b, (3, 1)))
        m = ad.div_scalar(ad.mean(z), ad.max_abs(c))
        return m + ad.cross_entropy(h, [0, 1, 2, 0, 1]) + ad.sum_(ad.sum_(c, axis=0))

    assert ad.finite_diff_check(f, store) < 1e-6


# --- Adam -----------------------------------------------------------------------------


def test_adam_one_step_value():
    store = ParamStore({"t": Tensor(np.zeros(1))})
    ad.adam_step(store, {"t": np.ones(1)}, lr=0.1)
    assert float(store["t"].data[0]) == pytest.approx(-0.0999999990, abs=1e-12)


def test_adam_zero_grad_no_decay_is_noop():
    store = ParamStore({"t": Tensor(np.arange(3.0))})
    ad.adam_step(store, {"t": np.zeros(3)}, lr=0.1)
    np.testing.assert_array_equal(store["t"].data, np.arange(3.0))


def test_adam_identical_params_identical_updates():
    store = ParamStore({"a": Tensor([1.0, 2.0]), "b": Tensor([1.0, 2.0])})
    for _ in range(3):
        ad.adam_step(store, {"a": np.array([0.3, -1.0]), "b": np.array([0.3, -1.0])}, 0.01, 1e-3)
    np.testing.assert_array_equal(store["a"].data, store["b"].data)
    assert store.step == 3


def test_adam_weight_decay_is_coupled():
    store = ParamStore({"t": Tensor([2.0])})
    ad.adam_step(store, {"t": np.zeros(1)}, lr=0.1, weight_decay=0.5)
    # g = wd * theta = 1 -> same first step as unit gradient
    assert float(store["t"].data[0]) == pytest.approx(2.0 - 0.0999999990, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.permutations(["w0", "w1", "w2", "w3"]))
def test_adam_independent_of_insertion_order(order):
    rng = np.random.default_rng(0)
    base = {k: rng.normal(size=2) for k in ["w0", "w1", "w2", "w3"]}
    grads = {k: rng.normal(size=2) for k in base}
    s1 = ParamStore({k: Tensor(base[k].copy()) for k in sorted(base)})
    s2 = ParamStore({k: Tensor(base[k].copy()) for k in order})
    for _ in range(2):
        ad.adam_step(s1, grads, 0.01, 5e-4)
        ad.adam_step(s2, grads, 0.01, 5e-4)
    for k in base:
        assert np.array_equal(s1[k].data, s2[k].data)


def test_adam_shape_mismatch():
    store = ParamStore({"t": Tensor(np.zeros(2))})
    with pytest.raises(ShapeError):
        ad.adam_step(store, {"t": np.zeros(3)}, 0.1)


# --- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    store = ParamStore({"x.w": Tensor(rng.normal(size=(3, 2))), "b": Tensor(rng.normal(size=4)),
                        "s": Tensor(np.array(1.5))})
    ad.save_checkpoint(store, tmp_path)
    back = ad.load_checkpoint(tmp_path)
    assert back.names() == store.names()
    for k in store.names():
        assert back[k].data.tobytes() == store[k].data.tobytes()
        assert back[k].shape == store[k].shape


def test_checkpoint_is_byte_stable(tmp_path):
    store = ParamStore({"w": Tensor(np.linspace(0, 1, 5))})
    ad.save_checkpoint(store, tmp_path / "a")
    ad.save_checkpoint(store, tmp_path / "b")
    for f in ("index.json", "params.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_checkpoint_truncated(tmp_path):
    ad.save_checkpoint(ParamStore({"w": Tensor(np.ones(4))}), tmp_path)
    blob = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path)
