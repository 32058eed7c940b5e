import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph, twelve_node_graph, two_triangles
from grassnet import autodiff as ad
from grassnet.autodiff import ParamStore, Tape, Tensor
from grassnet.errors import ShapeError
from grassnet.graph import Graph, build_normalized_laplacian
from grassnet.model import (Affine, ModelParams, classify, encode, filter_coefficients, forward,
                            loss, spectral_convolve)
from grassnet.spectral import SpectralDecomposition, eig_sym


def decomp(g):
    return eig_sym(build_normalized_laplacian(g))


def small_model(g, variant="ssm-bi", seed=0, hidden=5, d_state=3, layers=2, fc_layers=2):
    return ModelParams.init(g.d, g.num_classes, hidden=hidden, fc_layers=fc_layers,
                            variant=variant, d_state=d_state, ssm_layers=layers,
                            filter_width=4, seed=seed)


# --- encoder / classifier ----------------------------------------------------------------


def test_encode_identity_like():
    x = np.random.default_rng(0).normal(size=(4, 3))
    enc = [Affine(Tensor(np.eye(3, 5)), Tensor(np.zeros(5)))]
    out = encode(x, enc).data
    np.testing.assert_array_equal(out[:, :3], x)
    assert not out[:, 3:].any()


def test_encode_zero_weights_gives_bias():
    enc = [Affine(Tensor(np.zeros((3, 2))), Tensor([1.0, -2.0]))]
    out = encode(np.ones((4, 3)), enc).data
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0], (4, 1)))


def test_encode_relu_between_layers_only():
    enc = [Affine(Tensor(-np.eye(2)), Tensor(np.zeros(2))),
           Affine(Tensor(-np.eye(2)), Tensor(np.zeros(2)))]
    out = encode(np.array([[1.0, -1.0]]), enc).data
    # first layer -> [-1, 1], relu -> [0, 1], linear last layer -> [0, -1]
    np.testing.assert_array_equal(out, [[0.0, -1.0]])


def test_encode_shape_mismatch():
    with pytest.raises(ShapeError):
        encode(np.ones((2, 4)), [Affine(Tensor(np.ones((3, 2))), Tensor(np.zeros(2)))])


def test_classify_zero_weights_bias_rows():
    out = classify(Tensor(np.ones((3, 4))), Affine(Tensor(np.zeros((4, 2))), Tensor([0.5, 2.0])))
    np.testing.assert_array_equal(out.data, np.tile([0.5, 2.0], (3, 1)))


def test_classify_sign_flip_flips_argmax():
    cls = Affine(Tensor(np.array([[1.0, -1.0]])), Tensor(np.zeros(2)))
    x = np.array([[2.0]])
    assert np.argmax(classify(Tensor(x), cls).data) == 0
    assert np.argmax(classify(Tensor(-x), cls).data) == 1


def test_loss_uniform_four_classes():
    assert float(loss(Tensor(np.zeros((2, 4))), [1, 3]).data) == pytest.approx(math.log(4))


# --- spectral convolution -----------------------------------------------------------------


def test_convolve_identity_filter():
    sd = decomp(random_graph(10, 0.4, 1))
    x = np.random.default_rng(2).normal(size=(10, 3))
    out = spectral_convolve(sd.eigenvectors, np.ones(10), Tensor(x)).data
    np.testing.assert_allclose(out, x, atol=1e-9)


def test_convolve_with_eigenvalues_applies_laplacian():
    g = random_graph(10, 0.4, 1)
    lap = build_normalized_laplacian(g)
    sd = eig_sym(lap)
    x = np.random.default_rng(2).normal(size=(10, 3))
    out = spectral_convolve(sd.eigenvectors, sd.eigenvalues, Tensor(x)).data
    np.testing.assert_allclose(out, lap @ x, atol=1e-8)


def test_convolve_zero_filter():
    sd = decomp(random_graph(8, 0.4, 1))
    out = spectral_convolve(sd.eigenvectors, np.zeros(8), Tensor(np.ones((8, 2)))).data
    assert not out.any()


def test_convolve_linearity():
    sd = decomp(random_graph(9, 0.4, 3))
    rng = np.random.default_rng(4)
    s = rng.normal(size=9)
    x1, x2 = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
    lhs = spectral_convolve(sd.eigenvectors, s, Tensor(2.0 * x1 - 3.0 * x2)).data
    rhs = (2.0 * spectral_convolve(sd.eigenvectors, s, Tensor(x1)).data
           - 3.0 * spectral_convolve(sd.eigenvectors, s, Tensor(x2)).data)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_convolve_length_mismatch():
    with pytest.raises(ShapeError):
        spectral_convolve(np.eye(4), np.ones(3), Tensor(np.ones((4, 2))))


# --- variants -----------------------------------------------------------------------------


def test_fc_variant_equal_coefficients_on_toy_spectrum():
    g = two_triangles()
    sd = decomp(g)
    params = small_model(g, "fc", seed=3)
    v = filter_coefficients(sd.eigenvalues, params).values.data
    assert v[0] == v[1] and len(set(v[2:].tolist())) == 1


def test_ssm_bi_variant_distinct_on_toy_spectrum():
    g = two_triangles()
    sd = decomp(g)
    params = small_model(g, "ssm-bi", seed=3)
    v = filter_coefficients(sd.eigenvalues, params).values.data
    gaps = [abs(v[i] - v[j]) for i in range(6) for j in range(i + 1, 6)
            if sd.eigenvalues[i] == sd.eigenvalues[j]]
    assert len(gaps) == 7 and min(gaps) > 1e-9


def test_ssm_un_equals_bi_with_zero_backward():
    g = random_graph(10, 0.4, 5)
    sd = decomp(g)
    params = small_model(g, "ssm-bi", seed=1)
    for pair in params.filter.layers:
        pair.bwd.zero_()
    bi = forward(sd, g.features, params).data
    un = forward(sd, g.features, params, variant="ssm-un").data
    np.testing.assert_array_equal(bi, un)


def test_unknown_variant():
    g = two_triangles()
    with pytest.raises(ValueError):
        forward(decomp(g), g.features, small_model(g), variant="rnn")
    with pytest.raises(ValueError):
        ModelParams.init(2, 2, variant="lstm")


def test_store_round_trip():
    g = twelve_node_graph()
    sd = decomp(g)
    for variant in ("ssm-bi", "ssm-un", "fc"):
        params = small_model(g, variant)
        back = ModelParams.from_store(params.store(), variant, 1.0)
        np.testing.assert_array_equal(forward(sd, g.features, back).data,
                                      forward(sd, g.features, params).data)


def test_parameter_names():
    names = set(small_model(two_triangles(), "ssm-bi", fc_layers=1, layers=1).named())
    assert {"encoder.0.weight", "encoder.0.bias", "classifier.weight", "classifier.bias",
            "filter.psi.0.weight", "filter.psi.0.bias", "filter.w_out",
            "filter.layer.0.fwd.W_B", "filter.layer.0.bwd.A_log"} <= names


def test_init_bounds():
    params = ModelParams.init(9, 3, hidden=4, seed=0)
    w = params.encoder[0].weight.data
    assert np.all(np.abs(w) <= 1 / 3) and w.std() > 0


# --- gradients ----------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["ssm-bi", "ssm-un", "fc"])
def test_end_to_end_gradient(variant):
    g = twelve_node_graph()
    sd = decomp(g)
    params = ModelParams.init(g.d, g.num_classes, hidden=4, fc_layers=1, variant=variant,
                              d_state=3, ssm_layers=2, filter_width=4, seed=0)
    store = params.store()
    idx = np.arange(8)

    def f(_):
        return loss(ad.index_rows(forward(sd, g.features, params), idx), g.labels[idx])

    assert ad.finite_diff_check(f, store) < 1e-4


def test_encoder_classifier_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    store = ParamStore({"w0": Tensor(rng.normal(size=(3, 4))), "b0": Tensor(rng.normal(size=4)),
                        "w1": Tensor(rng.normal(size=(4, 4))), "b1": Tensor(rng.normal(size=4)),
                        "wc": Tensor(rng.normal(size=(4, 2))), "bc": Tensor(rng.normal(size=2))})

    def f(s):
        h = encode(x, [Affine(s["w0"], s["b0"]), Affine(s["w1"], s["b1"])])
        out = classify(h, Affine(s["wc"], s["bc"]))
        return ad.sum_(out * out)

    assert ad.finite_diff_check(f, store) < 1e-4


# --- structural properties ---------------------------------------------------------------------


def simple_spectrum_graph(seed):
    for s in range(seed, seed + 50):
        g = random_graph(12, 0.35, s)
        lam = decomp(g).eigenvalues
        if np.min(np.diff(lam)) > 1e-6:
            return g
    raise AssertionError("no simple-spectrum graph found")


@pytest.mark.parametrize("variant", ["ssm-bi", "fc"])
def test_permutation_equivariance_on_simple_spectrum(variant):
    g = simple_spectrum_graph(0)
    params = small_model(g, variant, seed=2)
    perm = np.random.default_rng(1).permutation(g.n)
    inv = np.argsort(perm)
    g2 = Graph(g.n, [(inv[u], inv[v]) for u, v in g.edges], g.features[perm], g.labels[perm],
               g.num_classes)
    out1 = forward(decomp(g), g.features, params).data
    out2 = forward(decomp(g2), g2.features, params).data
    np.testing.assert_allclose(out2, out1[perm], atol=1e-6)


def test_degenerate_spectrum_is_run_to_run_deterministic():
    g = two_triangles()
    params = small_model(g)
    a = forward(decomp(g), g.features, params).data
    b = forward(decomp(g), g.features, params).data
    assert np.array_equal(a, b)


def test_forward_records_on_tape():
    g = two_triangles()
    params = small_model(g)
    params.store()
    with Tape() as tape:
        out = forward(decomp(g), g.features, params)
    assert out.requires_grad and tape.nodes


def test_custom_decomposition_object():
    sd = SpectralDecomposition(np.array([0.0, 1.0, 2.0]), np.eye(3))
    g = Graph(3, [], np.ones((3, 2)), [0, 1, 0], 2)
    assert forward(sd, g.features, small_model(g)).shape == (3, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6), st.integers(2, 9))
def test_fc_ties_exact_for_any_width(hidden, seed, reps):
    lam = np.repeat([0.0, 0.7, 1.5], reps)
    params = ModelParams.init(2, 2, hidden=hidden, variant="fc", seed=seed)
    v = filter_coefficients(lam, params).values.data.reshape(3, reps)
    assert np.all(v == v[:, :1])
