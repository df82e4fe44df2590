import numpy as np
import pytest
from scipy.signal import correlate2d

from cnngp.architecture import ArchitectureSpec, Hyperparameters, LayerSpec, uniform_layers
from cnngp.errors import ConfigError
from cnngp.finite_width import (
    _conv,
    empirical_moments,
    forward,
    kernel_predictions,
    random_inputs,
    sample_network,
)
from cnngp.kernel import convnet_kernel

RELU2 = ArchitectureSpec(uniform_layers(2, 3), "relu")
RES3 = ArchitectureSpec(uniform_layers(3, 3, skip_every=1), "relu")


def test_sample_network_deterministic():
    h = Hyperparameters(0.5, 2.0)
    a = sample_network(RELU2, h, 6, 11, (1, 5, 5))
    b = sample_network(RELU2, h, 6, 11, (1, 5, 5))
    c = sample_network(RELU2, h, 6, 12, (1, 5, 5))
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert a.channels == [1, 6, 6, 1]
    assert a.weights[-1].shape == (1, 6, 5, 5)


def test_weight_variance_chi_square():
    # readout of a 1x1 map with 10^4 input channels: 10^4 weights of variance 1e-4
    arch = ArchitectureSpec((LayerSpec(1, 1),))
    net = sample_network(arch, Hyperparameters(0.0, 1.0), 10_000, 3, (1, 1, 1))
    w = net.weights[-1]
    assert w.size == 10_000
    assert 0.9e-4 <= w.var() <= 1.1e-4


def test_channels_and_filter_fan_in():
    net = sample_network(RELU2, Hyperparameters(0.0, 1.0, "channels_and_filter"), 200, 0, (1, 5, 5))
    assert net.weights[1].var() == pytest.approx(1 / (200 * 9), rel=0.05)


def test_zero_bias_variance_gives_zero_biases():
    net = sample_network(RES3, Hyperparameters(0.0, 1.0), 4, 0, (2, 5, 5))
    assert all(np.all(b == 0) for b in net.biases)


def test_sample_network_rejects_zero_channels():
    with pytest.raises(ConfigError):
        sample_network(RELU2, Hyperparameters(0.0, 1.0), 0, 0, (1, 5, 5))


def test_forward_zero_network():
    net = sample_network(RES3, Hyperparameters(1.0, 1.0), 4, 0, (1, 5, 5))
    for p in net.weights + net.biases:
        p[...] = 0
    assert np.all(forward(net, np.ones((1, 5, 5))) == 0)


def test_forward_one_pixel_by_hand():
    arch = ArchitectureSpec(())  # readout only
    net = sample_network(arch, Hyperparameters(1.0, 1.0), 1, 0, (1, 1, 1))
    w, b = net.weights[0].item(), net.biases[0].item()
    assert forward(net, np.full((1, 1, 1), 1.7)).item() == pytest.approx(b + w * 1.7)
    arch1 = ArchitectureSpec((LayerSpec(1, 1),))
    net = sample_network(arch1, Hyperparameters(1.0, 1.0), 1, 4, (1, 1, 1))
    (w1, w2), (b1, b2) = [x.item() for x in net.weights], [x.item() for x in net.biases]
    assert forward(net, np.full((1, 1, 1), -0.4)).item() == pytest.approx(b2 + w2 * max(0.0, b1 - 0.4 * w1))


def test_same_conv_keeps_28x28(rng):
    w = rng.standard_normal((4, 1, 3, 3))
    out = _conv(rng.random((2, 1, 28, 28)), w, np.zeros(4), LayerSpec(3, 3))
    assert out.shape == (2, 4, 28, 28)


@pytest.mark.parametrize("layer", [LayerSpec(3, 3), LayerSpec(4, 2), LayerSpec(3, 3, stride=2),
                                   LayerSpec(2, 3, padding="valid")])
def test_conv_matches_scipy(rng, layer):
    x = rng.standard_normal((1, 2, 7, 6))
    w = rng.standard_normal((3, 2, layer.filter_height, layer.filter_width))
    b = rng.standard_normal(3)
    got = _conv(x, w, b, layer)
    pt, pl = layer.pads((7, 6))
    ho, wo = layer.output_shape((7, 6))
    s = layer.stride
    rows = (ho - 1) * s + layer.filter_height
    cols = (wo - 1) * s + layer.filter_width
    for o in range(3):
        acc = np.zeros((rows - layer.filter_height + 1, cols - layer.filter_width + 1))
        for c in range(2):
            pad = np.zeros((rows, cols))
            h, ww = min(7, rows - pt), min(6, cols - pl)
            pad[pt : pt + h, pl : pl + ww] = x[0, c, :h, :ww]
            acc += correlate2d(pad, w[o, c], mode="valid")
        np.testing.assert_allclose(got[0, o], acc[::s, ::s] + b[o])


def test_forward_residual_by_hand(rng):
    net = sample_network(RES3, Hyperparameters(0.3, 1.0), 3, 5, (1, 4, 4))
    x = rng.standard_normal((1, 4, 4))
    relu = lambda a: np.maximum(a, 0)
    layers = RES3.layers
    a1 = _conv(x[None], net.weights[0], net.biases[0], layers[0])
    a2 = _conv(relu(a1), net.weights[1], net.biases[1], layers[1]) + a1
    a3 = _conv(relu(a2), net.weights[2], net.biases[2], layers[2]) + a2
    out = (net.weights[3] * relu(a3)).sum(axis=(1, 2, 3)) + net.biases[3]
    np.testing.assert_allclose(forward(net, x), out)


def test_forward_shape_mismatch():
    net = sample_network(RELU2, Hyperparameters(0.3, 1.0), 3, 5, (1, 5, 5))
    with pytest.raises(ValueError):
        forward(net, np.zeros((1, 4, 4)))


# -- moments -----------------------------------------------------------------


def test_report_basics():
    x = random_inputs(2, 5, 0)
    rep = empirical_moments(RELU2, Hyperparameters(0.5, 1.5), 8, 500, x, 1, readout_channels=2)
    assert rep.samples == 500
    assert all(e.se > 0 for e in rep.entries)
    assert len(rep.select("moment")) == 2 * 3 and len(rep.select("mean")) == 4
    assert len(rep.select("cross")) == 2
    lines = rep.to_tsv().splitlines()
    assert lines[0] == "entry\tempirical\tkernel\tse\tz" and len(lines) == 1 + len(rep.entries)
    k = kernel_predictions(x, RELU2, Hyperparameters(0.5, 1.5))
    assert k[0, 1] == pytest.approx(convnet_kernel(x[0], x[1], RELU2, Hyperparameters(0.5, 1.5)))


def test_num_samples_at_least_two():
    with pytest.raises(ConfigError):
        empirical_moments(RELU2, Hyperparameters(0.5, 1.5), 8, 1, random_inputs(2, 5, 0), 1)


def test_reports_independent_of_parallelism():
    x = random_inputs(2, 5, 3)
    h = Hyperparameters(0.5, 1.5)
    a = empirical_moments(RES3, h, 6, 2500, x, 8, parallelism=1)
    b = empirical_moments(RES3, h, 6, 2500, x, 8, parallelism=3)
    assert [e.empirical for e in a.entries] == [e.empirical for e in b.entries]
    assert [e.se for e in a.entries] == [e.se for e in b.entries]


@pytest.mark.parametrize("arch", [RELU2, RES3, ArchitectureSpec(uniform_layers(2, 3, stride=2), "erf")],
                         ids=["relu2", "res3", "erf-stride2"])
def test_layerwise_sampler_matches_literal_networks(arch):
    """The conditional-Gaussian sampler and explicit networks estimate the same moments."""
    x = random_inputs(2, 5, 4)
    h = Hyperparameters(0.4, 1.8)
    lit = empirical_moments(arch, h, 6, 3000, x, 21, readout_channels=2, method="literal")
    fast = empirical_moments(arch, h, 6, 3000, x, 22, readout_channels=2)
    z = [(a.empirical - b.empirical) / np.hypot(a.se, b.se) for a, b in zip(lit.entries, fast.entries)]
    assert max(abs(v) for v in z) < 4.0


def test_zero_mean_and_uncorrelated_channels():
    rep = empirical_moments(RES3, Hyperparameters(0.5, 1.5), 16, 6000, random_inputs(2, 5, 9), 2,
                            readout_channels=3)
    assert rep.fraction_within(3.0, "mean") >= 5 / 6
    assert rep.fraction_within(3.0, "cross") >= 5 / 6


def test_single_hidden_layer_is_exact_at_any_width():
    # one conv layer: its pre-activations are exactly Gaussian, so even C=2 matches the kernel
    arch = ArchitectureSpec(uniform_layers(1, 3))
    rep = empirical_moments(arch, Hyperparameters(0.5, 1.5), 2, 20_000, random_inputs(2, 5, 1), 5)
    assert rep.max_abs_z() < 4.0


def test_convergence_in_width():
    x = random_inputs(2, 5, 2)
    h = Hyperparameters(0.1, 2.0)
    medians = {}
    for c in (3, 100):
        zs = [empirical_moments(RELU2, h, c, 20_000, x, s).max_abs_z() for s in range(3)]
        medians[c] = float(np.median(zs))
    assert medians[100] <= medians[3]


def test_rescored_against_wrong_kernel():
    x = random_inputs(2, 5, 6)
    h = Hyperparameters(0.5, 1.5)
    rep = empirical_moments(RELU2, h, 32, 4000, x, 3)
    wrong = rep.rescored(2 * kernel_predictions(x, RELU2, h))
    assert wrong.fraction_within(3.0) < rep.fraction_within(3.0)
    assert wrong.max_abs_z() > 5
