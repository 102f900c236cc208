"""Test the parameter-conditioned interpolation network."""

import numpy as np
import pytest
from scipy.spatial.distance import pdist, squareform

from flint_tsr import FlintStarConfig, HyperConfig, SynthConfig, build_hyperflint, hyper_infer, synth_ensemble
from flint_tsr.fieldio import normalize_ensemble
from flint_tsr.flint import as_node
from flint_tsr.hyper import (
    PREFIX,
    flintstar_forward,
    hypernet_forward,
    neighbor_agreement,
    set_standardization,
    slice_theta,
    sweep,
    target_slots,
    theta_len,
    theta_matrix,
    triplet_agreement,
    triplet_correlation,
    weight_similarity_matrix,
)
from flint_tsr.params import load_checkpoint, save_checkpoint
from flint_tsr.tensor import grad_check, square, sub, sum_

# allow magic value comparison
# ruff: noqa: PLR2004
# allow redefining outer name for fixtures
# pylint: disable=redefined-outer-name
# allow functions without docstrings
# pylint: disable=missing-function-docstring


@pytest.fixture
def star_cfg():
    return FlintStarConfig(n_blocks=2, channels=[2, 2], n_mid=0, zero_head=False)


@pytest.fixture
def hyper_cfg():
    return HyperConfig(hidden=[4, 8, 8], conv_channels=2)


@pytest.fixture
def model(hyper_cfg, star_cfg):
    return build_hyperflint(hyper_cfg, star_cfg, 0)


@pytest.fixture
def frames():
    rng = np.random.default_rng(0)
    return as_node(rng.random((8, 8))), as_node(rng.random((8, 8))), as_node(rng.random((8, 8)))


def test_default_configs():
    cfg = FlintStarConfig()
    assert cfg.n_blocks == 3
    assert cfg.widths() == [128, 96, 64]
    assert len(target_slots(cfg)) == 15
    hcfg = HyperConfig()
    assert hcfg.hidden == [32, 64, 64]
    assert hcfg.flat_len() == 64


def test_hyper_config_checks():
    with pytest.raises(ValueError, match="conv_kernel must be odd"):
        HyperConfig(conv_kernel=4)
    with pytest.raises(ValueError, match="not a multiple of conv_channels"):
        HyperConfig(hidden=[4, 8, 7], conv_channels=2)
    with pytest.raises(ValueError, match="above the upper bound"):
        HyperConfig(dropout=0.99)
    # the split only matters when both stages run
    assert HyperConfig(hidden=[4, 8, 7], conv_channels=2, use_cnn=False).flat_len() == 7


def test_slots_cover_body_kernels(star_cfg):
    slots = target_slots(star_cfg)
    assert [slot.name for slot in slots] == [
        "block0.conv0.weight",
        "block0.deconv.weight",
        "block1.conv0.weight",
        "block1.deconv.weight",
    ]
    assert slots[2].shape == (2, 10, 3, 3)
    assert theta_len(star_cfg) == 54 + 64 + 180 + 64


def test_build_layout(model, star_cfg):
    assert "block0.conv0.weight" not in model
    assert "block0.conv0.bias" in model
    assert "block1.head.weight" in model
    assert model[f"{PREFIX}.out.weight"].shape == (theta_len(star_cfg), 8)
    assert model[f"{PREFIX}.conv0.weight"].shape == (2, 2, 3)
    assert model[f"{PREFIX}.conv1.slope"].data.tolist() == [0.25, 0.25]
    assert not model[f"{PREFIX}.param_mean"].requires_grad


def test_build_is_deterministic(hyper_cfg, star_cfg):
    first, second = build_hyperflint(hyper_cfg, star_cfg, 5), build_hyperflint(hyper_cfg, star_cfg, 5)
    for name in first:
        np.testing.assert_array_equal(first[name].data, second[name].data)
    other = build_hyperflint(hyper_cfg, star_cfg, 6)
    assert not np.array_equal(first[f"{PREFIX}.out.bias"].data, other[f"{PREFIX}.out.bias"].data)


def test_untrained_theta_is_near_regular_init(model, star_cfg):
    bias = model[f"{PREFIX}.out.bias"].data
    first = hypernet_forward(model, [0.5, 0.0]).data
    second = hypernet_forward(model, [1.5, 0.3]).data
    assert first.shape == (theta_len(star_cfg),)
    assert np.linalg.norm(first - bias) < 0.5 * np.linalg.norm(bias)
    assert not np.array_equal(first, second)


def test_dropout_only_with_rng(hyper_cfg, star_cfg):
    params = build_hyperflint(hyper_cfg.replace(dropout=0.5), star_cfg, 0)
    np.testing.assert_array_equal(hypernet_forward(params, [1.0, 0.0]).data, hypernet_forward(params, [1.0, 0.0]).data)
    noisy = hypernet_forward(params, [1.0, 0.0], np.random.default_rng(3)).data
    assert not np.array_equal(noisy, hypernet_forward(params, [1.0, 0.0]).data)


@pytest.mark.parametrize("use_mlp,use_cnn", [(False, True), (True, False), (False, False)])
def test_ablated_hypernetworks(star_cfg, use_mlp, use_cnn):
    hcfg = HyperConfig(hidden=[4, 8, 8], conv_channels=2, use_mlp=use_mlp, use_cnn=use_cnn)
    params = build_hyperflint(hcfg, star_cfg, 0)
    assert (f"{PREFIX}.fc0.weight" in params) == use_mlp
    assert (f"{PREFIX}.conv0.weight" in params) == use_cnn
    assert hypernet_forward(params, [0.2, 0.1]).shape == (theta_len(star_cfg),)


def test_standardization(model):
    set_standardization(model, np.array([[0.0, 1.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(model[f"{PREFIX}.param_mean"].data, [1.0, 1.0])
    np.testing.assert_array_equal(model[f"{PREFIX}.param_std"].data, [1.0, 1.0])
    raw = hypernet_forward(model, [3.0, 1.0]).data
    set_standardization(model, np.array([[0.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(hypernet_forward(model, [2.0, 0.0]).data, raw)


def test_input_contracts(model, star_cfg):
    with pytest.raises(ValueError, match="expected 2 simulation parameters, got 3"):
        hypernet_forward(model, [1.0, 2.0, 3.0])
    theta = hypernet_forward(model, [1.0, 0.0])
    with pytest.raises(ValueError, match="the slots need"):
        slice_theta(theta, star_cfg.replace(channels=[2, 3]))
    with pytest.raises(ValueError, match="need at least two parameter sets"):
        weight_similarity_matrix(model, [[1.0, 0.0]])
    with pytest.raises(ValueError, match="out of range"):
        sweep([1.0, 0.0], 2, [0.1])


def test_slice_theta_shapes(model, star_cfg):
    kernels = slice_theta(hypernet_forward(model, [1.0, 0.0]), star_cfg)
    assert {name: k.shape for name, k in kernels.items()} == {s.name: s.shape for s in target_slots(star_cfg)}


def test_forward_and_infer(model, frames):
    d_s, d_u, _ = frames
    theta = hypernet_forward(model, [1.0, 0.0])
    result = flintstar_forward(model, theta, d_s, d_u, 0.5)
    assert len(result.states) == 2
    assert result.prediction.shape == (1, 8, 8)
    assert result.flow.shape == (2, 8, 8)
    pred, flow = hyper_infer(model, [1.0, 0.0], d_s.data, d_u.data, 0.5)
    np.testing.assert_allclose(pred.values, result.prediction.data[0])
    assert flow.dims == (8, 8)


def test_checkpoint_keeps_hyper_buffers(tmp_path, model, frames):
    set_standardization(model, np.array([[0.0, 1.0], [2.0, 3.0]]))
    save_checkpoint(model, tmp_path / "model.flc")
    loaded = load_checkpoint(tmp_path / "model.flc", FlintStarConfig, HyperConfig).params
    np.testing.assert_allclose(loaded[f"{PREFIX}.param_mean"].data, [1.0, 2.0])
    d_s, d_u, _ = frames
    before, _ = hyper_infer(model, [0.5, 0.5], d_s, d_u, 0.25)
    after, _ = hyper_infer(loaded, [0.5, 0.5], d_s, d_u, 0.25)
    np.testing.assert_allclose(after.values, before.values, atol=1e-5)


def test_weight_similarity_matrix(model):
    points = sweep([1.0, 0.0], 0, [0.5, 1.0, 1.5, 2.0])
    dist = weight_similarity_matrix(model, points)
    assert dist.shape == (4, 4)
    np.testing.assert_array_equal(np.diag(dist), 0.0)
    np.testing.assert_allclose(dist, dist.T)
    assert theta_matrix(model, points).shape[0] == 4


def test_sweep():
    points = sweep([1.0, 2.0, 3.0], 1, [5.0, 6.0])
    assert [p.tolist() for p in points] == [[1.0, 5.0, 3.0], [1.0, 6.0, 3.0]]


def test_neighbor_agreement():
    dist = squareform(pdist(np.random.default_rng(0).random((6, 3))))
    assert neighbor_agreement(dist, dist) == 1.0
    # the caller's diagonal is left alone
    assert np.all(np.diag(dist) == 0.0)


def test_triplet_agreement_bounds():
    dist = squareform(pdist(np.random.default_rng(1).random((8, 2))))
    assert triplet_agreement(dist, dist, 200, np.random.default_rng(0)) == 1.0
    assert triplet_agreement(dist, -dist, 200, np.random.default_rng(0)) == 0.0
    with pytest.raises(ValueError, match="at least 3 members"):
        triplet_agreement(dist[:2, :2], dist[:2, :2], 10, np.random.default_rng(0))
    ties = np.ones((3, 3)) - np.eye(3)
    with pytest.raises(ValueError, match="tie for every sampled triplet"):
        triplet_agreement(ties, ties, 5, np.random.default_rng(0))


def test_triplet_correlation(model):
    cfg = SynthConfig(dims=[16, 16], n_timesteps=3, n_members=4, speeds=[0.25, 0.5, 0.75, 1.0], seed=2)
    dataset = normalize_ensemble(synth_ensemble(cfg)).grid
    score = triplet_correlation(model, dataset, n_triplets=50)
    assert 0.0 <= score <= 1.0
    with pytest.raises(ValueError, match="needs at least 3 members"):
        triplet_correlation(model, dataset.subset([0, 1]))


@pytest.mark.parametrize("name", [f"{PREFIX}.fc0.weight", f"{PREFIX}.conv1.bias", "block1.head.weight"])
def test_composite_gradients(model, frames, name):
    d_s, d_u, d_gt = frames

    def loss(_):
        theta = hypernet_forward(model, [0.7, 0.2])
        return sum_(square(sub(flintstar_forward(model, theta, d_s, d_u, 0.4).prediction, d_gt)))

    assert grad_check(loss, [model[name]]) < 1e-4
