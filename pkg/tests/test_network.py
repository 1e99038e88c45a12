"""Network forward modes, parameter handling, style extraction, checkpoints."""

import numpy as np
import pytest

from dgseg.network import (
    NetworkConfig,
    NormMode,
    extract_query_style,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from dgseg.normstats import BatchStats
from dgseg.ops import conv2d, pixel_cross_entropy
from dgseg.tensor import Tensor, backward


CONFIG = NetworkConfig(widths=(4, 6), num_classes=3)


def _batch(rng, n=2, c=3, h=8, w=8):
    return rng.uniform(0, 1, (n, c, h, w)).astype(np.float32)


def _oracle_forward(params, batch):
    # independent normalization: explicit per-channel loops over batch moments
    config = params.config
    h = batch.astype(np.float32)
    for i in range(len(config.widths)):
        kernel = params.tensors[f"conv{i}.kernel"]
        bias = params.tensors[f"conv{i}.bias"]
        h = conv2d(Tensor(h), kernel, bias).data
        out = np.empty_like(h)
        weight = params.tensors[f"norm{i}.weight"].data
        beta = params.tensors[f"norm{i}.bias"].data
        for ch in range(h.shape[1]):
            vals = h[:, ch, :, :]
            m = vals.mean(dtype=np.float64)
            v = vals.astype(np.float64).var()
            normed = (vals - m) / np.sqrt(v + config.norm_eps)
            out[:, ch] = normed * weight[ch] + beta[ch]
        h = np.maximum(out, 0.0)
    logits = conv2d(
        Tensor(h), params.tensors["classifier.kernel"], params.tensors["classifier.bias"]
    )
    return logits.data


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(widths=())
    with pytest.raises(ValueError):
        NetworkConfig(kernel_size=4)
    with pytest.raises(ValueError):
        NetworkConfig(style_layer_index=0)
    with pytest.raises(ValueError):
        NetworkConfig(widths=(4,), style_layer_index=2)
    assert CONFIG.with_style_layer(2).style_layer_index == 2


def test_init_params_shapes_and_determinism():
    params = init_params(CONFIG, seed=0)
    assert params.tensors["conv0.kernel"].data.shape == (4, 3, 3, 3)
    assert params.tensors["conv1.kernel"].data.shape == (6, 4, 3, 3)
    assert params.tensors["classifier.kernel"].data.shape == (3, 6, 1, 1)
    np.testing.assert_allclose(params.tensors["norm0.weight"].data, 1.0)
    np.testing.assert_allclose(params.tensors["conv0.bias"].data, 0.0)
    again = init_params(CONFIG, seed=0)
    for name in params.tensors:
        np.testing.assert_array_equal(params.tensors[name].data, again.tensors[name].data)
    other = init_params(CONFIG, seed=1)
    assert not np.array_equal(
        params.tensors["conv0.kernel"].data, other.tensors["conv0.kernel"].data
    )


def test_theta_phi_partition():
    params = init_params(CONFIG, seed=0)
    theta, phi = params.theta(), params.phi()
    assert set(phi) == {"classifier.kernel", "classifier.bias"}
    assert "norm0.weight" in theta and "conv1.bias" in theta
    assert set(theta) | set(phi) == set(params.tensors)
    assert not set(theta) & set(phi)


def test_forward_output_shapes():
    params = init_params(CONFIG, seed=0)
    x = _batch(np.random.default_rng(0))
    logits, style, layer_stats = forward(params, x, NormMode.TRAIN_BATCH)
    assert logits.data.shape == (2, 3, 8, 8)
    assert np.all(np.isfinite(logits.data))
    assert style.mu.shape == (4,)  # style layer 1 -> first block width
    assert len(layer_stats) == 2
    assert layer_stats[1].mean.shape == (6,)


def test_train_batch_equals_target_specific_forward():
    params = init_params(CONFIG, seed=0)
    x = _batch(np.random.default_rng(1))
    a, _, _ = forward(params, x, NormMode.TRAIN_BATCH)
    b, _, _ = forward(params, x, NormMode.TARGET_SPECIFIC)
    np.testing.assert_array_equal(a.data, b.data)


def test_target_specific_matches_explicit_loop_oracle():
    params = init_params(CONFIG, seed=3)
    x = _batch(np.random.default_rng(2), n=3)
    logits, _, _ = forward(params, x, NormMode.TARGET_SPECIFIC)
    np.testing.assert_allclose(logits.data, _oracle_forward(params, x), atol=1e-6)


def test_source_running_differs_and_uses_stored_stats():
    params = init_params(CONFIG, seed=0)
    x = _batch(np.random.default_rng(3))
    run, _, _ = forward(params, x, NormMode.SOURCE_RUNNING)
    tgt, _, _ = forward(params, x, NormMode.TARGET_SPECIFIC)
    assert not np.allclose(run.data, tgt.data)
    # force running stats to the batch stats of this input; modes then agree
    _, _, layer_stats = forward(params, x, NormMode.TARGET_SPECIFIC)
    for i, s in enumerate(layer_stats):
        state = params.norm_state(i)
        state.running_mean[:] = s.mean
        state.running_var[:] = s.var
    run2, _, _ = forward(params, x, NormMode.SOURCE_RUNNING)
    np.testing.assert_allclose(run2.data, tgt.data, atol=1e-5)


def test_external_stats_mode():
    params = init_params(CONFIG, seed=0)
    x = _batch(np.random.default_rng(4))
    _, _, layer_stats = forward(params, x, NormMode.TARGET_SPECIFIC)
    ext, _, _ = forward(params, x, NormMode.EXTERNAL_STATS, external_stats=layer_stats)
    tgt, _, _ = forward(params, x, NormMode.TARGET_SPECIFIC)
    np.testing.assert_allclose(ext.data, tgt.data, atol=1e-5)
    with pytest.raises(ValueError):
        forward(params, x, NormMode.EXTERNAL_STATS)


def test_running_stats_update_only_when_requested():
    params = init_params(CONFIG, seed=0)
    x = _batch(np.random.default_rng(5))
    before = [(params.running[i].mean.copy(), params.running[i].var.copy()) for i in range(2)]
    forward(params, x, NormMode.TARGET_SPECIFIC)
    forward(params, x, NormMode.TRAIN_BATCH, update_running=False)
    for i, (m, v) in enumerate(before):
        np.testing.assert_array_equal(params.running[i].mean, m)
        np.testing.assert_array_equal(params.running[i].var, v)
    forward(params, x, NormMode.TRAIN_BATCH, update_running=True)
    assert not np.array_equal(params.running[0].mean, before[0][0])


def test_style_matches_prenorm_stats_of_style_layer():
    params = init_params(CONFIG, seed=0)
    x = _batch(np.random.default_rng(6))
    _, style, layer_stats = forward(params, x, NormMode.TARGET_SPECIFIC)
    s = layer_stats[CONFIG.style_layer_index - 1]
    np.testing.assert_allclose(style.mu, s.mean, atol=1e-12)
    np.testing.assert_allclose(style.sigma, np.sqrt(s.var + CONFIG.norm_eps), atol=1e-12)


def test_extract_query_style_matches_forward():
    for layer in (1, 2):
        config = CONFIG.with_style_layer(layer)
        params = init_params(config, seed=0)
        image = _batch(np.random.default_rng(7), n=1)
        _, style, _ = forward(params, image, NormMode.TARGET_SPECIFIC)
        q = extract_query_style(params, image)
        np.testing.assert_allclose(q.mu, style.mu, atol=1e-6)
        np.testing.assert_allclose(q.sigma, style.sigma, atol=1e-6)


def test_gradients_cover_all_parameters():
    params = init_params(CONFIG, seed=0)
    rng = np.random.default_rng(8)
    x = _batch(rng)
    labels = rng.integers(0, 3, (2, 8, 8)).astype(np.int64)
    logits, _, _ = forward(params, x, NormMode.TRAIN_BATCH)
    loss = pixel_cross_entropy(logits, labels)
    grads = backward(loss, params.tensors)
    for name, p in params.tensors.items():
        g = grads[name]
        assert g.data.shape == p.data.shape
        assert np.all(np.isfinite(g.data))
    assert np.any(grads["classifier.bias"].data != 0)
    assert np.any(grads["conv0.kernel"].data != 0)


def test_replace_shares_running_clone_does_not():
    params = init_params(CONFIG, seed=0)
    swapped = params.replace({"conv0.bias": Tensor(np.ones(4, dtype=np.float32))})
    assert swapped.running[0] is params.running[0]
    np.testing.assert_allclose(swapped.tensors["conv0.bias"].data, 1.0)
    cloned = params.clone()
    cloned.running[0].mean[:] = 9.0
    assert not np.array_equal(params.running[0].mean, cloned.running[0].mean)


def test_astype_and_param_count():
    params = init_params(CONFIG, seed=0)
    doubled = params.astype(np.float64)
    assert doubled.dtype == np.float64
    assert doubled.n_params == params.n_params
    expected = (4 * 3 * 9 + 4 + 4 + 4) + (6 * 4 * 9 + 6 + 6 + 6) + (3 * 6 + 3)
    assert params.n_params == expected


def test_checkpoint_round_trip(tmp_path):
    params = init_params(CONFIG.with_style_layer(2), seed=5)
    x = _batch(np.random.default_rng(9))
    forward(params, x, NormMode.TRAIN_BATCH, update_running=True)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    for name in params.tensors:
        np.testing.assert_array_equal(
            loaded.tensors[name].data, params.tensors[name].data.astype(np.float32)
        )
    for i in range(2):
        np.testing.assert_allclose(loaded.running[i].mean, params.running[i].mean, atol=1e-7)
    a, _, _ = forward(params, x, NormMode.SOURCE_RUNNING)
    b, _, _ = forward(loaded, x, NormMode.SOURCE_RUNNING)
    np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_checkpoint_rejects_bad_magic_and_trailing_bytes(tmp_path):
    params = init_params(CONFIG, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    longer = tmp_path / "long.ckpt"
    longer.write_bytes(raw + b"\x00")
    with pytest.raises(ValueError):
        load_checkpoint(longer)
