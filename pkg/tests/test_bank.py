"""FIFO image bank: eviction, companion selection, batched prediction."""

import numpy as np
import pytest

from dgseg.bank import ImageBank
from dgseg.network import NetworkConfig, NormMode, extract_query_style, forward, init_params
from dgseg.normstats import StyleSignature, symmetric_kl
from dgseg.tensor import no_grad


def _style(rng, c=3):
    return StyleSignature(rng.normal(size=c), rng.uniform(0.2, 2.0, c))


def _image(rng, c=3, h=4, w=4):
    return rng.uniform(0, 1, (1, c, h, w)).astype(np.float32)


def test_constructor_validation():
    with pytest.raises(ValueError):
        ImageBank(0)
    with pytest.raises(ValueError):
        ImageBank(4, policy="lru")


def test_push_validation():
    rng = np.random.default_rng(0)
    bank = ImageBank(4)
    with pytest.raises(ValueError):
        bank.push(np.zeros((2, 3, 4, 4)), _style(rng))
    bank.push(_image(rng), _style(rng, 3))
    with pytest.raises(ValueError):
        bank.push(_image(rng), _style(rng, 5))


def test_fifo_keeps_last_capacity_entries():
    rng = np.random.default_rng(1)
    q = 5
    bank = ImageBank(q)
    for _ in range(q + 3):
        bank.push(_image(rng), _style(rng))
    assert len(bank) == q
    assert [e.arrival_index for e in bank.entries] == [3, 4, 5, 6, 7]


def test_qib_selects_most_recent():
    rng = np.random.default_rng(2)
    bank = ImageBank(8, policy="qib")
    for _ in range(6):
        bank.push(_image(rng), _style(rng))
    picked = bank.select(_style(rng), 3)
    assert [e.arrival_index for e in picked] == [3, 4, 5]


def test_sib_matches_full_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        size = int(rng.integers(1, 20))
        bank = ImageBank(32)
        for _ in range(size):
            bank.push(_image(rng), _style(rng))
        query = _style(rng)
        m = int(rng.integers(0, size + 2))
        picked = bank.select(query, m)
        dists = [(symmetric_kl(e.style, query), e.arrival_index) for e in bank.entries]
        oracle = [i for _, i in sorted(dists)][: min(m, size)]
        assert [e.arrival_index for e in picked] == oracle


def test_sib_tie_break_prefers_older():
    rng = np.random.default_rng(4)
    bank = ImageBank(8)
    shared = _style(rng)
    for _ in range(4):
        bank.push(_image(rng), StyleSignature(shared.mu.copy(), shared.sigma.copy()))
    picked = bank.select(_style(rng), 2)
    assert [e.arrival_index for e in picked] == [0, 1]


def test_select_edge_cases():
    rng = np.random.default_rng(5)
    bank = ImageBank(4)
    assert bank.select(_style(rng), 3) == []
    bank.push(_image(rng), _style(rng))
    assert bank.select(_style(rng), 0) == []
    assert len(bank.select(_style(rng), 10)) == 1
    with pytest.raises(ValueError):
        bank.select(_style(rng), -1)


def test_selection_ignores_domain_tags():
    rng = np.random.default_rng(6)
    styles = [_style(rng) for _ in range(6)]
    images = [_image(rng) for _ in range(6)]
    query = _style(rng)
    tagged = ImageBank(8)
    plain = ImageBank(8)
    for i, (img, sty) in enumerate(zip(images, styles)):
        tagged.push(img, StyleSignature(sty.mu.copy(), sty.sigma.copy()), domain_tag=i % 2)
        plain.push(img, StyleSignature(sty.mu.copy(), sty.sigma.copy()))
    a = [e.arrival_index for e in tagged.select(query, 3)]
    b = [e.arrival_index for e in plain.select(query, 3)]
    assert a == b


def test_predict_pushes_after_prediction():
    params = init_params(NetworkConfig(widths=(4,), num_classes=3), seed=0)
    rng = np.random.default_rng(7)
    bank = ImageBank(4)
    pred, selected = bank.predict_with_bank(_image(rng, h=6, w=6), params, m=2)
    assert selected == []  # empty bank: image normalized alone
    assert len(bank) == 1
    pred2, selected2 = bank.predict_with_bank(_image(rng, h=6, w=6), params, m=2)
    assert len(selected2) == 1 and selected2[0].arrival_index == 0
    assert len(bank) == 2
    for p in (pred, pred2):
        assert p.shape == (6, 6) and p.dtype == np.int64


def test_predict_matches_manual_batch_forward():
    config = NetworkConfig(widths=(4, 5), num_classes=3)
    params = init_params(config, seed=1)
    rng = np.random.default_rng(8)
    bank = ImageBank(8)
    images = [_image(rng, h=6, w=6) for _ in range(5)]
    for img in images[:4]:
        bank.predict_with_bank(img, params, m=2)
    query = images[4]
    expected_sel = bank.select(extract_query_style(params, query), 2)
    batch = np.concatenate([query] + [e.image for e in expected_sel])
    with no_grad():
        logits, _, _ = forward(params, batch, NormMode.TARGET_SPECIFIC)
    expected = np.argmax(logits.data[0], axis=0).astype(np.int64)
    pred, _ = bank.predict_with_bank(query, params, m=2)
    np.testing.assert_array_equal(pred, expected)


def test_predict_m_zero_is_single_image_forward():
    params = init_params(NetworkConfig(widths=(4,), num_classes=3), seed=2)
    rng = np.random.default_rng(9)
    bank = ImageBank(4)
    for _ in range(3):
        bank.push(_image(rng, h=6, w=6), _style(rng, 4))
    img = _image(rng, h=6, w=6)
    pred, selected = bank.predict_with_bank(img, params, m=0)
    assert selected == []
    with no_grad():
        logits, _, _ = forward(params, img, NormMode.TARGET_SPECIFIC)
    np.testing.assert_array_equal(pred, np.argmax(logits.data[0], axis=0))


def test_dump_rows():
    rng = np.random.default_rng(10)
    bank = ImageBank(4)
    bank.push(_image(rng), StyleSignature(np.array([0.5, -1.0]), np.array([1.0, 2.0])), 3)
    bank.push(_image(rng), _style(rng, 2))
    rows = bank.dump_rows()
    assert len(rows) == 2
    assert rows[0]["arrival_index"] == 0
    assert rows[0]["style_mu"] == "0.5;-1.0"
    assert rows[0]["domain_tag"] == 3
    assert rows[1]["domain_tag"] == ""
