"""Model components: extractor oracle, fusion, decoders, slot equivariance."""
from __future__ import annotations

import numpy as np
import pytest

from streamdiar.autodiff import Tensor
from streamdiar.model import (DiarizationModel, Extractor, ModelError,
                              fuse_keys, fuse_queries, make_onehot, unit_rows)
from streamdiar.nn import Linear, sinusoidal_positions
from streamdiar.rng import stream

from helpers import param_grad_err, tiny_model, tiny_model_config

RNG = np.random.default_rng


# ======================================================================
# Extractor against a loop-based numpy re-implementation
# ======================================================================

def _np_silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _np_extractor(ext: Extractor, feats: np.ndarray) -> np.ndarray:
    """Independent forward pass: explicit loops, no shared tensor code."""
    x = feats
    for w, b in zip(ext.convs_w, ext.convs_b):
        kernel, _, c_out = w.data.shape
        pad_left = (kernel - 1) // 2
        padded = np.pad(x, ((pad_left, kernel - 1 - pad_left), (0, 0)))
        out = np.zeros((x.shape[0], c_out))
        for t in range(x.shape[0]):
            for j in range(kernel):
                out[t] += padded[t + j] @ w.data[j]
            out[t] += b.data
        x = _np_silu(out)
    seg = ext.cfg.ssp_segment
    groups = x.reshape(x.shape[0] // seg, seg, x.shape[1])
    mean = groups.mean(axis=1)
    var = ((groups - groups.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    pooled = np.concatenate([mean, np.sqrt(var + 1e-10)], axis=-1)
    return pooled @ ext.proj.weight.data + ext.proj.bias.data


def test_extractor_matches_numpy_reimplementation(model):
    feats = RNG(0).normal(size=(12, model.cfg.n_mels))
    ours = model.extract_frames(feats).data
    oracle = _np_extractor(model.extractor, feats)
    np.testing.assert_allclose(ours, oracle, atol=1e-10)


def test_extractor_downsamples_by_segment(model):
    feats = RNG(1).normal(size=(20, model.cfg.n_mels))
    out = model.extract_frames(feats)
    assert out.shape == (20 // model.cfg.ssp_segment, model.cfg.dim)


def test_extractor_rejects_indivisible_frame_count(model):
    feats = RNG(2).normal(size=(13, model.cfg.n_mels))
    with pytest.raises(ModelError):
        model.extract_frames(feats)


def test_extract_frames_rejects_wrong_mel_count(model):
    feats = RNG(3).normal(size=(12, model.cfg.n_mels + 1))
    with pytest.raises(ModelError):
        model.extract_frames(feats)


def test_extractor_segment_one_keeps_length_and_constant_std():
    m = tiny_model(seed=5, ssp_segment=1)
    feats = RNG(4).normal(size=(10, m.cfg.n_mels))
    out = m.extract_frames(feats).data
    assert out.shape == (10, m.cfg.dim)
    # With one frame per segment the variance is exactly zero, so the std
    # half of the pooled vector collapses to the constant sqrt(1e-10).
    x = feats
    ext = m.extractor
    for w, b in zip(ext.convs_w, ext.convs_b):
        kernel = w.data.shape[0]
        pad_left = (kernel - 1) // 2
        padded = np.pad(x, ((pad_left, kernel - 1 - pad_left), (0, 0)))
        conv = sum(padded[j:j + x.shape[0]] @ w.data[j] for j in range(kernel))
        x = _np_silu(conv + b.data)
    pooled = np.concatenate([x, np.full_like(x, np.sqrt(1e-10))], axis=-1)
    expected = pooled @ ext.proj.weight.data + ext.proj.bias.data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_extractor_silence_is_finite(model):
    out = model.extract_frames(np.zeros((12, model.cfg.n_mels))).data
    assert np.all(np.isfinite(out))


# ======================================================================
# Encoder
# ======================================================================

def test_encoder_preserves_shape(model):
    x = Tensor(RNG(5).normal(size=(10, model.cfg.dim)))
    assert model.encode(x).data.shape == (10, model.cfg.dim)


def test_encoder_positions_match_sinusoidal_table(model):
    pos = model.encoder.positions(17)
    expected = sinusoidal_positions(17, model.cfg.dim, model.cfg.pos_wavelength)
    np.testing.assert_array_equal(pos, expected)
    assert model.encoder.positions(17) is pos  # cached


def test_encoder_deterministic(model):
    x = RNG(6).normal(size=(8, model.cfg.dim))
    a = model.encode(Tensor(x.copy())).data
    b = model.encode(Tensor(x.copy())).data
    assert np.array_equal(a, b)


# ======================================================================
# Query/key fusion
# ======================================================================

def test_fuse_queries_zero_aux_is_identity():
    proj = Linear(6, 8, RNG(7), bias=False)
    x = RNG(8).normal(size=(3, 8))
    fused = fuse_queries(Tensor(x), Tensor(np.zeros((3, 6))), proj)
    np.testing.assert_array_equal(fused.data, x)


def test_fuse_queries_hand_case_dim_four():
    # With dim 4 the additive term is projected aux divided by exactly 2.
    proj = Linear(4, 4, RNG(9), bias=False)
    x = RNG(10).normal(size=(2, 4))
    aux = RNG(11).normal(size=(2, 4))
    fused = fuse_queries(Tensor(x), Tensor(aux), proj)
    np.testing.assert_allclose(fused.data - x, (aux @ proj.weight.data) / 2.0,
                               atol=1e-12)


def test_fuse_keys_hand_case_dim_four():
    proj = Linear(4, 4, RNG(12), bias=False)
    x = RNG(13).normal(size=(5, 4))
    pos = RNG(14).normal(size=(5, 4))
    fused = fuse_keys(Tensor(x), Tensor(pos), proj)
    np.testing.assert_allclose(fused.data - x, (pos @ proj.weight.data) / 2.0,
                               atol=1e-12)


def test_fuse_scaling_is_linear_in_projection():
    proj = Linear(4, 4, RNG(15), bias=False)
    x = np.zeros((2, 4))
    aux = RNG(16).normal(size=(2, 4))
    once = fuse_queries(Tensor(x), Tensor(aux), proj).data.copy()
    proj.weight.data = proj.weight.data * 2.0
    twice = fuse_queries(Tensor(x), Tensor(aux), proj).data
    np.testing.assert_allclose(twice, 2.0 * once, atol=1e-12)


# ======================================================================
# Detection head
# ======================================================================

def test_detect_shape_and_open_interval(model):
    z = model.encode(model.extract_frames(RNG(17).normal(size=(12, model.cfg.n_mels))))
    emb = RNG(18).normal(size=(model.cfg.capacity, model.cfg.emb_dim))
    probs = model.detect(z, emb).data
    assert probs.shape == (model.cfg.capacity, model.cfg.out_frames)
    assert np.all(probs > 0.0) and np.all(probs < 1.0)


def test_detect_slot_permutation_equivariance(model):
    z = model.encode(model.extract_frames(RNG(19).normal(size=(12, model.cfg.n_mels))))
    for case in range(5):
        emb = RNG(20 + case).normal(size=(model.cfg.capacity, model.cfg.emb_dim))
        perm = RNG(30 + case).permutation(model.cfg.capacity)
        base = model.detect(z, emb).data
        permuted = model.detect(z, emb[perm]).data
        assert np.max(np.abs(permuted - base[perm])) < 1e-9


def test_detect_embedding_scale_invariance(model):
    z = model.encode(model.extract_frames(RNG(40).normal(size=(12, model.cfg.n_mels))))
    emb = RNG(41).normal(size=(model.cfg.capacity, model.cfg.emb_dim))
    a = model.detect(z, emb).data
    b = model.detect(z, 5.0 * emb).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_detect_accepts_zero_embedding_rows(model):
    z = model.encode(model.extract_frames(RNG(42).normal(size=(12, model.cfg.n_mels))))
    emb = np.zeros((model.cfg.capacity, model.cfg.emb_dim))
    probs = model.detect(z, emb).data
    assert np.all(np.isfinite(probs))


def test_detect_batched_matches_loop(model):
    feats = RNG(43).normal(size=(2, 12, model.cfg.n_mels))
    emb = RNG(44).normal(size=(2, model.cfg.capacity, model.cfg.emb_dim))
    z = model.encode(model.extract_frames(feats))
    batched = model.detect(z, emb).data
    for i in range(2):
        zi = model.encode(model.extract_frames(feats[i]))
        single = model.detect(zi, emb[i]).data
        np.testing.assert_allclose(batched[i], single, atol=1e-11)


def test_single_slot_detection_runs(model):
    z = model.encode(model.extract_frames(RNG(45).normal(size=(12, model.cfg.n_mels))))
    probs = model.detect(z, RNG(46).normal(size=(1, model.cfg.emb_dim))).data
    assert probs.shape == (1, model.cfg.out_frames)


# ======================================================================
# Representation head
# ======================================================================

def test_represent_rows_unit_norm(model):
    x = model.extract_frames(RNG(47).normal(size=(12, model.cfg.n_mels)))
    y = RNG(48).uniform(size=(model.cfg.capacity, model.cfg.out_frames))
    emb = model.represent(x, y).data
    assert emb.shape == (model.cfg.capacity, model.cfg.emb_dim)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=-1), 1.0, atol=1e-9)


def test_represent_slot_permutation_equivariance(model):
    x = model.extract_frames(RNG(49).normal(size=(12, model.cfg.n_mels)))
    y = RNG(50).uniform(size=(model.cfg.capacity, model.cfg.out_frames))
    perm = RNG(51).permutation(model.cfg.capacity)
    base = model.represent(x, y).data
    permuted = model.represent(x, y[perm]).data
    assert np.max(np.abs(permuted - base[perm])) < 1e-9


def test_pool_activity_exact_means(model):
    width = model.cfg.aux_pool_width
    stride = 3
    y = RNG(52).uniform(size=(2, width * stride))
    pooled = model.pool_activity(Tensor(y)).data
    expected = y.reshape(2, width, stride).mean(axis=-1)
    np.testing.assert_allclose(pooled, expected, atol=1e-12)


def test_pool_activity_pads_with_zeros(model):
    width = model.cfg.aux_pool_width
    t = width + 1  # stride 2 after padding to 2 * width
    y = np.ones((1, t))
    pooled = model.pool_activity(Tensor(y)).data
    # Groups of two frames: four full ones, one half one, the rest padding.
    expected = np.zeros((1, width))
    expected[0, : t // 2] = 1.0
    expected[0, t // 2] = 0.5
    np.testing.assert_allclose(pooled, expected, atol=1e-12)


# ======================================================================
# Table operations
# ======================================================================

def test_lookup_matches_indexing(model):
    ids = [0, 3, 5, 3]
    onehot = make_onehot(ids, model.cfg.n_table)
    via_matmul = model.lookup(onehot).data
    via_index = model.table.data[ids]
    np.testing.assert_array_equal(via_matmul, via_index)


def test_lookup_soft_weights(model):
    w = np.zeros((1, model.cfg.n_table))
    w[0, 1], w[0, 2] = 0.25, 0.75
    out = model.lookup(w).data
    expected = 0.25 * model.table.data[1] + 0.75 * model.table.data[2]
    np.testing.assert_allclose(out[0], expected, atol=1e-12)


def test_make_onehot_rows():
    oh = make_onehot([2, 0], 4)
    np.testing.assert_array_equal(oh, [[0, 0, 1, 0], [1, 0, 0, 0]])


def test_table_initialized_unit_rows(model):
    norms = np.linalg.norm(model.table.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    assert np.all(model.emb_pseudo.data == 0.0)
    assert np.all(model.emb_nonspeech.data == 0.0)


def test_renormalize_table_restores_unit_rows():
    m = tiny_model(seed=6)
    m.table.data = m.table.data * RNG(53).uniform(0.5, 2.0, size=(m.cfg.n_table, 1))
    m.renormalize_table()
    np.testing.assert_allclose(np.linalg.norm(m.table.data, axis=1), 1.0, atol=1e-9)


def test_renormalize_table_leaves_zero_rows():
    m = tiny_model(seed=7)
    m.table.data[0] = 0.0
    m.renormalize_table()
    assert np.all(m.table.data[0] == 0.0)


def test_unit_rows_zero_row_passthrough():
    x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
    out = unit_rows(x).data
    np.testing.assert_array_equal(out[0], [0.0, 0.0])
    np.testing.assert_allclose(out[1], [0.6, 0.8], atol=1e-9)


# ======================================================================
# Persistence and gradients
# ======================================================================

def test_state_roundtrip_bitwise():
    m = tiny_model(seed=8)
    state = m.state()
    feats = RNG(54).normal(size=(12, m.cfg.n_mels))
    emb = RNG(55).normal(size=(m.cfg.capacity, m.cfg.emb_dim))
    before = m.detect(m.encode(m.extract_frames(feats)), emb).data
    for p in m.params().values():
        p.data = p.data + 0.1
    m.load_state(state)
    after = m.detect(m.encode(m.extract_frames(feats)), emb).data
    assert np.array_equal(before, after)


def test_detection_path_gradients():
    m = tiny_model(seed=9, out_frames=10)
    feats = Tensor(RNG(56).normal(size=(8, m.cfg.n_mels)))
    emb = RNG(57).normal(size=(m.cfg.capacity, m.cfg.emb_dim))

    def loss():
        z = m.encode(m.extract_frames(feats))
        return (m.detect(z, emb) ** 2.0).sum()

    assert param_grad_err(loss, m.params(), eps=1e-3, sample=3) < 1e-3


def test_representation_path_gradients():
    m = tiny_model(seed=10, out_frames=10)
    feats = Tensor(RNG(58).normal(size=(8, m.cfg.n_mels)))
    y = RNG(59).uniform(size=(m.cfg.capacity, 10))

    def loss():
        x = m.extract_frames(feats)
        target = Tensor(RNG(60).normal(size=(m.cfg.capacity, m.cfg.emb_dim)))
        return ((m.represent(x, y) - target) ** 2.0).sum()

    assert param_grad_err(loss, m.params(), eps=1e-3, sample=3) < 1e-3
