"""Example assembly, the training step, stage loops, and distillation."""
from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import streamdiar.training as training
from streamdiar.autodiff import Tensor, concat, no_grad
from streamdiar.corpus import gen_corpus, simulate_mixture
from streamdiar.losses import arcface_loss, bce_loss, distill_loss
from streamdiar.model import Extractor
from streamdiar.optim import AdamW
from streamdiar.rng import stream
from streamdiar.training import (SLOT_DISTRACTOR, SLOT_NON_SPEECH, SLOT_PSEUDO,
                                 SLOT_REAL, TrainingError, assemble_example,
                                 build_context, input_selection, make_batch,
                                 run_distillation, run_stage, run_training,
                                 train_step, validate)

from helpers import (param_grad_err, tiny_feature_config, tiny_model,
                     tiny_model_config, tiny_run_config)

CAPACITY = 4
FEAT_CFG = tiny_feature_config()
SPEAKERS = gen_corpus(8, seed=77)
CANDIDATES = [s.global_id for s in SPEAKERS]


def _mixture(seed: int, n_spk: int = 2, synth: bool = False):
    return simulate_mixture(SPEAKERS[:n_spk], 0.96, stream(seed, "mix"),
                            synth=synth)


def _example(seed: int, n_spk: int = 2, mask_prob: float = 0.5,
             synth: bool = False):
    mix = simulate_mixture(SPEAKERS[:n_spk], 0.96, stream(seed, "mix"),
                           synth=synth)
    return mix, assemble_example(mix, stream(seed, "asm"), CAPACITY,
                                 CANDIDATES, FEAT_CFG, mask_prob)


# ======================================================================
# Example assembly
# ======================================================================

def test_example_has_exactly_one_pseudo_slot():
    for seed in range(20):
        _, ex = _example(seed)
        assert ex.slot_kinds.count(SLOT_PSEUDO) == 1
        assert len(ex.slot_kinds) == CAPACITY


def test_masked_pseudo_slot_takes_over_speaker():
    hits = 0
    for seed in range(40):
        mix, ex = _example(seed, mask_prob=1.0)
        assert ex.masked
        j = ex.slot_kinds.index(SLOT_PSEUDO)
        mask_id = ex.target_identity[j]
        assert mask_id in mix.refs
        np.testing.assert_array_equal(ex.target_va[j], mix.refs[mask_id])
        # The masked speaker must not also appear as a real slot.
        real_ids = [gid for kind, gid in zip(ex.slot_kinds, ex.slot_ids)
                    if kind == SLOT_REAL]
        assert mask_id not in real_ids
        hits += 1
    assert hits == 40


def test_unmasked_pseudo_slot_is_silent():
    for seed in range(20):
        _, ex = _example(seed, mask_prob=0.0)
        assert not ex.masked
        j = ex.slot_kinds.index(SLOT_PSEUDO)
        assert ex.target_identity[j] is None
        assert np.all(ex.target_va[j] == 0.0)


@given(st.integers(0, 10_000))
@settings(max_examples=40)
def test_slot_labels_consistent_under_shuffle(seed):
    mix, ex = _example(seed % 50, n_spk=(seed % 3) + 1)
    present = set(mix.refs)
    seen_real = set()
    for kind, gid, row, ident in zip(ex.slot_kinds, ex.slot_ids,
                                     ex.target_va, ex.target_identity):
        if kind == SLOT_REAL:
            assert gid in present
            np.testing.assert_array_equal(row, mix.refs[gid])
            assert ident == gid
            seen_real.add(gid)
        elif kind == SLOT_PSEUDO:
            if ex.masked:
                assert ident in present
                np.testing.assert_array_equal(row, mix.refs[ident])
            else:
                assert ident is None
                assert np.all(row == 0.0)
        else:
            assert np.all(row == 0.0)
            assert ident is None
            if kind == SLOT_DISTRACTOR:
                assert gid not in present
                assert gid in CANDIDATES
    masked_ids = {ex.target_identity[j] for j, k in enumerate(ex.slot_kinds)
                  if k == SLOT_PSEUDO and ex.masked}
    assert seen_real | masked_ids == present


def test_masking_and_padding_rates():
    n, masked = 2000, 0
    non_speech, distractor = 0, 0
    for seed in range(n):
        _, ex = _example(seed)
        masked += ex.masked
        non_speech += ex.slot_kinds.count(SLOT_NON_SPEECH)
        distractor += ex.slot_kinds.count(SLOT_DISTRACTOR)
    assert abs(masked / n - 0.5) < 0.05
    padded = non_speech + distractor
    assert padded > 0
    assert abs(non_speech / padded - 0.5) < 0.05


def test_capacity_too_small_raises():
    mix = _mixture(3, n_spk=3)
    with pytest.raises(TrainingError):
        assemble_example(mix, stream(0, "asm"), 3, CANDIDATES, FEAT_CFG)


def test_input_selection_columns():
    _, ex = _example(11)
    n_table = 12
    sel = input_selection(ex, n_table)
    assert sel.shape == (CAPACITY, n_table + 2)
    np.testing.assert_array_equal(sel.sum(axis=1), np.ones(CAPACITY))
    for j, (kind, gid) in enumerate(zip(ex.slot_kinds, ex.slot_ids)):
        col = int(np.flatnonzero(sel[j])[0])
        if kind in (SLOT_REAL, SLOT_DISTRACTOR):
            assert col == gid
        elif kind == SLOT_PSEUDO:
            assert col == n_table
        else:
            assert col == n_table + 1


# ======================================================================
# The optimization step
# ======================================================================

def _batch(seeds, mask_prob=0.5):
    return [_example(s, mask_prob=mask_prob)[1] for s in seeds]


def test_train_step_zero_lr_leaves_model_unchanged():
    m = tiny_model(seed=20)
    before = m.state()
    opt = AdamW(m.params(), lr=0.0)
    train_step(_batch([0, 1]), m, opt, tiny_run_config().training)
    after = m.state()
    for name in before:
        if name == "table":
            np.testing.assert_allclose(after[name], before[name], atol=1e-12)
        else:
            np.testing.assert_array_equal(after[name], before[name])


def test_train_step_batch_order_invariance():
    batch = _batch([5, 6, 7])
    reports = []
    for order in (batch, batch[::-1]):
        m = tiny_model(seed=21)
        opt = AdamW(m.params(), lr=0.0)
        reports.append(train_step(list(order), m, opt,
                                  tiny_run_config().training))
    assert reports[0]["total"] == pytest.approx(reports[1]["total"], rel=1e-12)
    assert reports[0]["arc_slots"] == reports[1]["arc_slots"]


def test_train_step_updates_parameters_and_keeps_table_unit():
    m = tiny_model(seed=22)
    before = m.state()
    opt = AdamW(m.params(), lr=1e-3)
    report = train_step(_batch([2, 3]), m, opt, tiny_run_config().training)
    assert np.isfinite(report["total"])
    changed = sum(int(not np.array_equal(m.params()[k].data, before[k]))
                  for k in before)
    assert changed > 0
    norms = np.linalg.norm(m.table.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_train_step_non_finite_features_name_the_example():
    m = tiny_model(seed=23)
    batch = _batch([8, 9])
    batch[1].features[0, 0] = np.nan
    opt = AdamW(m.params(), lr=1e-3)
    with pytest.raises(TrainingError, match="index 1"):
        train_step(batch, m, opt, tiny_run_config().training)


def test_overfitting_a_fixed_batch_reduces_loss():
    m = tiny_model(seed=24)
    batch = _batch([30, 31, 32, 33])
    opt = AdamW(m.params(), lr=3e-3)
    cfg = tiny_run_config().training
    totals = [train_step(batch, m, opt, cfg)["total"] for _ in range(200)]
    first = float(np.mean(totals[:10]))
    last = float(np.mean(totals[-10:]))
    assert last < first
    assert totals[-1] < 0.6 * totals[0]


def test_train_step_distillation_terms():
    cfg_model = tiny_model_config()
    m = tiny_model(seed=25)
    teacher = Extractor(cfg_model, stream(99, "teacher"))
    run_cfg = tiny_run_config()
    batch = _batch([40, 41])

    import dataclasses
    train_cfg = dataclasses.replace(run_cfg.training, distill_weight=0.0)
    m_ref = tiny_model(seed=25)
    opt = AdamW(m.params(), lr=0.0)
    report = train_step(batch, m, opt, train_cfg, teacher=teacher)
    for key in ("bce", "arc", "bce_teacher", "arc_teacher", "distill", "total"):
        assert key in report
    # With zero distillation weight the total is the plain two-branch sum.
    expected = (report["bce"] + report["arc"] + report["bce_teacher"]
                + report["arc_teacher"])
    assert report["total"] == pytest.approx(expected, rel=1e-12)

    train_cfg_w = dataclasses.replace(run_cfg.training, distill_weight=2.0)
    opt_ref = AdamW(m_ref.params(), lr=0.0)
    report_w = train_step(batch, m_ref, opt_ref, train_cfg_w, teacher=teacher)
    expected_w = (report_w["bce"] + report_w["arc"] + report_w["bce_teacher"]
                  + report_w["arc_teacher"] + 2.0 * report_w["distill"])
    assert report_w["total"] == pytest.approx(expected_w, rel=1e-12)


def test_total_training_loss_gradient_including_distillation():
    m = tiny_model(seed=26, out_frames=96)
    # The pseudo and non-speech embeddings start at exactly zero, which is the
    # one non-smooth point of the row normalizer; finite differences are only
    # meaningful away from it, so probe at a generic nearby point.
    m.emb_pseudo.data = 0.3 * stream(1, "pse").standard_normal(m.cfg.emb_dim)
    m.emb_nonspeech.data = 0.3 * stream(1, "non").standard_normal(m.cfg.emb_dim)
    teacher = Extractor(tiny_model_config(), stream(98, "teacher2"))
    # Real audio: silent blocks put the statistical pooling at its
    # zero-variance point, whose curvature ruins finite differences.
    batch = [_example(50, synth=True)[1], _example(51, synth=True)[1]]
    cfg = tiny_run_config().training

    feats = Tensor(np.stack([ex.features for ex in batch]))
    targets = np.stack([ex.target_va for ex in batch])
    sel = np.stack([input_selection(ex, m.cfg.n_table) for ex in batch])
    ids = np.stack([[g if g is not None else 0 for g in ex.target_identity]
                    for ex in batch])
    include = np.stack([[g is not None for g in ex.target_identity]
                        for ex in batch])

    def loss():
        extended = concat([m.table, m.emb_pseudo.reshape(1, -1),
                           m.emb_nonspeech.reshape(1, -1)], axis=0)
        emb_in = Tensor(sel) @ extended
        x = m.extract_frames(feats)
        z = m.encode(x)
        l_bce = bce_loss(m.detect(z, emb_in), targets)
        l_arc, _ = arcface_loss(m.represent(x, Tensor(targets)), m.table,
                                ids, include, scale=cfg.arc_scale,
                                margin=cfg.arc_margin)
        with no_grad():
            x_t = teacher(feats)
        x_t = Tensor(x_t.data)
        z_t = m.encode(x_t)
        l_bce_t = bce_loss(m.detect(z_t, emb_in), targets)
        l_arc_t, _ = arcface_loss(m.represent(x_t, Tensor(targets)), m.table,
                                  ids, include, scale=cfg.arc_scale,
                                  margin=cfg.arc_margin)
        l_dist = distill_loss(x, x_t)
        return l_bce + l_arc + l_bce_t + l_arc_t + l_dist * cfg.distill_weight

    assert param_grad_err(loss, m.params(), eps=1e-3, sample=2) < 1e-3


# ======================================================================
# Stage loops
# ======================================================================

def test_stage_with_frozen_extractor_keeps_it_bitwise():
    cfg = tiny_run_config()
    ctx = build_context(cfg, seed=5)
    m = tiny_model(seed=27)
    before = m.state()
    run_stage(m, cfg.training.stages[0], 1, ctx)  # freeze_extractor=True
    extractor_names = [k for k in before if k.startswith("extractor.")]
    assert extractor_names
    for name in extractor_names:
        np.testing.assert_array_equal(m.params()[name].data, before[name])
    # Everything is trainable again once the stage ends.
    assert all(p.trainable for p in m.params().values())


def test_best_validation_state_is_restored(monkeypatch):
    cfg = tiny_run_config()
    import dataclasses
    stage = dataclasses.replace(cfg.training.stages[1], steps=3)
    cfg = dataclasses.replace(
        cfg, training=dataclasses.replace(cfg.training, validate_every=1))
    ctx = build_context(cfg, seed=6)
    m = tiny_model(seed=28)

    scripted = iter([0.9, 0.2, 0.7])
    snapshots = []

    def fake_validate(model, _ctx):
        snapshots.append(model.state())
        return next(scripted)

    monkeypatch.setattr(training, "validate", fake_validate)
    history = run_stage(m, stage, 2, ctx)
    assert [h["val_der"] for h in history] == [0.9, 0.2, 0.7]
    best = snapshots[1]
    for name, value in m.state().items():
        np.testing.assert_array_equal(value, best[name])


def test_make_batch_draws_from_requested_pool():
    cfg = tiny_run_config()
    ctx = build_context(cfg, seed=7)
    import dataclasses
    train_ids = {s.global_id for s in ctx.train_speakers}
    adapt_ids = {s.global_id for s in ctx.adapt_speakers}
    assert train_ids.isdisjoint(adapt_ids)

    stage_train = dataclasses.replace(cfg.training.stages[0], adapt_frac=0.0)
    stage_adapt = dataclasses.replace(cfg.training.stages[0], adapt_frac=1.0)
    for tag, stage, pool in (("train", stage_train, train_ids),
                             ("adapt", stage_adapt, adapt_ids)):
        batch = make_batch(ctx, stage, stream(8, "pool", tag))
        for ex in batch:
            used = {g for g in ex.slot_ids if g is not None}
            assert used <= pool


def test_validate_returns_pooled_der(run_cfg):
    ctx = build_context(run_cfg, seed=9)
    m = tiny_model(seed=29)
    der = validate(m, ctx)
    assert der == float("inf") or (np.isfinite(der) and der >= 0.0)


def test_run_training_logs_every_step():
    cfg = tiny_run_config()
    log = io.StringIO()
    ctx = build_context(cfg, seed=10, log_stream=log)
    m = tiny_model(seed=30)
    history = run_training(m, ctx)
    assert len(history) == sum(s.steps for s in cfg.training.stages)
    lines = [ln for ln in log.getvalue().splitlines() if ln.strip()]
    assert len(lines) == len(history)
    import json
    for line in lines:
        record = json.loads(line)
        assert {"stage", "step", "bce", "arc", "total"} <= set(record)


# ======================================================================
# Distillation guards
# ======================================================================

def test_distillation_rejects_width_mismatch():
    cfg = tiny_run_config()
    ctx = build_context(cfg, seed=11)
    m = tiny_model(seed=31)
    teacher = Extractor(tiny_model_config(dim=32), stream(1, "t"))
    with pytest.raises(TrainingError):
        run_distillation(teacher, m, ctx)


def test_distillation_rejects_pooling_mismatch():
    cfg = tiny_run_config()
    ctx = build_context(cfg, seed=12)
    m = tiny_model(seed=32)
    teacher = Extractor(tiny_model_config(ssp_segment=1), stream(2, "t"))
    with pytest.raises(TrainingError):
        run_distillation(teacher, m, ctx)
