"""Staged training with masked-slot example assembly.

Each training example pairs one simulated mixture with a full set of decoder
slots: one pseudo slot (always present; with probability 0.5 it takes over a
present speaker's activity as its target), the remaining present speakers as
real slots, and the leftover capacity filled half with the non-speech
embedding and half with distractor speakers who are silent in the block. The
detection branch is scored with BCE against slot activities; the
representation branch with a margin softmax over the global speaker table;
distillation adds a frame-cosine pull between a frozen teacher extractor and
the student extractor, with the teacher branch sharing the encoder/decoders.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .config import FeatureConfig, RunConfig, StageSpec, TrainConfig
from .corpus import (Mixture, SyntheticSpeaker, draw_speaker_count,
                     gen_corpus, simulate_mixture)
from .features import logmel
from .losses import arcface_loss, bce_loss, distill_loss
from .model import DiarizationModel, Extractor
from .optim import AdamW
from .rng import stream

SLOT_REAL = "real"
SLOT_PSEUDO = "pseudo"
SLOT_NON_SPEECH = "non_speech"
SLOT_DISTRACTOR = "distractor"


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad example, non-finite loss)."""


# ======================================================================
# Example assembly
# ======================================================================

@dataclass
class TrainingExample:
    features: np.ndarray                 # (T, n_mels)
    slot_kinds: list[str]                # length capacity
    slot_ids: list[int | None]           # table id for real/distractor slots
    target_va: np.ndarray                # (capacity, T') floats in {0, 1}
    target_identity: list[int | None]    # table id where the margin loss applies
    masked: bool


def assemble_example(mixture: Mixture, rng: np.random.Generator, capacity: int,
                     candidate_ids: list[int], feat_cfg: FeatureConfig,
                     mask_prob: float = 0.5) -> TrainingExample:
    """Build one slotted example from a mixture.

    candidate_ids is the pool distractors are drawn from (speakers absent from
    the mixture). Slot order is shuffled so the model cannot key on position.
    """
    present = list(mixture.refs.keys())
    n_loc = len(present)
    if capacity < n_loc + 1:
        raise TrainingError(
            f"capacity {capacity} cannot hold {n_loc} speakers plus the pseudo slot")
    n_frames = len(next(iter(mixture.refs.values())))
    silent = np.zeros(n_frames)

    masked = bool(rng.random() < mask_prob)
    mask_id: int | None = None
    if masked:
        mask_id = present[int(rng.integers(n_loc))]

    # (kind, input id, target activity, identity target)
    slots: list[tuple[str, int | None, np.ndarray, int | None]] = []
    if masked:
        slots.append((SLOT_PSEUDO, None, mixture.refs[mask_id].astype(float), mask_id))
    else:
        slots.append((SLOT_PSEUDO, None, silent, None))
    for gid in present:
        if gid == mask_id:
            continue
        slots.append((SLOT_REAL, gid, mixture.refs[gid].astype(float), gid))

    pool = [gid for gid in candidate_ids if gid not in present]
    rng.shuffle(pool)
    while len(slots) < capacity:
        if rng.random() < 0.5 or not pool:
            slots.append((SLOT_NON_SPEECH, None, silent, None))
        else:
            slots.append((SLOT_DISTRACTOR, pool.pop(), silent, None))

    order = rng.permutation(len(slots))
    slots = [slots[i] for i in order]
    return TrainingExample(
        features=logmel(mixture.waveform, feat_cfg),
        slot_kinds=[s[0] for s in slots],
        slot_ids=[s[1] for s in slots],
        target_va=np.stack([s[2] for s in slots]),
        target_identity=[s[3] for s in slots],
        masked=masked,
    )


def input_selection(example: TrainingExample, n_table: int) -> np.ndarray:
    """One-hot rows picking each slot's input embedding.

    Columns 0..n_table-1 address the speaker table; column n_table the pseudo
    embedding; column n_table+1 the non-speech embedding.
    """
    n = len(example.slot_kinds)
    sel = np.zeros((n, n_table + 2))
    for j, (kind, gid) in enumerate(zip(example.slot_kinds, example.slot_ids)):
        if kind in (SLOT_REAL, SLOT_DISTRACTOR):
            sel[j, int(gid)] = 1.0
        elif kind == SLOT_PSEUDO:
            sel[j, n_table] = 1.0
        else:
            sel[j, n_table + 1] = 1.0
    return sel


# ======================================================================
# One optimization step
# ======================================================================

def _branch_losses(model: DiarizationModel, x: Tensor, emb_in: Tensor,
                   targets: np.ndarray, ids: np.ndarray, include: np.ndarray,
                   cfg: TrainConfig) -> tuple[Tensor, Tensor, int]:
    z = model.encode(x)
    probs = model.detect(z, emb_in)
    l_bce = bce_loss(probs, targets)
    emb_out = model.represent(x, Tensor(targets))
    l_arc, n_inc = arcface_loss(emb_out, model.table, ids, include,
                                scale=cfg.arc_scale, margin=cfg.arc_margin)
    return l_bce, l_arc, n_inc


def train_step(examples: list[TrainingExample], model: DiarizationModel,
               optimizer: AdamW, cfg: TrainConfig,
               teacher: Extractor | None = None) -> dict[str, float]:
    """Forward both branches, sum losses, backprop, step, renormalize table."""
    feats = Tensor(np.stack([ex.features for ex in examples]))
    targets = np.stack([ex.target_va for ex in examples])
    sel = Tensor(np.stack([input_selection(ex, model.cfg.n_table)
                           for ex in examples]))
    ids = np.stack([[gid if gid is not None else 0 for gid in ex.target_identity]
                    for ex in examples])
    include = np.stack([[gid is not None for gid in ex.target_identity]
                        for ex in examples])

    extended = concat([model.table, model.emb_pseudo.reshape(1, -1),
                       model.emb_nonspeech.reshape(1, -1)], axis=0)
    emb_in = sel @ extended

    x = model.extract_frames(feats)
    l_bce, l_arc, n_inc = _branch_losses(model, x, emb_in, targets, ids,
                                         include, cfg)
    total = l_bce + l_arc
    report = {"bce": float(l_bce.data), "arc": float(l_arc.data),
              "arc_slots": float(n_inc)}

    if teacher is not None:
        with no_grad():
            x_teacher = teacher(feats)
        x_teacher = Tensor(x_teacher.data)
        l_bce_t, l_arc_t, _ = _branch_losses(model, x_teacher, emb_in, targets,
                                             ids, include, cfg)
        l_dist = distill_loss(x, x_teacher)
        total = total + l_bce_t + l_arc_t + l_dist * cfg.distill_weight
        report.update(bce_teacher=float(l_bce_t.data),
                      arc_teacher=float(l_arc_t.data),
                      distill=float(l_dist.data))

    if not np.isfinite(total.data):
        bad = _find_non_finite(examples, model, cfg)
        raise TrainingError(f"non-finite loss (first offending example index {bad})")

    total.backward()
    optimizer.step()
    optimizer.zero_grad()
    model.renormalize_table()
    report["total"] = float(total.data)
    return report


def _find_non_finite(examples: list[TrainingExample], model: DiarizationModel,
                     cfg: TrainConfig) -> int:
    """Re-score each example alone (no gradients) to locate a bad loss."""
    for i, ex in enumerate(examples):
        with no_grad():
            sel = Tensor(input_selection(ex, model.cfg.n_table))
            extended = concat([model.table, model.emb_pseudo.reshape(1, -1),
                               model.emb_nonspeech.reshape(1, -1)], axis=0)
            x = model.extract_frames(Tensor(ex.features))
            ids = np.array([g if g is not None else 0 for g in ex.target_identity])
            inc = np.array([g is not None for g in ex.target_identity])
            l_bce, l_arc, _ = _branch_losses(model, x, sel @ extended,
                                             ex.target_va, ids, inc, cfg)
        if not np.isfinite(l_bce.data) or not np.isfinite(l_arc.data):
            return i
    return -1


# ======================================================================
# Stage loops
# ======================================================================

@dataclass
class TrainContext:
    """Everything a stage loop needs besides the model."""
    cfg: RunConfig
    train_speakers: list[SyntheticSpeaker]
    adapt_speakers: list[SyntheticSpeaker]
    seed: int
    log_stream: TextIO | None = None
    val_mixtures: list[Mixture] = field(default_factory=list)


def build_context(cfg: RunConfig, seed: int,
                  log_stream: TextIO | None = None) -> TrainContext:
    train_spk = gen_corpus(cfg.corpus.n_speakers, seed=seed)
    adapt_spk = gen_corpus(cfg.corpus.n_adapt_speakers, seed=seed,
                           id_offset=cfg.corpus.n_speakers)
    ctx = TrainContext(cfg=cfg, train_speakers=train_spk,
                       adapt_speakers=adapt_spk, seed=seed,
                       log_stream=log_stream)
    rng = stream(seed, "validation")
    for i in range(cfg.training.val_recordings):
        picked = _pick_speakers(adapt_spk, rng, cfg)
        ctx.val_mixtures.append(
            simulate_mixture(picked, cfg.training.val_len, rng,
                             sample_rate=cfg.corpus.sample_rate,
                             resolution=cfg.corpus.resolution,
                             seg_max=cfg.corpus.seg_max,
                             budget_frac=cfg.corpus.budget_frac))
    return ctx


def _pick_speakers(pool: list[SyntheticSpeaker], rng: np.random.Generator,
                   cfg: RunConfig) -> list[SyntheticSpeaker]:
    k = draw_speaker_count(rng, cfg.corpus.count_weights)
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in idx]


def make_batch(ctx: TrainContext, stage: StageSpec,
               rng: np.random.Generator) -> list[TrainingExample]:
    cfg = ctx.cfg
    out = []
    for _ in range(cfg.training.batch_size):
        use_adapt = rng.random() < stage.adapt_frac
        pool = ctx.adapt_speakers if use_adapt else ctx.train_speakers
        picked = _pick_speakers(pool, rng, cfg)
        mix = simulate_mixture(picked, cfg.corpus.block_len, rng,
                               sample_rate=cfg.corpus.sample_rate,
                               resolution=cfg.corpus.resolution,
                               seg_max=cfg.corpus.seg_max,
                               budget_frac=cfg.corpus.budget_frac)
        out.append(assemble_example(mix, rng, cfg.model.capacity,
                                    [s.global_id for s in pool],
                                    cfg.features, cfg.training.mask_prob))
    return out


def _log(ctx: TrainContext, record: dict) -> None:
    if ctx.log_stream is not None:
        clean = {k: (None if isinstance(v, float) and not np.isfinite(v)
                     else v) for k, v in record.items()}
        ctx.log_stream.write(json.dumps(clean) + "\n")
        ctx.log_stream.flush()


def validate(model: DiarizationModel, ctx: TrainContext) -> float:
    """Pooled offline diarization error rate over the validation recordings.

    A recording on which the model overflows the speaker capacity (wild
    spurious enrollment, typical early in training) counts as fully missed
    rather than crashing or flattening the whole pool to infinity, so the
    score still ranks models that overflow on only some recordings.
    """
    from .inference import EngineError, rescore_offline, run_online
    from .scoring import der_counts

    cfg = ctx.cfg
    num = 0.0
    den = 0.0
    for mix in ctx.val_mixtures:
        try:
            result, buffer, cache = run_online(mix.waveform, model, cfg.stream,
                                               cfg.features)
            offline = rescore_offline(cache, buffer, model, cfg.stream)
        except EngineError:
            ref_frames = float(sum(act.sum() for act in mix.refs.values()))
            num += ref_frames
            den += ref_frames
            continue
        counts = der_counts(mix.refs, offline.binarized(cfg.stream.binarize),
                            n_frames=result.n_frames)
        num += counts.miss + counts.false_alarm + counts.confusion
        den += counts.total_ref
    return num / max(den, 1.0)


def run_stage(model: DiarizationModel, stage: StageSpec, stage_idx: int,
              ctx: TrainContext,
              teacher: Extractor | None = None) -> list[dict]:
    """Run one stage; the model ends at its best-validation parameters.

    During distillation the teacher extractor is the frozen module, so the
    stage's extractor-freeze flag is applied only when no teacher is given.
    """
    cfg = ctx.cfg
    freeze = stage.freeze_extractor and teacher is None
    for name, p in model.params().items():
        if name.startswith("extractor."):
            p.trainable = not freeze
    optimizer = AdamW(model.params(), lr=stage.lr,
                      beta1=cfg.training.beta1, beta2=cfg.training.beta2,
                      eps=cfg.training.adam_eps,
                      weight_decay=cfg.training.weight_decay)

    history: list[dict] = []
    best_der = float("inf")
    best_state: dict[str, np.ndarray] | None = None
    for step_i in range(1, stage.steps + 1):
        rng = stream(ctx.seed, "stage", stage_idx, "step", step_i)
        batch = make_batch(ctx, stage, rng)
        report = train_step(batch, model, optimizer, cfg.training, teacher=teacher)
        record = {"stage": stage_idx, "step": step_i, **report}
        if step_i % cfg.training.validate_every == 0 or step_i == stage.steps:
            der = validate(model, ctx)
            record["val_der"] = der
            if der <= best_der:
                best_der = der
                best_state = model.state()
        history.append(record)
        _log(ctx, record)
    if best_state is not None:
        model.load_state(best_state)
    for p in model.params().values():
        p.trainable = True
    return history


def run_training(model: DiarizationModel, ctx: TrainContext) -> list[dict]:
    """All configured stages in order."""
    history = []
    for i, stage in enumerate(ctx.cfg.training.stages, start=1):
        history.extend(run_stage(model, stage, i, ctx))
    return history


def run_distillation(teacher_extractor: Extractor, model: DiarizationModel,
                     ctx: TrainContext) -> list[dict]:
    """Stage schedule with a frozen teacher extractor feeding a second branch.

    The teacher and student extractors must agree on output width and frame
    count so the frame-cosine loss is defined.
    """
    if teacher_extractor.cfg.dim != model.cfg.dim:
        raise TrainingError(
            f"teacher width {teacher_extractor.cfg.dim} != student width "
            f"{model.cfg.dim}")
    if teacher_extractor.cfg.ssp_segment != model.cfg.ssp_segment:
        raise TrainingError("teacher and student pooling factors differ")
    history = []
    for i, stage in enumerate(ctx.cfg.training.stages, start=1):
        history.extend(run_stage(model, stage, i, ctx,
                                 teacher=teacher_extractor))
    return history
