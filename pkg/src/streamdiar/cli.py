"""Command-line surface: simulate, train, distill, infer, score, tune.

Every run echoes its resolved configuration so the output alone suffices to
reproduce it. Commands that emit RTTM put the echo on ``#`` comment lines;
commands that emit JSON reports embed it under a "config" key. Failures print
a machine-readable error JSON on stderr and exit nonzero. Timing figures
(wall-clock RTF) go to stderr so files and stdout stay byte-reproducible.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import read_wav, write_wav
from .checkpoint import load_model, save_checkpoint
from .config import (PRESETS, RunConfig, config_to_dict, load_config)
from .corpus import draw_speaker_count, gen_corpus, simulate_mixture
from .inference import rescore_offline, run_online, tune_thresholds
from .model import DiarizationModel
from .rng import stream
from .rttm import (format_rttm_line, read_rttm, result_to_annotation,
                   speech_mask_from_annotation, write_rttm)
from .scoring import (annotation_to_frames, apply_oracle_vad, der_counts,
                      frames_to_annotation, rtf, speaker_count_stats)
from .training import build_context, run_distillation, run_training

LOG = logging.getLogger("streamdiar")


def _setup_logging() -> None:
    level_name = os.environ.get("S2SND_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# ======================================================================
# Config resolution
# ======================================================================

def _base_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config, preset=args.preset)
    return PRESETS[args.preset]()


def _stream_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Apply --chunk/--right/--left/--tau1/--tau2 on top of a config."""
    updates = {}
    if getattr(args, "chunk", None) is not None:
        updates["chunk_len"] = args.chunk
    if getattr(args, "right", None) is not None:
        updates["right_len"] = args.right
    if getattr(args, "left", None) is not None:
        updates["left_len"] = args.left
    elif updates:
        updates["left_len"] = None     # re-derive from block length
    if getattr(args, "tau1", None) is not None:
        updates["tau_new"] = args.tau1
    if getattr(args, "tau2", None) is not None:
        updates["tau_update"] = args.tau2
    if not updates:
        return cfg
    return dataclasses.replace(cfg, stream=dataclasses.replace(cfg.stream,
                                                               **updates))


def _infer_config(args: argparse.Namespace, ckpt_cfg: RunConfig) -> RunConfig:
    """Inference runs on the checkpoint's config; flags adjust the stream."""
    cfg = ckpt_cfg
    if getattr(args, "config", None):
        file_cfg = load_config(args.config, preset=args.preset)
        cfg = dataclasses.replace(cfg, stream=file_cfg.stream,
                                  scoring=file_cfg.scoring)
    return _stream_overrides(cfg, args)


def _echo_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _comment_header(cfg: RunConfig, command: str, seed: int | None = None,
                    extra: dict | None = None) -> list[str]:
    lines = [f"# streamdiar {command} v{__version__}"]
    if seed is not None:
        lines.append(f"# seed: {seed}")
    for key, value in (extra or {}).items():
        lines.append(f"# {key}: {value}")
    lines.append(f"# config: {json.dumps(config_to_dict(cfg), sort_keys=True)}")
    return lines


# ======================================================================
# Subcommands
# ======================================================================

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    speakers = gen_corpus(cfg.corpus.n_speakers, seed=args.seed)
    duration = args.duration if args.duration else cfg.corpus.block_len
    index = []
    for i in range(args.n):
        rng = stream(args.seed, "simulate", i)
        k = draw_speaker_count(rng, cfg.corpus.count_weights)
        chosen = [speakers[int(j)]
                  for j in rng.choice(len(speakers), size=k, replace=False)]
        mix = simulate_mixture(chosen, duration, rng,
                               sample_rate=cfg.corpus.sample_rate,
                               resolution=cfg.corpus.resolution,
                               seg_max=cfg.corpus.seg_max,
                               budget_frac=cfg.corpus.budget_frac)
        name = f"mix_{i:04d}"
        write_wav(out_dir / f"{name}.wav", mix.waveform, mix.sample_rate)
        frames = {f"spk{gid}": act for gid, act in mix.refs.items()}
        annotation = sorted(frames_to_annotation(frames, mix.resolution),
                            key=lambda s: (s[1], s[0]))
        write_rttm(out_dir / f"{name}.rttm", annotation, file_id=name)
        index.append({"file": name, "speakers": k})
    _echo_json({"command": "simulate", "seed": args.seed, "n": args.n,
                "out": str(out_dir), "recordings": index,
                "config": config_to_dict(cfg)})
    return 0


def _train_common(args: argparse.Namespace, distill_from: str | None) -> int:
    cfg = _base_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    model = DiarizationModel(cfg.model, stream(args.seed, "model-init"))
    with open(log_path, "w", encoding="utf-8") as log_stream:
        ctx = build_context(cfg, args.seed, log_stream)
        if distill_from is None:
            history = run_training(model, ctx)
        else:
            teacher, _ = load_model(distill_from)
            history = run_distillation(teacher.extractor, model, ctx)
    ckpt_path = out_dir / "model.ckpt"
    total_steps = sum(s.steps for s in cfg.training.stages)
    save_checkpoint(ckpt_path, model.state(), config_to_dict(cfg),
                    step=total_steps)
    val_ders = [h["val_der"] for h in history if "val_der" in h]
    _echo_json({"command": "distill" if distill_from else "train",
                "seed": args.seed, "steps": total_steps,
                "checkpoint": str(ckpt_path), "log": str(log_path),
                "best_val_der": min(val_ders) if val_ders else None,
                "final_val_der": val_ders[-1] if val_ders else None,
                "config": config_to_dict(cfg)})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    return _train_common(args, distill_from=None)


def cmd_distill(args: argparse.Namespace) -> int:
    return _train_common(args, distill_from=args.teacher)


def _load_audio(path: str, cfg: RunConfig) -> np.ndarray:
    waveform, sr = read_wav(path)
    if sr != cfg.features.sample_rate:
        raise ValueError(f"{path}: sample rate {sr} != configured "
                         f"{cfg.features.sample_rate}")
    return waveform


def cmd_infer_online(args: argparse.Namespace) -> int:
    model, ckpt_cfg = load_model(args.model)
    cfg = _infer_config(args, ckpt_cfg)
    waveform = _load_audio(args.audio, cfg)
    file_id = Path(args.audio).stem
    header = _comment_header(cfg, "infer-online",
                             extra={"latency_s": f"{cfg.stream.latency:.3f}",
                                    "file": file_id})
    for line in header:
        print(line)

    chunk_len = cfg.stream.chunk_len
    res = cfg.stream.resolution
    thr = cfg.stream.binarize

    def on_chunk(c: int, regions: dict) -> None:
        t0 = c * chunk_len
        rows = {f"spk{label}": np.asarray(y) > thr
                for label, y in sorted(regions.items())}
        for label, onset, duration in sorted(
                frames_to_annotation(rows, res), key=lambda s: (s[1], s[0])):
            print(format_rttm_line(file_id, label, t0 + onset, duration))
        sys.stdout.flush()

    t_start = time.perf_counter()
    result, buffer, _cache = run_online(waveform, model, cfg.stream,
                                        cfg.features, on_chunk=on_chunk)
    elapsed = time.perf_counter() - t_start
    if args.out:
        annotation = result_to_annotation(result.timelines, res, thr)
        write_rttm(args.out, annotation, file_id=file_id)
    duration = len(waveform) / cfg.features.sample_rate
    print(json.dumps({"rtf": rtf(elapsed, duration),
                      "latency_s": cfg.stream.latency,
                      "speakers": buffer.size}), file=sys.stderr)
    return 0


def cmd_infer_offline(args: argparse.Namespace) -> int:
    model, ckpt_cfg = load_model(args.model)
    cfg = _infer_config(args, ckpt_cfg)
    waveform = _load_audio(args.audio, cfg)
    file_id = Path(args.audio).stem
    res = cfg.stream.resolution
    thr = cfg.stream.binarize

    t_start = time.perf_counter()
    _online, buffer, cache = run_online(waveform, model, cfg.stream,
                                        cfg.features)
    offline = rescore_offline(cache, buffer, model, cfg.stream)
    elapsed = time.perf_counter() - t_start

    if args.oracle_vad:
        ref = read_rttm(args.oracle_vad)
        segments = ref.get(file_id)
        if segments is None:
            segments = [seg for ann in ref.values() for seg in ann]
        mask = speech_mask_from_annotation(segments, res, offline.n_frames)
        revised = apply_oracle_vad(offline.timelines, mask, threshold=thr)
        frames = {f"spk{k}": v for k, v in revised.items()}
        annotation = sorted(frames_to_annotation(frames, res),
                            key=lambda s: (s[1], s[0]))
    else:
        annotation = result_to_annotation(offline.timelines, res, thr)

    for line in _comment_header(cfg, "infer-offline", extra={"file": file_id}):
        print(line)
    for label, onset, duration in annotation:
        print(format_rttm_line(file_id, label, onset, duration))
    if args.out:
        write_rttm(args.out, annotation, file_id=file_id)
    duration_s = len(waveform) / cfg.features.sample_rate
    print(json.dumps({"rtf": rtf(elapsed, duration_s),
                      "speakers": buffer.size}), file=sys.stderr)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    res = cfg.scoring.resolution
    collar = args.collar if args.collar is not None else cfg.scoring.collar
    refs = read_rttm(args.ref)
    hyps = read_rttm(args.hyp)
    files = {}
    num = den = 0.0
    for fid in sorted(refs):
        ref_ann = refs[fid]
        hyp_ann = hyps.get(fid, [])
        end = max((o + d for _, o, d in ref_ann + hyp_ann), default=0.0)
        nf = int(np.ceil(end / res - 1e-9))
        ref_frames, _ = annotation_to_frames(ref_ann, res, nf)
        hyp_frames, _ = annotation_to_frames(hyp_ann, res, nf)
        counts = der_counts(ref_frames, hyp_frames, nf, collar=collar,
                            resolution=res)
        if counts.total_ref == 0:
            raise ValueError(f"{fid}: reference contains no speech")
        err = counts.miss + counts.false_alarm + counts.confusion
        files[fid] = {
            "der": err / counts.total_ref,
            "miss": counts.miss / counts.total_ref,
            "false_alarm": counts.false_alarm / counts.total_ref,
            "confusion": counts.confusion / counts.total_ref,
            "mapping": {str(k): str(v) for k, v in counts.mapping.items()},
        }
        num += err
        den += counts.total_ref
    if den == 0:
        raise ValueError("no scorable reference speech found")
    _echo_json({"command": "score", "collar": collar, "resolution": res,
                "files": files, "pooled_der": num / den,
                "config": config_to_dict(cfg)})
    return 0


def cmd_tune_thresholds(args: argparse.Namespace) -> int:
    model, ckpt_cfg = load_model(args.model)
    cfg = _infer_config(args, ckpt_cfg)
    speakers = gen_corpus(cfg.corpus.n_adapt_speakers, seed=args.seed,
                          id_offset=cfg.corpus.n_speakers)
    mixtures = []
    for i in range(args.n):
        rng = stream(args.seed, "tune", i)
        k = draw_speaker_count(rng, cfg.corpus.count_weights)
        chosen = [speakers[int(j)]
                  for j in rng.choice(len(speakers), size=k, replace=False)]
        mixtures.append(simulate_mixture(chosen, args.duration, rng,
                                         sample_rate=cfg.corpus.sample_rate,
                                         resolution=cfg.corpus.resolution,
                                         seg_max=cfg.corpus.seg_max,
                                         budget_frac=cfg.corpus.budget_frac))
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    tau1, tau2, report = tune_thresholds(model, mixtures, cfg.stream,
                                         cfg.features, grid_new=grid,
                                         grid_update=grid)
    _echo_json({"command": "tune-thresholds", "seed": args.seed,
                "tau1": tau1, "tau2": tau2, "grid": report,
                "config": config_to_dict(cfg)})
    return 0


def cmd_count_speakers(args: argparse.Namespace) -> int:
    model, ckpt_cfg = load_model(args.model)
    cfg = _infer_config(args, ckpt_cfg)
    refs = read_rttm(args.ref) if args.ref else {}
    results = {}
    pairs = []
    for path in args.audio:
        waveform = _load_audio(path, cfg)
        fid = Path(path).stem
        _result, buffer, _cache = run_online(waveform, model, cfg.stream,
                                             cfg.features)
        predicted = buffer.size
        entry = {"predicted": predicted}
        if fid in refs:
            true_count = len({label for label, _, _ in refs[fid]})
            entry["true"] = true_count
            pairs.append((predicted, true_count))
        results[fid] = entry
    payload = {"command": "count-speakers", "files": results,
               "config": config_to_dict(cfg)}
    if pairs:
        report = speaker_count_stats(pairs)
        payload["accuracy"] = report.accuracy
        payload["confusion"] = report.matrix.tolist()
    _echo_json(payload)
    return 0


# ======================================================================
# Parser
# ======================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamdiar",
        description="Blockwise streaming speaker diarization toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("--config", type=str, default=None,
                      help="JSON config overriding the preset")
    base.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    base.add_argument("--seed", type=int, default=0)

    geometry = argparse.ArgumentParser(add_help=False)
    geometry.add_argument("--chunk", type=float, default=None,
                          help="chunk length in seconds")
    geometry.add_argument("--right", type=float, default=None,
                          help="right context in seconds")
    geometry.add_argument("--left", type=float, default=None,
                          help="left context in seconds")
    geometry.add_argument("--tau1", type=float, default=None,
                          help="new-speaker enrollment threshold")
    geometry.add_argument("--tau2", type=float, default=None,
                          help="buffer-update threshold")

    p = sub.add_parser("simulate", parents=[base],
                       help="generate WAV + RTTM mixture pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[base], help="run the staged training")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[base],
                       help="train a student against a frozen teacher extractor")
    p.add_argument("--teacher", type=str, required=True,
                   help="teacher model checkpoint")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("infer-online", parents=[base, geometry],
                       help="stream RTTM lines chunk by chunk")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--audio", type=str, required=True)
    p.add_argument("--out", type=str, default=None,
                   help="also write the merged final RTTM here")
    p.set_defaults(func=cmd_infer_online)

    p = sub.add_parser("infer-offline", parents=[base, geometry],
                       help="online pass plus offline rescoring")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--audio", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--oracle-vad", type=str, default=None,
                   help="reference RTTM providing an oracle speech mask")
    p.set_defaults(func=cmd_infer_offline)

    p = sub.add_parser("score", parents=[base], help="score hypothesis RTTM")
    p.add_argument("--ref", type=str, required=True)
    p.add_argument("--hyp", type=str, required=True)
    p.add_argument("--collar", type=float, default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("tune-thresholds", parents=[base, geometry],
                       help="grid-search tau1/tau2 on synthetic validation")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--duration", type=float, default=24.0)
    p.add_argument("--grid", type=str, default=None,
                   help="comma-separated weight grid for both thresholds")
    p.set_defaults(func=cmd_tune_thresholds)

    p = sub.add_parser("count-speakers", parents=[base, geometry],
                       help="predict the number of speakers per recording")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--audio", type=str, nargs="+", required=True)
    p.add_argument("--ref", type=str, default=None,
                   help="reference RTTM for count accuracy")
    p.set_defaults(func=cmd_count_speakers)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:   # CLI boundary: report anything as error JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)},
                         sort_keys=True), file=sys.stderr)
        LOG.debug("command failed", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
