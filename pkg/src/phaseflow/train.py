"""Training loop: truncated BPTT over 8-frame windows with hidden state (but
not gradients) carried across windows, batches of windows drawn round-robin
from different videos, SSM statistics entering as constants, and a lagged
proximal penalty pulling outputs toward the previous epoch's.

In acausal mode each video trains two parallel sessions sharing one parameter
set: pass 1 with zeroed acausal channels (whose no-gradient stream refreshes
the acausal feature cache every epoch) and pass 2 consuming the cached
acausal features; the window loss sums both passes.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn, ssm
from .core import (
    MODEL_DTYPE,
    ExperimentConfig,
    FeatureSequence,
    NumericError,
    PhaseTaxonomy,
    UsageError,
    substream,
)
from .model import PhaseModel, init_model, run_inference, save_model

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "wall_time_s": self.wall_time_s,
        })


@dataclass
class TrainRun:
    """Mutable training state: parameters, optimizer, per-video caches."""

    config: ExperimentConfig
    model: PhaseModel
    adam: nn.Adam
    epoch: int = 0
    prox_cache: dict[str, np.ndarray] = field(default_factory=dict)
    acausal_cache: dict[str, np.ndarray] = field(default_factory=dict)
    curve: list[EpochLog] = field(default_factory=list)
    last_epoch_loss: float = float("nan")


@dataclass
class FitResult:
    model: PhaseModel            # parameters from the best-validation epoch
    curve: list[EpochLog]
    best_epoch: int
    best_val_accuracy: float


def batch_scheduler(video_lengths: dict[str, int], batch_size: int, window: int,
                    rng: np.random.Generator) -> list[list[tuple[str, int, int]]]:
    """Schedule aligned windows: each batch holds the next window of up to
    `batch_size` distinct videos (round-robin), so every video's windows are
    visited in temporal order."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    ids = sorted(video_lengths)
    if len(ids) < batch_size:
        log.warning("only %d video(s) for batch size %d; effective batch is smaller",
                    len(ids), batch_size)
    order = [ids[i] for i in rng.permutation(len(ids))]
    next_start = {vid: 0 for vid in ids}
    queue = deque(order)
    batches = []
    while queue:
        batch = []
        requeue = []
        for _ in range(min(batch_size, len(queue))):
            vid = queue.popleft()
            start = next_start[vid]
            stop = min(start + window, video_lengths[vid])
            batch.append((vid, start, stop))
            next_start[vid] = stop
            if stop < video_lengths[vid]:
                requeue.append(vid)
        queue.extend(requeue)
        batches.append(batch)
    return batches


class _VideoSession:
    """Carried LSTM/SSM state of one video across its training windows: one
    (h, c, extractor) triple per pass (single in causal mode)."""

    def __init__(self, model: PhaseModel, acausal_rows: np.ndarray | None):
        H = model.config.hidden_dim
        self.passes = [(
            *nn.zero_state(H), model.new_extractor(), None,
        )]
        if model.config.acausal:
            self.passes.append((*nn.zero_state(H), model.new_extractor(), acausal_rows))

    def states(self):
        return self.passes

    def set_state(self, idx, h, c):
        _, _, extractor, rows = self.passes[idx]
        self.passes[idx] = (h, c, extractor, rows)


def _window_pass(model: PhaseModel, h, c, extractor, acausal_rows,
                 frames: np.ndarray, start: int, labels, prox_rows,
                 prox_weight: float, zero_acausal):
    """Forward + loss + backward for one pass over one window. The per-frame
    input is [v | s | (a)] where s comes from the live extractor (detached)."""
    rec = nn.WindowRecorder(model.params, h, c)
    for k in range(frames.shape[0]):
        s = extractor.feature().astype(MODEL_DTYPE)
        if zero_acausal is None:
            x = np.concatenate([frames[k], s])
        else:
            a = zero_acausal if acausal_rows is None else acausal_rows[start + k]
            x = np.concatenate([frames[k], s, a])
        m = rec.step(x)
        extractor.update(m)
    ms = rec.ms
    loss, dlogits = nn.window_loss_and_dlogits(ms, labels, prox_rows, prox_weight)
    grads = nn.window_backward(model.params, rec.tape, dlogits)
    return loss, grads, ms, rec.h, rec.c


def train_epoch(run: TrainRun, train_seqs: list[FeatureSequence]) -> TrainRun:
    """One pass over the training set; one Adam step per window batch.

    Raises NumericError naming the video/frame window if the loss goes
    non-finite.
    """
    cfg = run.config
    model = run.model
    run.epoch += 1
    by_id = {s.video_id: s for s in train_seqs}
    lengths = {s.video_id: s.n_frames for s in train_seqs}
    rng = substream(cfg.rng_seed, "batching", run.epoch)
    batches = batch_scheduler(lengths, cfg.batch_size, cfg.seq_len_bptt, rng)
    zero_acausal = (np.zeros(model.base_ssm_dim, MODEL_DTYPE)
                    if cfg.acausal else None)
    sessions = {vid: _VideoSession(model, run.acausal_cache.get(vid))
                for vid in sorted(by_id)}
    total_loss = 0.0
    total_frames = 0
    for batch in batches:
        grad_sum = nn.zero_grads(model.params)
        n_windows = 0
        for vid, start, stop in batch:
            seq = by_id[vid]
            frames = seq.features[start:stop]
            labels = seq.labels[start:stop]
            prox = run.prox_cache.get(vid)
            prox_rows = prox[start:stop] if prox is not None else None
            sess = sessions[vid]
            window_loss = 0.0
            for idx, (h, c, extractor, rows) in enumerate(sess.states()):
                # the proximal tie applies to the evaluated (last) pass only
                is_final_pass = idx == len(sess.passes) - 1
                loss, grads, ms, h_out, c_out = _window_pass(
                    model, h, c, extractor, rows, frames, start, labels,
                    prox_rows if is_final_pass else None,
                    cfg.proximal_weight if is_final_pass else 0.0,
                    zero_acausal,
                )
                if not (np.isfinite(loss) and np.isfinite(ms).all()):
                    raise NumericError(
                        f"non-finite loss in video {vid} frames [{start}, {stop})")
                nn.accumulate_grads(grad_sum, grads)
                sess.set_state(idx, h_out, c_out)
                window_loss += loss
            total_loss += window_loss
            total_frames += stop - start
            n_windows += 1
        for k in grad_sum:
            grad_sum[k] /= n_windows
        nn.clip_global_norm(grad_sum, cfg.grad_clip)
        run.adam.step(model.params, grad_sum)
    run.last_epoch_loss = total_loss / max(1, total_frames)
    return run


def training_forward_probs(model: PhaseModel, seq: FeatureSequence,
                           acausal_rows: np.ndarray | None = None) -> np.ndarray:
    """Loss-free training-mode forward over consecutive windows with carried
    state; bit-equal to streaming inference by construction."""
    cfg = model.config
    h, c = nn.zero_state(cfg.hidden_dim)
    extractor = model.new_extractor()
    zero_acausal = (np.zeros(model.base_ssm_dim, MODEL_DTYPE)
                    if cfg.acausal else None)
    out = []
    for start in range(0, seq.n_frames, cfg.seq_len_bptt):
        stop = min(start + cfg.seq_len_bptt, seq.n_frames)
        rec = nn.WindowRecorder(model.params, h, c)
        for k in range(stop - start):
            s = extractor.feature().astype(MODEL_DTYPE)
            if zero_acausal is None:
                x = np.concatenate([seq.features[start + k], s])
            else:
                a = zero_acausal if acausal_rows is None else acausal_rows[start + k]
                x = np.concatenate([seq.features[start + k], s, a])
            m = rec.step(x)
            extractor.update(m)
        out.append(rec.ms)
        h, c = rec.h, rec.c
    return np.concatenate(out, axis=0)


def _refresh_caches(run: TrainRun, train_seqs: list[FeatureSequence]) -> None:
    """Full no-gradient pass per video with the current parameters: stores the
    probability stream for the proximal term and, in acausal mode, the acausal
    feature rows derived from the pass-1 stream."""
    model = run.model
    for seq in train_seqs:
        result = run_inference(model, seq)
        run.prox_cache[seq.video_id] = result.probs.astype(MODEL_DTYPE)
        if model.config.acausal:
            rows = ssm.acausal_feature_stream(model.new_extractor(), result.pass1_probs)
            run.acausal_cache[seq.video_id] = rows.astype(MODEL_DTYPE)


def dataset_frame_accuracy(model: PhaseModel, seqs: list[FeatureSequence]) -> float:
    correct = 0
    total = 0
    for seq in sorted(seqs, key=lambda s: s.video_id):
        result = run_inference(model, seq)
        correct += int((result.labels == seq.labels).sum())
        total += seq.n_frames
    return correct / total if total else 0.0


def fit(config: ExperimentConfig, taxonomy: PhaseTaxonomy,
        train_seqs: list[FeatureSequence], val_seqs: list[FeatureSequence],
        log_path=None, ckpt_dir=None) -> FitResult:
    """Run the full training protocol and return the parameters of the best
    validation-accuracy epoch along with the per-epoch curve."""
    train_ids = {s.video_id for s in train_seqs}
    if train_ids & {s.video_id for s in val_seqs}:
        raise UsageError("train and validation video ids overlap")
    if not train_seqs:
        raise UsageError("training set is empty")
    for s in list(train_seqs) + list(val_seqs):
        if s.labels is None:
            raise UsageError(f"video {s.video_id} has no labels")

    transition = ssm.estimate_transition_matrix(
        [s.labels for s in sorted(train_seqs, key=lambda q: q.video_id)],
        taxonomy.n_phases, config.hmm_smoothing)
    model = init_model(config, taxonomy, substream(config.rng_seed, "init"),
                       transition)
    run = TrainRun(config, model, nn.Adam(model.params, config.learning_rate))
    if config.acausal:
        _refresh_caches(run, train_seqs)     # epoch-1 acausal features come
        run.prox_cache.clear()               # from the init params; no prox yet

    best_epoch = 0
    best_acc = -1.0
    best_params = {k: v.copy() for k, v in model.params.items()}
    log_fh = open(log_path, "w") if log_path else None
    try:
        for _ in range(config.epochs):
            t0 = time.perf_counter()
            train_epoch(run, train_seqs)
            _refresh_caches(run, train_seqs)
            val_acc = (dataset_frame_accuracy(model, val_seqs)
                       if val_seqs else float("nan"))
            entry = EpochLog(run.epoch, float(run.last_epoch_loss),
                             float(val_acc), time.perf_counter() - t0)
            run.curve.append(entry)
            if log_fh:
                log_fh.write(entry.to_json() + "\n")
                log_fh.flush()
            if ckpt_dir is not None:
                save_model(model, f"{ckpt_dir}/epoch_{run.epoch:03d}.ckpt")
            improved = val_seqs and val_acc > best_acc
            if improved or not val_seqs:
                best_acc = val_acc if val_seqs else float("nan")
                best_epoch = run.epoch
                best_params = {k: v.copy() for k, v in model.params.items()}
                if ckpt_dir is not None:
                    save_model(model, f"{ckpt_dir}/best.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    best_model = PhaseModel(config, taxonomy, best_params, transition)
    if ckpt_dir is not None and config.epochs == 0:
        save_model(best_model, f"{ckpt_dir}/best.ckpt")
    return FitResult(best_model, run.curve, best_epoch, best_acc)
