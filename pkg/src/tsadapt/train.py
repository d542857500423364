"""Training and adaptation loops.

Covers supervised CE training (with scheduled sampling, label smoothing,
dropout) and the four adaptation families:

  - token-level transfer: the frozen teacher greedy-decodes the clean side,
    and the student is trained on the corrupted side to match the teacher's
    per-step posteriors while conditioning on the teacher's decoded tokens
    (two-level transfer: soft targets plus decoder guidance);
  - sequence-level transfer: same conditioning, but one-hot decoded tokens
    as targets;
  - supervised blends (fixed, conditional, adaptive): teacher and student
    both run teacher-forced on the ground truth, target rows blended per
    mode, optionally initialized by a token-level pass first.

The teacher is frozen everywhere: it runs grad-free, its outputs are cached
once per run (they cannot change), and only student parameters ever reach
the optimizer. Unsupervised modes receive a view of the corpus that does not
carry labels at all.

All loops are deterministic per seed in single-threaded use: batch order,
scheduled sampling, and dropout all draw from one seeded generator.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .data import Corpus, ParallelUtterance
from .errors import ConfigError, DivergenceError
from .evaluate import ter_on_pairs
from .model import AedModel, PosteriorSeq
from .optim import Adam

MODES = ("CE", "TOKEN_TS", "SEQ_TS", "ITS", "CTS", "ATS")
UNSUPERVISED_MODES = ("TOKEN_TS", "SEQ_TS")
SUPERVISED_TS_MODES = ("ITS", "CTS", "ATS")


@dataclass
class TrainConfig:
    mode: str = "CE"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.5
    plateau_patience: int = 3  # evals without improvement before halving lr
    early_stop_patience: int = 5  # evals without improvement before stopping
    ss_start: float = 0.0
    ss_end: float = 0.4
    ss_ramp_epochs: int = 8
    dropout: float = 0.1
    grad_clip: float = 5.0
    label_smoothing: float = 0.1
    seed: int = 0
    eval_every: int = 1
    lam: float = 0.25  # ATS confidence exponent
    its_weight: float = 0.5  # ITS global blend weight
    init_token_ts: bool = True  # supervised modes start from a token-level pass
    max_decode_extra: int = 10

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "ATS" and self.lam <= 0:
            raise ConfigError(f"ATS requires a positive confidence exponent, got {self.lam}")
        if self.mode == "ITS" and not 0.0 <= self.its_weight <= 1.0:
            raise ConfigError(f"ITS weight must be in [0, 1], got {self.its_weight}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not (0.0 <= self.ss_start <= 1.0 and 0.0 <= self.ss_end <= 1.0):
            raise ConfigError("scheduled-sampling probabilities must be in [0, 1]")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


def sampling_probability(cfg: TrainConfig, epoch: int) -> float:
    """Linear ramp from ss_start to ss_end over ss_ramp_epochs."""
    if cfg.ss_ramp_epochs <= 0:
        return cfg.ss_end
    frac = min(1.0, epoch / cfg.ss_ramp_epochs)
    return cfg.ss_start + (cfg.ss_end - cfg.ss_start) * frac


@dataclass
class RunMetrics:
    mode: str
    seed: int
    entries: list[dict] = field(default_factory=list)
    best_dev_ter: float = math.inf
    best_epoch: int = -1
    skipped_utterances: int = 0
    wall_time_s: float = 0.0
    notes: dict = field(default_factory=dict)

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        report = {
            "mode": self.mode,
            "seed": self.seed,
            "best_dev_ter": None if math.isinf(self.best_dev_ter) else self.best_dev_ter,
            "best_epoch": self.best_epoch,
            "skipped_utterances": self.skipped_utterances,
            "wall_time_s": self.wall_time_s,
            "notes": self.notes,
        }
        (out_dir / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# -- corpus views ---------------------------------------------------------------


@dataclass
class ParallelFrames:
    """Label-free view for unsupervised adaptation: parallel frames only."""

    x_clean: list[np.ndarray]
    x_corrupt: list[np.ndarray]

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "ParallelFrames":
        return cls(
            x_clean=[u.x_clean for u in corpus.utterances],
            x_corrupt=[u.x_corrupt for u in corpus.utterances],
        )

    def __len__(self) -> int:
        return len(self.x_clean)


def labeled_pairs(corpus: Corpus, side: str) -> list[tuple[np.ndarray, list[int]]]:
    if side not in ("clean", "corrupt"):
        raise ConfigError(f"side must be 'clean' or 'corrupt', got {side!r}")
    return [(u.x_clean if side == "clean" else u.x_corrupt, list(u.y)) for u in corpus.utterances]


def dev_eval_pairs(corpus: Corpus, side: str) -> list[tuple[np.ndarray, list[int]]]:
    from .evaluate import eval_pairs_from_corpus

    return eval_pairs_from_corpus(corpus, side)


# -- batching ---------------------------------------------------------------------


def _bucketed_batches(keys: list, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Indices grouped by equal key, shuffled within groups, chunked, then the
    chunk order shuffled. Equal keys guarantee pad-free batches."""
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    batches = []
    for k in sorted(groups):
        idxs = np.array(groups[k])
        rng.shuffle(idxs)
        for lo in range(0, len(idxs), batch_size):
            batches.append([int(j) for j in idxs[lo : lo + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[int(i)] for i in order]


def _sample_from_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a (B, U) probability matrix."""
    u = rng.random((probs.shape[0], 1))
    return np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), probs.shape[1] - 1)


# -- fitting harness ----------------------------------------------------------------


class _Fitter:
    """Shared epoch loop: optimizer, eval cadence, plateau lr decay,
    early stopping, best-checkpoint retention."""

    def __init__(self, model: AedModel, cfg: TrainConfig, dev_fn, metrics: RunMetrics, phase: str = "main"):
        self.model = model
        self.cfg = cfg
        self.dev_fn = dev_fn
        self.metrics = metrics
        self.phase = phase
        self.opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.grad_clip)
        self.best_state = None
        self.best_ter = math.inf
        self.since_improve = 0
        self.since_decay = 0

    def run(self, epoch_fn) -> None:
        cfg = self.cfg
        start = time.perf_counter()
        if self.dev_fn is not None:
            # score the starting point so a warm start is never regressed past
            ter0 = self.dev_fn(self.model)
            self.best_ter = ter0
            self.best_state = self.model.state_dict()
            if self.phase == "main":
                self.metrics.best_dev_ter = ter0
                self.metrics.best_epoch = -1
            self.metrics.entries.append(
                {"phase": self.phase, "epoch": -1, "dev_ter": ter0, "lr": self.opt.lr, "wall_time_s": 0.0}
            )
        for epoch in range(cfg.epochs):
            train_loss = epoch_fn(epoch, self.opt)
            if not math.isfinite(train_loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch} (mode {cfg.mode})")
            last = epoch == cfg.epochs - 1
            if self.dev_fn is None or ((epoch + 1) % cfg.eval_every != 0 and not last):
                self.metrics.entries.append(
                    {
                        "phase": self.phase,
                        "epoch": epoch,
                        "train_loss": train_loss,
                        "lr": self.opt.lr,
                        "wall_time_s": time.perf_counter() - start,
                    }
                )
                continue
            dev_ter = self.dev_fn(self.model)
            self.metrics.entries.append(
                {
                    "phase": self.phase,
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "dev_ter": dev_ter,
                    "lr": self.opt.lr,
                    "wall_time_s": time.perf_counter() - start,
                }
            )
            if dev_ter < self.best_ter - 1e-12:
                self.best_ter = dev_ter
                self.best_state = self.model.state_dict()
                if self.phase == "main":
                    self.metrics.best_dev_ter = dev_ter
                    self.metrics.best_epoch = epoch
                self.since_improve = 0
                self.since_decay = 0
            else:
                self.since_improve += 1
                self.since_decay += 1
                if self.since_decay >= cfg.plateau_patience:
                    self.opt.lr *= cfg.lr_decay
                    self.since_decay = 0
                if self.since_improve >= cfg.early_stop_patience:
                    break
        if self.best_state is not None:
            self.model.load_state(self.best_state)
        self.metrics.wall_time_s += time.perf_counter() - start


def _make_dev_fn(model: AedModel, dev_pairs, drop_ids: set[int], max_extra: int):
    if not dev_pairs:
        return None

    def dev_fn(m: AedModel) -> float:
        return ter_on_pairs(m, dev_pairs, drop_ids=drop_ids, max_extra=max_extra).ter

    return dev_fn


# -- CE training -----------------------------------------------------------------


def train_ce(
    model: AedModel,
    pairs: list[tuple[np.ndarray, list[int]]],
    dev_pairs,
    cfg: TrainConfig,
    drop_ids: set[int] | None = None,
) -> RunMetrics:
    """Label-smoothed CE training with scheduled sampling and dropout.

    `pairs` hold (frames, full token sequence <sos>...<eos>); `dev_pairs`
    hold (frames, stripped reference) for TER eval, or may be empty.
    """
    cfg.validate()
    if not pairs:
        raise ConfigError("empty training set")
    if drop_ids is None:
        drop_ids = {model.config.sos_id, model.config.eos_id}
    metrics = RunMetrics(mode=cfg.mode, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    keys = [(frames.shape[0], len(y)) for frames, y in pairs]
    fitter = _Fitter(model, cfg, _make_dev_fn(model, dev_pairs, drop_ids, cfg.max_decode_extra), metrics)

    def epoch_fn(epoch: int, opt: Adam) -> float:
        p_ss = sampling_probability(cfg, epoch)
        total, n_batches = 0.0, 0
        for batch in _bucketed_batches(keys, cfg.batch_size, rng):
            frames = np.stack([pairs[i][0] for i in batch], axis=0)
            ys = np.array([pairs[i][1] for i in batch], dtype=np.int64).T  # (L, B)
            cond, tgt = ys[:-1], ys[1:]
            steps, b = cond.shape
            enc = model.encode_batch(frames, dropout_p=cfg.dropout, rng=rng)
            state = model.initial_state(b)
            rows = []
            prev_probs = None
            for l in range(steps):
                tok = cond[l].copy()
                if l > 0 and p_ss > 0.0:
                    swap = rng.random(b) < p_ss
                    if swap.any():
                        tok[swap] = _sample_from_rows(prev_probs, rng)[swap]
                state, logits = model.decode_step_batch(state, tok, enc, dropout_p=cfg.dropout, rng=rng)
                prev_probs = _softmax_np(logits.data)
                rows.append(logits)
            posts = PosteriorSeq(logits=rows[0] if steps == 1 else ad.concat(rows, axis=0), steps=steps, batch=b)
            loss = losses.ce_loss(posts, tgt.reshape(-1), smoothing=cfg.label_smoothing)
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite CE loss at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            total += val
            n_batches += 1
        return total / n_batches

    fitter.run(epoch_fn)
    return metrics


def _softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# -- teacher-student adaptation ---------------------------------------------------


def clone_student(teacher: AedModel) -> AedModel:
    """Deep copy; subsequent student updates leave the teacher untouched."""
    return teacher.clone()


@dataclass
class _TsBatch:
    frames_tgt: np.ndarray  # (B, N, d) corrupted side
    cond: np.ndarray  # (Lmax, B) teacher-decoded conditioning (<sos> shifted)
    yt_flat: np.ndarray  # (Lmax*B,) teacher one-best tokens, step-major
    teacher_rows: np.ndarray  # (Lmax*B, U) teacher posteriors along its decode
    mask: np.ndarray  # (Lmax*B,) 1.0 on real steps


def _build_ts_batches(
    teacher: AedModel,
    view: ParallelFrames,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[list[_TsBatch], int]:
    """Greedy-decode the clean side once with the frozen teacher and freeze the
    conditioning sequences, one-best tokens and soft posterior rows per batch.

    Utterances the teacher decodes to an immediate <eos> carry no transfer
    signal and are skipped (counted for the run report).
    """
    vocab = teacher.config.vocab_size
    eos = teacher.config.eos_id
    sos = teacher.config.sos_id
    keys = [x.shape[0] for x in view.x_clean]
    skipped = 0
    out: list[_TsBatch] = []
    for batch in _bucketed_batches(keys, cfg.batch_size, rng):
        frames_src = np.stack([view.x_clean[i] for i in batch], axis=0)
        results = teacher.greedy_decode_batch(frames_src, max_len=frames_src.shape[1] + cfg.max_decode_extra)
        keep = [j for j, r in enumerate(results) if r.tokens != [eos]]
        skipped += len(batch) - len(keep)
        if not keep:
            continue
        results = [results[j] for j in keep]
        frames_tgt = np.stack([view.x_corrupt[batch[j]] for j in keep], axis=0)
        b = len(results)
        lmax = max(len(r.tokens) for r in results)
        cond = np.full((lmax, b), eos, dtype=np.int64)
        cond[0, :] = sos
        yt = np.full((lmax, b), eos, dtype=np.int64)
        rows = np.full((lmax, b, vocab), 1.0 / vocab)
        mask = np.zeros((lmax, b))
        for j, r in enumerate(results):
            n = len(r.tokens)
            cond[1:n, j] = r.tokens[: n - 1]
            yt[:n, j] = r.tokens
            rows[:n, j, :] = r.posteriors
            mask[:n, j] = 1.0
        out.append(
            _TsBatch(
                frames_tgt=frames_tgt,
                cond=cond,
                yt_flat=yt.reshape(-1),
                teacher_rows=rows.reshape(lmax * b, vocab),
                mask=mask.reshape(-1),
            )
        )
    return out, skipped


def _adapt_unsupervised(
    teacher: AedModel,
    student: AedModel,
    view: ParallelFrames,
    dev_pairs,
    cfg: TrainConfig,
    drop_ids: set[int],
) -> RunMetrics:
    cfg.validate()
    if cfg.mode not in UNSUPERVISED_MODES:
        raise ConfigError(f"unsupervised adaptation got mode {cfg.mode!r}")
    teacher.set_trainable(False)
    student.set_trainable(True)
    metrics = RunMetrics(mode=cfg.mode, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    batches, skipped = _build_ts_batches(teacher, view, cfg, rng)
    metrics.skipped_utterances = skipped
    if not batches:
        raise ConfigError("teacher decoded every adaptation utterance to <eos>; nothing to adapt on")
    if cfg.mode == "SEQ_TS":
        # the sequence-level loss must coincide with plain CE on the decoded tokens
        tb = batches[0]
        with ad.no_grad():
            posts = student.forward_teacher_forced_batch(tb.frames_tgt, tb.cond)
            a = losses.seq_ts_loss(posts, tb.yt_flat, mask=tb.mask).item()
            b = losses.ce_loss(posts, tb.yt_flat, smoothing=0.0, mask=tb.mask).item()
        metrics.notes["seq_ts_equals_ce_crosscheck"] = bool(abs(a - b) < 1e-12)
    fitter = _Fitter(student, cfg, _make_dev_fn(student, dev_pairs, drop_ids, cfg.max_decode_extra), metrics)

    def epoch_fn(epoch: int, opt: Adam) -> float:
        total = 0.0
        for bi in rng.permutation(len(batches)):
            tb = batches[int(bi)]
            posts = student.forward_teacher_forced_batch(tb.frames_tgt, tb.cond, dropout_p=cfg.dropout, rng=rng)
            if cfg.mode == "TOKEN_TS":
                target = losses.SoftTarget(probs=tb.teacher_rows, mask=tb.mask)
                loss = losses.kl_token_ts_loss(target, posts)
            else:
                loss = losses.seq_ts_loss(posts, tb.yt_flat, mask=tb.mask)
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite {cfg.mode} loss at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            total += val
        return total / len(batches)

    fitter.run(epoch_fn)
    return metrics


def adapt_token_ts(teacher, student, view: ParallelFrames, dev_pairs, cfg: TrainConfig, drop_ids: set[int]) -> RunMetrics:
    """Two-level transfer: soft teacher posteriors + teacher-decoded conditioning."""
    if cfg.mode != "TOKEN_TS":
        cfg = replace(cfg, mode="TOKEN_TS")
    return _adapt_unsupervised(teacher, student, view, dev_pairs, cfg, drop_ids)


def adapt_seq_ts(teacher, student, view: ParallelFrames, dev_pairs, cfg: TrainConfig, drop_ids: set[int]) -> RunMetrics:
    """One-level transfer: CE on the teacher's one-best decode."""
    if cfg.mode != "SEQ_TS":
        cfg = replace(cfg, mode="SEQ_TS")
    return _adapt_unsupervised(teacher, student, view, dev_pairs, cfg, drop_ids)


@dataclass
class _SupBatch:
    frames_tgt: np.ndarray  # (B, N, d) corrupted side
    cond: np.ndarray  # (L, B) ground-truth conditioning
    y_flat: np.ndarray  # (L*B,) ground-truth targets, step-major
    teacher_rows: np.ndarray  # (L*B, U) teacher posteriors under the ground truth


def _build_supervised_batches(
    teacher: AedModel,
    utts: list[ParallelUtterance],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[_SupBatch]:
    """Teacher-forced teacher posteriors on the clean side, frozen per batch."""
    out: list[_SupBatch] = []
    keys = [(u.x_clean.shape[0], len(u.y)) for u in utts]
    for batch in _bucketed_batches(keys, cfg.batch_size, rng):
        frames_src = np.stack([utts[i].x_clean for i in batch], axis=0)
        frames_tgt = np.stack([utts[i].x_corrupt for i in batch], axis=0)
        ys = np.array([utts[i].y for i in batch], dtype=np.int64).T  # (L, B)
        cond, tgt = ys[:-1], ys[1:]
        with ad.no_grad():
            posts = teacher.forward_teacher_forced_batch(frames_src, cond)
        out.append(
            _SupBatch(
                frames_tgt=frames_tgt,
                cond=cond,
                y_flat=tgt.reshape(-1),
                teacher_rows=posts.probs(),
            )
        )
    return out


def adapt_supervised(
    teacher: AedModel,
    student: AedModel,
    utts: list[ParallelUtterance],
    dev_pairs,
    cfg: TrainConfig,
    drop_ids: set[int],
    unsupervised_view: ParallelFrames | None = None,
) -> RunMetrics:
    """Ground-truth-aware adaptation (ITS / CTS / ATS).

    When `cfg.init_token_ts` is set, a token-level pass over the same parallel
    data runs first as initialization (pass `unsupervised_view` to reuse one,
    otherwise it is built from `utts`).
    """
    cfg.validate()
    if cfg.mode not in SUPERVISED_TS_MODES:
        raise ConfigError(f"supervised adaptation got mode {cfg.mode!r}")
    for u in utts:
        if not u.y:
            raise ConfigError(f"{u.utt_id}: supervised adaptation requires ground-truth labels")
    teacher.set_trainable(False)
    student.set_trainable(True)
    metrics = RunMetrics(mode=cfg.mode, seed=cfg.seed)

    if cfg.init_token_ts:
        if unsupervised_view is None:
            unsupervised_view = ParallelFrames(
                x_clean=[u.x_clean for u in utts], x_corrupt=[u.x_corrupt for u in utts]
            )
        init_cfg = replace(cfg, mode="TOKEN_TS")
        init_metrics = _adapt_unsupervised(teacher, student, unsupervised_view, dev_pairs, init_cfg, drop_ids)
        for e in init_metrics.entries:
            metrics.entries.append({**e, "phase": "init_token_ts"})
        metrics.skipped_utterances = init_metrics.skipped_utterances
        metrics.notes["init_token_ts_best_dev_ter"] = init_metrics.best_dev_ter

    rng = np.random.default_rng(cfg.seed)
    batches = _build_supervised_batches(teacher, utts, cfg, rng)
    fitter = _Fitter(student, cfg, _make_dev_fn(student, dev_pairs, drop_ids, cfg.max_decode_extra), metrics)

    def epoch_fn(epoch: int, opt: Adam) -> float:
        total = 0.0
        for bi in rng.permutation(len(batches)):
            sb = batches[int(bi)]
            posts = student.forward_teacher_forced_batch(sb.frames_tgt, sb.cond, dropout_p=cfg.dropout, rng=rng)
            target = losses.SoftTarget(probs=sb.teacher_rows)
            if cfg.mode == "ITS":
                loss = losses.its_loss(target, sb.y_flat, posts, cfg.its_weight)
            elif cfg.mode == "CTS":
                loss = losses.cts_loss(target, sb.y_flat, posts)
            else:
                loss = losses.ats_loss(target, sb.y_flat, posts, cfg.lam)
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite {cfg.mode} loss at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            total += val
        return total / len(batches)

    fitter.run(epoch_fn)
    return metrics
