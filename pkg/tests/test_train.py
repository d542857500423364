"""Optimizer behavior, the training loops, and the adaptation procedures."""

import copy
import math

import numpy as np
import pytest

from tsadapt import autodiff as ad
from tsadapt import losses
from tsadapt.autodiff import Tensor, backward
from tsadapt.data import gen_corpus, CorpusSpec, split_corpus
from tsadapt.errors import ConfigError, DivergenceError
from tsadapt.model import AedModel
from tsadapt.optim import Adam, clip_global_norm
from tsadapt.train import (
    ParallelFrames,
    TrainConfig,
    _build_supervised_batches,
    _build_ts_batches,
    adapt_seq_ts,
    adapt_supervised,
    adapt_token_ts,
    clone_student,
    dev_eval_pairs,
    labeled_pairs,
    sampling_probability,
    train_ce,
)


def _strip_times(entries):
    return [{k: v for k, v in e.items() if k != "wall_time_s"} for e in entries]


class TestOptimizer:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros(3)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0, 3.0])

    def test_scalar_quadratic_converges(self):
        p = Tensor(np.array([4.0]), requires_grad=True)
        opt = Adam([p], lr=0.05, clip_norm=0.0)
        for _ in range(500):
            loss = ad.scale(ad.sum_(ad.mul(p, p)), 0.5)
            backward(loss)
            opt.step()
        assert abs(p.data[0]) < 1e-3

    def test_clipping_rescales_to_target_norm(self):
        p1 = Tensor(np.zeros(4), requires_grad=True)
        p2 = Tensor(np.zeros(9), requires_grad=True)
        g = np.full(13, 50.0 / math.sqrt(13))
        p1.grad, p2.grad = g[:4].copy(), g[4:].copy()
        norm_before = clip_global_norm([p1, p2], 5.0)
        assert abs(norm_before - 50.0) < 1e-9
        after = math.sqrt(float((p1.grad**2).sum() + (p2.grad**2).sum()))
        assert abs(after - 5.0) < 1e-9

    def test_nonfinite_gradient_aborts(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([p])
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(DivergenceError):
            opt.step()


class TestSamplingSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(ss_start=0.0, ss_end=0.4, ss_ramp_epochs=8)
        assert sampling_probability(cfg, 0) == 0.0
        assert sampling_probability(cfg, 8) == 0.4
        assert sampling_probability(cfg, 30) == 0.4

    def test_linear_in_between(self):
        cfg = TrainConfig(ss_start=0.0, ss_end=0.4, ss_ramp_epochs=8)
        np.testing.assert_allclose(sampling_probability(cfg, 4), 0.2)

    def test_zero_ramp_jumps_to_end(self):
        cfg = TrainConfig(ss_start=0.0, ss_end=0.4, ss_ramp_epochs=0)
        assert sampling_probability(cfg, 0) == 0.4


class TestTrainCe:
    def test_single_utterance_memorization(self, tiny_world):
        u = tiny_world.splits["train"].utterances[0]
        model = AedModel(tiny_world.model_config(), seed=9)
        cfg = TrainConfig(mode="CE", epochs=200, batch_size=1, lr=2e-3, dropout=0.0, ss_end=0.0, label_smoothing=0.0, seed=0)
        metrics = train_ce(model, [(u.x_clean, list(u.y))], [], cfg, drop_ids=tiny_world.drop_ids)
        first = metrics.entries[0]["train_loss"]
        last = metrics.entries[-1]["train_loss"]
        assert last < 0.1 * first

    def test_empty_training_set_rejected(self, tiny_world):
        model = AedModel(tiny_world.model_config(), seed=9)
        with pytest.raises(ConfigError):
            train_ce(model, [], [], TrainConfig(), drop_ids=tiny_world.drop_ids)

    def test_identical_seed_identical_metrics(self, tiny_world):
        pairs = labeled_pairs(tiny_world.splits["adapt"], "clean")[:40]
        dev = dev_eval_pairs(tiny_world.splits["dev"], "clean")

        def run():
            model = AedModel(tiny_world.model_config(), seed=3)
            cfg = TrainConfig(mode="CE", epochs=3, batch_size=16, lr=1e-3, dropout=0.1, seed=21)
            return train_ce(model, pairs, dev, cfg, drop_ids=tiny_world.drop_ids)

        a, b = run(), run()
        assert _strip_times(a.entries) == _strip_times(b.entries)

    def test_seed_changes_the_stream(self, tiny_world):
        pairs = labeled_pairs(tiny_world.splits["adapt"], "clean")[:40]

        def run(seed):
            model = AedModel(tiny_world.model_config(), seed=3)
            cfg = TrainConfig(mode="CE", epochs=2, batch_size=16, lr=1e-3, dropout=0.1, seed=seed)
            return train_ce(model, pairs, [], cfg, drop_ids=tiny_world.drop_ids)

        a, b = run(1), run(2)
        assert _strip_times(a.entries) != _strip_times(b.entries)

    def test_nan_parameters_abort_with_diagnostic(self, tiny_world):
        model = AedModel(tiny_world.model_config(), seed=3)
        model.params["out.w"].data[:] = np.nan
        pairs = labeled_pairs(tiny_world.splits["adapt"], "clean")[:8]
        with pytest.raises(DivergenceError):
            train_ce(model, pairs, [], TrainConfig(epochs=1, seed=0), drop_ids=tiny_world.drop_ids)


class TestCloneStudent:
    def test_posteriors_identical_after_cloning(self, tiny_world):
        student = clone_student(tiny_world.teacher)
        u = tiny_world.splits["dev"].utterances[0]
        cond = np.array(u.y[:-1])
        a = tiny_world.teacher.forward_teacher_forced(u.x_clean, cond).probs()
        b = student.forward_teacher_forced(u.x_clean, cond).probs()
        assert np.array_equal(a, b)

    def test_student_update_leaves_teacher_bits(self, tiny_world):
        teacher = tiny_world.teacher
        before = {k: v.copy() for k, v in teacher.state_dict().items()}
        student = clone_student(teacher)
        for p in student.parameters():
            p.data += 0.5
        after = teacher.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_ts_loss_right_after_cloning_is_teacher_entropy(self, tiny_world):
        teacher = tiny_world.teacher
        student = clone_student(teacher)
        u = tiny_world.splits["adapt"].utterances[0]
        res = teacher.greedy_decode(u.x_clean, max_len=u.x_clean.shape[0] + 10)
        cond = np.array([teacher.config.sos_id] + res.tokens[:-1])
        teacher_rows = res.posteriors
        posts = student.forward_teacher_forced(u.x_clean, cond)
        loss = losses.kl_token_ts_loss(losses.SoftTarget(probs=teacher_rows), posts).item()
        entropy = -(teacher_rows * np.log(teacher_rows)).sum(axis=1).mean()
        assert abs(loss - entropy) < 1e-9  # implied KL is zero


class TestUnsupervisedAdaptation:
    def _view(self, world, n=30):
        utts = world.splits["adapt"].utterances[:n]
        return ParallelFrames(x_clean=[u.x_clean for u in utts], x_corrupt=[u.x_corrupt for u in utts])

    def _cfg(self, mode, **kw):
        base = dict(mode=mode, epochs=2, batch_size=16, lr=3e-4, dropout=0.0, seed=4, eval_every=1)
        base.update(kw)
        return TrainConfig(**base)

    def test_teacher_bytes_unchanged_by_adaptation(self, tiny_world):
        teacher = tiny_world.teacher
        before = {k: v.copy() for k, v in teacher.state_dict().items()}
        student = clone_student(teacher)
        adapt_token_ts(teacher, student, self._view(tiny_world), [], self._cfg("TOKEN_TS"), tiny_world.drop_ids)
        after = teacher.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_stationary_at_clone_with_identical_sides(self, tiny_world):
        # student == teacher and matched inputs: transfer loss gradient ~ 0
        teacher = tiny_world.teacher
        student = clone_student(teacher)
        utts = tiny_world.splits["adapt"].utterances[:16]
        view = ParallelFrames(x_clean=[u.x_clean for u in utts], x_corrupt=[u.x_clean for u in utts])
        batches, _ = _build_ts_batches(teacher, view, self._cfg("TOKEN_TS"), np.random.default_rng(0))
        tb = batches[0]
        posts = student.forward_teacher_forced_batch(tb.frames_tgt, tb.cond)
        loss = losses.kl_token_ts_loss(losses.SoftTarget(probs=tb.teacher_rows, mask=tb.mask), posts)
        backward(loss)
        norm = math.sqrt(sum(float((p.grad**2).sum()) for p in student.parameters() if p.grad is not None))
        assert norm < 1e-6

    def test_all_eos_teacher_means_nothing_to_adapt(self, tiny_world):
        rigged = clone_student(tiny_world.teacher)
        rigged.params["out.b"].data[:] = 0.0
        rigged.params["out.b"].data[rigged.config.eos_id] = 80.0
        rigged.params["out.w"].data[:] = 0.0
        student = clone_student(tiny_world.teacher)
        with pytest.raises(ConfigError):
            adapt_token_ts(rigged, student, self._view(tiny_world), [], self._cfg("TOKEN_TS"), tiny_world.drop_ids)

    def test_skip_counting_via_batch_builder(self, tiny_world):
        rigged = clone_student(tiny_world.teacher)
        rigged.params["out.b"].data[:] = 0.0
        rigged.params["out.b"].data[rigged.config.eos_id] = 80.0
        rigged.params["out.w"].data[:] = 0.0
        batches, skipped = _build_ts_batches(rigged, self._view(tiny_world, 12), self._cfg("TOKEN_TS"), np.random.default_rng(0))
        assert skipped == 12 and batches == []
        batches, skipped = _build_ts_batches(
            tiny_world.teacher, self._view(tiny_world, 12), self._cfg("TOKEN_TS"), np.random.default_rng(0)
        )
        assert skipped == 0 and sum(b.frames_tgt.shape[0] for b in batches) == 12

    def test_unsupervised_results_blind_to_labels(self, tiny_world):
        # poisoning every ground-truth label must not change the outcome
        teacher = tiny_world.teacher
        splits = tiny_world.splits

        def run(poison: bool):
            utts = [copy.deepcopy(u) for u in splits["adapt"].utterances[:24]]
            if poison:
                rng = np.random.default_rng(0)
                for u in utts:
                    u.y = [u.y[0]] + [int(t) for t in rng.integers(4, len(tiny_world.vocab), size=len(u.y) - 2)] + [u.y[-1]]
            view = ParallelFrames(x_clean=[u.x_clean for u in utts], x_corrupt=[u.x_corrupt for u in utts])
            student = clone_student(teacher)
            dev = dev_eval_pairs(splits["dev"], "corrupt")
            adapt_token_ts(teacher, student, view, dev, self._cfg("TOKEN_TS"), tiny_world.drop_ids)
            return student.state_dict()

        clean_run, poisoned_run = run(False), run(True)
        assert all(np.array_equal(clean_run[k], poisoned_run[k]) for k in clean_run)

    def test_seq_ts_crosscheck_flag_and_loss_identity(self, tiny_world):
        teacher = tiny_world.teacher
        student = clone_student(teacher)
        metrics = adapt_seq_ts(teacher, student, self._view(tiny_world), [], self._cfg("SEQ_TS"), tiny_world.drop_ids)
        assert metrics.notes["seq_ts_equals_ce_crosscheck"] is True

    def test_adaptation_metric_stream_deterministic(self, tiny_world):
        teacher = tiny_world.teacher

        def run():
            student = clone_student(teacher)
            m = adapt_token_ts(
                teacher,
                student,
                self._view(tiny_world),
                dev_eval_pairs(tiny_world.splits["dev"], "corrupt"),
                self._cfg("TOKEN_TS", dropout=0.1),
                tiny_world.drop_ids,
            )
            return m, student.state_dict()

        (m1, s1), (m2, s2) = run(), run()
        assert _strip_times(m1.entries) == _strip_times(m2.entries)
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)


class TestSupervisedAdaptation:
    def test_mode_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="ATS", lam=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(mode="ITS", its_weight=1.5).validate()
        with pytest.raises(ConfigError):
            TrainConfig(mode="NOPE").validate()

    def test_missing_labels_rejected(self, tiny_world):
        utts = [copy.deepcopy(u) for u in tiny_world.splits["adapt"].utterances[:4]]
        utts[2].y = []
        cfg = TrainConfig(mode="CTS", epochs=1, seed=0, init_token_ts=False)
        with pytest.raises(ConfigError):
            adapt_supervised(tiny_world.teacher, clone_student(tiny_world.teacher), utts, [], cfg, tiny_world.drop_ids)

    def test_cts_equals_ats_with_indicator_on_real_batch(self, tiny_world):
        teacher = tiny_world.teacher
        student = clone_student(teacher)
        utts = tiny_world.splits["adapt"].utterances[:16]
        cfg = TrainConfig(mode="CTS", epochs=1, batch_size=8, seed=0, init_token_ts=False)
        batches = _build_supervised_batches(teacher, utts, cfg, np.random.default_rng(0))
        sb = batches[0]
        posts = student.forward_teacher_forced_batch(sb.frames_tgt, sb.cond)
        target = losses.SoftTarget(probs=sb.teacher_rows)
        indicator = (sb.teacher_rows.argmax(axis=1) == sb.y_flat).astype(float)
        a = losses.cts_loss(target, sb.y_flat, posts).item()
        b = losses.ats_loss(target, sb.y_flat, posts, lam=0.25, weights=indicator).item()
        assert a == b

    def test_init_phase_runs_when_requested(self, tiny_world):
        teacher = tiny_world.teacher
        student = clone_student(teacher)
        utts = tiny_world.splits["adapt"].utterances[:24]
        cfg = TrainConfig(mode="ATS", lam=0.25, epochs=1, batch_size=16, lr=3e-4, seed=0, init_token_ts=True)
        metrics = adapt_supervised(teacher, student, utts, [], cfg, tiny_world.drop_ids)
        phases = {e["phase"] for e in metrics.entries}
        assert "init_token_ts" in phases and "main" in phases

    def test_supervised_deterministic_per_seed(self, tiny_world):
        teacher = tiny_world.teacher
        utts = tiny_world.splits["adapt"].utterances[:24]
        dev = dev_eval_pairs(tiny_world.splits["dev"], "corrupt")

        def run():
            student = clone_student(teacher)
            cfg = TrainConfig(mode="ITS", its_weight=0.5, epochs=2, batch_size=16, lr=3e-4, dropout=0.1, seed=8, init_token_ts=False)
            m = adapt_supervised(teacher, student, utts, dev, cfg, tiny_world.drop_ids)
            return m, student.state_dict()

        (m1, s1), (m2, s2) = run(), run()
        assert _strip_times(m1.entries) == _strip_times(m2.entries)
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)
