"""Loss values against brute-force double sums, plus the exact identities
the objective family must satisfy."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsadapt import losses
from tsadapt.autodiff import ShapeError, Tensor
from tsadapt.errors import ConfigError
from tsadapt.losses import (
    SoftTarget,
    adaptive_weights,
    ats_loss,
    ce_loss,
    cts_loss,
    its_loss,
    kl_token_ts_loss,
    one_hot_rows,
    seq_ts_loss,
)
from tsadapt.model import PosteriorSeq


def _posts(logits: np.ndarray) -> PosteriorSeq:
    return PosteriorSeq(logits=Tensor(np.asarray(logits, dtype=float)), steps=logits.shape[0], batch=1)


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _brute_force_ce(probs, target_rows, mask=None):
    """Independent oracle: explicit double sum over steps and vocabulary."""
    total, count = 0.0, 0.0
    for l in range(probs.shape[0]):
        if mask is not None and mask[l] == 0:
            continue
        count += 1
        for u in range(probs.shape[1]):
            total -= target_rows[l, u] * math.log(probs[l, u])
    return total / count


class TestCeLoss:
    def test_uniform_posterior_gives_log_vocab(self):
        logits = np.zeros((3, 8))
        loss = ce_loss(_posts(logits), np.array([1, 2, 3]), smoothing=0.0)
        np.testing.assert_allclose(loss.item(), math.log(8), atol=1e-12)

    def test_matching_smoothed_target_attains_entropy(self):
        # minimum of CE is the target's own entropy; frozen oracle value for
        # vocab 8, smoothing 0.1: 0.4669823946259747
        eps, vocab = 0.1, 8
        y = np.array([3])
        target = (1 - eps) * one_hot_rows(y, vocab) + eps / vocab
        logits = np.log(target)
        loss = ce_loss(_posts(logits), y, smoothing=eps)
        np.testing.assert_allclose(loss.item(), 0.4669823946259747, atol=1e-12)

    def test_random_case_vs_brute_force(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(3, 6))
        y = rng.integers(0, 6, size=3)
        target = 0.9 * one_hot_rows(y, 6) + 0.1 / 6
        expected = _brute_force_ce(_softmax(logits), target)
        np.testing.assert_allclose(ce_loss(_posts(logits), y, smoothing=0.1).item(), expected, atol=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ce_loss(_posts(np.zeros((3, 6))), np.array([1, 2]))

    def test_mask_restricts_the_mean(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, size=4)
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        expected = _brute_force_ce(_softmax(logits), one_hot_rows(y, 5), mask)
        np.testing.assert_allclose(ce_loss(_posts(logits), y, mask=mask).item(), expected, atol=1e-12)


class TestTokenTsLoss:
    def test_student_equals_teacher_gives_teacher_entropy(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(4, 9))
        p = _softmax(logits)
        entropy = -(p * np.log(p)).sum(axis=1).mean()
        loss = kl_token_ts_loss(SoftTarget(probs=p), _posts(logits))
        np.testing.assert_allclose(loss.item(), entropy, atol=1e-12)

    def test_one_hot_teacher_reduces_to_ce(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(5, 7))
        y = rng.integers(0, 7, size=5)
        teacher = SoftTarget(probs=one_hot_rows(y, 7))
        np.testing.assert_allclose(
            kl_token_ts_loss(teacher, _posts(logits)).item(),
            ce_loss(_posts(logits), y, smoothing=0.0).item(),
            atol=1e-12,
        )

    def test_random_case_vs_brute_force(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(4, 11))
        teacher_rows = _softmax(rng.normal(size=(4, 11)))
        expected = _brute_force_ce(_softmax(logits), teacher_rows)
        got = kl_token_ts_loss(SoftTarget(probs=teacher_rows), _posts(logits)).item()
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_invalid_teacher_rows_rejected(self):
        with pytest.raises(ValueError):
            SoftTarget(probs=np.full((2, 4), 0.5))


class TestSeqTsLoss:
    def test_identical_to_unsmoothed_ce(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(5, 8))
        y_t = rng.integers(0, 8, size=5)
        a = seq_ts_loss(_posts(logits), y_t).item()
        b = ce_loss(_posts(logits), y_t, smoothing=0.0).item()
        assert a == b  # exact identity, not just close

    def test_single_token(self):
        logits = np.log(np.array([[0.2, 0.5, 0.3]]))
        np.testing.assert_allclose(seq_ts_loss(_posts(logits), np.array([1])).item(), -math.log(0.5), atol=1e-12)

    def test_five_step_random_vs_direct_formula(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(5, 6))
        y_t = rng.integers(0, 6, size=5)
        p = _softmax(logits)
        expected = -np.mean([math.log(p[l, y_t[l]]) for l in range(5)])
        np.testing.assert_allclose(seq_ts_loss(_posts(logits), y_t).item(), expected, atol=1e-12)


class TestAdaptiveWeights:
    def test_lambda_one_recovers_posterior(self):
        # stated behavior: w equals the correct-token posterior at lam=1
        rng = np.random.default_rng(12)
        probs = _softmax(rng.normal(size=(6, 5)))
        y = rng.integers(0, 5, size=6)
        w = adaptive_weights(SoftTarget(probs=probs), y, lam=1.0).w
        np.testing.assert_allclose(w, probs[np.arange(6), y], atol=1e-12)

    def test_scalar_oracle_case(self):
        # lam=0.25, p=0.9: independently evaluated 0.9**0.25 / (0.9**0.25 + 0.1**0.25)
        probs = np.array([[0.9, 0.1]])
        aw = adaptive_weights(SoftTarget(probs=probs), np.array([0]), lam=0.25)
        np.testing.assert_allclose(aw.c[0], 0.974003746425297, atol=1e-12)
        np.testing.assert_allclose(aw.d[0], 0.562341325190349, atol=1e-12)
        np.testing.assert_allclose(aw.w[0], 0.633974596215561, atol=1e-12)

    def test_symmetric_point(self):
        probs = np.array([[0.5, 0.5]])
        aw = adaptive_weights(SoftTarget(probs=probs), np.array([0]), lam=0.25)
        np.testing.assert_allclose(aw.c[0], 0.5**0.25, atol=1e-15)
        np.testing.assert_allclose(aw.w[0], 0.5, atol=1e-15)

    def test_boundaries_exact(self):
        for lam in (0.1, 0.25, 1.0, 3.0):
            probs = np.array([[1.0, 0.0], [0.0, 1.0]])
            aw = adaptive_weights(SoftTarget(probs=probs), np.array([0, 0]), lam=lam)
            assert aw.w[0] == 1.0 and aw.w[1] == 0.0

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(ConfigError):
            adaptive_weights(SoftTarget(probs=np.array([[1.0, 0.0]])), np.array([0]), lam=0.0)

    @given(
        p1=st.floats(1e-9, 1.0 - 1e-9),
        p2=st.floats(1e-9, 1.0 - 1e-9),
        lam=st.sampled_from([0.1, 0.25, 1.0, 3.0]),
    )
    @settings(max_examples=300, deadline=None)
    def test_monotone_in_correct_token_posterior(self, p1, p2, lam):
        lo, hi = sorted((p1, p2))
        probs = np.array([[lo, 1 - lo], [hi, 1 - hi]])
        w = adaptive_weights(SoftTarget(probs=probs), np.array([0, 0]), lam=lam).w
        assert w[0] <= w[1] + 1e-15
        assert 0.0 <= w[0] <= 1.0 and 0.0 <= w[1] <= 1.0

    @given(p=st.floats(0.01, 0.99))
    @settings(max_examples=200, deadline=None)
    def test_tiny_lambda_approaches_half(self, p):
        probs = np.array([[p, 1 - p]])
        w = adaptive_weights(SoftTarget(probs=probs), np.array([0]), lam=1e-6).w[0]
        assert abs(w - 0.5) < 1e-3


class TestBlendLosses:
    def _case(self, seed, steps=5, vocab=7):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(steps, vocab))
        teacher_rows = _softmax(rng.normal(size=(steps, vocab)))
        y = rng.integers(0, vocab, size=steps)
        return _posts(logits), SoftTarget(probs=teacher_rows), y

    def test_its_weight_one_equals_token_ts(self):
        posts, teacher, y = self._case(13)
        assert its_loss(teacher, y, posts, 1.0).item() == kl_token_ts_loss(teacher, posts).item()

    def test_its_weight_zero_equals_plain_ce(self):
        posts, teacher, y = self._case(14)
        assert its_loss(teacher, y, posts, 0.0).item() == ce_loss(posts, y, smoothing=0.0).item()

    def test_its_half_vs_brute_force(self):
        posts, teacher, y = self._case(15)
        target = 0.5 * teacher.probs + 0.5 * one_hot_rows(y, 7)
        expected = _brute_force_ce(posts.probs(), target)
        np.testing.assert_allclose(its_loss(teacher, y, posts, 0.5).item(), expected, atol=1e-12)

    def test_its_weight_out_of_range_rejected(self):
        posts, teacher, y = self._case(16)
        with pytest.raises(ConfigError):
            its_loss(teacher, y, posts, 1.5)

    def test_cts_all_correct_equals_token_ts(self):
        posts, teacher, _ = self._case(17)
        y = teacher.probs.argmax(axis=1)
        assert cts_loss(teacher, y, posts).item() == kl_token_ts_loss(teacher, posts).item()

    def test_cts_all_wrong_equals_plain_ce(self):
        posts, teacher, _ = self._case(18)
        y = (teacher.probs.argmax(axis=1) + 1) % 7
        assert cts_loss(teacher, y, posts).item() == ce_loss(posts, y, smoothing=0.0).item()

    def test_cts_mixed_vs_per_step_brute_force(self):
        rng = np.random.default_rng(19)
        steps, vocab = 6, 5
        logits = rng.normal(size=(steps, vocab))
        teacher_rows = _softmax(rng.normal(size=(steps, vocab)))
        y = np.array([teacher_rows[l].argmax() if l % 2 == 0 else (teacher_rows[l].argmax() + 1) % vocab for l in range(steps)])
        target = np.stack(
            [teacher_rows[l] if teacher_rows[l].argmax() == y[l] else one_hot_rows(y[l : l + 1], vocab)[0] for l in range(steps)]
        )
        expected = _brute_force_ce(_softmax(logits), target)
        np.testing.assert_allclose(cts_loss(SoftTarget(probs=teacher_rows), y, _posts(logits)).item(), expected, atol=1e-12)

    def test_ats_with_indicator_weights_equals_cts(self):
        posts, teacher, y = self._case(20)
        indicator = (teacher.probs.argmax(axis=1) == y).astype(float)
        a = ats_loss(teacher, y, posts, lam=0.25, weights=indicator).item()
        assert a == cts_loss(teacher, y, posts).item()

    def test_ats_teacher_certain_on_truth_equals_token_ts(self):
        rng = np.random.default_rng(21)
        steps, vocab = 4, 6
        y = rng.integers(0, vocab, size=steps)
        teacher = SoftTarget(probs=one_hot_rows(y, vocab))
        posts = _posts(rng.normal(size=(steps, vocab)))
        for lam in (0.1, 1.0, 3.0):
            assert ats_loss(teacher, y, posts, lam=lam).item() == kl_token_ts_loss(teacher, posts).item()

    def test_ats_random_vs_brute_force(self):
        posts, teacher, y = self._case(22)
        lam = 0.25
        p = teacher.probs[np.arange(5), y]
        w = p**lam / (p**lam + (1 - p) ** lam)
        target = w[:, None] * teacher.probs + (1 - w)[:, None] * one_hot_rows(y, 7)
        expected = _brute_force_ce(posts.probs(), target)
        np.testing.assert_allclose(ats_loss(teacher, y, posts, lam=lam).item(), expected, atol=1e-12)

    def test_composite_targets_are_distributions(self):
        rng = np.random.default_rng(23)
        steps, vocab = 50, 9
        teacher_rows = _softmax(rng.normal(size=(steps, vocab)))
        y = rng.integers(0, vocab, size=steps)
        for w in (0.0, 0.3, 1.0):
            rows = losses._blend_rows(SoftTarget(probs=teacher_rows), y, np.full(steps, w))
            assert rows.min() >= 0
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)
        aw = adaptive_weights(SoftTarget(probs=teacher_rows), y, lam=0.25)
        rows = losses._blend_rows(SoftTarget(probs=teacher_rows), y, aw.w)
        assert rows.min() >= 0
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)


class TestVocabularyPermutationInvariance:
    def test_all_losses_invariant_under_relabeling(self):
        rng = np.random.default_rng(24)
        steps, vocab = 5, 8
        logits = rng.normal(size=(steps, vocab))
        teacher_rows = _softmax(rng.normal(size=(steps, vocab)))
        y = rng.integers(0, vocab, size=steps)
        perm = rng.permutation(vocab)
        logits_p = logits[:, perm]
        teacher_p = teacher_rows[:, perm]
        y_p = np.array([int(np.nonzero(perm == t)[0][0]) for t in y])

        def both(fn_plain, fn_perm):
            np.testing.assert_allclose(fn_plain.item(), fn_perm.item(), atol=1e-12)

        both(ce_loss(_posts(logits), y, 0.1), ce_loss(_posts(logits_p), y_p, 0.1))
        both(
            kl_token_ts_loss(SoftTarget(probs=teacher_rows), _posts(logits)),
            kl_token_ts_loss(SoftTarget(probs=teacher_p), _posts(logits_p)),
        )
        both(
            its_loss(SoftTarget(probs=teacher_rows), y, _posts(logits), 0.4),
            its_loss(SoftTarget(probs=teacher_p), y_p, _posts(logits_p), 0.4),
        )
        both(
            cts_loss(SoftTarget(probs=teacher_rows), y, _posts(logits)),
            cts_loss(SoftTarget(probs=teacher_p), y_p, _posts(logits_p)),
        )
        both(
            ats_loss(SoftTarget(probs=teacher_rows), y, _posts(logits), 0.25),
            ats_loss(SoftTarget(probs=teacher_p), y_p, _posts(logits_p), 0.25),
        )
