"""End-to-end gradient verification against central finite differences.

Covers every registered autodiff op, every loss, and a miniature
encoder-decoder trained end to end, each as a scalar function of its
parameters. A deliberately wrong backward rule anywhere shows up as a
relative error orders of magnitude above the 1e-4 gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor, finite_difference_check
from .model import AedConfig, AedModel, PosteriorSeq

TOL = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol


@dataclass
class GradcheckReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(f"{status}  {c.name:<28s} max_rel_err={c.max_rel_err:.3e}  tol={c.tol:.0e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'}  overall ({len(self.checks)} checks)")
        return out


def _rand(rng, *shape) -> np.ndarray:
    return rng.uniform(-2.0, 2.0, size=shape)


def _weighted(out: Tensor, rng) -> Tensor:
    """Reduce an op output to a scalar that is sensitive to every element."""
    w = Tensor(rng.normal(size=out.data.shape))
    return ad.sum_(ad.mul(out, w))


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def run(name, params, fn):
        rep = finite_difference_check(fn, params, eps=EPS, tol=TOL)
        results.append(CheckResult(name=name, max_rel_err=rep.max_rel_err))

    a = Tensor(_rand(rng, 3, 4), requires_grad=True, name="a")
    b = Tensor(_rand(rng, 3, 4), requires_grad=True, name="b")
    row = Tensor(_rand(rng, 4), requires_grad=True, name="row")
    wrng = np.random.default_rng(seed + 1)

    run("add", [a, b], lambda: _weighted(ad.add(a, b), np.random.default_rng(11)))
    run("add_broadcast", [a, row], lambda: _weighted(ad.add(a, row), np.random.default_rng(12)))
    run("sub", [a, b], lambda: _weighted(ad.sub(a, b), np.random.default_rng(13)))
    run("mul", [a, b], lambda: _weighted(ad.mul(a, b), np.random.default_rng(14)))
    run("mul_broadcast", [a, row], lambda: _weighted(ad.mul(a, row), np.random.default_rng(15)))
    run("scale", [a], lambda: _weighted(ad.scale(a, -1.7), np.random.default_rng(16)))
    run("tanh", [a], lambda: _weighted(ad.tanh(a), np.random.default_rng(17)))
    run("sigmoid", [a], lambda: _weighted(ad.sigmoid(a), np.random.default_rng(18)))
    run("exp", [a], lambda: _weighted(ad.exp(a), np.random.default_rng(19)))

    pos = Tensor(np.abs(_rand(wrng, 3, 4)) + 0.5, requires_grad=True, name="pos")
    run("log", [pos], lambda: _weighted(ad.log(pos), np.random.default_rng(20)))

    m1 = Tensor(_rand(rng, 3, 4), requires_grad=True, name="m1")
    m2 = Tensor(_rand(rng, 4, 2), requires_grad=True, name="m2")
    run("matmul", [m1, m2], lambda: _weighted(ad.matmul(m1, m2), np.random.default_rng(21)))

    v = Tensor(_rand(rng, 5), requires_grad=True, name="v")
    run("softmax", [v], lambda: _weighted(ad.softmax(v, axis=-1), np.random.default_rng(22)))
    run("softmax_axis0", [a], lambda: _weighted(ad.softmax(a, axis=0), np.random.default_rng(23)))
    run("log_softmax", [a], lambda: _weighted(ad.log_softmax(a, axis=1), np.random.default_rng(24)))

    c1 = Tensor(_rand(rng, 2, 3), requires_grad=True, name="c1")
    c2 = Tensor(_rand(rng, 4, 3), requires_grad=True, name="c2")
    run("concat", [c1, c2], lambda: _weighted(ad.concat([c1, c2], axis=0), np.random.default_rng(25)))
    run("narrow", [a], lambda: _weighted(ad.narrow(a, 1, 1, 2), np.random.default_rng(26)))
    run("reshape", [a], lambda: _weighted(ad.reshape(a, (4, 3)), np.random.default_rng(27)))
    run("tile_rows", [a], lambda: _weighted(ad.tile_rows(a, 3), np.random.default_rng(28)))

    big = Tensor(_rand(rng, 6, 4), requires_grad=True, name="big")
    run("block_sum_rows", [big], lambda: _weighted(ad.block_sum_rows(big, 3), np.random.default_rng(29)))
    run("sum", [a], lambda: ad.sum_(a))
    run("sum_axis", [a], lambda: _weighted(ad.sum_(a, axis=1), np.random.default_rng(30)))
    run("mean", [a], lambda: ad.mean_(a))
    run("mean_axis", [a], lambda: _weighted(ad.mean_(a, axis=0), np.random.default_rng(31)))

    table = Tensor(_rand(rng, 6, 3), requires_grad=True, name="table")
    ids = np.array([0, 3, 3, 5])
    run("embedding_lookup", [table], lambda: _weighted(ad.embedding_lookup(table, ids), np.random.default_rng(32)))

    x = Tensor(_rand(rng, 3, 5), requires_grad=True, name="ln_x")
    g = Tensor(np.abs(_rand(rng, 5)) + 0.5, requires_grad=True, name="ln_g")
    bi = Tensor(_rand(rng, 5), requires_grad=True, name="ln_b")
    run("layer_norm", [x, g, bi], lambda: _weighted(ad.layer_norm(x, g, bi), np.random.default_rng(33)))

    # mask is re-sampled identically on each call, so f stays deterministic
    run(
        "dropout_mask",
        [a],
        lambda: _weighted(ad.dropout_mask(a, 0.3, np.random.default_rng(77)), np.random.default_rng(34)),
    )

    # the fused recurrent cell, and the same math spelled out elementwise
    wx = Tensor(_rand(rng, 4, 6), requires_grad=True, name="wx")
    wh = Tensor(_rand(rng, 2, 6), requires_grad=True, name="wh")
    bg = Tensor(_rand(rng, 6), requires_grad=True, name="bg")
    h0 = Tensor(_rand(rng, 3, 2), requires_grad=True, name="h0")

    run("gru_cell", [a, wx, wh, bg, h0], lambda: _weighted(ad.gru_cell(a, h0, wx, wh, bg), np.random.default_rng(35)))

    def gru_composite():
        gi = ad.matmul(a, wx) + bg
        gh = ad.matmul(h0, wh)
        r = ad.sigmoid(ad.narrow(gi, 1, 0, 2) + ad.narrow(gh, 1, 0, 2))
        z = ad.sigmoid(ad.narrow(gi, 1, 2, 2) + ad.narrow(gh, 1, 2, 2))
        n = ad.tanh(ad.narrow(gi, 1, 4, 2) + ad.mul(r, ad.narrow(gh, 1, 4, 2)))
        h1 = n + ad.mul(z, h0 - n)
        return _weighted(h1, np.random.default_rng(35))

    run("gru_step_composite", [a, wx, wh, bg, h0], gru_composite)
    return results


def check_losses(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    steps, vocab = 6, 9
    logits = Tensor(rng.normal(size=(steps, vocab)), requires_grad=True, name="logits")
    teacher_rows = _softmax_rows(rng.normal(size=(steps, vocab)))
    y = rng.integers(0, vocab, size=steps)
    mask = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
    teacher = losses.SoftTarget(probs=teacher_rows)
    teacher_masked = losses.SoftTarget(probs=teacher_rows, mask=mask)
    posts = lambda: PosteriorSeq(logits=logits, steps=steps, batch=1)

    cases = {
        "loss_ce": lambda: losses.ce_loss(posts(), y, smoothing=0.0),
        "loss_ce_smoothed": lambda: losses.ce_loss(posts(), y, smoothing=0.1),
        "loss_token_ts": lambda: losses.kl_token_ts_loss(teacher, posts()),
        "loss_token_ts_masked": lambda: losses.kl_token_ts_loss(teacher_masked, posts()),
        "loss_seq_ts": lambda: losses.seq_ts_loss(posts(), y),
        "loss_its": lambda: losses.its_loss(teacher, y, posts(), weight=0.3),
        "loss_cts": lambda: losses.cts_loss(teacher, y, posts()),
        "loss_ats": lambda: losses.ats_loss(teacher, y, posts(), lam=0.25),
    }
    results = []
    for name, fn in cases.items():
        rep = finite_difference_check(fn, [logits], eps=EPS, tol=TOL)
        results.append(CheckResult(name=name, max_rel_err=rep.max_rel_err))
    return results


def _micro_model(seed: int, vocab: int, d_in: int) -> AedModel:
    cfg = AedConfig(vocab_size=vocab, d_in=d_in, d_model=6, d_att=5, enc_layers=2, dec_layers=1)
    return AedModel(cfg, seed=seed)


def check_micro_aed(seed: int = 0, coords_per_tensor: int = 4) -> list[CheckResult]:
    """Full-model check: CE and the adaptive blend loss through the whole
    encoder/attention/decoder stack on a 2-utterance batch."""
    rng = np.random.default_rng(seed)
    vocab, d_in, n, steps, b = 7, 3, 4, 4, 2
    student = _micro_model(seed + 1, vocab, d_in)
    teacher = _micro_model(seed + 2, vocab, d_in)
    teacher.set_trainable(False)
    frames = rng.normal(size=(b, n, d_in))
    cond = np.vstack(
        [np.zeros((1, b), dtype=np.int64), rng.integers(2, vocab, size=(steps - 1, b))]
    )
    y_flat = rng.integers(1, vocab, size=steps * b)
    with ad.no_grad():
        teacher_rows = teacher.forward_teacher_forced_batch(frames, cond).probs()
    target = losses.SoftTarget(probs=teacher_rows)

    def ce():
        posts = student.forward_teacher_forced_batch(frames, cond)
        return losses.ce_loss(posts, y_flat, smoothing=0.1)

    def ats():
        posts = student.forward_teacher_forced_batch(frames, cond)
        return losses.ats_loss(target, y_flat, posts, lam=0.25)

    params = student.parameters()
    probe = np.random.default_rng(seed + 3)
    out = []
    for name, fn in (("micro_aed_ce", ce), ("micro_aed_ats", ats)):
        rep = finite_difference_check(fn, params, eps=EPS, tol=TOL, max_coords_per_tensor=coords_per_tensor, rng=probe)
        out.append(CheckResult(name=name, max_rel_err=rep.max_rel_err))
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def run_gradcheck(seed: int = 0) -> GradcheckReport:
    checks = check_ops(seed) + check_losses(seed) + check_micro_aed(seed)
    return GradcheckReport(checks=checks)
