"""Decoding-based evaluation: token error rate and comparison reports.

The error metric is TER over content tokens: greedy-decode, strip the
framing/space tokens from both reference and hypothesis, align with
unit-cost edit distance, and report (S + I + D) / reference-token-count.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus
from .model import AedModel


@dataclass
class EditCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0

    @property
    def total(self) -> int:
        return self.sub + self.ins + self.dele

    def __iadd__(self, other: "EditCounts") -> "EditCounts":
        self.sub += other.sub
        self.ins += other.ins
        self.dele += other.dele
        return self


def edit_distance(ref: list, hyp: list) -> EditCounts:
    """Minimal-cost alignment with unit costs; ties prefer substitution over
    insertion over deletion."""
    nr, nh = len(ref), len(hyp)
    # cell: (cost, S, I, D)
    prev = [(j, 0, j, 0) for j in range(nh + 1)]
    for i in range(1, nr + 1):
        cur = [(i, 0, 0, i)] + [None] * nh
        ri = ref[i - 1]
        for j in range(1, nh + 1):
            diag = prev[j - 1]
            if ri == hyp[j - 1]:
                cand = diag
            else:
                cand = (diag[0] + 1, diag[1] + 1, diag[2], diag[3])
            left = cur[j - 1]
            up = prev[j]
            if left[0] + 1 < cand[0]:
                cand = (left[0] + 1, left[1], left[2] + 1, left[3])
            if up[0] + 1 < cand[0]:
                cand = (up[0] + 1, up[1], up[2], up[3] + 1)
            cur[j] = cand
        prev = cur
    cost, s, i_, d = prev[nh]
    assert cost == s + i_ + d
    return EditCounts(sub=s, ins=i_, dele=d)


@dataclass
class TerResult:
    ter: float
    counts: EditCounts
    ref_tokens: int
    per_utt: list[dict] = field(default_factory=list)


def ter_on_pairs(
    model: AedModel,
    pairs: list[tuple[np.ndarray, list[int]]],
    drop_ids: set[int],
    max_extra: int = 10,
    batch_size: int = 64,
    keep_per_utt: bool = False,
    utt_ids: list[str] | None = None,
) -> TerResult:
    """TER of greedy decodes against already-stripped references.

    `pairs` holds (frames, reference-content-token-ids); hypothesis tokens in
    `drop_ids` are stripped before alignment. Utterances are decoded in
    frame-count buckets; the aggregate is order-independent.
    """
    by_n: dict[int, list[int]] = {}
    for i, (frames, _) in enumerate(pairs):
        by_n.setdefault(frames.shape[0], []).append(i)
    totals = EditCounts()
    ref_total = 0
    per_utt = []
    for n in sorted(by_n):
        idxs = by_n[n]
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            frames = np.stack([pairs[i][0] for i in chunk], axis=0)
            results = model.greedy_decode_batch(frames, max_len=n + max_extra)
            for i, res in zip(chunk, results):
                ref = pairs[i][1]
                hyp = [t for t in res.tokens if t not in drop_ids]
                counts = edit_distance(ref, hyp)
                totals += counts
                ref_total += len(ref)
                if keep_per_utt:
                    per_utt.append(
                        {
                            "utt_id": utt_ids[i] if utt_ids else str(i),
                            "ref": list(ref),
                            "hyp": hyp,
                            "sub": counts.sub,
                            "ins": counts.ins,
                            "del": counts.dele,
                            "hit_max_len": res.hit_max_len,
                        }
                    )
    if keep_per_utt:
        per_utt.sort(key=lambda r: r["utt_id"])
    ter = totals.total / ref_total if ref_total else 0.0
    return TerResult(ter=ter, counts=totals, ref_tokens=ref_total, per_utt=per_utt)


def eval_pairs_from_corpus(corpus: Corpus, side: str) -> list[tuple[np.ndarray, list[int]]]:
    """(frames, stripped reference) pairs for one side of a corpus split."""
    if side not in ("clean", "corrupt"):
        raise ValueError(f"side must be 'clean' or 'corrupt', got {side!r}")
    vocab = corpus.vocab
    out = []
    for u in corpus.utterances:
        frames = u.x_clean if side == "clean" else u.x_corrupt
        out.append((frames, vocab.strip_specials(u.y)))
    return out


def corpus_ter(
    model: AedModel,
    corpus: Corpus,
    side: str,
    max_extra: int = 10,
    keep_per_utt: bool = False,
) -> TerResult:
    """Greedy-decode one side of a corpus split and aggregate TER."""
    vocab = corpus.vocab
    drop = {vocab.sos_id, vocab.eos_id, vocab.space_id}
    return ter_on_pairs(
        model,
        eval_pairs_from_corpus(corpus, side),
        drop_ids=drop,
        max_extra=max_extra,
        keep_per_utt=keep_per_utt,
        utt_ids=[u.utt_id for u in corpus.utterances],
    )


def relative_reduction(baseline: float, adapted: float) -> float | None:
    """Percent error-rate reduction vs the baseline; None when undefined."""
    if baseline == 0:
        return None
    return 100.0 * (baseline - adapted) / baseline


REPORT_FIELDS = ("method", "ter", "werr_pct")
CURVE_FIELDS = ("method", "seed", "epoch", "dev_ter")


def emit_report(
    rows: list[dict],
    out_dir: str | Path,
    per_seed: list[dict] | None = None,
    curves: list[dict] | None = None,
    baseline_method: str | None = None,
) -> None:
    """Write report.json, report.csv and curves.csv.

    `rows` are the comparison table ({method, ter, werr_pct, ...}); per-seed
    raw TERs and dev-TER-vs-epoch curves ride along for external plotting.
    CSV numbers use 4 decimal places with a dot separator.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "baseline_method": baseline_method,
        "rows": rows,
        "per_seed": per_seed or [],
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([r.get("method", ""), _fmt(r.get("ter")), _fmt(r.get("werr_pct"))])
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in curves or []:
            w.writerow([r.get("method", ""), r.get("seed", ""), r.get("epoch", ""), _fmt(r.get("dev_ter"))])


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.4f}"
