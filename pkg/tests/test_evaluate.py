"""Edit distance, TER aggregation, reductions, report files."""

import csv
import functools
import json

import numpy as np
import pytest

from tsadapt.evaluate import EditCounts, edit_distance, emit_report, relative_reduction


def brute_force_cost(ref: tuple, hyp: tuple) -> int:
    """Exhaustive recursion; independent of the DP implementation."""

    @functools.lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        best = go(i + 1, j + 1) + (ref[i] != hyp[j])
        best = min(best, go(i, j + 1) + 1, go(i + 1, j) + 1)
        return best

    return go(0, 0)


class TestEditDistance:
    def test_equal_sequences(self):
        c = edit_distance([1, 2, 3], [1, 2, 3])
        assert (c.sub, c.ins, c.dele) == (0, 0, 0)

    def test_single_deletion(self):
        c = edit_distance(["a", "b", "c"], ["a", "c"])
        assert (c.sub, c.ins, c.dele) == (0, 0, 1)

    def test_single_insertion(self):
        c = edit_distance(["a", "c"], ["a", "b", "c"])
        assert (c.sub, c.ins, c.dele) == (0, 1, 0)

    def test_substitution_preferred_on_ties(self):
        c = edit_distance(["a"], ["b"])
        assert (c.sub, c.ins, c.dele) == (1, 0, 0)

    def test_empty_cases(self):
        assert edit_distance([], []).total == 0
        assert edit_distance([], [1, 2]).ins == 2
        assert edit_distance([1, 2], []).dele == 2

    def test_random_pairs_match_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            ref = tuple(rng.integers(0, 4, size=rng.integers(0, 7)))
            hyp = tuple(rng.integers(0, 4, size=rng.integers(0, 7)))
            assert edit_distance(list(ref), list(hyp)).total == brute_force_cost(ref, hyp)

    def test_total_cost_symmetry_with_ins_del_swapped(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ref = list(rng.integers(0, 3, size=rng.integers(0, 6)))
            hyp = list(rng.integers(0, 3, size=rng.integers(0, 6)))
            a, b = edit_distance(ref, hyp), edit_distance(hyp, ref)
            assert a.total == b.total
            assert (a.ins, a.dele) == (b.dele, b.ins)

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            seqs = [list(rng.integers(0, 3, size=rng.integers(0, 6))) for _ in range(3)]
            ab = edit_distance(seqs[0], seqs[1]).total
            bc = edit_distance(seqs[1], seqs[2]).total
            ac = edit_distance(seqs[0], seqs[2]).total
            assert ac <= ab + bc


class TestRelativeReduction:
    def test_paper_style_arithmetic(self):
        assert abs(relative_reduction(13.93, 13.06) - 6.2) < 0.1
        assert abs(relative_reduction(13.93, 14.00) - (-0.5)) < 0.1
        assert abs(relative_reduction(13.93, 12.49) - 10.3) < 0.1

    def test_equal_rates_give_zero(self):
        assert relative_reduction(0.25, 0.25) == 0.0

    def test_zero_baseline_undefined(self):
        assert relative_reduction(0.0, 0.1) is None


class TestEmitReport:
    def test_empty_rows_yield_valid_files_with_headers(self, tmp_path):
        emit_report([], tmp_path)
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["method", "ter", "werr_pct"]]
        with open(tmp_path / "curves.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["method", "seed", "epoch", "dev_ter"]]
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["rows"] == []

    def test_json_round_trip_reproduces_rows(self, tmp_path):
        rows = [
            {"method": "token_ts", "ter": 0.123456789, "werr_pct": 6.25},
            {"method": "seq_ts", "ter": 0.25, "werr_pct": None},
        ]
        emit_report(rows, tmp_path, per_seed=[{"method": "token_ts", "seed": 0, "ter": 0.12}], baseline_method="farfield_ce")
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["rows"] == rows
        assert payload["baseline_method"] == "farfield_ce"
        assert payload["per_seed"][0]["seed"] == 0

    def test_csv_formats_four_decimals_dot_separator(self, tmp_path):
        emit_report(
            [{"method": "m", "ter": 0.123456789, "werr_pct": -0.5}],
            tmp_path,
            curves=[{"method": "m", "seed": 1, "epoch": 0, "dev_ter": 0.5}],
        )
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[1] == ["m", "0.1235", "-0.5000"]
        with open(tmp_path / "curves.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[1] == ["m", "1", "0", "0.5000"]


class TestEditCountsPlumbing:
    def test_iadd_accumulates(self):
        total = EditCounts()
        total += EditCounts(sub=1, ins=2, dele=3)
        total += EditCounts(sub=1)
        assert (total.sub, total.ins, total.dele, total.total) == (2, 2, 3, 7)
