"""Tests for edit distance, system scoring and relative-WER analysis."""

import json
from dataclasses import dataclass

import numpy as np
import pytest

from lupet.eval import (LangStats, WerReport, edit_distance, relative_change,
                        relative_wer, score_system, split_units,
                        write_report_csv, write_report_json)


@dataclass
class Ref:
    id: str
    lid: int
    text: str


def brute_force_counts(ref, hyp):
    """Enumerate every alignment; keep the preferred minimal count triple."""
    found = []

    def walk(i, j, s, d, ins):
        if i == len(ref) and j == len(hyp):
            found.append((s, d, ins))
            return
        if i < len(ref) and j < len(hyp):
            walk(i + 1, j + 1, s + (ref[i] != hyp[j]), d, ins)
        if j < len(hyp):
            walk(i, j + 1, s, d, ins + 1)
        if i < len(ref):
            walk(i + 1, j, s, d + 1, ins)

    walk(0, 0, 0, 0, 0)
    return min(found, key=lambda t: (t[0] + t[1] + t[2], -t[0], -t[2]))


class TestEditDistance:
    def test_identity(self):
        assert edit_distance(["a", "b", "c"], ["a", "b", "c"]) == (0, 0, 0)

    def test_single_insertion(self):
        """An inserted token costs one and the rate is 1/2."""
        s, d, i = edit_distance(["the", "cat"], ["the", "bat", "cat"])
        assert (s, d, i) == (0, 0, 1)
        assert (s + d + i) / 2 == 0.5

    def test_single_deletion(self):
        assert edit_distance(["a", "b"], ["a"]) == (0, 1, 0)

    def test_single_substitution(self):
        assert edit_distance(["a", "b"], ["a", "c"]) == (1, 0, 0)

    def test_empty_sides(self):
        assert edit_distance([], []) == (0, 0, 0)
        assert edit_distance(["a", "b"], []) == (0, 2, 0)
        assert edit_distance([], ["a", "b"]) == (0, 0, 2)

    def test_substitution_preferred_over_indel_pair(self):
        """One substitution beats a deletion plus an insertion."""
        assert edit_distance(["a"], ["b"]) == (1, 0, 0)

    def test_matches_bruteforce(self):
        """DP equals the exhaustive alignment enumerator on short pairs."""
        rng = np.random.default_rng(0)
        for _ in range(300):
            ref = [int(x) for x in rng.integers(0, 3, rng.integers(0, 7))]
            hyp = [int(x) for x in rng.integers(0, 3, rng.integers(0, 7))]
            assert edit_distance(ref, hyp) == brute_force_counts(ref, hyp)

    def test_total_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = [int(x) for x in rng.integers(0, 4, rng.integers(0, 8))]
            b = [int(x) for x in rng.integers(0, 4, rng.integers(0, 8))]
            assert sum(edit_distance(a, b)) == sum(edit_distance(b, a))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            seqs = [[int(x) for x in rng.integers(0, 3, rng.integers(0, 6))]
                    for _ in range(3)]
            ab = sum(edit_distance(seqs[0], seqs[1]))
            bc = sum(edit_distance(seqs[1], seqs[2]))
            ac = sum(edit_distance(seqs[0], seqs[2]))
            assert ac <= ab + bc


class TestSplitUnits:
    def test_word_and_char(self):
        assert split_units("ab cd", "word") == ["ab", "cd"]
        assert split_units("ab", "char") == ["a", "b"]

    def test_unknown_unit(self):
        with pytest.raises(ValueError):
            split_units("ab", "syllable")


class TestScoreSystem:
    def refs(self):
        return [Ref("u0", 0, "abc"), Ref("u1", 0, "de"),
                Ref("u2", 1, "fgh")]

    def test_identical_is_zero(self):
        hyps = {"u0": "abc", "u1": "de", "u2": "fgh"}
        report = score_system(self.refs(), hyps)
        assert all(st.error_rate == 0.0
                   for st in report.per_language.values())
        assert report.aggregates["avg"] == 0.0

    def test_empty_hypotheses_are_all_deletions(self):
        hyps = {"u0": "", "u1": "", "u2": ""}
        report = score_system(self.refs(), hyps)
        for st in report.per_language.values():
            assert st.error_rate == 1.0
            assert st.substitutions == 0 and st.insertions == 0

    def test_hand_computed_counts(self):
        """Language 0: one sub and one insertion over 5; language 1 clean."""
        hyps = {"u0": "axc", "u1": "dze", "u2": "fgh"}
        report = score_system(self.refs(), hyps)
        lang0 = report.per_language[0]
        assert (lang0.substitutions, lang0.deletions, lang0.insertions) \
            == (1, 0, 1)
        assert lang0.ref_tokens == 5
        assert lang0.error_rate == pytest.approx(0.4)
        assert report.per_language[1].error_rate == 0.0
        assert report.aggregates["avg"] == pytest.approx(0.2)

    def test_missing_hypothesis_warns_and_deletes(self):
        hyps = {"u0": "abc", "u2": "fgh"}
        with pytest.warns(UserWarning, match="u1"):
            report = score_system(self.refs(), hyps)
        assert report.missing == ("u1",)
        assert report.per_language[0].deletions == 2

    def test_missing_hypothesis_can_error(self):
        with pytest.raises(ValueError, match="u1"):
            score_system(self.refs(), {"u0": "abc", "u2": "fgh"},
                         on_missing="error")

    def test_unmatched_hypothesis_rejected(self):
        hyps = {"u0": "abc", "u1": "de", "u2": "fgh", "zz": "x"}
        with pytest.raises(ValueError, match="zz"):
            score_system(self.refs(), hyps)

    def test_word_unit_and_per_language_units(self):
        refs = [Ref("a", 0, "ab cd"), Ref("b", 1, "ef")]
        hyps = {"a": "ab cd", "b": "ef"}
        by_word = score_system(refs, hyps, unit="word")
        assert by_word.per_language[0].ref_tokens == 2
        mixed = score_system(refs, hyps, unit="char",
                             units_by_lid={0: "word"})
        assert mixed.per_language[0].ref_tokens == 2
        assert mixed.per_language[1].ref_tokens == 2

    def test_aggregate_is_language_mean(self):
        rng = np.random.default_rng(3)
        alphabet = "abcdef"
        refs, hyps = [], {}
        for k in range(60):
            lid = int(rng.integers(0, 4))
            text = "".join(rng.choice(list(alphabet),
                                      int(rng.integers(1, 9))))
            guess = "".join(rng.choice(list(alphabet),
                                       int(rng.integers(0, 9))))
            refs.append(Ref(f"u{k}", lid, text))
            hyps[f"u{k}"] = guess
        report = score_system(refs, hyps)
        rates = [report.per_language[l].error_rate
                 for l in sorted(report.per_language)]
        assert abs(report.aggregates["avg"] - sum(rates) / len(rates)) <= 1e-12

    def test_named_groups(self):
        hyps = {"u0": "abc", "u1": "de", "u2": "xxx"}
        report = score_system(self.refs(), hyps, high_group=(0,),
                              low_group=(1,), exclude_lid=1)
        assert report.aggregates["avg_high"] == 0.0
        assert report.aggregates["avg_low"] == 1.0
        assert report.aggregates["avg_excl_1"] == 0.0


class TestRelativeWer:
    def report(self, rates):
        per = {lid: LangStats(substitutions=int(r * 100), ref_tokens=100)
               for lid, r in rates.items()}
        return WerReport(per_language=per)

    def test_identical_systems(self):
        base = self.report({0: 0.2, 1: 0.4})
        assert relative_wer(base, base) == {0: 0.0, 1: 0.0}

    def test_improvement(self):
        sys = self.report({0: 0.08})
        base = self.report({0: 0.10})
        assert relative_wer(sys, base)[0] == pytest.approx(-20.0)

    def test_zero_baseline_not_applicable(self):
        sys = self.report({0: 0.08})
        base = self.report({0: 0.0})
        assert relative_wer(sys, base)[0] is None

    def test_paper_headline_arithmetic(self):
        """13.10 against 16.32 is a 19.7 percent relative reduction."""
        change = relative_change(13.10, 16.32)
        assert change == pytest.approx(-19.7, abs=0.05)

    def test_language_set_mismatch(self):
        with pytest.raises(ValueError):
            relative_wer(self.report({0: 0.1}), self.report({0: 0.1, 1: 0.2}))


class TestReportFiles:
    def test_csv_layout(self, tmp_path):
        report = WerReport(
            per_language={0: LangStats(1, 2, 3, 10),
                          1: LangStats(0, 0, 0, 5)},
            aggregates={"avg": 0.3})
        path = tmp_path / "report.csv"
        write_report_csv(path, report)
        lines = path.read_text().splitlines()
        assert lines[0] == "language,S,D,I,N,rate"
        assert lines[1] == "0,1,2,3,10,0.6"
        assert lines[2] == "1,0,0,0,5,0.0"

    def test_json_summary(self, tmp_path):
        report = WerReport(
            per_language={0: LangStats(1, 0, 0, 4)},
            aggregates={"avg": 0.25}, missing=("u9",))
        path = tmp_path / "report.json"
        write_report_json(path, report)
        payload = json.loads(path.read_text())
        assert payload["per_language"]["0"]["S"] == 1
        assert payload["aggregates"]["avg"] == 0.25
        assert payload["missing"] == ["u9"]
