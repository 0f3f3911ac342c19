"""Edit-distance metrics, per-language reports and relative-WER analysis."""

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

_UNITS = ("word", "char")


def _alignment_key(triple: Tuple[int, int, int]) -> Tuple[int, int, int]:
    """Order alignments: fewest edits, then most substitutions, then most
    insertions.  This realizes the substitution > insertion > deletion
    preference deterministically."""
    s, d, i = triple
    return (s + d + i, -s, -i)


def edit_distance(ref: Sequence, hyp: Sequence) -> Tuple[int, int, int]:
    """Counts (S, D, I) of the preferred minimal alignment of hyp to ref.

    Dynamic program over full count triples; adding an edit to two
    alignments preserves their preference order, so per-cell selection by
    the alignment key is exact.
    """
    prev: List[Tuple[int, int, int]] = [(0, 0, j) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(0, i, 0)]
        for j in range(1, len(hyp) + 1):
            s, d, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (s, d, ins)
            else:
                diag = (s + 1, d, ins)
            s, d, ins = cur[j - 1]
            insert = (s, d, ins + 1)
            s, d, ins = prev[j]
            delete = (s, d + 1, ins)
            cur.append(min((diag, insert, delete), key=_alignment_key))
        prev = cur
    return prev[-1]


def split_units(text: str, unit: str) -> List[str]:
    """Whitespace words or single characters as scoring units."""
    if unit == "word":
        return text.split()
    if unit == "char":
        return list(text)
    raise ValueError(f"unit must be one of {_UNITS}, got {unit!r}")


@dataclass
class LangStats:
    """Accumulated edit counts for one language."""

    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_tokens: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def error_rate(self) -> float:
        if self.ref_tokens == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_tokens


@dataclass
class WerReport:
    """Per-language counts plus the named aggregate rates."""

    per_language: Dict[int, LangStats]
    aggregates: Dict[str, float] = field(default_factory=dict)
    missing: Tuple[str, ...] = ()

    def rate(self, lid: int) -> float:
        return self.per_language[lid].error_rate


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def score_system(refs: Sequence, hyps: Mapping[str, str], unit: str = "char",
                 units_by_lid: Optional[Mapping[int, str]] = None,
                 high_group: Sequence[int] = (), low_group: Sequence[int] = (),
                 exclude_lid: Optional[int] = None,
                 on_missing: str = "warn") -> WerReport:
    """Accumulate edit counts per language over reference records.

    Each record needs `id`, `lid` and `text` attributes.  A missing
    hypothesis counts as all deletions (with a warning) or raises when
    on_missing="error".  Hypotheses without a reference are always errors.
    """
    if on_missing not in ("warn", "error"):
        raise ValueError(f"on_missing must be warn or error, got {on_missing!r}")
    ref_ids = {r.id for r in refs}
    extra = sorted(set(hyps) - ref_ids)
    if extra:
        raise ValueError(f"hypotheses without references: {', '.join(extra)}")
    per_language: Dict[int, LangStats] = {}
    missing: List[str] = []
    for record in refs:
        lang_unit = (units_by_lid or {}).get(record.lid, unit)
        ref_units = split_units(record.text, lang_unit)
        stats = per_language.setdefault(record.lid, LangStats())
        if record.id not in hyps:
            if on_missing == "error":
                raise ValueError(f"missing hypothesis for {record.id}")
            warnings.warn(f"missing hypothesis for {record.id}; "
                          f"scored as {len(ref_units)} deletions")
            missing.append(record.id)
            stats.deletions += len(ref_units)
            stats.ref_tokens += len(ref_units)
            continue
        s, d, i = edit_distance(ref_units,
                                split_units(hyps[record.id], lang_unit))
        stats.substitutions += s
        stats.deletions += d
        stats.insertions += i
        stats.ref_tokens += len(ref_units)
    lids = sorted(per_language)
    rates = {lid: per_language[lid].error_rate for lid in lids}
    aggregates = {"avg": _mean([rates[l] for l in lids])}
    if exclude_lid is not None:
        aggregates[f"avg_excl_{exclude_lid}"] = _mean(
            [rates[l] for l in lids if l != exclude_lid])
    if high_group:
        aggregates["avg_high"] = _mean([rates[l] for l in high_group])
    if low_group:
        aggregates["avg_low"] = _mean([rates[l] for l in low_group])
    return WerReport(per_language=per_language, aggregates=aggregates,
                     missing=tuple(missing))


def relative_change(system_rate: float, baseline_rate: float
                    ) -> Optional[float]:
    """Percent change versus a baseline; None when the baseline is zero."""
    if baseline_rate == 0:
        return None
    return 100.0 * (system_rate - baseline_rate) / baseline_rate


def relative_wer(system: WerReport, baseline: WerReport
                 ) -> Dict[int, Optional[float]]:
    """Per-language percent WER change of system against baseline."""
    if set(system.per_language) != set(baseline.per_language):
        raise ValueError(
            f"language sets differ: {sorted(system.per_language)} vs "
            f"{sorted(baseline.per_language)}")
    return {lid: relative_change(system.rate(lid), baseline.rate(lid))
            for lid in sorted(system.per_language)}


def write_report_csv(path, report: WerReport) -> None:
    """One row per language: language, S, D, I, N, rate."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("language,S,D,I,N,rate\n")
        for lid in sorted(report.per_language):
            st = report.per_language[lid]
            fh.write(f"{lid},{st.substitutions},{st.deletions},"
                     f"{st.insertions},{st.ref_tokens},{st.error_rate!r}\n")


def write_report_json(path, report: WerReport) -> None:
    payload = {
        "per_language": {
            str(lid): {"S": st.substitutions, "D": st.deletions,
                       "I": st.insertions, "N": st.ref_tokens,
                       "rate": st.error_rate}
            for lid, st in sorted(report.per_language.items())},
        "aggregates": report.aggregates,
        "missing": list(report.missing),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
