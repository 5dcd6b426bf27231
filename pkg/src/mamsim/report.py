"""Operating characteristics and plot-ready tables from replicate batches.

Declaration categories per intervention are mutually exclusive: "efficacy",
"futility", "both" (the diagnostic case where one look satisfied both
criteria), and "none".  "Effective" below always means the clean efficacy
category.  Quantiles are nearest-rank (type 1), so summaries reproduce
exactly across implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .montecarlo import BatchResult

DECISIONS = ("efficacy", "futility", "both", "none")


class ReportError(ValueError):
    """Empty batches or insufficient stored detail for the request."""


@dataclass(frozen=True)
class SizeStats:
    mean: float
    sd: float
    median: float
    p10: float
    p90: float


@dataclass(frozen=True)
class DecisionRow:
    pattern: tuple[str, ...]
    count: int
    proportion_early: float


@dataclass(frozen=True)
class OperatingCharacteristics:
    n_replicates: int
    arms: tuple[str, ...]
    decision_prob: dict[str, dict[str, float]]
    eff_early: dict[str, float]
    eff_last: dict[str, float]
    fut_early: dict[str, float]
    fut_last: dict[str, float]
    any_effective: float
    all_effective: float
    both_incidence: float
    size_stats: dict[str, SizeStats]
    decision_table: tuple[DecisionRow, ...]


def nearest_rank(sorted_values, p: float) -> float:
    """Type-1 quantile: the ceil(p*n)-th smallest value."""
    n = len(sorted_values)
    idx = max(1, math.ceil(p * n))
    return float(sorted_values[idx - 1])


def _size_stats(values) -> SizeStats:
    values = sorted(values)
    n = len(values)
    mean = sum(values) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return SizeStats(
        mean=mean,
        sd=sd,
        median=nearest_rank(values, 0.5),
        p10=nearest_rank(values, 0.1),
        p90=nearest_rank(values, 0.9),
    )


def operating_characteristics(
    results, n_max: int, arm_order=None
) -> OperatingCharacteristics:
    """Aggregate one scenario's replicate results.

    ``arm_order`` fixes the per-arm iteration order of the sample-size
    table (control first by convention); intervention statistics follow
    the design's intervention order regardless.
    """
    if not results:
        raise ReportError("cannot summarise an empty batch")
    arms = results[0].arms
    if arm_order is None:
        arm_order = sorted(results[0].sample_sizes)
    n = len(results)

    counts = {arm: {d: 0 for d in DECISIONS} for arm in arms}
    eff_early = {arm: 0 for arm in arms}
    eff_last = {arm: 0 for arm in arms}
    fut_early = {arm: 0 for arm in arms}
    fut_last = {arm: 0 for arm in arms}
    any_eff = all_eff = both_any = 0
    patterns: dict[tuple[str, ...], list[int]] = {}

    for res in results:
        pattern = []
        for arm in arms:
            decision = res.decisions[arm].decision
            timing = res.decisions[arm].timing
            counts[arm][decision] += 1
            pattern.append(decision)
            if decision == "efficacy":
                (eff_early if timing == "early" else eff_last)[arm] += 1
            elif decision == "futility":
                (fut_early if timing == "early" else fut_last)[arm] += 1
        decisions = [res.decisions[arm].decision for arm in arms]
        any_eff += any(d == "efficacy" for d in decisions)
        all_eff += all(d == "efficacy" for d in decisions)
        both_any += any(d == "both" for d in decisions)
        stopped_early = res.total_size < n_max
        entry = patterns.setdefault(tuple(pattern), [0, 0])
        entry[0] += 1
        entry[1] += stopped_early

    table = tuple(
        DecisionRow(pattern=pat, count=cnt, proportion_early=early / cnt)
        for pat, (cnt, early) in sorted(
            patterns.items(), key=lambda kv: (-kv[1][0], kv[0])
        )
    )
    size_stats = {
        arm: _size_stats([r.sample_sizes[arm] for r in results])
        for arm in arm_order
    }
    size_stats["overall"] = _size_stats([r.total_size for r in results])

    return OperatingCharacteristics(
        n_replicates=n,
        arms=arms,
        decision_prob={
            arm: {d: c / n for d, c in per_arm.items()}
            for arm, per_arm in counts.items()
        },
        eff_early={a: v / n for a, v in eff_early.items()},
        eff_last={a: v / n for a, v in eff_last.items()},
        fut_early={a: v / n for a, v in fut_early.items()},
        fut_last={a: v / n for a, v in fut_last.items()},
        any_effective=any_eff / n,
        all_effective=all_eff / n,
        both_incidence=both_any / n,
        size_stats=size_stats,
        decision_table=table,
    )


def summarize(batch: BatchResult, full: bool = False):
    """Operating characteristics plus a deterministic text rendering.

    The short variant reports declaration probabilities; ``full`` adds the
    early/last breakdown, sample-size statistics, and the decision
    combination table.  When the batch carries a matched null companion,
    its summary is appended as a second section.
    """
    if not batch.results:
        raise ReportError("cannot summarise an empty batch")
    n_max = batch.spec_document["n_max"]
    arm_order = batch.spec_document["model"]["arms"]
    oc = operating_characteristics(batch.results, n_max, arm_order)

    lines: list[str] = []
    lines.append(f"design fingerprint: {batch.fingerprint}")
    lines.append(
        f"replicates: {len(batch.seeds)} "
        f"(seeds {min(batch.seeds)}..{max(batch.seeds)})"
    )
    _render_scenario(lines, oc, "primary scenario", full)
    if batch.results_null is not None:
        oc_null = operating_characteristics(batch.results_null, n_max, arm_order)
        _render_scenario(lines, oc_null, "matched null scenario", full)
    return oc, "\n".join(lines) + "\n"


def _render_scenario(lines, oc: OperatingCharacteristics, label: str, full: bool):
    lines.append("")
    lines.append(f"--- {label} ({oc.n_replicates} replicates) ---")
    lines.append("probability of declaring efficacy / futility per arm:")
    for arm in oc.arms:
        probs = oc.decision_prob[arm]
        row = f"  {arm}: efficacy {probs['efficacy']:.4f}  futility {probs['futility']:.4f}"
        if full:
            row += (
                f"  [efficacy early {oc.eff_early[arm]:.4f} last {oc.eff_last[arm]:.4f};"
                f" futility early {oc.fut_early[arm]:.4f} last {oc.fut_last[arm]:.4f}]"
            )
        lines.append(row)
    lines.append(f"at least one intervention effective: {oc.any_effective:.4f}")
    lines.append(f"all interventions effective: {oc.all_effective:.4f}")
    if oc.both_incidence > 0:
        lines.append(
            "warning: both efficacy and futility criteria met in "
            f"{oc.both_incidence:.4f} of replicates"
        )
    if not full:
        return
    lines.append("sample sizes (mean, sd, median, p10, p90):")
    for arm, st in oc.size_stats.items():
        lines.append(
            f"  {arm}: {st.mean:.1f}, {st.sd:.1f}, {st.median:.0f}, "
            f"{st.p10:.0f}, {st.p90:.0f}"
        )
    lines.append("decision combinations (" + ", ".join(oc.arms) + "):")
    for row in oc.decision_table:
        lines.append(
            f"  [{', '.join(row.pattern)}] x {row.count} "
            f"(early stop {row.proportion_early:.3f})"
        )


def emit_plot_data(batch: BatchResult, kind: str):
    """Plot-ready rows: (header, rows) for CSV export.

    ``estimates``: one row per replicate and intervention with the
    posterior-mean estimate at the arm's last analysed look, the arm's
    final sample size, and the decision; requires ``extended >= 1``.
    ``size``: one row per replicate and arm plus the per-replicate total.
    """
    if not batch.results:
        raise ReportError("cannot tabulate an empty batch")
    if kind == "estimates":
        if batch.extended < 1:
            raise ReportError(
                "estimates need per-look histories; rerun with extended >= 1"
            )
        header = ["seed", "arm", "estimate", "arm_size", "decision", "timing"]
        rows = []
        for res in batch.results:
            for arm in res.arms:
                d = res.decisions[arm]
                rows.append(
                    (
                        res.seed,
                        arm,
                        res.estimate_mean.get(arm),
                        res.sample_sizes[arm],
                        d.decision,
                        d.timing,
                    )
                )
        return header, rows
    if kind == "size":
        header = ["seed", "arm", "size"]
        rows = []
        for res in batch.results:
            for arm, size in res.sample_sizes.items():
                rows.append((res.seed, arm, size))
            rows.append((res.seed, "overall", res.total_size))
        return header, rows
    raise ReportError(f"unknown plot-data kind {kind!r}")
