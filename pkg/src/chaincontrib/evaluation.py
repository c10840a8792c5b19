"""Comparison of the decentralised ranking with the centralised attribution.

Uncertainties rank contributors low-is-better while attribution scores
rank high-is-better, so the uncertainty series is negated and both series
are mapped onto the attribution series' (min, max) before they are put
side by side. Agreement is quantified with Kendall tau-b and Spearman
rho; everything is emitted as a CSV rank table, a flat key-value summary,
and a standalone SVG bar chart.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from chaincontrib.dataset import NOISE_ACTOR_ID
from chaincontrib.protocol import ContributionRanking


def minmax_align(
    series: Sequence[float], target_min: float, target_max: float
) -> tuple[float, ...]:
    """Affine map sending the series' (min, max) onto the target endpoints.

    Order is preserved; a constant series has no such map and is rejected.
    """
    values = np.asarray(list(series), dtype=float)
    if values.size < 2:
        raise ValueError("alignment needs at least two values")
    if not target_min < target_max:
        raise ValueError("target_min must be strictly below target_max")
    low = float(values.min())
    high = float(values.max())
    if low == high:
        raise ValueError("constant series cannot be aligned to a non-trivial range")
    scaled = (values - low) / (high - low) * (target_max - target_min) + target_min
    return tuple(float(v) for v in scaled)


def invert_for_comparison(ranking: ContributionRanking) -> dict[str, float]:
    """Negated uncertainties: a high score now means high estimated
    contribution, matching the attribution axis."""
    if not ranking.entries:
        raise ValueError("ranking is empty")
    return {e.actor_id: -e.total_uncertainty for e in ranking.entries}


def _matched_pairs(
    rank_a: Mapping[str, float], rank_b: Mapping[str, float]
) -> tuple[np.ndarray, np.ndarray]:
    if set(rank_a) != set(rank_b):
        raise ValueError("rank agreement needs identical actor sets")
    if len(rank_a) < 2:
        raise ValueError("rank agreement needs at least two actors")
    actors = sorted(rank_a)
    a = np.array([rank_a[x] for x in actors], dtype=float)
    b = np.array([rank_b[x] for x in actors], dtype=float)
    return a, b


def kendall_tau(rank_a: Mapping[str, float], rank_b: Mapping[str, float]) -> float:
    """Kendall tau-b by pair counting, with the tie correction."""
    a, b = _matched_pairs(rank_a, rank_b)
    n = a.shape[0]
    concordant = discordant = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da = np.sign(a[i] - a[j])
            db = np.sign(b[i] - b[j])
            if da == 0 and db == 0:
                ties_a += 1
                ties_b += 1
            elif da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif da == db:
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_a) * (n0 - ties_b))
    if denom == 0:
        raise ValueError("tau undefined: a series is constant")
    return (concordant - discordant) / denom


def _average_ranks(values: np.ndarray) -> np.ndarray:
    # Ties share the average of the positions they would occupy.
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=float)
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_rho(rank_a: Mapping[str, float], rank_b: Mapping[str, float]) -> float:
    """Pearson correlation of average ranks."""
    a, b = _matched_pairs(rank_a, rank_b)
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    if ra.std() == 0 or rb.std() == 0:
        raise ValueError("rho undefined: a series is constant")
    return float(np.corrcoef(ra, rb)[0, 1])


@dataclass(frozen=True)
class ComparisonReport:
    """Both contribution series side by side, ordered by decentralised rank."""

    actor_ids: tuple[str, ...]
    uncertainties: tuple[float, ...]
    aligned_uncertainty: tuple[float, ...]
    shap: tuple[float, ...]
    aligned_shap: tuple[float, ...]
    rank_decentralised: tuple[int, ...]
    rank_shap: tuple[int, ...]
    below_floor: tuple[bool, ...]
    kendall: float
    spearman: float
    noise_contrast: float
    noise_actor_id: str | None

    def __post_init__(self) -> None:
        n = len(self.actor_ids)
        for field_name in (
            "uncertainties",
            "aligned_uncertainty",
            "shap",
            "aligned_shap",
            "rank_decentralised",
            "rank_shap",
            "below_floor",
        ):
            if len(getattr(self, field_name)) != n:
                raise ValueError(f"{field_name} must have one entry per actor")
        if n >= 2:
            # Alignment contract: the two series share their endpoints.
            if not math.isclose(
                min(self.aligned_uncertainty), min(self.aligned_shap), abs_tol=1e-9
            ) or not math.isclose(
                max(self.aligned_uncertainty), max(self.aligned_shap), abs_tol=1e-9
            ):
                raise ValueError("aligned series must share min and max")

    def score_of(self, actor_id: str) -> tuple[float, float]:
        i = self.actor_ids.index(actor_id)
        return self.aligned_uncertainty[i], self.aligned_shap[i]


def build_comparison(
    ranking: ContributionRanking,
    shap_scores: Mapping[str, float],
    noise_actor_id: str | None = NOISE_ACTOR_ID,
) -> ComparisonReport:
    """Join the two result sets on actor id and compute agreement statistics.

    Rank agreement (tau, rho) is computed over the real actors only; the
    noise pseudo-actor's separation is captured by noise_contrast instead:
    the gap between the weakest real actor and the noise actor on the
    decentralised side, divided by the same gap on the attribution side.
    """
    ranked_ids = ranking.actor_order()
    if set(ranked_ids) != set(shap_scores):
        raise ValueError(
            "actor sets differ: "
            f"ranking has {sorted(ranked_ids)}, attribution has {sorted(shap_scores)}"
        )
    if len(ranked_ids) < 2:
        raise ValueError("comparison needs at least two actors")

    uncertainties = tuple(e.total_uncertainty for e in ranking.entries)
    shap_values = tuple(float(shap_scores[a]) for a in ranked_ids)
    target_min = min(shap_values)
    target_max = max(shap_values)
    aligned_unc = minmax_align(
        [-u for u in uncertainties], target_min, target_max
    )
    aligned_shap = minmax_align(shap_values, target_min, target_max)

    shap_order = sorted(ranked_ids, key=lambda a: (-shap_scores[a], a))
    shap_rank = {a: i + 1 for i, a in enumerate(shap_order)}

    real = [a for a in ranked_ids if a != noise_actor_id]
    if len(real) < 2:
        raise ValueError("comparison needs at least two real actors")
    dec_scores = {a: -u for a, u in zip(ranked_ids, uncertainties)}
    real_dec = {a: dec_scores[a] for a in real}
    real_shap = {a: float(shap_scores[a]) for a in real}
    tau = kendall_tau(real_dec, real_shap)
    rho = spearman_rho(real_dec, real_shap)

    if noise_actor_id is not None and noise_actor_id in set(ranked_ids):
        by_actor_unc = dict(zip(ranked_ids, aligned_unc))
        by_actor_shap = dict(zip(ranked_ids, aligned_shap))
        dec_gap = min(by_actor_unc[a] for a in real) - by_actor_unc[noise_actor_id]
        shap_gap = min(by_actor_shap[a] for a in real) - by_actor_shap[noise_actor_id]
        if shap_gap != 0.0:
            contrast = dec_gap / shap_gap
        elif dec_gap > 0.0:
            contrast = math.inf
        else:
            contrast = math.nan
    else:
        contrast = math.nan

    flags = dict(ranking.below_floor_flags)
    return ComparisonReport(
        actor_ids=tuple(ranked_ids),
        uncertainties=uncertainties,
        aligned_uncertainty=aligned_unc,
        shap=shap_values,
        aligned_shap=aligned_shap,
        rank_decentralised=tuple(e.estimated_rank for e in ranking.entries),
        rank_shap=tuple(shap_rank[a] for a in ranked_ids),
        below_floor=tuple(flags[a] for a in ranked_ids),
        kendall=tau,
        spearman=rho,
        noise_contrast=contrast,
        noise_actor_id=noise_actor_id if noise_actor_id in set(ranked_ids) else None,
    )


RANK_TABLE_NAME = "rank_table.csv"
SUMMARY_NAME = "summary.txt"
CHART_NAME = "comparison.svg"


def emit_report(report: ComparisonReport, out_dir: str | Path) -> tuple[Path, Path, Path]:
    """Write the rank table, the key-value summary, and the bar chart.

    Re-emitting the same report produces byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    table_path = out_dir / RANK_TABLE_NAME
    with table_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "actor_id",
                "uncertainty",
                "aligned_uncertainty",
                "shap",
                "aligned_shap",
                "rank_dec",
                "rank_shap",
                "below_floor",
            ]
        )
        for i, actor_id in enumerate(report.actor_ids):
            writer.writerow(
                [
                    actor_id,
                    repr(float(report.uncertainties[i])),
                    repr(float(report.aligned_uncertainty[i])),
                    repr(float(report.shap[i])),
                    repr(float(report.aligned_shap[i])),
                    report.rank_decentralised[i],
                    report.rank_shap[i],
                    "true" if report.below_floor[i] else "false",
                ]
            )

    summary_path = out_dir / SUMMARY_NAME
    lines = [
        f"actors={len(report.actor_ids)}",
        f"kendall_tau={repr(float(report.kendall))}",
        f"spearman_rho={repr(float(report.spearman))}",
        f"noise_contrast={repr(float(report.noise_contrast))}",
        f"noise_actor={report.noise_actor_id or 'absent'}",
        "ranking=" + ">".join(report.actor_ids),
    ]
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    chart_path = out_dir / CHART_NAME
    chart_path.write_text(_render_chart(report), encoding="utf-8")
    return table_path, summary_path, chart_path


def _render_chart(report: ComparisonReport) -> str:
    """Grouped bar chart of both aligned series, one group per actor."""
    width, height = 960, 420
    margin_left, margin_bottom, margin_top = 60, 90, 40
    plot_w = width - margin_left - 20
    plot_h = height - margin_top - margin_bottom

    values = list(report.aligned_uncertainty) + list(report.aligned_shap)
    v_min = min(0.0, min(values))
    v_max = max(values)
    if v_max == v_min:
        v_max = v_min + 1.0

    def y_of(v: float) -> float:
        return margin_top + plot_h * (1 - (v - v_min) / (v_max - v_min))

    n = len(report.actor_ids)
    group_w = plot_w / n
    bar_w = group_w * 0.32

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15" '
        'font-family="sans-serif">Contribution estimate vs centralised attribution '
        "(aligned)</text>",
    ]
    baseline = y_of(max(0.0, v_min))
    parts.append(
        f'<line x1="{margin_left}" y1="{baseline:.2f}" x2="{width - 20}" '
        f'y2="{baseline:.2f}" stroke="black" stroke-width="1"/>'
    )
    for i, actor_id in enumerate(report.actor_ids):
        gx = margin_left + i * group_w
        for k, (value, colour) in enumerate(
            [
                (report.aligned_uncertainty[i], "#4477aa"),
                (report.aligned_shap[i], "#ee6677"),
            ]
        ):
            x = gx + group_w * 0.15 + k * bar_w
            top = y_of(max(value, 0.0))
            bottom = y_of(min(value, 0.0))
            parts.append(
                f'<rect x="{x:.2f}" y="{top:.2f}" width="{bar_w:.2f}" '
                f'height="{max(bottom - top, 0.5):.2f}" fill="{colour}"/>'
            )
        label_x = gx + group_w / 2
        label_y = height - margin_bottom + 16
        parts.append(
            f'<text x="{label_x:.2f}" y="{label_y:.2f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif" '
            f'transform="rotate(-35 {label_x:.2f} {label_y:.2f})">{actor_id}</text>'
        )
    parts.append(
        f'<rect x="{margin_left}" y="{height - 28}" width="12" height="12" fill="#4477aa"/>'
        f'<text x="{margin_left + 18}" y="{height - 18}" font-size="12" '
        'font-family="sans-serif">decentralised contribution score</text>'
    )
    parts.append(
        f'<rect x="{margin_left + 260}" y="{height - 28}" width="12" height="12" fill="#ee6677"/>'
        f'<text x="{margin_left + 278}" y="{height - 18}" font-size="12" '
        'font-family="sans-serif">centralised attribution</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
