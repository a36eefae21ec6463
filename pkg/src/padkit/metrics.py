"""ISO/IEC 30107-3 evaluation metrics.

Threshold calibration follows the equal error rate criterion on dev scores:
candidate thresholds are all distinct observed scores plus the midpoints of
consecutive distinct scores; the calibrated threshold minimizes |FAR - FRR|
(ties broken toward the lowest threshold) and EER = (FAR + FRR) / 2 there.

Test-set reports carry APCER/BPCER/ACER and FAR/FRR/HTER as percentages.
The headline APCER is the maximum over per-PAI APCERs by default (pooled
available as an option). ACER = (APCER + BPCER)/2 and HTER = (FAR + FRR)/2
hold exactly, pre-rounding, in every report.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .scorer import ScoreRecord, classify

RATE_FIELDS = ("apcer", "bpcer", "acer", "far", "frr", "hter")


class SingleClassError(ValueError):
    """Raised when a score set or face set lacks one of the two classes."""


def _split_scores(records):
    bona = np.array([r.score for r in records if r.label == "bona_fide"], dtype=np.float64)
    attack = np.array([r.score for r in records if r.label == "attack"], dtype=np.float64)
    if len(bona) == 0 or len(attack) == 0:
        raise SingleClassError(
            f"need both classes: {len(bona)} bona fide / {len(attack)} attack scores"
        )
    return bona, attack


def candidate_thresholds(scores) -> np.ndarray:
    """All distinct scores plus midpoints of consecutive distinct scores."""
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    if len(distinct) == 1:
        return distinct
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.unique(np.concatenate([distinct, midpoints]))


def eer_threshold(dev_scores) -> tuple[float, float]:
    """Calibrate the decision threshold at the equal error rate point.

    Args:
        dev_scores: ScoreRecords containing both classes.

    Returns:
        (threshold, eer) with eer as a fraction in [0,1]. A sample with
        score exactly equal to the threshold is rejected (classification is
        strictly greater-than), consistently with ``scorer.classify``.
    """
    bona, attack = _split_scores(dev_scores)
    bona_sorted = np.sort(bona)
    attack_sorted = np.sort(attack)
    cands = candidate_thresholds(np.concatenate([bona, attack]))
    n_bona, n_attack = len(bona), len(attack)
    # false accepts: attacks with score > t; false rejects: bona fide <= t
    fa = n_attack - np.searchsorted(attack_sorted, cands, side="right")
    fr = np.searchsorted(bona_sorted, cands, side="right")
    # integer cross-multiplication keeps the argmin exact (no float rounding)
    gap = np.abs(fa.astype(np.int64) * n_bona - fr.astype(np.int64) * n_attack)
    best = int(np.argmin(gap))  # first minimum = lowest threshold
    threshold = float(cands[best])
    eer = (fa[best] / n_attack + fr[best] / n_bona) / 2.0
    return threshold, float(eer)


@dataclass
class MetricsReport:
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    far: float
    frr: float
    hter: float
    apcer_per_pai: dict = field(default_factory=dict)
    n_bona_fide: int = 0
    n_attack: int = 0
    apcer_mode: str = "max"
    eer_dev: float | None = None  # percentage, set by the calibration stage
    threshold_source: str | None = None


@dataclass
class FoldedReport:
    per_fold: list
    mean: dict
    std: dict


def evaluate(test_scores, threshold: float, apcer_mode: str = "max") -> MetricsReport:
    """Score-set evaluation at a fixed threshold.

    Args:
        test_scores: ScoreRecords with both classes present.
        threshold: decision threshold (bona fide iff score > threshold).
        apcer_mode: "max" reports the worst per-PAI APCER as the headline
            (the standard's convention); "pooled" reports the error rate
            over all attacks together.

    Returns:
        MetricsReport with all rates in percent. Attack records with a
        missing PAI tag are pooled into "unknown" with a warning.
    """
    if apcer_mode not in ("max", "pooled"):
        raise ValueError(f"apcer_mode must be 'max' or 'pooled', got {apcer_mode!r}")
    bona = [r for r in test_scores if r.label == "bona_fide"]
    attacks = [r for r in test_scores if r.label == "attack"]
    if not bona or not attacks:
        raise SingleClassError(
            f"need both classes: {len(bona)} bona fide / {len(attacks)} attack scores"
        )

    rejects_bona = sum(classify(r.score, threshold) == "attack" for r in bona)
    accepts_attack = sum(classify(r.score, threshold) == "bona_fide" for r in attacks)
    frr = 100.0 * rejects_bona / len(bona)
    far = 100.0 * accepts_attack / len(attacks)

    by_pai: dict[str, list[ScoreRecord]] = {}
    for r in attacks:
        pai = r.pai
        if pai in ("", "none"):
            warnings.warn(
                f"attack sample {r.sample_id!r} has no PAI tag; pooling into 'unknown'"
            )
            pai = "unknown"
        by_pai.setdefault(pai, []).append(r)
    apcer_per_pai = {
        pai: 100.0
        * sum(classify(r.score, threshold) == "bona_fide" for r in group)
        / len(group)
        for pai, group in sorted(by_pai.items())
    }
    pooled = far
    apcer = max(apcer_per_pai.values()) if apcer_mode == "max" else pooled

    bpcer = frr
    return MetricsReport(
        threshold=threshold,
        apcer=apcer,
        bpcer=bpcer,
        acer=(apcer + bpcer) / 2.0,
        far=far,
        frr=frr,
        hter=(far + frr) / 2.0,
        apcer_per_pai=apcer_per_pai,
        n_bona_fide=len(bona),
        n_attack=len(attacks),
        apcer_mode=apcer_mode,
    )


def aggregate_folds(reports) -> FoldedReport:
    """Mean and sample standard deviation (n-1; 0 when n=1) of each rate."""
    reports = list(reports)
    if not reports:
        raise ValueError("no fold reports to aggregate")
    fields = list(RATE_FIELDS)
    if all(r.eer_dev is not None for r in reports):
        fields.append("eer_dev")
    mean, std = {}, {}
    for name in fields:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return FoldedReport(per_fold=reports, mean=mean, std=std)


# --- rendering ----------------------------------------------------------------


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "threshold": report.threshold,
        "threshold_source": report.threshold_source,
        "eer_dev_pct": report.eer_dev,
        "apcer_mode": report.apcer_mode,
        "apcer_pct": report.apcer,
        "apcer_per_pai_pct": report.apcer_per_pai,
        "bpcer_pct": report.bpcer,
        "acer_pct": report.acer,
        "far_pct": report.far,
        "frr_pct": report.frr,
        "hter_pct": report.hter,
        "n_bona_fide": report.n_bona_fide,
        "n_attack": report.n_attack,
    }


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report_to_dict(report), indent=2) + "\n"


def render_report(report: MetricsReport) -> str:
    """Plain-text table, rates rounded to 2 decimals."""
    rows = [("threshold", f"{report.threshold:.6f}")]
    if report.threshold_source:
        rows.append(("threshold source", report.threshold_source))
    if report.eer_dev is not None:
        rows.append(("EER(dev) %", f"{report.eer_dev:.2f}"))
    rows.append((f"APCER({report.apcer_mode}) %", f"{report.apcer:.2f}"))
    for pai, value in report.apcer_per_pai.items():
        rows.append((f"  APCER[{pai}] %", f"{value:.2f}"))
    rows += [
        ("BPCER %", f"{report.bpcer:.2f}"),
        ("ACER %", f"{report.acer:.2f}"),
        ("FAR %", f"{report.far:.2f}"),
        ("FRR %", f"{report.frr:.2f}"),
        ("HTER %", f"{report.hter:.2f}"),
        ("n bona fide", str(report.n_bona_fide)),
        ("n attack", str(report.n_attack)),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def render_folded(folded: FoldedReport) -> str:
    """Fold statistics as 'mean±std' with 2 decimals per rate."""
    n = len(folded.per_fold)
    lines = [f"folds: {n}"]
    names = {
        "apcer": "APCER %",
        "bpcer": "BPCER %",
        "acer": "ACER %",
        "far": "FAR %",
        "frr": "FRR %",
        "hter": "HTER %",
        "eer_dev": "EER(dev) %",
    }
    width = max(len(v) for v in names.values())
    for key, label in names.items():
        if key in folded.mean:
            lines.append(
                f"{label:<{width}}  {folded.mean[key]:.2f}±{folded.std[key]:.2f}"
            )
    return "\n".join(lines) + "\n"


def render_comparison(named_reports) -> str:
    """Side-by-side APCER/BPCER/ACER/HTER table for multiple runs."""
    header = f"{'run':<24}{'APCER%':>10}{'BPCER%':>10}{'ACER%':>10}{'HTER%':>10}"
    lines = [header, "-" * len(header)]
    for name, rep in named_reports:
        lines.append(
            f"{name:<24}{rep.apcer:>10.2f}{rep.bpcer:>10.2f}"
            f"{rep.acer:>10.2f}{rep.hter:>10.2f}"
        )
    return "\n".join(lines) + "\n"


def folded_to_dict(folded: FoldedReport) -> dict:
    return {
        "n_folds": len(folded.per_fold),
        "mean_pct": folded.mean,
        "std_pct": folded.std,
        "per_fold": [report_to_dict(r) for r in folded.per_fold],
    }
