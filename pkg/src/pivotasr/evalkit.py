"""Metrics: WER, relative WER reduction, wake-word TAR/TRR/F1, deltas.

Sign conventions follow the reporting style of relative tables: positive
WERR / F1R / TARR / TRRR means improvement, negative means degradation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError


def edit_distance(ref, hyp):
    """Minimal substitutions+insertions+deletions turning ref into hyp."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(
                min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (0 if r == h else 1))
            )
        prev = cur
    return prev[-1]


def wer(ref, hyp):
    """Word error rate: edit distance over the reference length."""
    ref = list(ref)
    if not ref:
        raise DataError("wer: empty reference")
    return edit_distance(ref, hyp) / len(ref)


def werr(wer_b, wer_a):
    """Relative reduction of ``wer_a`` against baseline ``wer_b``."""
    if wer_b <= 0:
        raise DataError("werr undefined for a zero baseline WER")
    return (wer_b - wer_a) / wer_b


@dataclass(frozen=True)
class WWDecision:
    utterance_id: str
    ground_truth_positive: bool
    accepted: bool


def decide_ww(decoded_text, enabled_wake_words):
    """Accept iff the decoded transcript's leading tokens exactly match an
    enabled wake-word surface."""
    return any(
        decoded_text[: len(w)] == w for w in enabled_wake_words if w
    )


def ww_metrics(decisions):
    """(TAR, TRR, F1) over accept/reject decisions."""
    decisions = list(decisions)
    n_pos = sum(1 for d in decisions if d.ground_truth_positive)
    n_neg = len(decisions) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"ww_metrics needs both positives and negatives, got {n_pos} / {n_neg}"
        )
    tp = sum(1 for d in decisions if d.ground_truth_positive and d.accepted)
    tn = sum(1 for d in decisions if not d.ground_truth_positive and not d.accepted)
    tar = tp / n_pos
    trr = tn / n_neg
    f1 = 0.0 if (tar + trr) == 0 else 2.0 * tar * trr / (tar + trr)
    return tar, trr, f1


@dataclass
class MetricsReport:
    wer: float
    tar: float
    trr: float
    f1: float
    counts: dict

    def as_dict(self):
        return {
            "wer": self.wer,
            "tar": self.tar,
            "trr": self.trr,
            "f1": self.f1,
            "counts": dict(self.counts),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            wer=float(d["wer"]),
            tar=float(d["tar"]),
            trr=float(d["trr"]),
            f1=float(d["f1"]),
            counts=dict(d.get("counts", {})),
        )


def build_report(ref_hyp_pairs, decisions):
    """Aggregate WER over (ref tokens, hyp tokens) pairs plus WW metrics."""
    total_edits = 0
    total_ref = 0
    for ref, hyp in ref_hyp_pairs:
        ref = list(ref)
        if not ref:
            raise DataError("build_report: empty reference transcript")
        total_edits += edit_distance(ref, hyp)
        total_ref += len(ref)
    tar, trr, f1 = ww_metrics(decisions)
    decisions = list(decisions)
    n_pos = sum(1 for d in decisions if d.ground_truth_positive)
    n_neg = len(decisions) - n_pos
    return MetricsReport(
        wer=total_edits / total_ref if total_ref else 0.0,
        tar=tar,
        trr=trr,
        f1=f1,
        counts={
            "n_pos": n_pos,
            "n_neg": n_neg,
            "accepts": sum(1 for d in decisions if d.accepted),
            "rejects": sum(1 for d in decisions if not d.accepted),
        },
    )


def _relative(new, base, metric):
    if base <= 0:
        raise DataError(f"relative {metric} undefined for zero baseline")
    return (new - base) / base


def relative_report(base, new):
    """Signed relative deltas against a baseline report.

    F1R / TARR / TRRR are (new - base) / base; WERR keeps its own formula,
    so a positive value always means improvement.
    """
    return {
        "f1r": _relative(new.f1, base.f1, "F1R"),
        "tarr": _relative(new.tar, base.tar, "TARR"),
        "trrr": _relative(new.trr, base.trr, "TRRR"),
        "werr": werr(base.wer, new.wer),
    }


def format_percent(x):
    return f"{100.0 * x:+.2f}%"


def format_table(rows, columns):
    """Fixed-width text table in the relative-metrics layout.

    ``rows`` is a list of dicts keyed by the column names; the first column
    is typically the model name.
    """
    widths = [
        max(len(c), max((len(str(r.get(c, ""))) for r in rows), default=0))
        for c in columns
    ]
    def line(vals):
        return "  ".join(str(v).ljust(w) for v, w in zip(vals, widths)).rstrip()

    out = [line(columns), line(["-" * w for w in widths])]
    out.extend(line([r.get(c, "-") for c in columns]) for r in rows)
    return "\n".join(out)
