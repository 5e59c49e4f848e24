"""Metric reports for docking accuracy and design quality.

All threshold comparisons are strict (<, >): an RMSD of exactly 2.0 does
not count as "below 2.0", and a candidate at exactly the docking-score
cutoff does not count as a success.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .design import QED_THRESHOLD, SA_THRESHOLD, SUCCESS_VINA_DOCK, OracleScores


class EvaluateError(ValueError):
    pass


RMSD_THRESHOLDS = (1.0, 2.0, 3.0, 5.0)


@dataclass
class DockingReport:
    pct_under: dict  # threshold (A) -> percentage of poses strictly below
    avg_rmsd: float
    n: int

    def to_json(self):
        return json.dumps({
            "pct_under": {f"{t:g}": v for t, v in self.pct_under.items()},
            "avg_rmsd": self.avg_rmsd,
            "n": self.n,
        }, sort_keys=True)

    def to_text(self):
        cols = "  ".join(f"%<{t:g}A={self.pct_under[t]:.1f}" for t in sorted(self.pct_under))
        return f"docking poses n={self.n}  {cols}  avg={self.avg_rmsd:g}"


@dataclass
class DesignReport:
    mean_vina_dock: float
    mean_qed: float
    mean_sa: float
    success_rate: float  # percentage
    n: int
    mean_vina_score: float = None

    def to_json(self):
        obj = {
            "mean_vina_dock": self.mean_vina_dock,
            "mean_qed": self.mean_qed,
            "mean_sa": self.mean_sa,
            "success_rate": self.success_rate,
            "n": self.n,
        }
        if self.mean_vina_score is not None:
            obj["mean_vina_score"] = self.mean_vina_score
        return json.dumps(obj, sort_keys=True)

    def to_text(self):
        extra = ""
        if self.mean_vina_score is not None:
            extra = f"  vina_score={self.mean_vina_score:.3f}"
        return (f"design candidates n={self.n}  vina_dock={self.mean_vina_dock:.3f}"
                f"{extra}  qed={self.mean_qed:.3f}  sa={self.mean_sa:.3f}"
                f"  success_rate={self.success_rate:.1f}%")


def docking_report(rmsds, thresholds=RMSD_THRESHOLDS):
    """Percentage of poses strictly below each RMSD threshold, plus the
    arithmetic mean RMSD."""
    rmsds = np.asarray(list(rmsds), dtype=np.float64)
    if rmsds.size == 0:
        raise EvaluateError("no RMSD values")
    pct = {float(t): float(100.0 * np.count_nonzero(rmsds < t) / rmsds.size)
           for t in thresholds}
    return DockingReport(pct_under=pct, avg_rmsd=float(rmsds.mean()), n=int(rmsds.size))


def is_success(scores):
    return (scores.vina_dock < SUCCESS_VINA_DOCK
            and scores.qed > QED_THRESHOLD
            and scores.sa > SA_THRESHOLD)


def design_report(candidates):
    """Per-metric means and the percentage of candidates jointly meeting
    all three strict criteria. Accepts scored DesignCandidates or bare
    OracleScores."""
    scores = []
    for c in candidates:
        s = c if isinstance(c, OracleScores) else c.scores
        if s is None:
            raise EvaluateError("unscored candidate")
        scores.append(s)
    if not scores:
        raise EvaluateError("no candidates")
    vina_scores = [s.vina_score for s in scores if s.vina_score is not None]
    mean_vs = float(np.mean(vina_scores)) if len(vina_scores) == len(scores) else None
    return DesignReport(
        mean_vina_dock=float(np.mean([s.vina_dock for s in scores])),
        mean_qed=float(np.mean([s.qed for s in scores])),
        mean_sa=float(np.mean([s.sa for s in scores])),
        success_rate=float(100.0 * sum(is_success(s) for s in scores) / len(scores)),
        n=len(scores),
        mean_vina_score=mean_vs,
    )


def write_rmsd_csv(path, rmsds):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rmsd"])
        for v in rmsds:
            w.writerow([f"{float(v):.6f}"])


def read_rmsd_csv(path):
    out = []
    with open(path) as f:
        for row in csv.reader(f):
            if not row or row[0] == "rmsd":
                continue
            out.append(float(row[0]))
    return out
