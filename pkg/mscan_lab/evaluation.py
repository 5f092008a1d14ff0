"""
Per-scenario and pooled evaluation of a trained click model.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Example, ExampleBatch
from .errors import DataError, UndefinedMetricError
from .metrics import auc, rel_impr
from .model import InferenceConfig

logger = logging.getLogger(__name__)

ALL_ROW = '#All'
CSV_HEADER = ['row', 'n', 'positives', 'auc', 'interest_auc', 'rel_impr']


def row_label(scenario_id: int) -> str:
    return f"#{scenario_id}"


@dataclass
class ScenarioMetrics:
    """One report row; metrics are None when undefined for the row's labels."""

    n: int
    positives: int
    auc: Optional[float]
    interest_auc: Optional[float] = None


@dataclass
class MetricsReport:
    """AUC rows keyed '#<scenario>' plus an optional pooled '#All' row."""

    model: str
    score_kind: str
    c: Optional[float]
    rows: Dict[str, ScenarioMetrics] = field(default_factory=dict)
    baseline: Optional[str] = None
    rel_impr: Dict[str, float] = field(default_factory=dict)

    @property
    def overall(self) -> Optional[float]:
        row = self.rows.get(ALL_ROW)
        return None if row is None else row.auc

    @property
    def interest_overall(self) -> Optional[float]:
        row = self.rows.get(ALL_ROW)
        return None if row is None else row.interest_auc

    @property
    def per_scenario(self) -> Dict[str, Optional[float]]:
        return {k: r.auc for k, r in self.rows.items() if k != ALL_ROW}

    def metric(self, name: str = 'auc', row: str = ALL_ROW) -> Optional[float]:
        entry = self.rows.get(row)
        if entry is None:
            return None
        return entry.auc if name == 'auc' else entry.interest_auc

    def with_rel_impr(self, base: 'MetricsReport', name: Optional[str] = None) -> 'MetricsReport':
        """Copy of this report with RelImp against every row the baseline also defines."""
        gains = {}
        for key, row in self.rows.items():
            other = base.rows.get(key)
            if row.auc is None or other is None or other.auc is None:
                continue
            gains[key] = rel_impr(row.auc, other.auc)
        return replace(self, baseline=name or base.model, rel_impr=gains)

    def to_dict(self) -> Dict:
        return {
            'model': self.model,
            'score_kind': self.score_kind,
            'c': self.c,
            'rows': {
                key: {'n': r.n, 'positives': r.positives, 'auc': r.auc, 'interest_auc': r.interest_auc}
                for key, r in self.rows.items()
            },
            'baseline': self.baseline,
            'rel_impr': dict(self.rel_impr),
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> 'MetricsReport':
        return cls(
            model=doc['model'],
            score_kind=doc['score_kind'],
            c=doc.get('c'),
            rows={key: ScenarioMetrics(**r) for key, r in doc['rows'].items()},
            baseline=doc.get('baseline'),
            rel_impr=dict(doc.get('rel_impr', {})),
        )

    def to_rows(self) -> List[List]:
        """CSV rows, header first; scenario rows then '#All'."""
        out = [list(CSV_HEADER)]
        for key, r in self.rows.items():
            out.append([key, r.n, r.positives, r.auc, r.interest_auc, self.rel_impr.get(key)])
        return out


def score_examples(model, examples: Sequence[Example], cfg: Optional[InferenceConfig] = None,
                   kind: str = 'db', batch_size: int = 1024) -> np.ndarray:
    """Inference scores for every example, in order."""
    if not examples:
        return np.zeros(0)
    full = ExampleBatch.from_examples(examples, model.caps)
    parts = [model.score(b, cfg, kind) for b in full.batches(batch_size)]
    return np.concatenate(parts)


def _safe_auc(scores: np.ndarray, labels: np.ndarray, what: str) -> Optional[float]:
    try:
        return auc(scores, labels)
    except UndefinedMetricError as e:
        logger.warning("%s undefined: %s", what, e)
        return None


def interest_labels(interest: np.ndarray, scenarios: np.ndarray) -> np.ndarray:
    """Ground-truth interest above its per-scenario median -> 1, else 0."""
    labels = np.zeros(len(interest), dtype=np.int64)
    for s in np.unique(scenarios):
        sel = scenarios == s
        labels[sel] = (interest[sel] > np.median(interest[sel])).astype(np.int64)
    return labels


def evaluate(model, cfg: Optional[InferenceConfig], test: Sequence[Example], group_by_scenario: bool = True,
             include_overall: bool = True, kind: str = 'db', batch_size: int = 1024,
             scenarios: Optional[Sequence[int]] = None) -> MetricsReport:
    """
    Score a test set and compute per-scenario and pooled AUCs.

    Args:
        model: A trained MScanModel or baseline
        cfg: Inference configuration (constant c)
        test: Test examples
        group_by_scenario: Emit one row per scenario
        include_overall: Emit the pooled '#All' row
        kind: Score kind passed to model.score ('db' is the debiased score)
        batch_size: Scoring batch size
        scenarios: Restrict rows to these scenarios (default: all present)

    Returns:
        MetricsReport; rows with a single label class carry auc=None
    """
    if not test:
        raise DataError("cannot evaluate on an empty test set")
    cfg = cfg or InferenceConfig()
    scores = score_examples(model, test, cfg, kind, batch_size)
    labels = np.array([e.label for e in test], dtype=np.int64)
    scen = np.array([e.scenario_id for e in test], dtype=np.int64)
    has_interest = all(e.ground_truth_interest is not None for e in test)
    if has_interest:
        interest = np.array([e.ground_truth_interest for e in test], dtype=np.float64)
        oracle = interest_labels(interest, scen)

    report = MetricsReport(model=model.name, score_kind=kind, c=cfg.c)
    if group_by_scenario:
        wanted = sorted(set(scen.tolist())) if scenarios is None else list(scenarios)
        for s in wanted:
            sel = scen == s
            key = row_label(s)
            report.rows[key] = ScenarioMetrics(
                n=int(sel.sum()),
                positives=int(labels[sel].sum()),
                auc=_safe_auc(scores[sel], labels[sel], f"AUC for scenario {key}"),
                interest_auc=(_safe_auc(scores[sel], oracle[sel], f"interest AUC for scenario {key}")
                              if has_interest else None),
            )
    if include_overall:
        report.rows[ALL_ROW] = ScenarioMetrics(
            n=len(labels),
            positives=int(labels.sum()),
            auc=_safe_auc(scores, labels, 'pooled AUC'),
            interest_auc=_safe_auc(scores, oracle, 'pooled interest AUC') if has_interest else None,
        )
    logger.info("Evaluated %s (%s scores, c=%s) on %d examples: #All AUC %s",
                model.name, kind, cfg.c, len(test), report.overall)
    return report
