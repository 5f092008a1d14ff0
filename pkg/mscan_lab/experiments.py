"""
Ablation grid and hyperparameter sweeps.

Cells and sweep points run one after another; a failing cell or point is
logged and recorded with its error instead of stopping the run.
"""

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .data import Example, vocab_sizes
from .errors import ConfigError, DataError, MScanError
from .evaluation import evaluate
from .model import InferenceConfig, ModelConfig, MScanModel, init_parameters, parameter_checksum
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

SWEEP_HYPERS = ('c', 'alpha')
SWEEP_METRICS = ('auc', 'interest_auc')


@dataclass
class AblationCell:
    saca_enabled: bool
    sbe_enabled: bool
    seed: int
    overall_auc: Optional[float] = None
    interest_auc: Optional[float] = None
    per_scenario: Dict[str, Optional[float]] = field(default_factory=dict)
    parameter_names: List[str] = field(default_factory=list)
    checksum: Optional[str] = None
    error: Optional[str] = None

    @property
    def label(self) -> str:
        if self.saca_enabled and self.sbe_enabled:
            return 'M-scan'
        if self.saca_enabled:
            return 'w/o SBE'
        if self.sbe_enabled:
            return 'w/o SACA'
        return 'w/o SACA & SBE'


def _train_mscan(train_set: Sequence[Example], sizes, model_cfg: ModelConfig, train_cfg: TrainConfig
                 ) -> MScanModel:
    model = MScanModel(init_parameters(model_cfg, sizes))
    train(model, train_set, train_cfg)
    return model


def _check_seeds(seeds: Sequence[int]):
    if not seeds:
        raise ConfigError("at least one seed is required", key='seeds')


def run_ablation(train_set: Sequence[Example], test_set: Sequence[Example], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, inference_cfg: InferenceConfig, seeds: Sequence[int],
                 progress: bool = False) -> List[AblationCell]:
    """
    Train and evaluate the {SACA on/off} x {SBE on/off} grid for every seed.

    Each seed sets both the initialization and the shuffling seed.
    """
    _check_seeds(seeds)
    if not train_set or not test_set:
        raise DataError("ablation needs non-empty train and test sets")
    sizes = vocab_sizes(train_set, test_set)
    jobs = [(seed, saca, sbe) for seed in seeds for saca, sbe in itertools.product((True, False), repeat=2)]
    cells = []
    for seed, saca, sbe in tqdm(jobs, desc='ablation', disable=not progress):
        cell = AblationCell(saca_enabled=saca, sbe_enabled=sbe, seed=seed)
        cfg = replace(model_cfg, saca_enabled=saca, sbe_enabled=sbe, init_seed=seed)
        try:
            model = _train_mscan(train_set, sizes, cfg, replace(train_cfg, seed=seed))
            report = evaluate(model, inference_cfg, test_set)
            cell.overall_auc = report.overall
            cell.interest_auc = report.interest_overall
            cell.per_scenario = report.per_scenario
            cell.parameter_names = model.params.names()
            cell.checksum = model.params.checksum()
        except MScanError as e:
            logger.warning("Ablation cell %s seed %d failed: %s", cell.label, seed, e)
            cell.error = f"{e.kind}: {e}"
        cells.append(cell)
        logger.info("Ablation %s seed %d: #All AUC %s", cell.label, seed, cell.overall_auc)
    return cells


def ablation_summary(cells: Sequence[AblationCell]) -> pd.DataFrame:
    """Mean AUC and interest-AUC per grid cell across seeds (failed cells excluded)."""
    frame = pd.DataFrame([{
        'variant': c.label,
        'saca_enabled': c.saca_enabled,
        'sbe_enabled': c.sbe_enabled,
        'auc': np.nan if c.overall_auc is None else c.overall_auc,
        'interest_auc': np.nan if c.interest_auc is None else c.interest_auc,
        'ok': c.error is None,
    } for c in cells])
    if frame.empty:
        return frame
    return (frame.groupby(['variant', 'saca_enabled', 'sbe_enabled'], sort=False)
            .agg(mean_auc=('auc', 'mean'), mean_interest_auc=('interest_auc', 'mean'),
                 seeds_ok=('ok', 'sum'))
            .reset_index())


@dataclass
class SweepCurve:
    """Per-seed metric rows over a strictly increasing grid; failures are None."""

    hyper: str
    grid: List[float]
    seeds: List[int]
    metric: str = 'auc'
    per_seed: List[List[Optional[float]]] = field(default_factory=list)
    checksums: List[Dict[str, Optional[str]]] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    @property
    def mean(self) -> List[Optional[float]]:
        out = []
        for k in range(len(self.grid)):
            values = [row[k] for row in self.per_seed if row[k] is not None]
            out.append(float(np.mean(values)) if values else None)
        return out

    def argmax(self, seed_index: int) -> Optional[int]:
        """Grid index of the best point for one seed, None if every point failed."""
        row = self.per_seed[seed_index]
        valid = [(v, k) for k, v in enumerate(row) if v is not None]
        if not valid:
            return None
        best = max(v for v, _ in valid)
        return min(k for v, k in valid if v == best)

    def to_dict(self) -> Dict:
        doc = asdict(self)
        doc['mean'] = self.mean
        return doc

    def to_rows(self) -> List[List]:
        return [['value', f"mean_{self.metric}"]] + [[v, m] for v, m in zip(self.grid, self.mean)]


def validate_grid(hyper: str, grid: Sequence[float]) -> List[float]:
    if hyper not in SWEEP_HYPERS:
        raise ConfigError(f"sweep hyperparameter must be one of {', '.join(SWEEP_HYPERS)}, got {hyper!r}",
                          key='sweep.hyper')
    values = [float(v) for v in grid]
    if not values:
        raise ConfigError("sweep grid is empty", key=f"sweep.{hyper}_grid")
    if any(not math.isfinite(v) for v in values):
        raise ConfigError("sweep grid values must be finite", key=f"sweep.{hyper}_grid")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError("sweep grid must be strictly increasing", key=f"sweep.{hyper}_grid")
    if hyper == 'alpha' and values[0] < 0:
        raise ConfigError("alpha grid values must be nonnegative", key='sweep.alpha_grid')
    return values


def sweep(hyper: str, grid: Sequence[float], train_set: Sequence[Example], test_set: Sequence[Example],
          model_cfg: ModelConfig, train_cfg: TrainConfig, inference_cfg: InferenceConfig,
          seeds: Sequence[int], metric: str = 'auc', progress: bool = False) -> SweepCurve:
    """
    Pooled '#All' metric as a function of c or alpha.

    A c-sweep trains one model per seed and rescores it at every c, recording
    the parameter checksum before and after rescoring. An alpha-sweep trains
    one model per (seed, alpha).
    """
    values = validate_grid(hyper, grid)
    _check_seeds(seeds)
    if metric not in SWEEP_METRICS:
        raise ConfigError(f"sweep metric must be one of {', '.join(SWEEP_METRICS)}", key='sweep.metric')
    if not train_set or not test_set:
        raise DataError("sweep needs non-empty train and test sets")
    sizes = vocab_sizes(train_set, test_set)
    curve = SweepCurve(hyper=hyper, grid=values, seeds=list(seeds), metric=metric)

    for seed in tqdm(seeds, desc=f"{hyper} sweep", disable=not progress):
        cfg = replace(model_cfg, init_seed=seed)
        tcfg = replace(train_cfg, seed=seed)
        row: List[Optional[float]] = []
        if hyper == 'c':
            try:
                model = _train_mscan(train_set, sizes, cfg, tcfg)
            except MScanError as e:
                logger.warning("c-sweep seed %d failed to train: %s", seed, e)
                curve.errors.append(f"seed {seed}: {e.kind}: {e}")
                curve.per_seed.append([None] * len(values))
                curve.checksums.append({'before': None, 'after': None})
                continue
            before = parameter_checksum(model.parameters())
            for c in values:
                row.append(_point(curve, seed, c, lambda: evaluate(model, InferenceConfig(c=c), test_set)))
            curve.checksums.append({'before': before, 'after': parameter_checksum(model.parameters())})
        else:
            for a in values:
                def run(a=a):
                    model = _train_mscan(train_set, sizes, cfg, replace(tcfg, alpha=a))
                    return evaluate(model, inference_cfg, test_set)
                row.append(_point(curve, seed, a, run))
        curve.per_seed.append(row)
    logger.info("%s sweep mean %s: %s", hyper, metric, curve.mean)
    return curve


def _point(curve: SweepCurve, seed: int, value: float, run) -> Optional[float]:
    try:
        report = run()
    except MScanError as e:
        logger.warning("%s sweep point %s seed %d failed: %s", curve.hyper, value, seed, e)
        curve.errors.append(f"seed {seed} {curve.hyper}={value}: {e.kind}: {e}")
        return None
    result = report.metric(curve.metric)
    if result is None:
        curve.errors.append(f"seed {seed} {curve.hyper}={value}: metric undefined")
    return result
