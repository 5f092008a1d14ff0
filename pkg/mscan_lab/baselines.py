"""
Single, Mix and Finetune baselines.

All three share one network: a fully connected tower over the concatenated
user, item and scenario embeddings. They differ in which examples train it.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import Example, ExampleBatch, vocab_sizes
from .errors import ConfigError, DataError
from .evaluation import MetricsReport, evaluate
from .model import InferenceConfig, ParameterSet, ffn_forward, init_ffn
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

BASELINE_KINDS = ('single', 'mix', 'finetune')


@dataclass
class BaselineConfig:
    """Tower widths and finetuning schedule of the baselines."""

    embed_dim: int = 16
    hidden_layers: List[int] = field(default_factory=lambda: [128, 64, 32])
    init_seed: int = 0
    init_scale: float = 0.05
    finetune_lr_factor: float = 0.1
    finetune_epochs: int = 1
    kind: str = 'mix'
    target_scenario: Optional[int] = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"baseline.kind must be one of {', '.join(BASELINE_KINDS)}", key='baseline.kind')
        if self.embed_dim <= 0:
            raise ConfigError("baseline.embed_dim must be positive", key='baseline.embed_dim')
        if not self.hidden_layers or any(w <= 0 for w in self.hidden_layers):
            raise ConfigError("baseline.hidden_layers needs positive widths", key='baseline.hidden_layers')
        if not (self.finetune_lr_factor > 0 and math.isfinite(self.finetune_lr_factor)):
            raise ConfigError("baseline.finetune_lr_factor must be positive", key='baseline.finetune_lr_factor')
        if self.finetune_epochs < 0:
            raise ConfigError("baseline.finetune_epochs must be nonnegative", key='baseline.finetune_epochs')


class BaselineParameters(ParameterSet):
    """Embedding tables and tower of one baseline network."""

    config: BaselineConfig


class BaselineModel:
    """FFN([u + i + s]) -> click logit."""

    caps = (1, 1)

    def __init__(self, params: BaselineParameters, name: str = 'baseline'):
        self.params = params
        self.name = name

    @classmethod
    def create(cls, config: BaselineConfig, sizes: Tuple[int, int, int], name: str = 'baseline'
               ) -> 'BaselineModel':
        if min(sizes) <= 0:
            raise ConfigError(f"vocabulary sizes must be positive, got {tuple(sizes)}")
        rng = np.random.default_rng(config.init_seed)
        d, s = config.embed_dim, config.init_scale
        params = [
            Parameter('user_table', rng.uniform(-s, s, (sizes[0], d))),
            Parameter('item_table', rng.uniform(-s, s, (sizes[1], d))),
            Parameter('scenario_table', rng.uniform(-s, s, (sizes[2], d))),
        ]
        params += init_ffn(rng, 'tower', 3 * d, list(config.hidden_layers) + [1], s)
        return cls(BaselineParameters(config, sizes, params), name)

    @property
    def vocab_sizes(self) -> Tuple[int, int, int]:
        return self.params.vocab_sizes

    def parameters(self) -> List[Parameter]:
        return self.params.parameters()

    def zero_grad(self):
        self.params.zero_grad()

    def copy(self, name: Optional[str] = None) -> 'BaselineModel':
        return BaselineModel(self.params.copy(), name or self.name)

    def _logits(self, batch: ExampleBatch):
        x = ad.concat([
            ad.lookup(self.params['user_table'].value, batch.users),
            ad.lookup(self.params['item_table'].value, batch.items),
            ad.lookup(self.params['scenario_table'].value, batch.scenarios),
        ])
        n_layers = len(self.params.config.hidden_layers) + 1
        return ad.reshape(ffn_forward(self.params, 'tower', x, n_layers), (len(batch),))

    def loss_terms(self, batch: ExampleBatch, ys_targets: np.ndarray):
        return ad.mean(ad.bce_logits(self._logits(batch), batch.labels)), None

    def score(self, batch: ExampleBatch, cfg: Optional[InferenceConfig] = None, kind: str = 'db') -> np.ndarray:
        return self._logits(batch).numpy()


def _in_scenario(examples: Sequence[Example], scenario: int) -> List[Example]:
    return [e for e in examples if e.scenario_id == scenario]


def train_mix(train_set: Sequence[Example], sizes: Tuple[int, int, int], train_cfg: TrainConfig,
              baseline_cfg: BaselineConfig) -> BaselineModel:
    model = BaselineModel.create(baseline_cfg, sizes, name='mix')
    train(model, train_set, train_cfg)
    return model


def run_baseline(kind: str, train_set: Sequence[Example], test_set: Sequence[Example],
                 train_cfg: TrainConfig, baseline_cfg: Optional[BaselineConfig] = None,
                 target_scenario: Optional[int] = None, pretrained: Optional[BaselineModel] = None
                 ) -> MetricsReport:
    """
    Train and evaluate one baseline.

    Args:
        kind: 'single' (target-scenario data only), 'mix' (all scenarios) or
              'finetune' (mix, then target-scenario data at a reduced rate)
        train_set: Training examples
        test_set: Test examples
        train_cfg: Shared training configuration
        baseline_cfg: Tower and finetuning settings
        target_scenario: Required for single and finetune
        pretrained: A mix model to finetune from instead of training one

    Returns:
        MetricsReport; single and finetune report only the target row
    """
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"baseline kind must be one of {', '.join(BASELINE_KINDS)}, got {kind!r}",
                          key='baseline.kind')
    baseline_cfg = baseline_cfg or BaselineConfig()
    sizes = vocab_sizes(train_set, test_set)

    if kind == 'mix':
        model = train_mix(train_set, sizes, train_cfg, baseline_cfg)
        return evaluate(model, None, test_set)

    if target_scenario is None:
        raise ConfigError(f"baseline {kind} needs a target scenario", key='baseline.target_scenario')
    target_train = _in_scenario(train_set, target_scenario)
    if not target_train:
        raise DataError(f"scenario {target_scenario} has no training data")
    target_test = _in_scenario(test_set, target_scenario)
    if not target_test:
        raise DataError(f"scenario {target_scenario} has no test data")

    if kind == 'single':
        model = BaselineModel.create(baseline_cfg, sizes, name='single')
        train(model, target_train, train_cfg)
    else:
        base = pretrained or train_mix(train_set, sizes, train_cfg, baseline_cfg)
        model = base.copy(name='finetune')
        if baseline_cfg.finetune_epochs > 0:
            train(model, target_train, train_cfg,
                  lr=train_cfg.learning_rate * baseline_cfg.finetune_lr_factor,
                  epochs=baseline_cfg.finetune_epochs)
    logger.info("Baseline %s trained for scenario %d", kind, target_scenario)
    return evaluate(model, None, target_test, include_overall=False, scenarios=[target_scenario])


def run_baseline_all_scenarios(kind: str, train_set: Sequence[Example], test_set: Sequence[Example],
                               train_cfg: TrainConfig, baseline_cfg: Optional[BaselineConfig] = None
                               ) -> MetricsReport:
    """Run a baseline for every scenario with train and test data and merge the rows."""
    if kind == 'mix':
        return run_baseline(kind, train_set, test_set, train_cfg, baseline_cfg)
    baseline_cfg = baseline_cfg or BaselineConfig()
    train_scen = {e.scenario_id for e in train_set}
    test_scen = {e.scenario_id for e in test_set}
    targets = sorted(train_scen & test_scen)
    if not targets:
        raise DataError("no scenario has both training and test data")
    pretrained = None
    if kind == 'finetune':
        pretrained = train_mix(train_set, vocab_sizes(train_set, test_set), train_cfg, baseline_cfg)

    merged = None
    for s in targets:
        report = run_baseline(kind, train_set, test_set, train_cfg, baseline_cfg,
                              target_scenario=s, pretrained=pretrained)
        if merged is None:
            merged = report
        else:
            merged.rows.update(report.rows)
    return merged
