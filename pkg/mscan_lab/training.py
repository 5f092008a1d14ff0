"""
Joint training objective and optimization loop.

L_final = L_uis + alpha * L_s, where L_uis is the cross-entropy of the fused
logit against the click and L_s the cross-entropy of the scenario-bias logit
against its supervision label.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .data import Example, ExampleBatch, vocab_sizes
from .errors import ConfigError, DataError, NonFiniteError
from .model import parameter_checksum

logger = logging.getLogger(__name__)

OPTIMIZERS = ('sgd', 'adam')
YS_LABELS = ('click', 'scenario_ctr')


@dataclass
class TrainConfig:
    """Optimizer, schedule and objective settings."""

    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 3
    alpha: float = 0.5
    seed: int = 0
    optimizer: str = 'adam'
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ys_label: str = 'click'
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("train.learning_rate must be positive", key='train.learning_rate')
        if self.batch_size <= 0:
            raise ConfigError("train.batch_size must be positive", key='train.batch_size')
        if self.epochs <= 0:
            raise ConfigError("train.epochs must be positive", key='train.epochs')
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigError("train.alpha must be nonnegative", key='train.alpha')
        if self.seed < 0:
            raise ConfigError("train.seed must be unsigned", key='train.seed')
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {', '.join(OPTIMIZERS)}",
                              key='train.optimizer')
        if self.ys_label not in YS_LABELS:
            raise ConfigError(f"train.ys_label must be one of {', '.join(YS_LABELS)}",
                              key='train.ys_label')
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("train.clip_norm must be positive when set", key='train.clip_norm')


@dataclass
class EpochStats:
    l_uis: float
    l_s: float
    l_final: float


@dataclass
class TrainReport:
    """Per-epoch mean losses plus the final parameter checksum."""

    epochs: List[EpochStats] = field(default_factory=list)
    seed: int = 0
    checksum: str = ''
    steps: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> Dict:
        # wall time stays out of the document so identical runs serialize identically
        return {
            'epochs': [asdict(e) for e in self.epochs],
            'seed': self.seed,
            'checksum': self.checksum,
            'steps': self.steps,
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> 'TrainReport':
        return cls(
            epochs=[EpochStats(**e) for e in doc['epochs']],
            seed=doc['seed'],
            checksum=doc['checksum'],
            steps=doc.get('steps', 0),
        )


def _bce(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    out = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * y
    return float(out) if out.ndim == 0 else out


def loss_uis(y_uis_logit, y):
    """Cross-entropy of sigmoid(y_uis) against the click label, in stable form."""
    return _bce(y_uis_logit, y)


def loss_s(y_s_logit, y_s):
    """Cross-entropy of sigmoid(y_s) against the scenario-branch label."""
    return _bce(y_s_logit, y_s)


def loss_total(l_uis: float, l_s: float, alpha: float) -> float:
    """L_final = L_uis + alpha * L_s."""
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}", key='train.alpha')
    return l_uis + alpha * l_s


def ys_targets(examples: Sequence[Example], mode: str = 'click') -> np.ndarray:
    """
    Supervision labels for the scenario-bias branch.

    Args:
        examples: Training examples
        mode: 'click' uses each example's click; 'scenario_ctr' uses the
              training click rate of the example's scenario

    Returns:
        Float array aligned with examples
    """
    labels = np.array([e.label for e in examples], dtype=np.float64)
    if mode == 'click':
        return labels
    if mode == 'scenario_ctr':
        scenarios = np.array([e.scenario_id for e in examples], dtype=np.int64)
        clicks = np.bincount(scenarios, weights=labels)
        counts = np.bincount(scenarios)
        ctr = np.divide(clicks, counts, out=np.zeros_like(clicks), where=counts > 0)
        return ctr[scenarios]
    raise ConfigError(f"unknown ys_label {mode!r}", key='train.ys_label')


class SGD:
    """Plain gradient descent."""

    def __init__(self, params: Sequence[Parameter], lr: float):
        if lr < 0:
            raise ConfigError("learning rate must be nonnegative", key='train.learning_rate')
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            p.value.data -= self.lr * p.grad


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ConfigError("learning rate must be nonnegative", key='train.learning_rate')
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for k, p in enumerate(self.params):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * p.grad ** 2
            m_hat = self.m[k] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** self.t)
            p.value.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, params: Sequence[Parameter], lr: Optional[float] = None
                   ) -> Union[SGD, Adam]:
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == 'sgd':
        return SGD(params, lr)
    return Adam(params, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> bool:
    """Rescale all gradients so their global L2 norm is at most max_norm; True if clipped."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm <= max_norm:
        return False
    factor = max_norm / norm
    for p in params:
        p.grad *= factor
    return True


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _check_vocab(model, examples: Sequence[Example]):
    needed = vocab_sizes(examples)
    have = model.vocab_sizes
    for name, n, limit in zip(('user', 'item', 'scenario'), needed, have):
        if n > limit:
            raise DataError(f"dataset needs {n} {name} ids but the model has {limit}")


def train(model, examples: Sequence[Example], cfg: TrainConfig, lr: Optional[float] = None,
          epochs: Optional[int] = None, progress: bool = False) -> Tuple[object, TrainReport]:
    """
    Minimize L_final over seeded-shuffled mini-batches.

    Args:
        model: Anything exposing parameters(), zero_grad(), loss_terms(),
               caps, vocab_sizes and params (MScanModel or a baseline)
        examples: Training examples
        cfg: Training configuration
        lr: Learning-rate override (finetuning)
        epochs: Epoch-count override (finetuning)
        progress: Show a tqdm bar per epoch

    Returns:
        The trained parameter set (updated in place) and a TrainReport
    """
    if not examples:
        raise DataError("cannot train on an empty dataset")
    _check_vocab(model, examples)
    n_epochs = cfg.epochs if epochs is None else epochs
    started = time.perf_counter()

    batch_all = ExampleBatch.from_examples(examples, model.caps)
    ys_all = ys_targets(examples, cfg.ys_label)
    params = model.parameters()
    optimizer = make_optimizer(cfg, params, lr)
    report = TrainReport(seed=cfg.seed)
    n = len(examples)

    for epoch in range(n_epochs):
        order = epoch_permutation(cfg.seed, epoch, n)
        sum_uis = sum_s = sum_final = 0.0
        clipped = 0
        starts = range(0, n, cfg.batch_size)
        for start in tqdm(starts, desc=f"{model.name} epoch {epoch + 1}/{n_epochs}",
                          disable=not progress, leave=False):
            idx = order[start:start + cfg.batch_size]
            batch = batch_all.subset(idx)
            model.zero_grad()
            with Tape() as tape:
                l_uis, l_s = model.loss_terms(batch, ys_all[idx])
                loss = l_uis if l_s is None else ad.add(l_uis, ad.scale(l_s, cfg.alpha))
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"loss became non-finite at epoch {epoch + 1}, step {report.steps + 1}")
            ad.backward(loss, tape)
            if cfg.clip_norm is not None and clip_gradients(params, cfg.clip_norm):
                clipped += 1
            optimizer.step()
            report.steps += 1

            weight = len(idx)
            uis = l_uis.item()
            s = 0.0 if l_s is None else l_s.item()
            sum_uis += weight * uis
            sum_s += weight * s
            sum_final += weight * loss_total(uis, s, cfg.alpha)

        stats = EpochStats(l_uis=sum_uis / n, l_s=sum_s / n, l_final=sum_final / n)
        report.epochs.append(stats)
        if clipped:
            logger.warning("Clipped gradients on %d steps in epoch %d", clipped, epoch + 1)
        logger.info("epoch %d/%d  L_uis=%.6f  L_s=%.6f  L_final=%.6f",
                    epoch + 1, n_epochs, stats.l_uis, stats.l_s, stats.l_final)

    report.checksum = parameter_checksum(params)
    report.wall_time = time.perf_counter() - started
    return model.params, report
