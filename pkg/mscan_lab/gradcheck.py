"""
Finite-difference verification of tape gradients.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import Example, ExampleBatch, prepare_examples
from .errors import ConfigError, DataError, GradientError, NonFiniteError
from .model import ModelConfig, MScanModel, MScanParameters, init_parameters
from .synthetic import SyntheticConfig, sample_interactions
from .training import ys_targets

logger = logging.getLogger(__name__)


@dataclass
class GradCheckConfig:
    """A deliberately tiny model and dataset for finite-difference checks."""

    epsilon: float = 1e-5
    tolerance: float = 1e-4
    alpha: float = 0.5
    batch_size: int = 4
    embed_dim: int = 4
    gru_hidden: int = 4
    history_cap: int = 5
    current_cap: int = 3
    num_users: int = 10
    num_items: int = 10
    num_scenarios: int = 3
    init_scale: float = 0.5
    floor: float = 1e-6
    kink_gap: float = 10.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("gradcheck.epsilon must be positive", key='gradcheck.epsilon')
        if not self.tolerance > 0:
            raise ConfigError("gradcheck.tolerance must be positive", key='gradcheck.tolerance')
        if not self.floor > 0:
            raise ConfigError("gradcheck.floor must be positive", key='gradcheck.floor')
        if self.kink_gap < 0:
            raise ConfigError("gradcheck.kink_gap must be nonnegative", key='gradcheck.kink_gap')
        for name in ('batch_size', 'embed_dim', 'gru_hidden', 'history_cap', 'current_cap',
                     'num_users', 'num_items', 'num_scenarios'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"gradcheck.{name} must be positive", key=f"gradcheck.{name}")
        if self.num_scenarios < 2:
            raise ConfigError("gradcheck.num_scenarios must be at least 2", key='gradcheck.num_scenarios')

    def model_config(self, seed: int = 0) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            gru_hidden=self.gru_hidden,
            attn_hidden_layers=[self.embed_dim, 1],
            interest_ffn_layers=[8, 4, 1],
            scenario_ffn_layers=[4, 1],
            history_cap=self.history_cap,
            current_cap=self.current_cap,
            init_seed=seed,
            init_scale=self.init_scale,
        )

    def synthetic_config(self, seed: int = 0) -> SyntheticConfig:
        return SyntheticConfig(
            num_users=self.num_users,
            num_items=self.num_items,
            num_scenarios=self.num_scenarios,
            latent_dim=4,
            events_per_user=12,
            seed=seed,
        )


MAX_DRAWS = 100


def kink_margin(tape: Tape) -> float:
    """
    Distance of a recorded forward pass from the nearest non-differentiable point.

    That is the smallest |input| of any ReLU and the smallest gap between the
    largest valid entry of any max-pool row and the next smaller one.
    """
    margin = math.inf
    for node in tape.nodes:
        x = tape.values[node.input_ids[0]]
        if node.kind == 'relu' and x.size:
            margin = min(margin, float(np.abs(x).min()))
        elif node.kind == 'max_pool' and x.shape[-1] > 1:
            mask = np.asarray(node.attrs.get('mask', np.ones(x.shape, dtype=bool)), dtype=bool)
            valid = np.where(mask, x, -np.inf)
            best = valid.max(axis=-1, keepdims=True)
            # exact ties come from repeated items; measure the gap to the next distinct value
            runner_up = np.where(valid < best, valid, -np.inf).max(axis=-1)
            gaps = (best[..., 0] - runner_up)[np.isfinite(runner_up)]
            if gaps.size:
                margin = min(margin, float(gaps.min()))
    return margin


def tiny_problem(cfg: GradCheckConfig, seed: int = 0, saca_enabled: bool = True, sbe_enabled: bool = True):
    """
    Parameters and a batch for a gradient check.

    The batch takes the last examples of the chronological log, which carry
    the longest histories. Biases are drawn nonzero, and draws repeat until
    every ReLU input and max-pool gap is at least kink_gap * epsilon from its kink.
    """
    records = sample_interactions(cfg.synthetic_config(seed))
    train_set, test_set = prepare_examples(records, caps=(cfg.history_cap, cfg.current_cap),
                                           filter_users=False)
    examples = (train_set + test_set)[-cfg.batch_size:]
    model_cfg = replace(cfg.model_config(seed), saca_enabled=saca_enabled, sbe_enabled=sbe_enabled)
    # the model's vocabulary is the configured one, not just the ids present
    sizes = (cfg.num_users, cfg.num_items, cfg.num_scenarios)
    batch = ExampleBatch.from_examples(examples, model_cfg.caps)
    ys = ys_targets(examples)

    for draw in range(MAX_DRAWS):
        params = init_parameters(model_cfg, sizes)
        rng = np.random.default_rng([seed, draw])
        for p in params:
            if p.name.endswith('.bias') or p.name.startswith('gru.b_'):
                p.value.data[...] = rng.uniform(-cfg.init_scale, cfg.init_scale, size=p.shape)
        with Tape() as tape:
            GradientChecker(MScanModel(params), batch, ys, cfg.alpha)._objective()
        if kink_margin(tape) >= cfg.kink_gap * cfg.epsilon:
            logger.debug("Tiny problem for seed %d accepted after %d draw(s)", seed, draw + 1)
            return params, examples
    raise GradientError(f"no tiny problem for seed {seed} stays {cfg.kink_gap:g} steps away from "
                        f"every kink after {MAX_DRAWS} draws")


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def flagged(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.rel_error > self.tolerance]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> Dict:
        per_param: Dict[str, float] = {}
        for e in self.entries:
            per_param[e.name] = max(per_param.get(e.name, 0.0), e.rel_error)
        return {
            'epsilon': self.epsilon,
            'tolerance': self.tolerance,
            'pass': self.passed,
            'max_rel_error': self.max_rel_error,
            'checked_entries': len(self.entries),
            'max_rel_error_by_parameter': per_param,
            'flagged': [
                {'name': e.name, 'index': e.index, 'analytic': e.analytic,
                 'numeric': e.numeric, 'rel_error': e.rel_error}
                for e in self.flagged
            ],
        }


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a - n| over the larger magnitude, which is floored for near-zero gradients."""
    return abs(a - n) / max(abs(a), abs(n), floor)


class GradientChecker:
    """Compares backward() against central differences of L_final on one batch."""

    def __init__(self, model: MScanModel, batch: ExampleBatch, ys: np.ndarray, alpha: float = 0.5):
        self.model = model
        self.batch = batch
        self.ys = ys
        self.alpha = alpha

    def _objective(self):
        l_uis, l_s = self.model.loss_terms(self.batch, self.ys)
        if l_s is None:
            return l_uis
        return ad.add(l_uis, ad.scale(l_s, self.alpha))

    def loss(self) -> float:
        value = self._objective().item()
        if not math.isfinite(value):
            raise NonFiniteError("loss evaluation is non-finite during gradient check")
        return value

    def analytic(self) -> Dict[str, np.ndarray]:
        self.model.zero_grad()
        with Tape() as tape:
            out = self._objective()
        if not math.isfinite(out.item()):
            raise NonFiniteError("loss evaluation is non-finite during gradient check")
        ad.backward(out, tape)
        return {p.name: p.grad.copy() for p in self.model.parameters()}

    def numeric(self, epsilon: float) -> Dict[str, np.ndarray]:
        grads = {}
        for p in self.model.parameters():
            flat = p.value.data.reshape(-1)
            g = np.zeros(flat.size)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + epsilon
                plus = self.loss()
                flat[k] = original - epsilon
                minus = self.loss()
                flat[k] = original
                g[k] = (plus - minus) / (2.0 * epsilon)
            grads[p.name] = g.reshape(p.shape)
        return grads

    def compare(self, analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray],
                epsilon: float, tolerance: float, floor: float = 1e-6) -> GradCheckReport:
        report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
        for name, a in analytic.items():
            n = numeric[name]
            for k, (av, nv) in enumerate(zip(a.reshape(-1), n.reshape(-1))):
                report.entries.append(GradCheckEntry(name, k, float(av), float(nv),
                                                     relative_error(float(av), float(nv), floor)))
        return report


def check_gradients(model: MScanParameters, batch: Sequence[Example], epsilon: float = 1e-5,
                    tolerance: float = 1e-4, alpha: float = 0.5, ys_label: str = 'click', floor: float = 1e-6,
                    analytic_override: Optional[Dict[str, np.ndarray]] = None) -> GradCheckReport:
    """
    Check every parameter entry's analytic gradient of L_final.

    Args:
        model: Parameters of a (small) M-scan network
        batch: Examples forming one batch
        epsilon: Central-difference step
        tolerance: Maximum accepted relative error
        alpha: Weight of L_s in L_final
        ys_label: Scenario-branch supervision label
        floor: Smallest magnitude a relative error is measured against
        analytic_override: Replace the computed analytic gradients (fault injection)

    Returns:
        GradCheckReport with one entry per parameter element
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if not tolerance > 0:
        raise ConfigError(f"tolerance must be positive, got {tolerance}")
    if not floor > 0:
        raise ConfigError(f"floor must be positive, got {floor}")
    if not batch:
        raise DataError("gradient check needs a non-empty batch")

    checker = GradientChecker(MScanModel(model), ExampleBatch.from_examples(batch, model.config.caps),
                              ys_targets(batch, ys_label), alpha)
    analytic = checker.analytic() if analytic_override is None else analytic_override
    numeric = checker.numeric(epsilon)
    report = checker.compare(analytic, numeric, epsilon, tolerance, floor)
    logger.info("Gradient check over %d entries: max relative error %.3e (%s)",
                len(report.entries), report.max_rel_error, 'pass' if report.passed else 'FAIL')
    for e in report.flagged[:10]:
        logger.warning("Gradient mismatch %s[%d]: analytic %.6e numeric %.6e", e.name, e.index,
                       e.analytic, e.numeric)
    return report
