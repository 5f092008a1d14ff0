"""
Synthetic multi-scenario click logs with known user interest.

Samples from a small structural model: user and item latent vectors and a
per-scenario shift produce the interest m (U->M, I->M, S->M); the click adds
a per-scenario exposure offset on the logit scale (S->Y):

    m = sigmoid(<u_f + shift * s_f, i_f>)
    y ~ Bernoulli(sigmoid(logit(m) + bias_strength * b_s))
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .data import DEFAULT_CAPS, Example, InteractionRecord, prepare_examples
from .errors import ConfigError, NonFiniteError

logger = logging.getLogger(__name__)

OFFSET_STREAM = 1


@dataclass
class SyntheticConfig:
    """Size and causal strengths of a generated log."""

    num_users: int = 5000
    num_items: int = 2000
    num_scenarios: int = 3
    latent_dim: int = 8
    bias_strength: float = 4.0
    scenario_interest_shift: float = 1.0
    events_per_user: int = 60
    max_time_gap: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ('num_users', 'num_items', 'num_scenarios', 'latent_dim',
                     'events_per_user', 'max_time_gap'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synthetic.{name} must be positive", key=f"synthetic.{name}")
        for name in ('bias_strength', 'scenario_interest_shift'):
            if getattr(self, name) < 0:
                raise ConfigError(f"synthetic.{name} must be nonnegative", key=f"synthetic.{name}")
        if self.seed < 0:
            raise ConfigError("synthetic.seed must be unsigned", key='synthetic.seed')


def scenario_offsets(num_scenarios: int, seed: Optional[int] = None) -> np.ndarray:
    """
    Exposure offsets b_s: levels spread evenly over [-1, 1].

    Without a seed scenario s gets the s-th lowest level; with one the levels
    are dealt to scenarios in a seeded random order.
    """
    if num_scenarios == 1:
        return np.zeros(1)
    levels = np.linspace(-1.0, 1.0, num_scenarios)
    if seed is None:
        return levels
    # a stream apart from the latent and event draws
    return np.random.default_rng([seed, OFFSET_STREAM]).permutation(levels)


def sample_interactions(config: SyntheticConfig) -> List[InteractionRecord]:
    """
    Draw a raw interaction log, grouped by user with increasing timestamps.

    Each record carries its ground-truth interest m.
    """
    rng = np.random.default_rng(config.seed)
    scale = config.latent_dim ** -0.25
    user_f = rng.normal(0.0, scale, (config.num_users, config.latent_dim))
    item_f = rng.normal(0.0, scale, (config.num_items, config.latent_dim))
    scen_f = rng.normal(0.0, scale, (config.num_scenarios, config.latent_dim))
    offsets = scenario_offsets(config.num_scenarios, config.seed)

    n_events = config.num_users * config.events_per_user
    users = np.repeat(np.arange(config.num_users), config.events_per_user)
    scenarios = rng.integers(0, config.num_scenarios, size=n_events)
    items = rng.integers(0, config.num_items, size=n_events)
    gaps = rng.integers(1, config.max_time_gap + 1, size=(config.num_users, config.events_per_user))
    timestamps = np.cumsum(gaps, axis=1).reshape(-1)

    interest_logit = np.einsum(
        'nk,nk->n', user_f[users] + config.scenario_interest_shift * scen_f[scenarios], item_f[items])
    interest = expit(interest_logit)
    p_click = expit(interest_logit + config.bias_strength * offsets[scenarios])
    if not (np.all(np.isfinite(interest)) and np.all(np.isfinite(p_click))):
        raise NonFiniteError("synthetic generator produced a non-finite probability")
    clicks = (rng.random(n_events) < p_click).astype(np.int64)

    logger.info("Sampled %d synthetic events (CTR %.4f, mean interest %.4f)",
                n_events, clicks.mean(), interest.mean())
    return [
        InteractionRecord(int(u), int(i), int(s), int(t), int(c), float(m))
        for u, i, s, t, c, m in zip(users, items, scenarios, timestamps, clicks, interest)
    ]


def generate_synthetic(config: SyntheticConfig, caps: Tuple[int, int] = DEFAULT_CAPS,
                       test_fraction: float = 0.4) -> Tuple[List[Example], List[Example]]:
    """Sample a log and turn it into a chronological 60/40 train/test example split."""
    records = sample_interactions(config)
    return prepare_examples(records, caps=caps, test_fraction=test_fraction, filter_users=True)
