import numpy as np
import pytest

from mscan_lab.data import InteractionRecord, prepare_examples
from mscan_lab.model import ModelConfig
from mscan_lab.synthetic import SyntheticConfig, sample_interactions
from mscan_lab.training import TrainConfig

SMALL_CAPS = (5, 3)


@pytest.fixture
def small_synthetic_config():
    return SyntheticConfig(num_users=30, num_items=25, num_scenarios=3, latent_dim=4,
                           bias_strength=1.0, events_per_user=10, seed=0)


@pytest.fixture
def small_records(small_synthetic_config):
    return sample_interactions(small_synthetic_config)


@pytest.fixture
def small_split(small_records):
    return prepare_examples(small_records, caps=SMALL_CAPS)


@pytest.fixture
def small_model_config():
    return ModelConfig(embed_dim=4, gru_hidden=4, attn_hidden_layers=[4, 1], interest_ffn_layers=[8, 1],
                       scenario_ffn_layers=[4, 1], history_cap=SMALL_CAPS[0], current_cap=SMALL_CAPS[1],
                       init_scale=0.3)


@pytest.fixture
def fast_train_config():
    return TrainConfig(learning_rate=0.01, batch_size=32, epochs=1)


def make_records(rows):
    """(user, item, scenario, timestamp, click) tuples -> records."""
    return [InteractionRecord(*row) for row in rows]


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar function of a numpy array, perturbing x in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        plus = f()
        flat[k] = orig - eps
        minus = f()
        flat[k] = orig
        gflat[k] = (plus - minus) / (2 * eps)
    return g
