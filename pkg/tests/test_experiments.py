from dataclasses import replace

import pytest

from conftest import SMALL_CAPS
from mscan_lab import experiments
from mscan_lab.data import prepare_examples, vocab_sizes
from mscan_lab.errors import ConfigError, NonFiniteError
from mscan_lab.evaluation import evaluate
from mscan_lab.experiments import (SweepCurve, ablation_summary, run_ablation, sweep, validate_grid)
from mscan_lab.model import InferenceConfig, MScanModel, init_parameters
from mscan_lab.synthetic import SyntheticConfig, sample_interactions
from mscan_lab.training import TrainConfig, train


@pytest.fixture
def train_config():
    return TrainConfig(learning_rate=0.01, batch_size=32, epochs=1)


def test_ablation_grid_has_four_cells_per_seed(small_split, small_model_config, train_config):
    cells = run_ablation(*small_split, small_model_config, train_config, InferenceConfig(), seeds=[0, 1])
    assert len(cells) == 8
    assert {(c.saca_enabled, c.sbe_enabled) for c in cells if c.seed == 1} == {
        (True, True), (True, False), (False, True), (False, False)}
    assert all(c.error is None and c.overall_auc is not None for c in cells)

    bare = next(c for c in cells if not c.saca_enabled and not c.sbe_enabled)
    assert not any(n.startswith(('scenario_ffn', 'attn_ffn')) for n in bare.parameter_names)
    assert bare.label == 'w/o SACA & SBE'

    summary = ablation_summary(cells)
    assert summary['variant'].tolist() == ['M-scan', 'w/o SBE', 'w/o SACA', 'w/o SACA & SBE']
    assert summary['seeds_ok'].tolist() == [2, 2, 2, 2]


def test_failed_cell_is_recorded(monkeypatch, small_split, small_model_config, train_config):
    real_train = experiments.train

    def flaky(model, examples, cfg, **kwargs):
        if not model.config.saca_enabled:
            raise NonFiniteError("loss became non-finite")
        return real_train(model, examples, cfg, **kwargs)

    monkeypatch.setattr(experiments, 'train', flaky)
    cells = run_ablation(*small_split, small_model_config, train_config, InferenceConfig(), seeds=[0])
    failed = [c for c in cells if c.error]
    assert len(failed) == 2
    assert all(c.error.startswith('non_finite_error') and c.overall_auc is None for c in failed)
    assert ablation_summary(cells)['seeds_ok'].tolist() == [1, 1, 0, 0]


def test_singleton_c_sweep_matches_evaluate(small_split, small_model_config, train_config):
    curve = sweep('c', [0.3], *small_split, small_model_config, train_config, InferenceConfig(), seeds=[2])

    model = MScanModel(init_parameters(replace(small_model_config, init_seed=2), vocab_sizes(*small_split)))
    train(model, small_split[0], replace(train_config, seed=2))
    expected = evaluate(model, InferenceConfig(c=0.3), small_split[1]).overall
    assert curve.per_seed == [[expected]]


def test_c_sweep_does_not_retrain(small_split, small_model_config, train_config):
    curve = sweep('c', [0.0, 0.5, 1.0], *small_split, small_model_config, train_config, InferenceConfig(),
                  seeds=[0, 1])
    assert len(curve.per_seed) == 2 and all(len(row) == 3 for row in curve.per_seed)
    for sums in curve.checksums:
        assert sums['before'] == sums['after']
    assert not curve.errors


def test_alpha_sweep_trains_each_point(small_split, small_model_config, train_config):
    curve = sweep('alpha', [0.0, 1.0], *small_split, small_model_config, train_config, InferenceConfig(),
                  seeds=[0], metric='interest_auc')
    assert len(curve.per_seed[0]) == 2
    assert all(v is not None for v in curve.per_seed[0])
    assert curve.checksums == []


def test_sweep_rows_and_document():
    curve = SweepCurve(hyper='c', grid=[0.0, 0.5, 1.0], seeds=[0, 1],
                       per_seed=[[0.6, 0.7, 0.65], [0.62, None, 0.66]])
    rows = curve.to_rows()
    assert rows[0] == ['value', 'mean_auc']
    assert len(rows) == 1 + len(curve.grid)
    assert curve.mean == pytest.approx([0.61, 0.7, 0.655])
    assert curve.argmax(0) == 1
    assert curve.argmax(1) == 2
    assert curve.to_dict()['mean'] == curve.mean


def test_sweep_rows_name_the_swept_metric():
    curve = SweepCurve(hyper='alpha', grid=[0.0, 1.0], seeds=[0], metric='interest_auc', per_seed=[[0.55, 0.6]])
    assert curve.to_rows() == [['value', 'mean_interest_auc'], [0.0, 0.55], [1.0, 0.6]]


@pytest.mark.parametrize('hyper,grid', [('c', []), ('c', [0.5, 0.5]), ('c', [1.0, 0.0]),
                                        ('alpha', [-1.0, 0.0]), ('lr', [0.1])])
def test_invalid_grid(hyper, grid):
    with pytest.raises(ConfigError):
        validate_grid(hyper, grid)


def test_sweep_needs_seeds(small_split, small_model_config, train_config):
    with pytest.raises(ConfigError):
        sweep('c', [0.5], *small_split, small_model_config, train_config, InferenceConfig(), seeds=[])


@pytest.fixture(scope='module')
def biased_split():
    records = sample_interactions(SyntheticConfig(num_users=400, num_items=200, events_per_user=30))
    return prepare_examples(records, caps=SMALL_CAPS)


@pytest.mark.slow
def test_full_model_beats_ablations(biased_split, small_model_config):
    cfg = TrainConfig(learning_rate=0.005, batch_size=128, epochs=3)
    cells = run_ablation(*biased_split, small_model_config, cfg, InferenceConfig(), seeds=range(5))
    means = ablation_summary(cells).set_index('variant')['mean_auc']
    assert means['M-scan'] >= means['w/o SACA']
    assert means['M-scan'] >= means['w/o SBE']


@pytest.mark.slow
def test_alpha_sweep_peaks_inside_grid(biased_split, small_model_config):
    cfg = TrainConfig(learning_rate=0.005, batch_size=128, epochs=3)
    curve = sweep('alpha', [0.0, 0.25, 1.0, 4.0], *biased_split, small_model_config, cfg, InferenceConfig(),
                  seeds=range(5))
    interior = sum(curve.argmax(k) in (1, 2) for k in range(5))
    assert interior >= 3


@pytest.mark.slow
def test_scenario_head_recovers_interest(biased_split, small_model_config):
    cfg = TrainConfig(learning_rate=0.005, batch_size=128, epochs=3)
    cells = run_ablation(*biased_split, small_model_config, cfg, InferenceConfig(), seeds=range(5))
    summary = ablation_summary(cells).set_index('variant')
    assert summary['seeds_ok'].eq(5).all()
    interest = summary['mean_interest_auc']
    assert interest['M-scan'] > interest['w/o SBE']
