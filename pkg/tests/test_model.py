import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from mscan_lab import autodiff as ad
from mscan_lab.data import BehaviorSequences, Example, ExampleBatch
from mscan_lab.errors import DataError, IndexOutOfRangeError, MissingInputError, ShapeError
from mscan_lab.model import (InferenceConfig, ModelConfig, MScanModel, attention_aggregate,
                             co_attention_scores, encode_current_scenario, forward, fuse, infer_debiased,
                             init_parameters, load_checkpoint, predict_interest, predict_scenario_bias,
                             save_checkpoint)

SIZES = (4, 10, 3)


def config(**overrides):
    base = ModelConfig(embed_dim=8, gru_hidden=8, attn_hidden_layers=[8, 1], interest_ffn_layers=[16, 8, 1],
                       scenario_ffn_layers=[4, 1], history_cap=5, current_cap=3, init_scale=0.3)
    return replace(base, **overrides)


def example(user, item, scenario, mixed=(), mixed_scen=(), current=(), label=0):
    seqs = BehaviorSequences(mixed_items=tuple(mixed), mixed_scenarios=tuple(mixed_scen),
                             mixed_timestamps=tuple(range(len(mixed))), current_items=tuple(current),
                             current_timestamps=tuple(range(len(current))))
    return Example(user, item, scenario, 100, label, seqs)


def random_examples(rng, n, caps=(5, 3)):
    out = []
    for _ in range(n):
        n_h = int(rng.integers(0, caps[0] + 1))
        mixed = rng.integers(0, SIZES[1], n_h).tolist()
        mixed_scen = rng.integers(0, SIZES[2], n_h).tolist()
        scen = int(rng.integers(0, SIZES[2]))
        current = [i for i, s in zip(mixed, mixed_scen) if s == scen][-caps[1]:]
        out.append(example(int(rng.integers(0, SIZES[0])), int(rng.integers(0, SIZES[1])), scen,
                           mixed, mixed_scen, current, int(rng.integers(0, 2))))
    return out


def test_init_is_deterministic():
    a = init_parameters(config(), SIZES)
    b = init_parameters(config(), SIZES)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_parameters(config(init_seed=1), SIZES).checksum()


def test_zero_scale_init():
    params = init_parameters(config(init_scale=0.0), SIZES)
    assert all(not p.data.any() for p in params)


def test_parameter_shapes():
    params = init_parameters(config(embed_dim=4, gru_hidden=6, attn_hidden_layers=[4, 1]), (3, 5, 2))
    assert params['user_table'].shape == (3, 4)
    assert params['item_table'].shape == (5, 4)
    assert params['scenario_table'].shape == (2, 4)
    assert params['gru.W_z'].shape == (4, 6)
    assert params['gru.U_h'].shape == (6, 6)
    assert params['attn_ffn.0.weight'].shape == (12, 4)
    assert params['interest_ffn.0.weight'].shape == (4 * 4 + 6, 16)


def test_ablated_parameter_sets():
    params = init_parameters(config(saca_enabled=False, sbe_enabled=False), SIZES)
    assert not any(n.startswith(('attn_ffn', 'scenario_ffn')) for n in params.names())
    assert params['interest_ffn.0.weight'].shape == (3 * 8 + 8, 16)


def test_gru_empty_history_is_zero():
    params = init_parameters(config(), SIZES)
    h, _ = encode_current_scenario(params, ad.constant(np.ones((2, 3, 8))), np.zeros((2, 3), dtype=bool))
    assert not h.data.any()


def test_gru_zero_weights_keep_zero_state():
    params = init_parameters(config(init_scale=0.0), SIZES)
    h, states = encode_current_scenario(params, ad.constant(np.ones((1, 3, 8))), np.ones((1, 3), dtype=bool))
    assert all(not s.data.any() for s in states)


def test_gru_scalar_recurrence():
    params = init_parameters(config(embed_dim=1, gru_hidden=1, attn_hidden_layers=[1]), SIZES)
    weights = {'W_z': 1.0, 'W_r': -0.5, 'W_h': 2.0, 'U_z': 0.3, 'U_r': 0.7, 'U_h': -1.2,
               'b_z': 0.0, 'b_r': 0.1, 'b_h': 0.1}
    for name, value in weights.items():
        params[f"gru.{name}"].value.data[...] = value
    xs = [0.5, -1.0]
    h = 0.0
    for x in xs:
        z = expit(x * 1.0 + h * 0.3 + 0.0)
        r = expit(x * -0.5 + h * 0.7 + 0.1)
        cand = math.tanh(x * 2.0 + (r * h) * -1.2 + 0.1)
        h = (1 - z) * h + z * cand
    out, _ = encode_current_scenario(params, ad.constant(np.array(xs).reshape(1, 2, 1)),
                                     np.ones((1, 2), dtype=bool))
    assert out.data[0, 0] == pytest.approx(h, abs=1e-12)


def test_gru_padding_keeps_last_valid_state():
    params = init_parameters(config(), SIZES)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 8))
    x[1, :2] = x[0, :2]
    mask = np.array([[True, True, False], [True, True, True]])
    h, states = encode_current_scenario(params, ad.constant(x), mask)
    np.testing.assert_array_equal(h.data[0], states[1].data[0])
    assert not np.array_equal(h.data[0], h.data[1])


def _coattn_inputs(rng, batch=2, len_h=4, len_s=3, d=8):
    return (ad.constant(rng.normal(size=(batch, len_h, d))), ad.constant(rng.normal(size=(batch, d))),
            ad.constant(rng.normal(size=(batch, len_s, d))))


def test_single_current_item_pools_to_its_column():
    params = init_parameters(config(), SIZES)
    mixed, cand, current = _coattn_inputs(np.random.default_rng(1), len_s=1)
    scores, pooled = co_attention_scores(params, mixed, cand, current, np.ones((2, 4), bool), np.ones((2, 1), bool))
    np.testing.assert_array_equal(pooled.data, scores.data[:, :, 0])


def test_zero_attention_network_scores_zero():
    params = init_parameters(config(), SIZES)
    for name in params.names():
        if name.startswith('attn_ffn'):
            params[name].value.data[...] = 0.0
    mixed, cand, current = _coattn_inputs(np.random.default_rng(2))
    scores, pooled = co_attention_scores(params, mixed, cand, current, np.ones((2, 4), bool), np.ones((2, 3), bool))
    assert not scores.data.any() and not pooled.data.any()


def test_pooling_ignores_current_order():
    params = init_parameters(config(), SIZES)
    mixed, cand, current = _coattn_inputs(np.random.default_rng(3))
    mask_h, mask_s = np.ones((2, 4), bool), np.array([[True, True, False], [True, True, True]])
    _, pooled = co_attention_scores(params, mixed, cand, current, mask_h, mask_s)
    perm = current.data[:, [1, 0, 2]]
    _, pooled_perm = co_attention_scores(params, mixed, cand, ad.constant(perm), mask_h, mask_s)
    np.testing.assert_allclose(pooled.data, pooled_perm.data, rtol=0, atol=1e-12)


def test_uniform_scores_give_uniform_weights():
    emb = np.random.default_rng(4).normal(size=(1, 4, 3))
    beta, r_h = attention_aggregate(ad.constant(np.full((1, 4), 0.7)), ad.constant(emb), np.ones((1, 4), bool))
    np.testing.assert_allclose(beta.data, [[0.25] * 4])
    np.testing.assert_allclose(r_h.data[0], emb[0].mean(axis=0))


def test_two_position_softmax():
    beta, _ = attention_aggregate(ad.constant([[0.0, math.log(3.0), 5.0]]), ad.constant(np.ones((1, 3, 2))),
                                  np.array([[True, True, False]]))
    np.testing.assert_allclose(beta.data, [[0.25, 0.75, 0.0]])
    assert beta.data[0, 2] == 0.0


def test_single_valid_position():
    emb = np.arange(6.0).reshape(1, 3, 2)
    beta, r_h = attention_aggregate(ad.constant([[9.0, -2.0, 1.0]]), ad.constant(emb),
                                    np.array([[False, True, False]]))
    assert beta.data.tolist() == [[0.0, 1.0, 0.0]]
    assert r_h.data.tolist() == [[2.0, 3.0]]


def test_no_valid_position_gives_zero_aggregate():
    beta, r_h = attention_aggregate(ad.constant([[1.0, 2.0]]), ad.constant(np.ones((1, 2, 2))),
                                    np.zeros((1, 2), bool))
    assert not beta.data.any() and not r_h.data.any()


def _features(rng, batch, d, hidden):
    return [ad.constant(rng.normal(size=(batch, n))) for n in (d, d, d, hidden)]


def test_interest_head_zero_network():
    params = init_parameters(config(saca_enabled=False), SIZES)
    for name in params.names():
        if name.startswith('interest_ffn'):
            params[name].value.data[...] = 0.0
    out = predict_interest(params, *_features(np.random.default_rng(5), 3, 8, 8))
    assert out.data.tolist() == [0.0, 0.0, 0.0]


def test_interest_head_single_layer_is_affine():
    params = init_parameters(config(embed_dim=2, gru_hidden=2, interest_ffn_layers=[1], saca_enabled=False), SIZES)
    params['interest_ffn.0.weight'].value.data[:, 0] = np.arange(8) / 10.0
    params['interest_ffn.0.bias'].value.data[0] = 0.3
    feats = _features(np.random.default_rng(6), 2, 2, 2)
    x = np.concatenate([f.data for f in feats], axis=1)
    out = predict_interest(params, *feats)
    np.testing.assert_allclose(out.data, x @ (np.arange(8) / 10.0) + 0.3, atol=1e-12)


def test_interest_head_is_row_independent():
    params = init_parameters(config(saca_enabled=False), SIZES)
    feats = _features(np.random.default_rng(7), 3, 8, 8)
    full = predict_interest(params, *feats).data
    swapped = predict_interest(params, *[ad.constant(f.data[[2, 0, 1]]) for f in feats]).data
    np.testing.assert_allclose(swapped, full[[2, 0, 1]], rtol=0, atol=1e-12)


def test_interest_head_needs_r_h_with_coattention():
    params = init_parameters(config(), SIZES)
    with pytest.raises(ShapeError):
        predict_interest(params, *_features(np.random.default_rng(8), 1, 8, 8))


def test_scenario_head():
    params = init_parameters(config(scenario_ffn_layers=[1]), SIZES)
    params['scenario_ffn.0.weight'].value.data[:, 0] = np.linspace(-1, 1, 8)
    params['scenario_ffn.0.bias'].value.data[0] = -0.2
    s = np.random.default_rng(9).normal(size=(1, 8))
    out = predict_scenario_bias(params, ad.constant(np.vstack([s, s])))
    assert out.data[0] == out.data[1]
    assert out.data[0] == pytest.approx(float(s[0] @ np.linspace(-1, 1, 8)) - 0.2, abs=1e-12)
    params['scenario_ffn.0.weight'].value.data[...] = 0.0
    params['scenario_ffn.0.bias'].value.data[...] = 0.0
    assert predict_scenario_bias(params, ad.constant(s)).data.tolist() == [0.0]


@pytest.mark.parametrize('y_m,y_s,expected', [(0.0, 0.0, 0.0), (2.0, 0.0, 1.0), (1.5, 1.0, 1.0966)])
def test_fuse(y_m, y_s, expected):
    assert float(fuse(y_m, y_s)) == pytest.approx(expected, abs=1e-4)


def test_debiased_inference():
    cfg = InferenceConfig(c=0.5)
    assert float(infer_debiased(0.5, 3.7, cfg)) == 0.0
    assert float(infer_debiased(1.0, 2.0, cfg)) == pytest.approx(0.4404, abs=1e-4)
    y_m, y_s = np.array([0.3, -1.2]), np.array([0.4, 2.0])
    np.testing.assert_allclose(infer_debiased(y_m, y_s, InferenceConfig(c=0.0)), fuse(y_m, y_s))


def test_forward_contract():
    params = init_parameters(config(), SIZES)
    examples = [example(0, 1, 2, [3, 4, 5], [2, 0, 2], [3, 5], 1), example(1, 2, 0)]
    batch = ExampleBatch.from_examples(examples, (5, 3))
    trace = forward(params, batch, 'infer', InferenceConfig(c=0.0))
    for name in ('y_m', 'y_s', 'y_uis', 'y_db'):
        assert getattr(trace, name).shape == (2,)
    assert trace.beta.shape == (2, 5)
    assert trace.beta[0].sum() == pytest.approx(1.0, abs=1e-9)
    assert trace.beta[0, 3:].tolist() == [0.0, 0.0]
    assert not trace.beta[1].any()
    np.testing.assert_allclose(trace.y_uis, trace.y_m * expit(trace.y_s), rtol=0, atol=1e-12)
    np.testing.assert_allclose(trace.y_db, trace.y_uis, rtol=0, atol=1e-12)
    assert forward(params, batch, 'train').y_db is None


def test_forward_zero_model_scores_zero():
    params = init_parameters(config(init_scale=0.0), SIZES)
    batch = ExampleBatch.from_examples(random_examples(np.random.default_rng(10), 6), (5, 3))
    assert not forward(params, batch, 'infer').y_uis.any()


def test_forward_is_pure():
    params = init_parameters(config(), SIZES)
    batch = ExampleBatch.from_examples(random_examples(np.random.default_rng(11), 5), (5, 3))
    a, b = forward(params, batch, 'infer'), forward(params, batch, 'infer')
    np.testing.assert_array_equal(a.y_db, b.y_db)


def test_attention_weights_over_random_examples():
    params = init_parameters(config(), SIZES)
    rng = np.random.default_rng(12)
    examples = random_examples(rng, 100)
    shuffled = []
    for ex in examples:
        current = list(ex.sequences.current_items)
        rng.shuffle(current)
        shuffled.append(replace(ex, sequences=replace(ex.sequences, current_items=tuple(current))))
    trace = forward(params, ExampleBatch.from_examples(examples, (5, 3)), 'infer')
    trace_perm = forward(params, ExampleBatch.from_examples(shuffled, (5, 3)), 'infer')
    for row, ex in enumerate(examples):
        n = ex.sequences.n_uh
        assert (trace.beta[row] >= 0).all()
        assert not trace.beta[row, n:].any()
        if n:
            assert trace.beta[row].sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(trace.beta, trace_perm.beta, rtol=0, atol=1e-12)


def test_out_of_vocabulary_ids():
    params = init_parameters(config(), SIZES)
    batch = ExampleBatch.from_examples([example(0, 1, 3)], (5, 3))
    with pytest.raises(IndexOutOfRangeError, match='scenario'):
        forward(params, batch, 'infer')


def test_score_kinds_without_scenario_head():
    model = MScanModel(init_parameters(config(sbe_enabled=False), SIZES))
    batch = ExampleBatch.from_examples(random_examples(np.random.default_rng(13), 4), (5, 3))
    np.testing.assert_array_equal(model.score(batch, kind='db'), model.score(batch, kind='m'))
    np.testing.assert_array_equal(model.score(batch, kind='uis'), model.score(batch, kind='m'))


def test_checkpoint_round_trip(tmp_path):
    params = init_parameters(config(saca_enabled=False), SIZES)
    path = save_checkpoint(params, tmp_path / 'ckpt.json')
    loaded = load_checkpoint(path)
    assert loaded.checksum() == params.checksum()
    assert loaded.config == params.config
    assert loaded.vocab_sizes == SIZES


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingInputError):
        load_checkpoint(tmp_path / 'missing.json')
    (tmp_path / 'bad.json').write_text('{not json')
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / 'bad.json')
    path = save_checkpoint(init_parameters(config(), SIZES), tmp_path / 'ckpt.json')
    doc = json.loads(path.read_text())
    doc['parameters'] = [p for p in doc['parameters'] if p['name'] != 'gru.U_z']
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match='gru.U_z'):
        load_checkpoint(path)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    params = init_parameters(config(), SIZES)
    first = save_checkpoint(params, tmp_path / 'first.json')
    second = save_checkpoint(load_checkpoint(first), tmp_path / 'second.json')
    assert first.read_bytes() == second.read_bytes()


def test_parameter_set_surface():
    params = init_parameters(config(), SIZES)
    assert not hasattr(params, 'state')
    assert params.copy().checksum() == params.checksum()
    assert not hasattr(BehaviorSequences(), 'mixed_history')
