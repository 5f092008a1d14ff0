"""
The M-scan click model.

Embeddings feed a GRU over the current-scenario clicks, a scenario-aware
co-attention over the cross-scenario clicks, an interest head and a
scenario-bias head. Training fuses the heads as y_m * sigmoid(y_s);
inference scores with the debiased sigmoid(y_s) * (y_m - c).
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import ExampleBatch
from .errors import ConfigError, DataError, IndexOutOfRangeError, MissingInputError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'mscan_lab.checkpoint'
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Layer sizes, history caps and initialization of an M-scan network."""

    embed_dim: int = 16
    gru_hidden: int = 16
    attn_hidden_layers: List[int] = field(default_factory=lambda: [16, 1])
    interest_ffn_layers: List[int] = field(default_factory=lambda: [128, 64, 1])
    scenario_ffn_layers: List[int] = field(default_factory=lambda: [16, 1])
    history_cap: int = 50
    current_cap: int = 20
    init_seed: int = 0
    init_scale: float = 0.05
    saca_enabled: bool = True
    sbe_enabled: bool = True

    def __post_init__(self):
        for name in ('embed_dim', 'gru_hidden', 'history_cap', 'current_cap'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive", key=f"model.{name}")
        for name in ('attn_hidden_layers', 'interest_ffn_layers', 'scenario_ffn_layers'):
            widths = getattr(self, name)
            if not widths or any(w <= 0 for w in widths):
                raise ConfigError(f"model.{name} needs positive widths", key=f"model.{name}")
            if widths[-1] != 1:
                raise ConfigError(f"model.{name} must end in a width-1 output layer",
                                  key=f"model.{name}")
        if self.init_scale < 0 or not math.isfinite(self.init_scale):
            raise ConfigError("model.init_scale must be finite and nonnegative", key='model.init_scale')

    @property
    def caps(self) -> Tuple[int, int]:
        return self.history_cap, self.current_cap

    @property
    def interest_input_dim(self) -> int:
        dim = 3 * self.embed_dim + self.gru_hidden
        if self.saca_enabled:
            dim += self.embed_dim
        return dim


@dataclass
class InferenceConfig:
    """Counterfactual reference constant c used by debiased inference."""

    c: float = 0.5

    def __post_init__(self):
        if not math.isfinite(self.c):
            raise ConfigError("inference.c must be finite", key='inference.c')


class ParameterSet:
    """Named learnable arrays of one network, in creation order, plus the config that shaped them."""

    def __init__(self, config: Any, vocab_sizes: Tuple[int, int, int], params: Sequence[Parameter]):
        self.config = config
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self._params: Dict[str, Parameter] = {p.name: p for p in params}

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def size(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def copy(self):
        return type(self)(self.config, self.vocab_sizes,
                          [Parameter(p.name, p.data.copy()) for p in self._params.values()])

    def checksum(self) -> str:
        return parameter_checksum(self.parameters())


class MScanParameters(ParameterSet):
    """Every learnable array of one M-scan network."""

    config: ModelConfig

    def __init__(self, config: ModelConfig, vocab_sizes: Tuple[int, int, int],
                 params: Sequence[Parameter]):
        if not isinstance(config, ModelConfig):
            raise ConfigError(f"M-scan parameters need a ModelConfig, got {type(config).__name__}")
        super().__init__(config, vocab_sizes, params)


def parameter_checksum(params: Sequence[Parameter]) -> str:
    """SHA-256 over names, shapes and float64 bytes, in name order."""
    digest = hashlib.sha256()
    for p in sorted(params, key=lambda q: q.name):
        digest.update(p.name.encode('utf-8'))
        digest.update(repr(p.shape).encode('utf-8'))
        digest.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
    return digest.hexdigest()


def _uniform(rng: np.random.Generator, scale: float, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape) if scale > 0 else np.zeros(shape)


def init_ffn(rng: np.random.Generator, prefix: str, in_dim: int, widths: Sequence[int],
             scale: float) -> List[Parameter]:
    """Weights (in, out) drawn uniform in [-scale, scale]; biases zero."""
    params = []
    for k, width in enumerate(widths):
        params.append(Parameter(f"{prefix}.{k}.weight", _uniform(rng, scale, (in_dim, width))))
        params.append(Parameter(f"{prefix}.{k}.bias", np.zeros(width)))
        in_dim = width
    return params


def ffn_forward(params: ParameterSet, prefix: str, x: Tensor, n_layers: int, start: int = 0) -> Tensor:
    """Apply layers start..n_layers-1 of an FFN to 2-D input; ReLU between layers, linear output."""
    for k in range(start, n_layers):
        x = ad.add_bias(ad.matmul(x, params[f"{prefix}.{k}.weight"].value),
                        params[f"{prefix}.{k}.bias"].value)
        if k < n_layers - 1:
            x = ad.relu(x)
    return x


def init_parameters(config: ModelConfig, vocab_sizes: Tuple[int, int, int]) -> MScanParameters:
    """Seeded uniform initialization of every M-scan array."""
    n_users, n_items, n_scenarios = vocab_sizes
    if min(vocab_sizes) <= 0:
        raise ConfigError(f"vocabulary sizes must be positive, got {tuple(vocab_sizes)}")
    rng = np.random.default_rng(config.init_seed)
    d, hidden, s = config.embed_dim, config.gru_hidden, config.init_scale

    params = [
        Parameter('user_table', _uniform(rng, s, (n_users, d))),
        Parameter('item_table', _uniform(rng, s, (n_items, d))),
        Parameter('scenario_table', _uniform(rng, s, (n_scenarios, d))),
    ]
    for gate in ('z', 'r', 'h'):
        params.append(Parameter(f"gru.W_{gate}", _uniform(rng, s, (d, hidden))))
    for gate in ('z', 'r', 'h'):
        params.append(Parameter(f"gru.U_{gate}", _uniform(rng, s, (hidden, hidden))))
    for gate in ('z', 'r', 'h'):
        params.append(Parameter(f"gru.b_{gate}", np.zeros(hidden)))
    if config.saca_enabled:
        params += init_ffn(rng, 'attn_ffn', 3 * d, config.attn_hidden_layers, s)
    params += init_ffn(rng, 'interest_ffn', config.interest_input_dim, config.interest_ffn_layers, s)
    if config.sbe_enabled:
        params += init_ffn(rng, 'scenario_ffn', d, config.scenario_ffn_layers, s)

    logger.debug("Initialized %d parameter arrays for vocab %s", len(params), tuple(vocab_sizes))
    return MScanParameters(config, vocab_sizes, params)


def encode_current_scenario(params: MScanParameters, inputs: Tensor, mask: np.ndarray
                            ) -> Tuple[Tensor, List[Tensor]]:
    """
    GRU over current-scenario item embeddings.

    Args:
        params: Model parameters
        inputs: (B, L_s, d) embeddings, valid steps left-aligned
        mask: (B, L_s) validity flags; padded steps leave the state unchanged

    Returns:
        Final state h at the last valid step (zero for empty histories) and
        the state after every step
    """
    if inputs.data.ndim != 3 or inputs.shape[2] != params.config.embed_dim:
        raise ShapeError(f"GRU input must be (B, L_s, {params.config.embed_dim}), got {inputs.shape}")
    batch, steps, _ = inputs.shape
    hidden = params.config.gru_hidden
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, steps):
        raise ShapeError(f"GRU mask must be {(batch, steps)}, got {mask.shape}")

    W = {g: params[f"gru.W_{g}"].value for g in 'zrh'}
    U = {g: params[f"gru.U_{g}"].value for g in 'zrh'}
    b = {g: params[f"gru.b_{g}"].value for g in 'zrh'}

    h = ad.constant(np.zeros((batch, hidden)))
    states = []
    for k in range(steps):
        if not mask[:, k].any():
            states.append(h)
            continue
        x = ad.take(inputs, axis=1, index=k)
        z = ad.sigmoid(ad.add_bias(ad.add(ad.matmul(x, W['z']), ad.matmul(h, U['z'])), b['z']))
        r = ad.sigmoid(ad.add_bias(ad.add(ad.matmul(x, W['r']), ad.matmul(h, U['r'])), b['r']))
        cand = ad.tanh(ad.add_bias(
            ad.add(ad.matmul(x, W['h']), ad.matmul(ad.mul(r, h), U['h'])), b['h']))
        h_new = ad.add(ad.mul(ad.scale(z, -1.0, 1.0), h), ad.mul(z, cand))
        if mask[:, k].all():
            h = h_new
        else:
            keep = np.repeat(mask[:, k:k + 1].astype(np.float64), hidden, axis=1)
            h = ad.add(ad.mul(ad.constant(keep), h_new), ad.mul(ad.constant(1.0 - keep), h))
        states.append(h)
    return h, states


def co_attention_scores(params: MScanParameters, mixed: Tensor, candidate: Tensor, current: Tensor,
                        mixed_mask: np.ndarray, current_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Co-attention matrix C[b, j, k] = FFN([h_bj + i + s_bk]) and its max-pool over k.

    The first FFN layer is linear in the concatenation, so it is applied to
    each part before tiling.

    Returns:
        C of shape (B, L_h, L_s) and pooled c of shape (B, L_h); c is 0 where
        the current history is empty
    """
    cfg = params.config
    d = cfg.embed_dim
    if mixed.data.ndim != 3 or current.data.ndim != 3 or candidate.data.ndim != 2:
        raise ShapeError(f"co-attention inputs have shapes {mixed.shape}, {candidate.shape}, {current.shape}")
    batch, len_h, _ = mixed.shape
    len_s = current.shape[1]
    if mixed.shape[2] != d or current.shape[2] != d or candidate.shape != (batch, d):
        raise ShapeError(f"co-attention inputs have shapes {mixed.shape}, {candidate.shape}, {current.shape}")

    n_layers = len(cfg.attn_hidden_layers)
    w0 = params['attn_ffn.0.weight'].value
    width = cfg.attn_hidden_layers[0]
    part_h = ad.reshape(ad.matmul(ad.reshape(mixed, (batch * len_h, d)), ad.slice_rows(w0, 0, d)),
                        (batch, len_h, width))
    part_i = ad.matmul(candidate, ad.slice_rows(w0, d, 2 * d))
    part_s = ad.reshape(ad.matmul(ad.reshape(current, (batch * len_s, d)), ad.slice_rows(w0, 2 * d, 3 * d)),
                        (batch, len_s, width))
    pre = ad.add(
        ad.add(ad.repeat(part_h, axis=2, count=len_s),
               ad.repeat(ad.repeat(part_i, axis=1, count=len_h), axis=2, count=len_s)),
        ad.repeat(part_s, axis=1, count=len_h))
    x = ad.add_bias(pre, params['attn_ffn.0.bias'].value)
    if n_layers > 1:
        x = ad.relu(ad.reshape(x, (batch * len_h * len_s, width)))
        x = ffn_forward(params, 'attn_ffn', x, n_layers, start=1)
    scores = ad.reshape(x, (batch, len_h, len_s))

    pair_mask = np.asarray(mixed_mask, dtype=bool)[:, :, None] & np.asarray(current_mask, dtype=bool)[:, None, :]
    pooled = ad.max_pool(scores, pair_mask)
    return scores, pooled


def attention_aggregate(pooled: Tensor, mixed: Tensor, mixed_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Softmax over valid mixed-history positions and the weighted history sum.

    Pads get exactly zero weight; a row with no valid position gets zero
    weights and a zero aggregate.
    """
    mixed_mask = np.asarray(mixed_mask, dtype=bool)
    beta = ad.mul(ad.softmax(ad.masked_fill(pooled, mixed_mask)), ad.constant(mixed_mask.astype(np.float64)))
    return beta, ad.weighted_sum(beta, mixed)


def predict_interest(params: MScanParameters, user: Tensor, item: Tensor, scenario: Tensor,
                     h_final: Tensor, r_h: Optional[Tensor] = None) -> Tensor:
    """Interest logit y_m = FFN([u + i + s + h + R_h]), shape (B,)."""
    cfg = params.config
    features = [user, item, scenario, h_final]
    if cfg.saca_enabled:
        if r_h is None:
            raise ShapeError("interest head needs R_h when co-attention is enabled")
        features.append(r_h)
    x = ad.concat(features)
    if x.shape[-1] != cfg.interest_input_dim:
        raise ShapeError(f"interest input width {x.shape[-1]} != {cfg.interest_input_dim}")
    out = ffn_forward(params, 'interest_ffn', x, len(cfg.interest_ffn_layers))
    return ad.reshape(out, (x.shape[0],))


def predict_scenario_bias(params: MScanParameters, scenario: Tensor) -> Tensor:
    """Scenario-bias logit y_s = FFN(s), shape (B,)."""
    cfg = params.config
    if scenario.data.ndim != 2 or scenario.shape[1] != cfg.embed_dim:
        raise ShapeError(f"scenario head input must be (B, {cfg.embed_dim}), got {scenario.shape}")
    out = ffn_forward(params, 'scenario_ffn', scenario, len(cfg.scenario_ffn_layers))
    return ad.reshape(out, (scenario.shape[0],))


def fuse(y_m, y_s):
    """Training-time fusion y_uis = y_m * sigmoid(y_s)."""
    if isinstance(y_m, Tensor):
        return ad.mul(y_m, ad.sigmoid(y_s))
    return np.asarray(y_m, dtype=np.float64) * expit(np.asarray(y_s, dtype=np.float64))


def infer_debiased(y_m, y_s, cfg: InferenceConfig):
    """Debiased score sigmoid(y_s) * (y_m - c)."""
    return expit(np.asarray(y_s, dtype=np.float64)) * (np.asarray(y_m, dtype=np.float64) - cfg.c)


@dataclass
class ForwardTrace:
    """Intermediates of one batched forward pass (leading axis = example)."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    scenario_emb: np.ndarray
    gru_states: np.ndarray
    coattn: Optional[np.ndarray]
    pooled: Optional[np.ndarray]
    beta: Optional[np.ndarray]
    r_h: Optional[np.ndarray]
    y_m: np.ndarray
    y_s: Optional[np.ndarray]
    y_uis: np.ndarray
    y_db: Optional[np.ndarray] = None


def _check_ids(params: MScanParameters, batch: ExampleBatch):
    n_users, n_items, n_scenarios = params.vocab_sizes
    for name, ids, limit in (('user', batch.users, n_users), ('item', batch.items, n_items),
                             ('scenario', batch.scenarios, n_scenarios)):
        if len(ids) and (ids.min() < 0 or ids.max() >= limit):
            raise IndexOutOfRangeError(f"{name} id {int(ids.max())} outside model vocabulary of {limit}")


def forward_tensors(params: MScanParameters, batch: ExampleBatch) -> Dict[str, Tensor]:
    """Run the network on a batch and return every intermediate as a tensor."""
    cfg = params.config
    _check_ids(params, batch)
    items = params['item_table'].value
    out = {
        'user_emb': ad.lookup(params['user_table'].value, batch.users),
        'item_emb': ad.lookup(items, batch.items),
        'scenario_emb': ad.lookup(params['scenario_table'].value, batch.scenarios),
    }
    current = ad.lookup(items, batch.current_items)
    h_final, states = encode_current_scenario(params, current, batch.current_mask)
    out['h_final'] = h_final
    out['gru_states'] = states

    r_h = None
    if cfg.saca_enabled:
        mixed = ad.lookup(items, batch.mixed_items)
        scores, pooled = co_attention_scores(params, mixed, out['item_emb'], current,
                                             batch.mixed_mask, batch.current_mask)
        beta, r_h = attention_aggregate(pooled, mixed, batch.mixed_mask)
        out.update(coattn=scores, pooled=pooled, beta=beta, r_h=r_h)

    out['y_m'] = predict_interest(params, out['user_emb'], out['item_emb'], out['scenario_emb'],
                                  h_final, r_h)
    if cfg.sbe_enabled:
        out['y_s'] = predict_scenario_bias(params, out['scenario_emb'])
        out['y_uis'] = fuse(out['y_m'], out['y_s'])
    else:
        out['y_uis'] = out['y_m']
    return out


def forward(params: MScanParameters, batch: ExampleBatch, mode: str = 'infer',
            cfg: Optional[InferenceConfig] = None) -> ForwardTrace:
    """
    Forward pass returning a populated trace.

    In 'infer' mode the trace also carries the debiased score y_db (or y_m
    when the scenario-bias head is disabled).
    """
    if mode not in ('train', 'infer'):
        raise ConfigError(f"forward mode must be 'train' or 'infer', got {mode!r}")
    t = forward_tensors(params, batch)

    def arr(name):
        return t[name].numpy() if name in t else None

    gru_states = (np.stack([s.data for s in t['gru_states']], axis=1) if t['gru_states']
                  else np.zeros((len(batch), 0, params.config.gru_hidden)))
    trace = ForwardTrace(
        user_emb=arr('user_emb'),
        item_emb=arr('item_emb'),
        scenario_emb=arr('scenario_emb'),
        gru_states=gru_states,
        coattn=arr('coattn'),
        pooled=arr('pooled'),
        beta=arr('beta'),
        r_h=arr('r_h'),
        y_m=arr('y_m'),
        y_s=arr('y_s'),
        y_uis=arr('y_uis'),
    )
    if mode == 'infer':
        cfg = cfg or InferenceConfig()
        trace.y_db = trace.y_m.copy() if trace.y_s is None else infer_debiased(trace.y_m, trace.y_s, cfg)
    return trace


class MScanModel:
    """Training and scoring interface over a set of M-scan parameters."""

    name = 'mscan'

    def __init__(self, params: MScanParameters):
        self.params = params

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def caps(self) -> Tuple[int, int]:
        return self.params.config.caps

    @property
    def vocab_sizes(self) -> Tuple[int, int, int]:
        return self.params.vocab_sizes

    def parameters(self) -> List[Parameter]:
        return self.params.parameters()

    def zero_grad(self):
        self.params.zero_grad()

    def loss_terms(self, batch: ExampleBatch, ys_targets: np.ndarray) -> Tuple[Tensor, Optional[Tensor]]:
        """Batch-mean L_uis and L_s (None when the scenario head is disabled)."""
        t = forward_tensors(self.params, batch)
        l_uis = ad.mean(ad.bce_logits(t['y_uis'], batch.labels))
        if 'y_s' not in t:
            return l_uis, None
        return l_uis, ad.mean(ad.bce_logits(t['y_s'], ys_targets))

    def score(self, batch: ExampleBatch, cfg: Optional[InferenceConfig] = None,
              kind: str = 'db') -> np.ndarray:
        """Scores of kind 'db' (debiased), 'uis' (fused) or 'm' (interest logit)."""
        trace = forward(self.params, batch, mode='infer', cfg=cfg)
        if kind == 'db':
            return trace.y_db
        if kind == 'uis':
            return trace.y_uis
        if kind == 'm':
            return trace.y_m
        raise ConfigError(f"unknown score kind {kind!r}")


def save_checkpoint(params: MScanParameters, path: Union[str, Path]) -> Path:
    """Write config, vocabulary sizes and every named array as canonical JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'model_config': asdict(params.config),
        'vocab_sizes': list(params.vocab_sizes),
        'parameters': [
            {'name': p.name, 'shape': list(p.shape), 'values': p.data.reshape(-1).tolist()}
            for p in params
        ],
    }
    path.write_text(json.dumps(doc, sort_keys=True, separators=(',', ':'), allow_nan=False) + '\n',
                    encoding='utf-8')
    logger.info("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> MScanParameters:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}", path=str(path))
    try:
        doc = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not a valid checkpoint ({e})")
    if doc.get('format') != CHECKPOINT_FORMAT or doc.get('version') != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format")
    config = ModelConfig(**doc['model_config'])
    params = []
    for entry in doc['parameters']:
        values = np.asarray(entry['values'], dtype=np.float64)
        shape = tuple(entry['shape'])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"{path}: parameter {entry['name']} has {values.size} values for shape {shape}")
        params.append(Parameter(entry['name'], values.reshape(shape)))
    loaded = MScanParameters(config, tuple(doc['vocab_sizes']), params)
    expected = init_parameters(config, loaded.vocab_sizes)
    for p in expected:
        if p.name not in loaded or loaded[p.name].shape != p.shape:
            raise DataError(f"{path}: parameter {p.name} missing or misshapen")
    return loaded
