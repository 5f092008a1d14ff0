"""
Reverse-mode differentiation core for mscan_lab.

Dense float64 tensors, named parameters with gradient buffers, and a tape
that records every primitive application so a scalar output can be
differentiated with respect to all parameters it touches.

Shapes never broadcast implicitly: elementwise primitives demand identical
shapes, and tiling goes through the explicit ``repeat``/``add_bias`` kinds.
"""

import itertools
import logging
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import GradientError, IndexOutOfRangeError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
MASK_FILL = -1e30

_tensor_ids = itertools.count()
_active_tape: ContextVar[Optional['Tape']] = ContextVar('mscan_active_tape', default=None)


class Tensor:
    """A dense float64 array with an identity the tape can refer to."""

    __slots__ = ('data', 'id', 'requires_grad', 'param')

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE, order='C')
        self.id = next(_tensor_ids)
        self.requires_grad = requires_grad
        self.param: Optional['Parameter'] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A learnable array with a same-shaped gradient buffer."""

    def __init__(self, name: str, value: Any):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.value.param = self
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    """One recorded primitive application."""

    kind: str
    input_ids: List[int]
    output_id: int
    attrs: Dict[str, Any]
    saved: Any
    input_requires_grad: List[bool]


class Tape:
    """
    Ordered record of primitive applications.

    Use as a context manager; primitives applied inside the block are
    recorded, primitives applied outside any tape are not.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.values: Dict[int, np.ndarray] = {}
        self.parameters: Dict[int, Parameter] = {}
        self._token = None

    def __enter__(self) -> 'Tape':
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor,
               attrs: Dict[str, Any], saved: Any):
        for t in inputs:
            self.values.setdefault(t.id, t.data)
            if t.param is not None:
                self.parameters[t.id] = t.param
        self.values[output.id] = output.data
        self.nodes.append(Node(
            kind=kind,
            input_ids=[t.id for t in inputs],
            output_id=output.id,
            attrs=attrs,
            saved=saved,
            input_requires_grad=[t.requires_grad for t in inputs],
        ))

    def replay(self) -> bool:
        """Re-run every node from its recorded inputs; True iff all outputs match bit for bit."""
        for node in self.nodes:
            prim = PRIMITIVES[node.kind]
            arrays = [self.values[i] for i in node.input_ids]
            out, _ = prim.forward(arrays, node.attrs)
            recorded = self.values[node.output_id]
            if out.shape != recorded.shape or out.tobytes() != recorded.tobytes():
                logger.debug("replay mismatch at %s node", node.kind)
                return False
        return True


class Primitive:
    """Forward kernel, shape check and vector-Jacobian product of one op kind."""

    kind = ''

    def check(self, arrays: List[np.ndarray], attrs: Dict[str, Any]):
        pass

    def forward(self, arrays: List[np.ndarray], attrs: Dict[str, Any]) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def vjp(self, g: np.ndarray, arrays: List[np.ndarray], out: np.ndarray,
            saved: Any, attrs: Dict[str, Any]) -> List[Optional[np.ndarray]]:
        raise NotImplementedError

    def _mismatch(self, arrays: List[np.ndarray], detail: str = '') -> ShapeError:
        shapes = ', '.join(str(a.shape) for a in arrays)
        msg = f"{self.kind}: incompatible shapes {shapes}"
        if detail:
            msg += f" ({detail})"
        return ShapeError(msg)


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(kind: str) -> Callable[[type], type]:
    def register_primitive_cls(cls):
        if kind in PRIMITIVES:
            raise ValueError(f"Cannot register duplicate primitive ({kind})")
        cls.kind = kind
        PRIMITIVES[kind] = cls()
        return cls
    return register_primitive_cls


def _same_shapes(prim: Primitive, arrays: List[np.ndarray]):
    first = arrays[0].shape
    if any(a.shape != first for a in arrays[1:]):
        raise prim._mismatch(arrays, 'elementwise ops need equal shapes')


def _mask_like(prim: Primitive, x: np.ndarray, attrs: Dict[str, Any]) -> np.ndarray:
    mask = np.asarray(attrs['mask'], dtype=bool)
    if mask.shape != x.shape:
        raise prim._mismatch([x, mask], 'mask shape differs')
    return mask


@register_primitive('add')
class Add(Primitive):
    def check(self, arrays, attrs):
        _same_shapes(self, arrays)

    def forward(self, arrays, attrs):
        return arrays[0] + arrays[1], None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g, g]


@register_primitive('sub')
class Sub(Primitive):
    def check(self, arrays, attrs):
        _same_shapes(self, arrays)

    def forward(self, arrays, attrs):
        return arrays[0] - arrays[1], None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g, -g]


@register_primitive('mul')
class Mul(Primitive):
    def check(self, arrays, attrs):
        _same_shapes(self, arrays)

    def forward(self, arrays, attrs):
        return arrays[0] * arrays[1], None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g * arrays[1], g * arrays[0]]


@register_primitive('scale')
class Scale(Primitive):
    """a * x + b for Python scalars a, b."""

    def forward(self, arrays, attrs):
        return attrs.get('a', 1.0) * arrays[0] + attrs.get('b', 0.0), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [attrs.get('a', 1.0) * g]


@register_primitive('matmul')
class MatMul(Primitive):
    def check(self, arrays, attrs):
        a, b = arrays
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise self._mismatch(arrays, 'inner dimensions must agree')

    def forward(self, arrays, attrs):
        return arrays[0] @ arrays[1], None

    def vjp(self, g, arrays, out, saved, attrs):
        a, b = arrays
        if b.ndim == 1:
            return [np.outer(g, b), a.T @ g]
        return [g @ b.T, a.T @ g]


@register_primitive('add_bias')
class AddBias(Primitive):
    """x[..., n] + bias[n]."""

    def check(self, arrays, attrs):
        x, bias = arrays
        if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
            raise self._mismatch(arrays, 'bias must match the trailing axis')

    def forward(self, arrays, attrs):
        return arrays[0] + arrays[1], None

    def vjp(self, g, arrays, out, saved, attrs):
        n = arrays[1].shape[0]
        return [g, g.reshape(-1, n).sum(axis=0)]


@register_primitive('sigmoid')
class Sigmoid(Primitive):
    def forward(self, arrays, attrs):
        return expit(arrays[0]), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g * out * (1.0 - out)]


@register_primitive('tanh')
class Tanh(Primitive):
    def forward(self, arrays, attrs):
        return np.tanh(arrays[0]), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g * (1.0 - out * out)]


@register_primitive('relu')
class ReLU(Primitive):
    def forward(self, arrays, attrs):
        return np.maximum(arrays[0], 0.0), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g * (arrays[0] > 0.0)]


@register_primitive('softmax')
class Softmax(Primitive):
    """Softmax over the last axis, max-subtracted."""

    def check(self, arrays, attrs):
        if arrays[0].ndim < 1 or arrays[0].shape[-1] == 0:
            raise self._mismatch(arrays, 'softmax needs a non-empty last axis')

    def forward(self, arrays, attrs):
        x = arrays[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


@register_primitive('masked_fill')
class MaskedFill(Primitive):
    """Keep x where mask is set, fill the rest with a constant."""

    def check(self, arrays, attrs):
        _mask_like(self, arrays[0], attrs)

    def forward(self, arrays, attrs):
        mask = np.asarray(attrs['mask'], dtype=bool)
        return np.where(mask, arrays[0], attrs.get('value', MASK_FILL)), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [np.where(np.asarray(attrs['mask'], dtype=bool), g, 0.0)]


@register_primitive('max_pool')
class MaxPool(Primitive):
    """
    Max over the last axis restricted to mask-valid entries.

    Rows with no valid entry produce 0 and pass no gradient. Ties route the
    gradient to the lowest-index maximizer.
    """

    def check(self, arrays, attrs):
        if arrays[0].ndim < 1:
            raise self._mismatch(arrays, 'max_pool needs at least one axis')
        if 'mask' in attrs:
            _mask_like(self, arrays[0], attrs)

    def forward(self, arrays, attrs):
        x = arrays[0]
        mask = np.asarray(attrs['mask'], dtype=bool) if 'mask' in attrs else np.ones(x.shape, dtype=bool)
        if x.shape[-1] == 0:
            shape = x.shape[:-1]
            return np.zeros(shape, dtype=DTYPE), (np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=bool))
        masked = np.where(mask, x, -np.inf)
        idx = masked.argmax(axis=-1)
        has_any = mask.any(axis=-1)
        picked = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]
        return np.where(has_any, picked, 0.0), (idx, has_any)

    def vjp(self, g, arrays, out, saved, attrs):
        idx, has_any = saved
        gx = np.zeros_like(arrays[0])
        if gx.shape[-1]:
            np.put_along_axis(gx, idx[..., None], np.where(has_any, g, 0.0)[..., None], axis=-1)
        return [gx]


@register_primitive('concat')
class Concat(Primitive):
    """Concatenation along the last axis."""

    def check(self, arrays, attrs):
        lead = arrays[0].shape[:-1]
        if any(a.ndim < 1 or a.shape[:-1] != lead for a in arrays):
            raise self._mismatch(arrays, 'leading axes must agree')

    def forward(self, arrays, attrs):
        return np.concatenate(arrays, axis=-1), None

    def vjp(self, g, arrays, out, saved, attrs):
        bounds = np.cumsum([a.shape[-1] for a in arrays])[:-1]
        return np.split(g, bounds, axis=-1)


@register_primitive('reshape')
class Reshape(Primitive):
    def check(self, arrays, attrs):
        if int(np.prod(attrs['shape'], dtype=np.int64)) != arrays[0].size:
            raise self._mismatch(arrays, f"cannot reshape to {tuple(attrs['shape'])}")

    def forward(self, arrays, attrs):
        return arrays[0].reshape(attrs['shape']), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g.reshape(arrays[0].shape)]


@register_primitive('repeat')
class Repeat(Primitive):
    """Insert a new axis of extent ``count`` at ``axis`` by copying."""

    def check(self, arrays, attrs):
        axis, count = attrs['axis'], attrs['count']
        if count < 0 or not -arrays[0].ndim - 1 <= axis <= arrays[0].ndim:
            raise self._mismatch(arrays, f"bad repeat axis={axis} count={count}")

    def forward(self, arrays, attrs):
        expanded = np.expand_dims(arrays[0], attrs['axis'])
        return np.repeat(expanded, attrs['count'], axis=attrs['axis']), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [g.sum(axis=attrs['axis'])]


@register_primitive('take')
class Take(Primitive):
    """Select a single index along an axis, dropping that axis."""

    def check(self, arrays, attrs):
        x, axis, index = arrays[0], attrs['axis'], attrs['index']
        if not -x.ndim <= axis < x.ndim or not 0 <= index < x.shape[axis]:
            raise self._mismatch(arrays, f"take index {index} on axis {axis}")

    def forward(self, arrays, attrs):
        return np.take(arrays[0], attrs['index'], axis=attrs['axis']), None

    def vjp(self, g, arrays, out, saved, attrs):
        gx = np.zeros_like(arrays[0])
        sl = [slice(None)] * gx.ndim
        sl[attrs['axis']] = attrs['index']
        gx[tuple(sl)] = g
        return [gx]


@register_primitive('slice_rows')
class SliceRows(Primitive):
    """Rows start:stop of a 2-D tensor."""

    def check(self, arrays, attrs):
        x, start, stop = arrays[0], attrs['start'], attrs['stop']
        if x.ndim != 2 or not 0 <= start <= stop <= x.shape[0]:
            raise self._mismatch(arrays, f"bad row slice {start}:{stop}")

    def forward(self, arrays, attrs):
        return arrays[0][attrs['start']:attrs['stop']].copy(), None

    def vjp(self, g, arrays, out, saved, attrs):
        gx = np.zeros_like(arrays[0])
        gx[attrs['start']:attrs['stop']] = g
        return [gx]


@register_primitive('lookup')
class Lookup(Primitive):
    """Embedding gather: table[indices] for an integer index array of any shape."""

    def check(self, arrays, attrs):
        table = arrays[0]
        indices = np.asarray(attrs['indices'])
        if table.ndim != 2:
            raise self._mismatch(arrays, 'lookup table must be 2-D')
        if not np.issubdtype(indices.dtype, np.integer):
            raise ShapeError(f"lookup: indices must be integers, got {indices.dtype}")
        if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
            bad = indices.max() if indices.max() >= table.shape[0] else indices.min()
            raise IndexOutOfRangeError(
                f"lookup: index {int(bad)} outside table with {table.shape[0]} rows")

    def forward(self, arrays, attrs):
        return arrays[0][np.asarray(attrs['indices'])], None

    def vjp(self, g, arrays, out, saved, attrs):
        table = arrays[0]
        gt = np.zeros_like(table)
        np.add.at(gt, np.asarray(attrs['indices']).reshape(-1), g.reshape(-1, table.shape[1]))
        return [gt]


@register_primitive('weighted_sum')
class WeightedSum(Primitive):
    """Batched sum_j w[b, j] * x[b, j, :]."""

    def check(self, arrays, attrs):
        w, x = arrays
        if w.ndim != 2 or x.ndim != 3 or w.shape != x.shape[:2]:
            raise self._mismatch(arrays, 'expected (B, L) weights and (B, L, d) values')

    def forward(self, arrays, attrs):
        return np.einsum('bl,bld->bd', arrays[0], arrays[1]), None

    def vjp(self, g, arrays, out, saved, attrs):
        w, x = arrays
        return [np.einsum('bd,bld->bl', g, x), w[:, :, None] * g[:, None, :]]


@register_primitive('sum')
class Sum(Primitive):
    def forward(self, arrays, attrs):
        return np.asarray(arrays[0].sum(), dtype=DTYPE), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [np.full(arrays[0].shape, g.item(), dtype=DTYPE)]


@register_primitive('mean')
class Mean(Primitive):
    def check(self, arrays, attrs):
        if arrays[0].size == 0:
            raise self._mismatch(arrays, 'mean of an empty tensor')

    def forward(self, arrays, attrs):
        return np.asarray(arrays[0].mean(), dtype=DTYPE), None

    def vjp(self, g, arrays, out, saved, attrs):
        return [np.full(arrays[0].shape, g.item() / arrays[0].size, dtype=DTYPE)]


@register_primitive('bce_logits')
class BCELogits(Primitive):
    """Elementwise log(1+exp(-|z|)) + max(z,0) - z*y against constant labels y."""

    def check(self, arrays, attrs):
        labels = np.asarray(attrs['labels'])
        if labels.shape != arrays[0].shape:
            raise self._mismatch([arrays[0], labels], 'labels must match logits')

    def forward(self, arrays, attrs):
        z = arrays[0]
        y = np.asarray(attrs['labels'], dtype=DTYPE)
        return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * y, None

    def vjp(self, g, arrays, out, saved, attrs):
        y = np.asarray(attrs['labels'], dtype=DTYPE)
        return [g * (expit(arrays[0]) - y)]


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """
    Apply a primitive and record it on the active tape.

    Args:
        kind: Registered primitive kind, e.g. 'matmul' or 'softmax'
        inputs: Input tensors
        **attrs: Constant attributes of the kind (masks, axes, indices, labels)

    Returns:
        The output tensor
    """
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise NumericError(f"unknown primitive kind {kind!r}")
    arrays = [t.data for t in inputs]
    prim.check(arrays, attrs)
    out, saved = prim.forward(arrays, attrs)
    result = Tensor(out, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape.get()
    if tape is not None and result.requires_grad:
        tape.record(kind, inputs, result, attrs, saved)
    return result


def backward(output: Tensor, tape: Tape) -> Dict[str, np.ndarray]:
    """
    Accumulate d(output)/d(parameter) into every parameter recorded on the tape.

    Args:
        output: Scalar tensor produced on the tape
        tape: The tape the output was recorded on

    Returns:
        Map from parameter name to its (accumulated) gradient buffer
    """
    if output.data.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    if not tape.nodes:
        raise GradientError("backward called on an empty tape")
    if output.id not in tape.values:
        raise GradientError("output was not recorded on this tape")

    grads: Dict[int, np.ndarray] = {output.id: np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        arrays = [tape.values[i] for i in node.input_ids]
        in_grads = prim.vjp(g, arrays, tape.values[node.output_id], node.saved, node.attrs)
        for inp_id, needs, gi in zip(node.input_ids, node.input_requires_grad, in_grads):
            if not needs or gi is None:
                continue
            if inp_id in grads:
                grads[inp_id] = grads[inp_id] + gi
            else:
                grads[inp_id] = gi

    result = {}
    for pid, param in tape.parameters.items():
        if pid in grads:
            param.grad += grads[pid]
        result[param.name] = param.grad
    return result


# Thin wrappers used by the model code.

def constant(data: Any) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive('add', [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive('sub', [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive('mul', [a, b])


def scale(x: Tensor, a: float = 1.0, b: float = 0.0) -> Tensor:
    return apply_primitive('scale', [x], a=float(a), b=float(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive('matmul', [a, b])


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    return apply_primitive('add_bias', [x, bias])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive('sigmoid', [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive('tanh', [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive('relu', [x])


def softmax(x: Tensor) -> Tensor:
    return apply_primitive('softmax', [x])


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    return apply_primitive('masked_fill', [x], mask=np.asarray(mask, dtype=bool), value=value)


def max_pool(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    if mask is None:
        return apply_primitive('max_pool', [x])
    return apply_primitive('max_pool', [x], mask=np.asarray(mask, dtype=bool))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return apply_primitive('concat', list(tensors))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive('reshape', [x], shape=tuple(int(s) for s in shape))


def repeat(x: Tensor, axis: int, count: int) -> Tensor:
    return apply_primitive('repeat', [x], axis=axis, count=int(count))


def take(x: Tensor, axis: int, index: int) -> Tensor:
    return apply_primitive('take', [x], axis=axis, index=int(index))


def lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    return apply_primitive('lookup', [table], indices=np.asarray(indices))


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    return apply_primitive('weighted_sum', [weights, values])


def total(x: Tensor) -> Tensor:
    return apply_primitive('sum', [x])


def mean(x: Tensor) -> Tensor:
    return apply_primitive('mean', [x])


def bce_logits(z: Tensor, labels: np.ndarray) -> Tensor:
    return apply_primitive('bce_logits', [z], labels=np.asarray(labels, dtype=DTYPE))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return apply_primitive('slice_rows', [x], start=int(start), stop=int(stop))
