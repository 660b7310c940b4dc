"""
Reverse-mode automatic differentiation over dense float64 numpy tensors.

Operations record themselves on the active `Tape` (a context manager) when any input requires
gradients; `backward()` walks the tape in reverse and returns gradients for requested leaves.
Also holds the Adam optimizer and the `SRPK1` binary tensor-file format shared by both models
and the optimizer state.

Usage:
  with Tape() as tape:
      loss = sum_sq(matmul(x, w))
  (grad_w,) = backward(tape, loss, [w])
"""

import itertools
import logging
import math
import struct
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse
import scipy.special

log = logging.getLogger(__name__)

WEIGHTS_MAGIC: bytes = b'SRPK1'
_SQRT_HALF: float = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI: float = 1.0 / math.sqrt(2.0 * math.pi)

_uid_counter = itertools.count()
_uid_lock = threading.Lock()
_tape_state = threading.local()


class AutodiffError(Exception):
    """
    Signals an invalid tensor operation; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


def _next_uid() -> int:
    with _uid_lock:
        return next(_uid_counter)


class Tensor:
    """
    A float64 array plus the bookkeeping needed to find it on a tape.
    """

    __slots__ = ('data', 'requires_grad', 'uid')

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        array: np.ndarray = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise AutodiffError('non_finite', 'tensor data contains NaN or Inf')
        self.data: np.ndarray = array
        self.requires_grad: bool = requires_grad
        self.uid: int = _next_uid()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'


def constant(data: Any) -> Tensor:
    """
    A leaf that never receives a gradient.
    """
    return Tensor(data, requires_grad=False)


def parameter(data: Any) -> Tensor:
    """
    A trainable leaf holding a float64 copy of `data`.
    """
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


@dataclass
class TapeRecord:
    """
    One recorded op: its inputs, its output, and the rule mapping the output gradient to input gradients.
    """

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """
    Ordered record of differentiable operations; inputs always precede the ops that consume them.
    """

    records: list[TapeRecord] = field(default_factory=list)

    def __enter__(self) -> 'Tape':
        stack: list[Tape] = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _tape_stack().pop()


def _tape_stack() -> list[Tape]:
    if not hasattr(_tape_state, 'stack'):
        _tape_state.stack = []
    return _tape_state.stack


def _active_tape() -> Tape | None:
    stack: list[Tape] = _tape_stack()
    return stack[-1] if stack else None


def _emit(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_rule: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    """
    Wraps a forward result, rejecting non-finite values, and records the op when gradients are needed.

    Called by every differentiable op in this module.
    """
    if not np.all(np.isfinite(out_data)):
        raise AutodiffError('non_finite', f'{op} produced NaN or Inf')
    tape: Tape | None = _active_tape()
    needs_grad: bool = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs_grad
    out.uid = _next_uid()
    if needs_grad and tape is not None:
        tape.records.append(TapeRecord(op, tuple(t.uid for t in inputs), out.uid, backward_rule))
    return out


def _sum_to_channels(grad: np.ndarray, channels: int) -> np.ndarray:
    return grad.reshape(-1, channels).sum(axis=0)


def _check_same_or_channel(op: str, a: Tensor, b: Tensor) -> bool:
    """
    Returns True when `b` is a per-channel vector over `a`'s last axis; raises on other mismatches.
    """
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise AutodiffError('shape_mismatch', f'{op}: shapes {a.shape} and {b.shape} are incompatible')


## -- elementwise and linear ops ------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """
    Adds same-shape tensors, or a per-channel bias `b` over `a`'s last axis.
    """
    channel: bool = _check_same_or_channel('add', a, b)

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, (_sum_to_channels(grad, b.shape[0]) if channel else grad)

    return _emit('add', (a, b), a.data + b.data, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """
    Subtracts same-shape tensors, or a per-channel vector `b` over `a`'s last axis.
    """
    channel: bool = _check_same_or_channel('sub', a, b)

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, -(_sum_to_channels(grad, b.shape[0]) if channel else grad)

    return _emit('sub', (a, b), a.data - b.data, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """
    Multiplies elementwise, or by a per-channel vector `b` over `a`'s last axis.
    """
    channel: bool = _check_same_or_channel('mul', a, b)

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_b: np.ndarray = grad * a.data
        return grad * b.data, (_sum_to_channels(grad_b, b.shape[0]) if channel else grad_b)

    return _emit('mul', (a, b), a.data * b.data, rule)


def scale(a: Tensor, factor: float) -> Tensor:
    """
    Multiplies by a constant scalar.
    """
    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * factor,)

    return _emit('scale', (a,), a.data * factor, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Multiplies `a` (..., k) by a matrix `b` (k, m); leading axes of `a` act as a batch.
    """
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise AutodiffError('shape_mismatch', f'matmul: shapes {a.shape} and {b.shape} are incompatible')

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_a: np.ndarray | None = grad @ b.data.T if a.requires_grad else None
        grad_b: np.ndarray | None = None
        if b.requires_grad:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, b.shape[1])
        return grad_a, grad_b

    return _emit('matmul', (a, b), a.data @ b.data, rule)


def linear_map(matrix: np.ndarray, x: Tensor) -> Tensor:
    """
    Applies constant matrices `matrix` (..., m, n) to `x` (..., n, d), batch-aligned on leading axes.
    """
    weights: np.ndarray = np.asarray(matrix, dtype=np.float64)
    if weights.ndim < 2 or x.data.ndim < 2 or weights.shape[-1] != x.shape[-2]:
        raise AutodiffError('shape_mismatch', f'linear_map: shapes {weights.shape} and {x.shape} are incompatible')
    if weights.ndim > 2 and weights.shape[:-2] != x.shape[:-2]:
        raise AutodiffError('shape_mismatch', f'linear_map: batch shapes {weights.shape} and {x.shape} differ')

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.swapaxes(weights, -1, -2) @ grad,)

    return _emit('linear_map', (x,), weights @ x.data, rule)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """
    Gathers rows along the second-to-last axis: (..., V, C) -> (..., *indices.shape, C).
    """
    index_array: np.ndarray = np.asarray(indices, dtype=np.int64)
    if x.data.ndim < 2:
        raise AutodiffError('shape_mismatch', f'gather_rows: needs rank >= 2, got {x.shape}')
    rows: int = x.shape[-2]
    if index_array.size and (index_array.min() < 0 or index_array.max() >= rows):
        raise AutodiffError('shape_mismatch', f'gather_rows: index outside [0, {rows})')
    out_data: np.ndarray = np.take(x.data, index_array, axis=-2)

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        leading: tuple[int, ...] = x.shape[:-2]
        channels: int = x.shape[-1]
        flat: np.ndarray = index_array.reshape(-1)
        selector = scipy.sparse.csr_matrix(
            (np.ones(flat.size), (np.arange(flat.size), flat)), shape=(flat.size, rows)
        )
        batch: int = int(np.prod(leading)) if leading else 1
        grad_rows: np.ndarray = grad.reshape(batch, flat.size, channels).transpose(1, 0, 2).reshape(flat.size, -1)
        grad_x: np.ndarray = np.asarray(selector.T @ grad_rows).reshape(rows, batch, channels).transpose(1, 0, 2)
        return (grad_x.reshape(x.shape),)

    return _emit('gather_rows', (x,), out_data, rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """
    Concatenates tensors along `axis`; all other axes must match.
    """
    if not tensors:
        raise AutodiffError('shape_mismatch', 'concat: needs at least one tensor')
    try:
        out_data: np.ndarray = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise AutodiffError('shape_mismatch', f'concat: {exc}') from exc
    splits: list[int] = list(itertools.accumulate(t.shape[axis] for t in tensors))[:-1]

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return tuple(np.split(grad, splits, axis=axis))

    return _emit('concat', tuple(tensors), out_data, rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """
    Reshapes without copying; the gradient is reshaped back.
    """
    try:
        out_data: np.ndarray = x.data.reshape(shape)
    except ValueError as exc:
        raise AutodiffError('shape_mismatch', f'reshape: {exc}') from exc

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(x.shape),)

    return _emit('reshape', (x,), out_data, rule)


## -- nonlinearities and normalization ------------------------------


def relu(x: Tensor) -> Tensor:
    """
    Elementwise max(x, 0); the subgradient at 0 is 0.
    """
    mask: np.ndarray = x.data > 0

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * mask,)

    return _emit('relu', (x,), x.data * mask, rule)


def gelu(x: Tensor) -> Tensor:
    """
    Exact (erf-based) GELU.
    """
    cdf: np.ndarray = 0.5 * (1.0 + scipy.special.erf(x.data * _SQRT_HALF))

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        pdf: np.ndarray = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (grad * (cdf + x.data * pdf),)

    return _emit('gelu', (x,), x.data * cdf, rule)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """
    Normalizes channel groups over the last axis to zero mean, unit variance (no affine).
    """
    channels: int = x.shape[-1]
    if groups < 1 or channels % groups:
        raise AutodiffError('shape_mismatch', f'group_norm: {channels} channels not divisible by {groups} groups')
    grouped: np.ndarray = x.data.reshape(*x.shape[:-1], groups, channels // groups)
    centered: np.ndarray = grouped - grouped.mean(axis=-1, keepdims=True)
    inv_std: np.ndarray = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized: np.ndarray = centered * inv_std

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        g: np.ndarray = grad.reshape(grouped.shape)
        grad_x: np.ndarray = inv_std * (
            g - g.mean(axis=-1, keepdims=True) - normalized * (g * normalized).mean(axis=-1, keepdims=True)
        )
        return (grad_x.reshape(x.shape),)

    return _emit('group_norm', (x,), normalized.reshape(x.shape), rule)


def norm_rows(x: Tensor) -> Tensor:
    """
    Euclidean norm over the last axis; the subgradient at a zero row is zero.
    """
    norms: np.ndarray = np.sqrt((x.data * x.data).sum(axis=-1))

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        safe: np.ndarray = np.where(norms > 0.0, norms, 1.0)
        direction: np.ndarray = np.where((norms > 0.0)[..., None], x.data / safe[..., None], 0.0)
        return (grad[..., None] * direction,)

    return _emit('norm_rows', (x,), norms, rule)


## -- reductions and losses -----------------------------------------


def mean(x: Tensor) -> Tensor:
    """
    Mean over every element, as a 0-d tensor.
    """
    count: int = x.data.size

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.full(x.shape, float(grad) / count),)

    return _emit('mean', (x,), np.array(x.data.mean()), rule)


def sum_sq(x: Tensor) -> Tensor:
    """
    Sum of squares over every element, as a 0-d tensor.
    """
    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (2.0 * float(grad) * x.data,)

    return _emit('sum_sq', (x,), np.array((x.data * x.data).sum()), rule)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean binary cross-entropy of sigmoid(logits) against constant 0/1 labels, computed stably.
    """
    targets: np.ndarray = np.asarray(labels, dtype=np.float64)
    if targets.shape != logits.shape:
        raise AutodiffError('shape_mismatch', f'bce_with_logits: labels {targets.shape} vs logits {logits.shape}')
    z: np.ndarray = logits.data
    losses: np.ndarray = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (float(grad) * (scipy.special.expit(z) - targets) / z.size,)

    return _emit('bce_with_logits', (logits,), np.array(losses.mean()), rule)


def grad_reversal(x: Tensor, lam: float = 1.0) -> Tensor:
    """
    Identity in the forward pass; multiplies the incoming gradient by -lam in the backward pass.
    """

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (-lam * grad,)

    return _emit('grad_reversal', (x,), x.data.copy(), rule)


## -- image ops -----------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Direct 2D convolution: x (B, Cin, H, W), weight (Cout, Cin, kh, kw), bias (Cout,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise AutodiffError('shape_mismatch', f'conv2d: input {x.shape} and weight {weight.shape} are incompatible')
    if bias is not None and bias.shape != (weight.shape[0],):
        raise AutodiffError('shape_mismatch', f'conv2d: bias {bias.shape} does not match {weight.shape[0]} channels')
    if stride < 1 or padding < 0:
        raise AutodiffError('shape_mismatch', 'conv2d: stride must be >= 1 and padding >= 0')
    kh, kw = weight.shape[2], weight.shape[3]
    padded: np.ndarray = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise AutodiffError('shape_mismatch', 'conv2d: kernel larger than padded input')
    windows: np.ndarray = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out_data: np.ndarray = np.einsum('bchwij,ocij->bohw', windows, weight.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    inputs: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_x: np.ndarray | None = None
        if x.requires_grad:
            grad_padded: np.ndarray = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    contribution: np.ndarray = np.einsum('bohw,oc->bchw', grad, weight.data[:, :, i, j])
                    grad_padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += contribution
            grad_x = grad_padded[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        grad_w: np.ndarray | None = None
        if weight.requires_grad:
            grad_w = np.einsum('bchwij,bohw->ocij', windows, grad, optimize=True)
        grads: tuple[np.ndarray | None, ...] = (grad_x, grad_w)
        if bias is not None:
            grads = grads + (grad.sum(axis=(0, 2, 3)),)
        return grads

    return _emit('conv2d', inputs, out_data, rule)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """
    Non-overlapping average pooling over the last two axes; sizes must divide evenly.
    """
    if x.data.ndim != 4 or x.shape[2] % kernel or x.shape[3] % kernel:
        raise AutodiffError('shape_mismatch', f'avg_pool2d: {x.shape} is not divisible by kernel {kernel}')
    batch, channels, height, width = x.shape
    out_data: np.ndarray = x.data.reshape(batch, channels, height // kernel, kernel, width // kernel, kernel).mean(
        axis=(3, 5)
    )

    def rule(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        spread: np.ndarray = np.repeat(np.repeat(grad, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        return (spread,)

    return _emit('avg_pool2d', (x,), out_data, rule)


## -- backward ------------------------------------------------------


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """
    Propagates d(loss)/d(node) through the tape in reverse and returns gradients for `leaves`.

    Leaves that did not participate get exact zeros.
    """
    if loss.data.size != 1:
        raise AutodiffError('non_scalar_loss', f'backward needs a scalar loss, got shape {loss.shape}')
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for record in reversed(tape.records):
        upstream: np.ndarray | None = grads.pop(record.output_id, None)
        if upstream is None:
            continue
        input_grads: tuple[np.ndarray | None, ...] = record.backward(upstream)
        for uid, input_grad in zip(record.input_ids, input_grads, strict=True):
            if input_grad is None:
                continue
            grads[uid] = grads[uid] + input_grad if uid in grads else input_grad
    return [np.array(grads[leaf.uid], dtype=np.float64) if leaf.uid in grads else np.zeros(leaf.shape) for leaf in leaves]


def numerical_gradient(fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function of an array.
    """
    base: np.ndarray = np.array(point, dtype=np.float64, copy=True)
    gradient: np.ndarray = np.zeros_like(base)
    flat: np.ndarray = base.reshape(-1)
    grad_flat: np.ndarray = gradient.reshape(-1)
    for i in range(flat.size):
        original: float = float(flat[i])
        flat[i] = original + h
        upper: float = fn(base)
        flat[i] = original - h
        lower: float = fn(base)
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2.0 * h)
    return gradient


## -- adam ----------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """
    Per-parameter first/second moments plus the step counter.
    """

    config: AdamConfig
    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, np.ndarray]:
        """
        Flattens the state into named arrays for the `SRPK1` writer.
        """
        arrays: dict[str, np.ndarray] = {
            'adam/step': np.array(float(self.step)),
            'adam/lr': np.array(self.config.lr),
            'adam/b1': np.array(self.config.b1),
            'adam/b2': np.array(self.config.b2),
            'adam/eps': np.array(self.config.eps),
        }
        for name in sorted(self.first_moments):
            arrays[f'adam/m/{name}'] = self.first_moments[name]
            arrays[f'adam/v/{name}'] = self.second_moments[name]
        return arrays

    @classmethod
    def from_tensors(cls, arrays: dict[str, np.ndarray]) -> 'AdamState':
        config = AdamConfig(
            lr=float(arrays['adam/lr']),
            b1=float(arrays['adam/b1']),
            b2=float(arrays['adam/b2']),
            eps=float(arrays['adam/eps']),
        )
        first: dict[str, np.ndarray] = {k[len('adam/m/') :]: v for k, v in arrays.items() if k.startswith('adam/m/')}
        second: dict[str, np.ndarray] = {k[len('adam/v/') :]: v for k, v in arrays.items() if k.startswith('adam/v/')}
        return cls(config=config, step=int(arrays['adam/step']), first_moments=first, second_moments=second)


def init_adam_state(params: dict[str, Tensor], config: AdamConfig) -> AdamState:
    """
    Zero moments for each named parameter, at step 0.
    """
    return AdamState(
        config=config,
        step=0,
        first_moments={name: np.zeros(p.shape) for name, p in params.items()},
        second_moments={name: np.zeros(p.shape) for name, p in params.items()},
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """
    Applies one bias-corrected Adam update and returns fresh parameter leaves and state.
    """
    cfg: AdamConfig = state.config
    step: int = state.step + 1
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}
    updated: dict[str, Tensor] = {}
    for name, param in params.items():
        grad: np.ndarray = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape or state.first_moments[name].shape != param.shape:
            raise AutodiffError('shape_mismatch', f'adam_step: gradient/moment shape mismatch for ``{name}``')
        m: np.ndarray = cfg.b1 * state.first_moments[name] + (1.0 - cfg.b1) * grad
        v: np.ndarray = cfg.b2 * state.second_moments[name] + (1.0 - cfg.b2) * grad * grad
        m_hat: np.ndarray = m / (1.0 - cfg.b1**step)
        v_hat: np.ndarray = v / (1.0 - cfg.b2**step)
        updated[name] = parameter(param.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
        first[name] = m
        second[name] = v
    return updated, AdamState(config=cfg, step=step, first_moments=first, second_moments=second)


## -- SRPK1 tensor files --------------------------------------------


def encode_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    """
    Serializes named arrays: magic, then per record {name_len u32}{name}{rank u32}{dims u32 x rank}{f64 data}.
    """
    chunks: list[bytes] = [WEIGHTS_MAGIC]
    for name, array in arrays.items():
        data: np.ndarray = np.ascontiguousarray(array, dtype='<f8')
        encoded_name: bytes = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack('<I', data.ndim))
        chunks.append(struct.pack(f'<{data.ndim}I', *data.shape))
        chunks.append(data.tobytes())
    return b''.join(chunks)


def decode_tensors(payload: bytes) -> dict[str, np.ndarray]:
    """
    Parses an `SRPK1` payload; a wrong magic or a truncated record is a `bad_weights_file` error.
    """
    if not payload.startswith(WEIGHTS_MAGIC):
        raise AutodiffError('bad_weights_file', 'missing SRPK1 magic')
    arrays: dict[str, np.ndarray] = {}
    offset: int = len(WEIGHTS_MAGIC)
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            name: str = payload[offset : offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            dims: tuple[int, ...] = struct.unpack_from(f'<{rank}I', payload, offset)
            offset += 4 * rank
            count: int = int(np.prod(dims)) if rank else 1
            arrays[name] = np.frombuffer(payload, dtype='<f8', count=count, offset=offset).reshape(dims).copy()
            offset += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise AutodiffError('bad_weights_file', f'truncated or corrupt SRPK1 payload: {exc}') from exc
    return arrays


def save_tensors(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """
    Writes `arrays` as one `SRPK1` file.
    """
    Path(path).write_bytes(encode_tensors(arrays))


def load_tensors(path: Path) -> dict[str, np.ndarray]:
    """
    Reads a file written by `save_tensors()`.
    """
    return decode_tensors(Path(path).read_bytes())


def encode_text(text: str) -> np.ndarray:
    """
    Stores UTF-8 text as a float64 byte-code vector so headers travel inside `SRPK1` files.
    """
    return np.frombuffer(text.encode('utf-8'), dtype=np.uint8).astype(np.float64)


def decode_text(array: np.ndarray) -> str:
    """
    Inverse of `encode_text()`.
    """
    return bytes(np.asarray(array, dtype=np.uint8).tolist()).decode('utf-8')
