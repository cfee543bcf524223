"""Dense float64 tensors with reverse-mode gradient recording

Operations executed while a :class:`Tape` is active are recorded on that tape whenever at
least one input requires a gradient. Outside of a tape every operation is a plain numpy
computation, which is how inference runs.

::

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(square(x))
    ...     grads = tape.backward(loss)
    ...
    >>> grads[x]
    array([0.66666667, 1.33333333, 2.        ])

Every operation checks its output for NaN/Inf and raises :class:`NonFiniteValue` instead of
letting a bad value travel further through the graph.

The module also owns the checkpoint container: a JSON manifest of ``(name, shape, offset)``
entries plus one flat little-endian float64 payload file.
"""
import contextvars
import json
import logging
import math
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy import special

from biascite.errors import NonFiniteValue
from biascite.errors import NonScalarLoss
from biascite.errors import ShapeMismatch


__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "concat",
    "reshape",
    "take",
    "embedding_select",
    "scatter_add",
    "relu",
    "gelu",
    "softplus",
    "softmax",
    "segment_softmax",
    "layer_norm",
    "dropout",
    "sum",
    "mean",
    "exp",
    "log1p",
    "square",
    "hinge",
    "clamp",
    "grad_reverse",
    "block_diag",
    "finite_difference_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MANIFEST",
    "CHECKPOINT_PAYLOAD",
]


logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PAYLOAD = "payload.bin"
_CHECKPOINT_FORMAT = "biascite-checkpoint/1"

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "biascite_active_tape", default=None
)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]
VectorJacobian = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable dense array of 64-bit reals

    :param values: Anything :func:`numpy.asarray` accepts; copied and frozen
    :param requires_grad: Whether gradients should be recorded for this tensor
    :param name: Optional label, used for parameters and error messages
    :raises NonFiniteValue: If any entry is NaN or infinite
    """

    __slots__ = ("values", "requires_grad", "name")

    def __init__(self, values: Any, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteValue(f"tensor '{name or '<anonymous>'}' holds non-finite entries")
        array.setflags(write=False)
        self.values = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        tensor.values = array
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        """Return the single value of a one-element tensor"""
        if self.values.size != 1:
            raise ShapeMismatch(f"item() needs exactly one element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values"""
        return np.array(self.values)

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing the values of this one"""
        return Tensor._wrap(self.values, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


class OpRecord(NamedTuple):
    """One recorded operation on a :class:`Tape`"""

    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VectorJacobian


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`, keyed by tensor identity"""

    def __init__(self, grads: Dict[int, np.ndarray], tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def get(self, tensor: Tensor) -> Optional[np.ndarray]:
        """Return the gradient of ``tensor`` or ``None`` when it received none"""
        return self._grads.get(id(tensor))

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Ordered record of differentiable operations

    The tape is activated with a ``with`` block and is bound to the current execution context,
    so independent tapes can be used from different threads. A tape must not be shared
    between workers.
    """

    def __init__(self):
        self.records: List[OpRecord] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> Gradients:
        """Propagate gradients from a scalar loss back through the recorded operations

        Records are visited once each in reverse order; gradients reaching a tensor along
        several paths are summed.

        :param loss: Scalar tensor produced by operations recorded on this tape
        :returns: Gradient map holding an entry for every tensor requiring a gradient that
                  the loss depends on
        :raises NonScalarLoss: If ``loss`` holds more than one element
        """
        if loss.size != 1:
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise ValueError("backward called on an empty tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        tensors: Dict[int, Tensor] = {id(loss): loss}
        for record in reversed(self.records):
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            for tensor, grad in zip(record.inputs, record.vjp(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.asarray(grad, dtype=np.float64)
                    tensors[key] = tensor
        return Gradients(grads, tensors)


def as_tensor(value: ArrayLike) -> Tensor:
    """Return ``value`` unchanged if it is a tensor, else wrap it as a constant"""
    return value if isinstance(value, Tensor) else Tensor(value)


def _apply(kind: str, inputs: Tuple[Tensor, ...], values: np.ndarray, vjp: VectorJacobian) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"operation '{kind}' produced non-finite values")
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(item.requires_grad for item in inputs)
    out = Tensor._wrap(values, requires_grad=track)  # pylint: disable=protected-access
    if track:
        tape.records.append(OpRecord(kind, inputs, out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, left: Tensor, right: Tensor) -> None:
    try:
        np.broadcast_shapes(left.shape, right.shape)
    except ValueError as err:
        raise ShapeMismatch(f"{kind}: cannot broadcast {left.shape} with {right.shape}") from err


def add(left: ArrayLike, right: ArrayLike) -> Tensor:
    """Elementwise sum with numpy broadcasting"""
    left, right = as_tensor(left), as_tensor(right)
    _broadcast_shape("add", left, right)
    return _apply(
        "add",
        (left, right),
        left.values + right.values,
        lambda g: (_unbroadcast(g, left.shape), _unbroadcast(g, right.shape)),
    )


def sub(left: ArrayLike, right: ArrayLike) -> Tensor:
    """Elementwise difference with numpy broadcasting"""
    left, right = as_tensor(left), as_tensor(right)
    _broadcast_shape("sub", left, right)
    return _apply(
        "sub",
        (left, right),
        left.values - right.values,
        lambda g: (_unbroadcast(g, left.shape), _unbroadcast(-g, right.shape)),
    )


def mul(left: ArrayLike, right: ArrayLike) -> Tensor:
    """Elementwise product with numpy broadcasting"""
    left, right = as_tensor(left), as_tensor(right)
    _broadcast_shape("mul", left, right)
    return _apply(
        "mul",
        (left, right),
        left.values * right.values,
        lambda g: (
            _unbroadcast(g * right.values, left.shape),
            _unbroadcast(g * left.values, right.shape),
        ),
    )


def div(left: ArrayLike, right: ArrayLike) -> Tensor:
    """Elementwise quotient with numpy broadcasting"""
    left, right = as_tensor(left), as_tensor(right)
    _broadcast_shape("div", left, right)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = left.values / right.values
    return _apply(
        "div",
        (left, right),
        values,
        lambda g: (
            _unbroadcast(g / right.values, left.shape),
            _unbroadcast(-g * left.values / np.square(right.values), right.shape),
        ),
    )


def neg(value: ArrayLike) -> Tensor:
    """Elementwise negation"""
    value = as_tensor(value)
    return _apply("neg", (value,), -value.values, lambda g: (-g,))


def matmul(left: ArrayLike, right: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors"""
    left, right = as_tensor(left), as_tensor(right)
    if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {left.shape} and {right.shape}")
    return _apply(
        "matmul",
        (left, right),
        left.values @ right.values,
        lambda g: (g @ right.values.T, left.values.T @ g),
    )


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis"""
    parts = tuple(as_tensor(item) for item in tensors)
    if not parts:
        raise ShapeMismatch("concat needs at least one tensor")
    try:
        values = np.concatenate([item.values for item in parts], axis=axis)
    except ValueError as err:
        raise ShapeMismatch(f"concat: {err}") from err
    bounds = np.cumsum([item.shape[axis] for item in parts])[:-1]
    return _apply("concat", parts, values, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(value: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Return the values laid out in a new shape"""
    value = as_tensor(value)
    try:
        values = value.values.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeMismatch(f"reshape: cannot view {value.shape} as {tuple(shape)}") from err
    return _apply("reshape", (value,), values, lambda g: (g.reshape(value.shape),))


def take(value: ArrayLike, index: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradient"""
    value = as_tensor(value)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -value.shape[axis] or index.max() >= value.shape[axis]):
        raise ShapeMismatch(f"take: index out of range for axis of size {value.shape[axis]}")

    def vjp(grad: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(value.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(grad, axis, 0))
        return (full,)

    return _apply("take", (value,), np.take(value.values, index, axis=axis), vjp)


embedding_select = take


def scatter_add(value: ArrayLike, index: Sequence[int], size: int) -> Tensor:
    """Sum rows of ``value`` into ``size`` output rows selected by ``index``"""
    value = as_tensor(value)
    index = np.asarray(index, dtype=np.int64)
    if value.ndim == 0 or index.shape != (value.shape[0],):
        raise ShapeMismatch(f"scatter_add: index shape {index.shape} for value {value.shape}")
    out = np.zeros((size,) + value.shape[1:])
    np.add.at(out, index, value.values)
    return _apply("scatter_add", (value,), out, lambda g: (g[index],))


def relu(value: ArrayLike) -> Tensor:
    """Rectified linear unit"""
    value = as_tensor(value)
    mask = value.values > 0
    return _apply("relu", (value,), value.values * mask, lambda g: (g * mask,))


def gelu(value: ArrayLike) -> Tensor:
    """Gaussian error linear unit, exact (erf) form"""
    value = as_tensor(value)
    x = value.values
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)
    return _apply("gelu", (value,), x * cdf, lambda g: (g * (cdf + x * pdf),))


def softplus(value: ArrayLike) -> Tensor:
    """Smooth non-negative ramp ``log(1 + exp(x))``"""
    value = as_tensor(value)
    return _apply(
        "softplus",
        (value,),
        np.logaddexp(0.0, value.values),
        lambda g: (g * special.expit(value.values),),
    )


def softmax(value: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``"""
    value = as_tensor(value)
    shifted = value.values - value.values.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    probs = weights / weights.sum(axis=axis, keepdims=True)
    return _apply(
        "softmax",
        (value,),
        probs,
        lambda g: (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),),
    )


def segment_softmax(value: ArrayLike, segments: Sequence[int], count: int) -> Tensor:
    """Softmax over the rows that share a segment id, separately for every column

    Used for attention over the in-neighbours of each target node: row ``i`` is an edge and
    ``segments[i]`` its target.
    """
    value = as_tensor(value)
    segments = np.asarray(segments, dtype=np.int64)
    if value.ndim == 0 or segments.shape != (value.shape[0],):
        raise ShapeMismatch(f"segment_softmax: segments {segments.shape} for {value.shape}")
    peak = np.full((count,) + value.shape[1:], -np.inf)
    np.maximum.at(peak, segments, value.values)
    weights = np.exp(value.values - peak[segments])
    totals = np.zeros((count,) + value.shape[1:])
    np.add.at(totals, segments, weights)
    probs = weights / totals[segments]

    def vjp(grad: np.ndarray) -> Tuple[np.ndarray]:
        inner = np.zeros((count,) + value.shape[1:])
        np.add.at(inner, segments, grad * probs)
        return (probs * (grad - inner[segments]),)

    return _apply("segment_softmax", (value,), probs, vjp)


def layer_norm(value: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)"""
    value = as_tensor(value)
    centered = value.values - value.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.square(centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def vjp(grad: np.ndarray) -> Tuple[np.ndarray]:
        return (
            inv_std
            * (
                grad
                - grad.mean(axis=-1, keepdims=True)
                - normed * (grad * normed).mean(axis=-1, keepdims=True)
            ),
        )

    return _apply("layer_norm", (value,), normed, vjp)


def dropout(
    value: ArrayLike, p: float, rng: Optional[np.random.Generator], train: bool
) -> Tensor:
    """Inverted dropout: zero a random mask and scale survivors by ``1/(1-p)``

    In evaluation mode (``train=False``) or with ``p == 0`` the input is returned as is.
    """
    value = as_tensor(value)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return value
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    scale = (rng.random(value.shape) >= p) / (1.0 - p)
    return _apply("dropout", (value,), value.values * scale, lambda g: (g * scale,))


def _expand(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def sum(  # pylint: disable=redefined-builtin
    value: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    """Sum over ``axis`` (all axes when ``None``)"""
    value = as_tensor(value)
    return _apply(
        "sum",
        (value,),
        value.values.sum(axis=axis, keepdims=keepdims),
        lambda g: (np.array(_expand(g, value.shape, axis, keepdims)),),
    )


def mean(
    value: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    """Arithmetic mean over ``axis`` (all axes when ``None``)"""
    value = as_tensor(value)
    if value.size == 0:
        raise ShapeMismatch("mean of an empty tensor")
    out = value.values.mean(axis=axis, keepdims=keepdims)
    count = value.values.size / np.size(out)
    return _apply(
        "mean",
        (value,),
        out,
        lambda g: (np.array(_expand(g, value.shape, axis, keepdims)) / count,),
    )


def exp(value: ArrayLike) -> Tensor:
    """Elementwise exponential"""
    value = as_tensor(value)
    with np.errstate(over="ignore"):
        values = np.exp(value.values)
    return _apply("exp", (value,), values, lambda g: (g * values,))


def log1p(value: ArrayLike) -> Tensor:
    """Elementwise ``log(1 + x)``"""
    value = as_tensor(value)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log1p(value.values)
    return _apply("log1p", (value,), values, lambda g: (g / (1.0 + value.values),))


def square(value: ArrayLike) -> Tensor:
    """Elementwise square"""
    value = as_tensor(value)
    return _apply("square", (value,), np.square(value.values), lambda g: (2.0 * g * value.values,))


def hinge(value: ArrayLike) -> Tensor:
    """Elementwise ``max(0, x)`` (the hinge used by the monotonicity penalty)"""
    value = as_tensor(value)
    mask = value.values > 0
    return _apply("hinge", (value,), np.where(mask, value.values, 0.0), lambda g: (g * mask,))


def clamp(value: ArrayLike, low: float, high: float) -> Tensor:
    """Limit entries to ``[low, high]``; gradient passes only strictly inside"""
    value = as_tensor(value)
    if low > high:
        raise ValueError(f"clamp bounds reversed: {low} > {high}")
    inside = (value.values > low) & (value.values < high)
    return _apply(
        "clamp", (value,), np.clip(value.values, low, high), lambda g: (g * inside,)
    )


def grad_reverse(value: ArrayLike, scale: float = 1.0) -> Tensor:
    """Identity on the forward pass, multiply the gradient by ``-scale`` on the way back"""
    value = as_tensor(value)
    return _apply("grad_reverse", (value,), value.values, lambda g: (-scale * g,))


def block_diag(blocks: ArrayLike) -> Tensor:
    """Assemble an ``(H, D, D)`` stack into an ``(H*D, H*D)`` block-diagonal matrix"""
    blocks = as_tensor(blocks)
    if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
        raise ShapeMismatch(f"block_diag needs an (H, D, D) stack, got {blocks.shape}")
    count, width, _ = blocks.shape
    out = np.zeros((count * width, count * width))
    for head in range(count):
        span = slice(head * width, (head + 1) * width)
        out[span, span] = blocks.values[head]

    def vjp(grad: np.ndarray) -> Tuple[np.ndarray]:
        return (
            np.stack(
                [
                    grad[head * width : (head + 1) * width, head * width : (head + 1) * width]
                    for head in range(count)
                ]
            ),
        )

    return _apply("block_diag", (blocks,), out, vjp)


def finite_difference_check(
    func: Callable[[Tensor], Tensor],
    x: ArrayLike,
    h: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
    floor: float = 1e-8,
) -> float:
    """Compare the recorded gradient of a scalar function with central differences

    :param func: Function of one tensor returning a scalar tensor; it must be deterministic
    :param x: Point at which the gradient is checked
    :param h: Central difference step
    :param indices: Optional flat indices to check instead of every coordinate
    :param floor: Lower bound on the relative error denominator
    :returns: ``max |a - b| / max(|a|, |b|, floor)`` over the checked coordinates
    """
    point = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape() as tape:
        leaf = Tensor(point, requires_grad=True)
        out = func(leaf)
        analytic = tape.backward(out).get(leaf) if tape.records else None
    if analytic is None:
        analytic = np.zeros_like(point)

    worst = 0.0
    checked = range(point.size) if indices is None else indices
    for flat in checked:
        plus, minus = point.copy(), point.copy()
        plus.flat[flat] += h
        minus.flat[flat] -= h
        numeric = (func(Tensor(plus)).item() - func(Tensor(minus)).item()) / (2.0 * h)
        exact = float(analytic.flat[flat])
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst


def save_checkpoint(arrays: Mapping[str, np.ndarray], directory: Path) -> Path:
    """Write named arrays into the checkpoint container under ``directory``

    Entries are stored in name order so that identical inputs produce byte-identical files.

    :param arrays: Mapping of parameter names (``encoder/...``, ``stage_a/...``) to arrays
    :param directory: Output directory, created when missing
    :returns: The directory written to
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with (directory / CHECKPOINT_PAYLOAD).open("wb") as payload:
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f8")
            payload.write(data.tobytes(order="C"))
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    manifest = {"format": _CHECKPOINT_FORMAT, "dtype": "<f8", "entries": entries}
    (directory / CHECKPOINT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.debug("Wrote %d arrays (%d bytes) to %s", len(entries), offset, directory)
    return directory


def load_checkpoint(directory: Path) -> Dict[str, np.ndarray]:
    """Read every array stored in the checkpoint container under ``directory``

    :raises ValueError: If the manifest is not a biascite checkpoint or disagrees with the payload
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / CHECKPOINT_MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"Failed to decode checkpoint manifest in '{directory}'") from err
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"'{directory}' is not a {_CHECKPOINT_FORMAT} container")
    payload = (directory / CHECKPOINT_PAYLOAD).read_bytes()
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise ValueError(f"checkpoint payload truncated at entry '{entry['name']}'")
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
            .reshape(shape)
            .astype(np.float64)
        )
    return arrays
