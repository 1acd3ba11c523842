"""
Dense tensors with a reverse-mode gradient tape.

Ops are `Function` subclasses registered by name. Calling `Op.apply(...)`
evaluates the forward pass on numpy arrays and, when any input requires a
gradient and a `Tape` is active, appends a record to that tape. `backward`
walks the tape in reverse and returns the gradient of every leaf.

Shapes are explicit: apart from `add_bias` (and the bias term of `conv2d`)
no op broadcasts.
"""
import numpy as np
from scipy.special import expit

from src.utils.errors import GradientError, ShapeError

OPS = {}


def register(name):
    """Class decorator adding a Function to the op registry under `name`."""
    def wrap(cls):
        cls.name = name
        OPS[name] = cls
        return cls
    return wrap


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_float_array(data, dtype)
        if 0 in self.data.shape:
            raise ShapeError("tensor", self.data.shape, detail="dimensions must be >= 1")
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Context:
    """Scratch space an op uses to pass saved arrays from forward to backward."""

    def __init__(self):
        self.saved = {}

    def save(self, **kwargs):
        self.saved.update(kwargs)

    def __getattr__(self, key):
        try:
            return self.__dict__["saved"][key]
        except KeyError:
            raise AttributeError(key) from None


class Record:
    __slots__ = ("op", "ctx", "inputs", "output", "kwargs")

    def __init__(self, op, ctx, inputs, output, kwargs):
        self.op = op
        self.ctx = ctx
        self.inputs = inputs
        self.output = output
        self.kwargs = kwargs


class Tape:
    """
    Ordered record of executed ops.

    Use as a context manager; ops executed inside the `with` block are
    recorded when one of their inputs requires a gradient. Leaves (inputs
    that require a gradient but were not produced on this tape) are
    collected in `leaves`; `watch` registers extra leaves so they receive a
    zero gradient when unreachable from the loss.
    """

    _stack = []

    def __init__(self):
        self.records = []
        self.leaves = []
        self._leaf_ids = set()
        self._output_ids = set()

    @classmethod
    def current(cls):
        return cls._stack[-1] if cls._stack else None

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    def watch(self, *tensors):
        for tensor in tensors:
            if id(tensor) not in self._leaf_ids and id(tensor) not in self._output_ids:
                self._leaf_ids.add(id(tensor))
                self.leaves.append(tensor)

    def record(self, op, ctx, inputs, output, kwargs):
        for tensor in inputs:
            if tensor.requires_grad and id(tensor) not in self._output_ids:
                self.watch(tensor)
        self.records.append(Record(op, ctx, inputs, output, kwargs))
        self._output_ids.add(id(output))

    def contains(self, tensor):
        return id(tensor) in self._output_ids or id(tensor) in self._leaf_ids

    def replay(self):
        """Re-run every recorded forward and return the fresh outputs in tape order."""
        fresh = {}
        outputs = []
        for rec in self.records:
            arrays = [fresh.get(id(t), t.data) for t in rec.inputs]
            value = rec.op.forward(Context(), *arrays, **rec.kwargs)
            fresh[id(rec.output)] = value
            outputs.append(value)
        return outputs

    def __len__(self):
        return len(self.records)


class Function:
    name = None

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = [as_tensor(x) for x in inputs]
        ctx = Context()
        out = cls.forward(ctx, *[t.data for t in tensors], **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad)
        tape = Tape.current()
        if requires_grad and tape is not None:
            tape.record(cls, ctx, tensors, result, kwargs)
        return result


def backward(tape, loss):
    """
    Reverse-mode sweep over `tape` starting from scalar `loss`.

    Returns:
        dict: leaf Tensor -> gradient array (zeros for unreachable leaves).
              Each leaf's `.grad` is set as well.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise GradientError("loss was not recorded on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        grad = grads.pop(id(rec.output), None)
        if grad is None:
            continue
        input_grads = rec.op.backward(rec.ctx, grad)
        for tensor, g in zip(rec.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    result = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.reshape(leaf.shape).astype(leaf.dtype, copy=False)
        result[leaf] = leaf.grad
    return result


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


@register("matmul")
class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx.b.T, ctx.a.T @ grad


@register("add")
class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


@register("sub")
class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -grad


@register("mul")
class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("mul", a, b)
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.b, grad * ctx.a


@register("add_bias")
class AddBias(Function):
    @staticmethod
    def forward(ctx, x, bias):
        if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
            raise ShapeError("add_bias", x.shape, bias.shape)
        return x + bias

    @staticmethod
    def backward(ctx, grad):
        return grad, grad.reshape(-1, grad.shape[-1]).sum(axis=0)


@register("scale")
class Scale(Function):
    @staticmethod
    def forward(ctx, x, factor=1.0):
        ctx.save(factor=factor)
        return x * factor

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.factor,)


@register("relu")
class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask=mask)
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    @staticmethod
    def backward(ctx, grad):
        # subgradient at exactly 0 is 0
        return (grad * ctx.mask,)


@register("sigmoid")
class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        y = expit(x)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.y * (1.0 - ctx.y),)


@register("concat")
class Concat(Function):
    """Concatenate along the last axis; leading dimensions must agree."""

    @staticmethod
    def forward(ctx, *xs):
        lead = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != lead:
                raise ShapeError("concat", *(y.shape for y in xs))
        ctx.save(sizes=[x.shape[-1] for x in xs])
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def backward(ctx, grad):
        splits = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=-1))


@register("reshape")
class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=None):
        if int(np.prod(shape)) != x.size:
            raise ShapeError("reshape", x.shape, shape)
        ctx.save(shape=x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


@register("gather_rows")
class GatherRows(Function):
    """out[k] = x[index[k]]; backward scatter-adds into the source rows."""

    @staticmethod
    def forward(ctx, x, index=None):
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= x.shape[0])):
            raise ShapeError("gather_rows", x.shape, index.shape, detail="index out of range")
        ctx.save(index=index, shape=x.shape)
        return x[index]

    @staticmethod
    def backward(ctx, grad):
        out = np.zeros(ctx.shape, dtype=grad.dtype)
        np.add.at(out, ctx.index, grad)
        return (out,)


def _check_segments(op, n_items, segment_ids, num_segments):
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != (n_items,):
        raise ShapeError(op, (n_items,), segment_ids.shape, detail="one segment id per row")
    if segment_ids.min() < 0 or segment_ids.max() >= num_segments:
        raise ShapeError(op, segment_ids.shape, (num_segments,), detail="segment id out of range")
    counts = np.bincount(segment_ids, minlength=num_segments)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ShapeError(op, (num_segments,), detail=f"segment {empty} is empty; every vertex needs a neighbor")
    return segment_ids


@register("segment_softmax")
class SegmentSoftmax(Function):
    """Softmax of `logits` within each segment (one segment per vertex)."""

    @staticmethod
    def forward(ctx, logits, segment_ids=None, num_segments=None):
        flat = logits.reshape(-1)
        ids = _check_segments("segment_softmax", flat.shape[0], segment_ids, num_segments)
        seg_max = np.full(num_segments, -np.inf, dtype=flat.dtype)
        np.maximum.at(seg_max, ids, flat)
        e = np.exp(flat - seg_max[ids])
        seg_sum = np.zeros(num_segments, dtype=flat.dtype)
        np.add.at(seg_sum, ids, e)
        y = e / seg_sum[ids]
        ctx.save(y=y, ids=ids, num_segments=num_segments, shape=logits.shape)
        return y.reshape(logits.shape)

    @staticmethod
    def backward(ctx, grad):
        g = grad.reshape(-1)
        dot = np.zeros(ctx.num_segments, dtype=g.dtype)
        np.add.at(dot, ctx.ids, g * ctx.y)
        return ((ctx.y * (g - dot[ctx.ids])).reshape(ctx.shape),)


@register("segment_weighted_sum")
class SegmentWeightedSum(Function):
    """out[s] = sum over rows e in segment s of weights[e] * values[e]."""

    @staticmethod
    def forward(ctx, values, weights, segment_ids=None, num_segments=None):
        w = weights.reshape(-1)
        if values.ndim != 2 or w.shape[0] != values.shape[0]:
            raise ShapeError("segment_weighted_sum", values.shape, weights.shape)
        ids = _check_segments("segment_weighted_sum", values.shape[0], segment_ids, num_segments)
        out = np.zeros((num_segments, values.shape[1]), dtype=values.dtype)
        np.add.at(out, ids, values * w[:, None])
        ctx.save(values=values, w=w, ids=ids, wshape=weights.shape)
        return out

    @staticmethod
    def backward(ctx, grad):
        g = grad[ctx.ids]
        grad_values = g * ctx.w[:, None]
        grad_weights = np.sum(g * ctx.values, axis=1).reshape(ctx.wshape)
        return grad_values, grad_weights


@register("sum")
class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None):
        ctx.save(shape=x.shape, axis=axis)
        return np.asarray(np.sum(x, axis=axis))

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape).copy(),)


@register("mean")
class Mean(Function):
    @staticmethod
    def forward(ctx, x, axis=None):
        out = np.asarray(np.mean(x, axis=axis))
        ctx.save(shape=x.shape, axis=axis, count=x.size // max(out.size, 1))
        return out

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad / ctx.count, ctx.shape).copy(),)


def _rows(x):
    return x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(-1, 1)


@register("l1_distance")
class L1Distance(Function):
    """Mean over rows of the per-row L1 norm of a - b."""

    @staticmethod
    def forward(ctx, a, b):
        _same_shape("l1_distance", a, b)
        diff = a - b
        n = a.shape[0]
        ctx.save(sign=np.sign(diff), n=n)
        return np.asarray(np.abs(_rows(diff)).sum(axis=1).mean())

    @staticmethod
    def backward(ctx, grad):
        g = ctx.sign * (grad / ctx.n)
        return g, -g


@register("sq_l2_distance")
class SqL2Distance(Function):
    """Mean over rows of the per-row squared Euclidean norm of a - b."""

    @staticmethod
    def forward(ctx, a, b):
        _same_shape("sq_l2_distance", a, b)
        diff = a - b
        n = a.shape[0]
        ctx.save(diff=diff, n=n)
        return np.asarray((_rows(diff) ** 2).sum(axis=1).mean())

    @staticmethod
    def backward(ctx, grad):
        g = ctx.diff * (2.0 * grad / ctx.n)
        return g, -g


@register("row_norm")
class RowNorm(Function):
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 2:
            raise ShapeError("row_norm", x.shape, detail="expects a 2-D array")
        norm = np.sqrt(np.sum(x * x, axis=1))
        ctx.save(x=x, norm=norm)
        return norm

    @staticmethod
    def backward(ctx, grad):
        safe = np.where(ctx.norm > 0, ctx.norm, 1.0)
        return (ctx.x * (grad / safe)[:, None],)


@register("conv2d")
class Conv2d(Function):
    """
    Direct 2-D cross-correlation of one (C, H, W) image with (O, C, k, k)
    weights, plus a per-channel bias.
    """

    @staticmethod
    def forward(ctx, x, weight, bias, stride=1, padding=0):
        if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0] or weight.shape[2] != weight.shape[3]:
            raise ShapeError("conv2d", x.shape, weight.shape)
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="one bias per output channel")
        k = weight.shape[2]
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        if xp.shape[1] < k or xp.shape[2] < k:
            raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        out = np.einsum("chwij,ocij->ohw", windows, weight, optimize=True) + bias[:, None, None]
        ctx.save(windows=windows, weight=weight, xp_shape=xp.shape, x_shape=x.shape,
                 stride=stride, padding=padding)
        return out

    @staticmethod
    def backward(ctx, grad):
        weight = ctx.weight
        k = weight.shape[2]
        s = ctx.stride
        ho, wo = grad.shape[1], grad.shape[2]
        grad_w = np.einsum("ohw,chwij->ocij", grad, ctx.windows, optimize=True)
        grad_b = grad.sum(axis=(1, 2))
        grad_xp = np.zeros(ctx.xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                grad_xp[:, i:i + s * ho:s, j:j + s * wo:s] += np.einsum("ohw,oc->chw", grad, weight[:, :, i, j])
        p = ctx.padding
        h, w = ctx.x_shape[1], ctx.x_shape[2]
        return grad_xp[:, p:p + h, p:p + w], grad_w, grad_b


# Functional spellings used throughout the model code.
def matmul(a, b):
    return MatMul.apply(a, b)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def add_bias(x, bias):
    return AddBias.apply(x, bias)


def scale(x, factor):
    return Scale.apply(x, factor=float(factor))


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def concat(*xs):
    return Concat.apply(*xs)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def gather_rows(x, index):
    return GatherRows.apply(x, index=np.asarray(index, dtype=np.int64))


def segment_softmax(logits, segment_ids, num_segments):
    return SegmentSoftmax.apply(logits, segment_ids=segment_ids, num_segments=int(num_segments))


def segment_weighted_sum(values, weights, segment_ids, num_segments):
    return SegmentWeightedSum.apply(values, weights, segment_ids=segment_ids, num_segments=int(num_segments))


def tsum(x, axis=None):
    return Sum.apply(x, axis=axis)


def mean(x, axis=None):
    return Mean.apply(x, axis=axis)


def l1_distance(a, b):
    return L1Distance.apply(a, b)


def sq_l2_distance(a, b):
    return SqL2Distance.apply(a, b)


def row_norm(x):
    return RowNorm.apply(x)


def conv2d(x, weight, bias, stride=1, padding=0):
    return Conv2d.apply(x, weight, bias, stride=int(stride), padding=int(padding))
