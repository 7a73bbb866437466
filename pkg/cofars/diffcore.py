"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a two dimensional Tensor. Ops are Function subclasses: apply()
runs forward on the raw arrays and records the Function on the output, and
Tensor.backward() walks the recorded graph in reverse topological order.
Broadcasting is limited to row vectors, column vectors and 1x1 scalars.
"""

__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import itertools
import math
import struct

import numpy as np
from scipy.special import expit, softmax as _softmax

from cofars.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


def _as_array(value):
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim > 2:
        raise ShapeError("tensors are two dimensional, got shape %s" % (array.shape,))
    return array


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _ctx=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._ctx = _ctx
        self.node_id = next(_node_ids)

    def __repr__(self):
        return "<Tensor %s>" % (self.data.shape,)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a 1x1 tensor, got %s" % (self.shape,))
        return float(self.data[0, 0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def gradient(self):
        """Gradient buffer, zeros when backward never reached this tensor"""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def __neg__(self):
        return Neg.apply(self)

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, key):
        return Index.apply(self, key=_normalize_key(key))

    @property
    def T(self):
        return Transpose.apply(self)

    def sum(self, axis=None):
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None):
        return Mean.apply(self, axis=axis)

    def reshape(self, *shape):
        return Reshape.apply(self, shape=shape)

    def backward(self):
        if self.shape != (1, 1):
            raise ShapeError("backward needs a 1x1 loss, got %s" % (self.shape,))
        self.grad = np.ones((1, 1))
        for node in reversed(_topological_order(self)):
            ctx = node._ctx
            if ctx is None or node.grad is None:
                continue
            for parent, grad in zip(ctx.parents, ctx.backward(node.grad)):
                if grad is None or not parent.requires_grad:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad


class Parameter(Tensor):
    """A trainable leaf with Adam moments"""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name="param"):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return "<Parameter %s %s>" % (self.name, self.data.shape)


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
    return order


def _normalize_key(key):
    if not isinstance(key, tuple):
        key = (key, slice(None))
    if len(key) != 2:
        raise ShapeError("tensors take (rows, cols) keys, got %r" % (key,))
    normal = []
    for part in key:
        if isinstance(part, (int, np.integer)):
            part = slice(part, part + 1) if part != -1 else slice(-1, None)
        elif not isinstance(part, slice):
            part = np.asarray(part, dtype=int)
        normal.append(part)
    return tuple(normal)


def _broadcast_shape(name, x, y):
    try:
        return np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError("%s: incompatible shapes %s and %s" % (name, x.shape, y.shape))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


class Function:
    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *parents, **kwargs):
        parents = tuple(as_tensor(p) for p in parents)
        ctx = cls(*parents)
        data = ctx.forward(*[p.data for p in parents], **kwargs)
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=requires_grad, _ctx=ctx if requires_grad else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Add(Function):
    def forward(self, x, y):
        _broadcast_shape("add", x, y)
        self.shapes = x.shape, y.shape
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        _broadcast_shape("sub", x, y)
        self.shapes = x.shape, y.shape
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        _broadcast_shape("mul", x, y)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        _broadcast_shape("div", x, y)
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = _unbroadcast(grad / self.y, self.x.shape)
        gy = _unbroadcast(-grad * self.x / (self.y * self.y), self.y.shape)
        return gx, gy


class MatMul(Function):
    def forward(self, x, y):
        if x.shape[1] != y.shape[0]:
            raise ShapeError("matmul: incompatible shapes %s and %s" % (x.shape, y.shape))
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class Transpose(Function):
    def forward(self, x):
        return x.T.copy()

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError("reshape: cannot view %s as %s" % (x.shape, shape))

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Sum(Function):
    def forward(self, x, axis=None):
        self.shape = x.shape
        if axis is None:
            return np.sum(x).reshape(1, 1)
        return np.sum(x, axis=axis, keepdims=True)

    def backward(self, grad):
        return (np.array(np.broadcast_to(grad, self.shape)),)


class Mean(Function):
    def forward(self, x, axis=None):
        self.shape = x.shape
        self.count = x.size if axis is None else x.shape[axis]
        if axis is None:
            return np.mean(x).reshape(1, 1)
        return np.mean(x, axis=axis, keepdims=True)

    def backward(self, grad):
        return (np.array(np.broadcast_to(grad / self.count, self.shape)),)


class Index(Function):
    """Row/column selection; the gradient scatter-adds back into place"""

    def forward(self, x, key):
        self.shape, self.key = x.shape, key
        out = x[key]
        if out.ndim != 2:
            raise ShapeError("slice: key %r does not keep two dimensions" % (key,))
        if isinstance(key[0], np.ndarray) and isinstance(key[1], np.ndarray):
            raise ShapeError("slice: index rows and columns separately")
        return out

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.key, grad)
        return (full,)


class Concat(Function):
    def forward(self, *xs, axis=0):
        other = 1 - axis
        if len({x.shape[other] for x in xs}) != 1:
            raise ShapeError("concat: incompatible shapes %s" % [x.shape for x in xs])
        self.axis = axis
        self.offsets = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.offsets, axis=self.axis))


class Sigmoid(Function):
    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyRelu(Function):
    def forward(self, x, slope=0.2):
        self.scale = np.where(x > 0, 1.0, slope)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Softmax(Function):
    def forward(self, x):
        self.out = _softmax(x, axis=1)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=1, keepdims=True)
        return (self.out * (grad - inner),)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return (grad * expit(self.x),)


class Clamp(Function):
    def forward(self, x, lo=-np.inf, hi=np.inf):
        self.inside = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.inside,)


class StraightThrough(Function):
    """Forward emits fixed hard values, backward passes the soft gradient"""

    def forward(self, soft, hard):
        hard = _as_array(hard)
        if hard.shape != soft.shape:
            raise ShapeError("straight_through: shapes %s and %s" % (soft.shape, hard.shape))
        return hard.copy()

    def backward(self, grad):
        return (grad,)


def add(x, y):
    return Add.apply(x, y)


def sub(x, y):
    return Sub.apply(x, y)


def mul(x, y):
    return Mul.apply(x, y)


def div(x, y):
    return Div.apply(x, y)


def matmul(x, y):
    return MatMul.apply(x, y)


def transpose(x):
    return Transpose.apply(x)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def take_rows(x, index):
    """Embedding lookup: rows of x in the given order"""
    return Index.apply(x, key=(np.asarray(index, dtype=int).reshape(-1), slice(None)))


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def relu(x):
    return Relu.apply(x)


def leaky_relu(x, slope=0.2):
    return LeakyRelu.apply(x, slope=slope)


def softmax(x):
    """Row-wise softmax"""
    return Softmax.apply(x)


def log(x):
    return Log.apply(x)


def exp(x):
    return Exp.apply(x)


def softplus(x):
    return Softplus.apply(x)


def clamp(x, lo=-np.inf, hi=np.inf):
    return Clamp.apply(x, lo=lo, hi=hi)


def dot(x, y):
    """Row-wise inner products as a column"""
    return (as_tensor(x) * y).sum(axis=1)


def straight_through(soft, hard):
    return StraightThrough.apply(soft, hard=hard)


def smooth_clamp(x, lo=1e-4, hi=1 - 1e-4, sharpness=50.0):
    """Smooth ramp from the reals into (lo, hi).

    Approximates clip(x, 0, 1) with a difference of softplus terms, so it is
    symmetric about 0.5 and a threshold at 0.5 is preserved exactly.
    """
    ramp = (softplus(as_tensor(x) * sharpness) - softplus((as_tensor(x) - 1.0) * sharpness)) * (
        1.0 / sharpness
    )
    return ramp * (hi - lo) + lo


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, None: None}


# Gumbel gates


def sample_gumbel(rng, shape, eps=1e-20):
    u = rng.random(shape)
    return -np.log(-np.log(u + eps) + eps)


def gumbel_soft(beta, tau, rng=None):
    """Class-one probability of a two-class Gumbel-softmax over (beta, 1 - beta)"""
    if tau <= 0:
        raise ValueError("gumbel gate temperature must be positive, got %s" % tau)
    beta = as_tensor(beta)
    logits = log(beta) - log(1.0 - beta)
    if rng is not None:
        noise = sample_gumbel(rng, beta.shape) - sample_gumbel(rng, beta.shape)
        logits = logits + Tensor(noise)
    return sigmoid(logits * (1.0 / tau))


def gumbel_gate(beta, tau, hard=True, rng=None):
    """Gate in {0, 1} (straight-through) or its soft relaxation.

    Without an rng the gate is the deterministic threshold beta > 0.5.
    """
    beta = as_tensor(beta)
    if np.any(beta.data <= 0) or np.any(beta.data >= 1):
        raise ValueError("gumbel gate probabilities must lie in (0, 1)")
    soft = gumbel_soft(beta, tau, rng)
    if rng is None:
        return straight_through(soft, (beta.data > 0.5).astype(float))
    if hard:
        return straight_through(soft, (soft.data > 0.5).astype(float))
    return soft


# Layers


class Linear:
    def __init__(self, name, fan_in, fan_out, rng):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), "%s.weight" % name)
        self.bias = Parameter(rng.uniform(-bound, bound, (1, fan_out)), "%s.bias" % name)

    def __call__(self, x):
        return x @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    def __init__(self, name, sizes, rng, activation="relu", output=None):
        self.layers = [
            Linear("%s.%d" % (name, i), fan_in, fan_out, rng)
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = ACTIVATIONS[activation]
        self.output = ACTIVATIONS[output]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return self.output(x) if self.output else x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class GRUCell:
    """z = s(x Wiz + h Whz), r = s(x Wir + h Whr), g = tanh(x Wig + r * h Whg),
    h' = (1 - z) * g + z * h
    """

    def __init__(self, name, input_size, hidden_size, rng):
        self.hidden_size = hidden_size
        gates = ("update", "reset", "candidate")
        self.input = {g: Linear("%s.input_%s" % (name, g), input_size, hidden_size, rng) for g in gates}
        self.hidden = {g: Linear("%s.hidden_%s" % (name, g), hidden_size, hidden_size, rng) for g in gates}

    def __call__(self, x, h):
        z = sigmoid(self.input["update"](x) + self.hidden["update"](h))
        r = sigmoid(self.input["reset"](x) + self.hidden["reset"](h))
        g = tanh(self.input["candidate"](x) + r * self.hidden["candidate"](h))
        return (1.0 - z) * g + z * h

    def parameters(self):
        return [
            p
            for group in (self.input, self.hidden)
            for layer in group.values()
            for p in layer.parameters()
        ]


# Optimizer


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place of each parameter's data"""
    for param, grad in zip(params, grads):
        grad = np.zeros_like(param.data) if grad is None else _as_array(grad)
        if grad.shape != param.data.shape:
            raise ShapeError(
                "adam_step: gradient %s for %s %s" % (grad.shape, param.name, param.data.shape)
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError("adam_step: non-finite gradient for %s" % param.name)
        param.step += 1
        param.m = beta1 * param.m + (1 - beta1) * grad
        param.v = beta2 * param.v + (1 - beta2) * grad * grad
        m_hat = param.m / (1 - beta1 ** param.step)
        v_hat = param.v / (1 - beta2 ** param.step)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self):
        for param in self.params:
            param.grad = None

    def step(self):
        adam_step(
            self.params, [p.grad for p in self.params], self.lr, self.beta1, self.beta2, self.eps
        )


# Checkpoints


def save_checkpoint(path, params):
    """Write named arrays sorted by name behind a version header"""
    named = sorted(
        ((p.name, p.data) if isinstance(p, Parameter) else p for p in params),
        key=lambda item: item[0],
    )
    with open(path, "wb") as fd:
        fd.write(CHECKPOINT_MAGIC)
        fd.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, data in named:
            encoded = name.encode("utf-8")
            fd.write(struct.pack("<H", len(encoded)))
            fd.write(encoded)
            np.lib.format.write_array(fd, np.ascontiguousarray(data), version=(1, 0), allow_pickle=False)


def load_checkpoint(path):
    with open(path, "rb") as fd:
        if fd.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("%s is not a checkpoint" % path)
        version, count = struct.unpack("<II", fd.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError("%s has unsupported version %d" % (path, version))
        arrays = {}
        for _ in range(count):
            (size,) = struct.unpack("<H", fd.read(2))
            name = fd.read(size).decode("utf-8")
            arrays[name] = np.lib.format.read_array(fd, allow_pickle=False)
    return arrays


# Finite differences


def check_gradients(loss_fn, params, h=1e-5):
    """Relative error between backward and central finite differences.

    loss_fn must rebuild the graph from the parameters on every call. The
    error is global: norm of the difference over the sum of both norms.
    """
    for param in params:
        param.grad = None
    loss_fn().backward()
    analytic = [param.gradient().copy() for param in params]

    numeric = []
    for param in params:
        estimate = np.zeros_like(param.data)
        for index in np.ndindex(param.data.shape):
            original = param.data[index]
            param.data[index] = original + h
            plus = loss_fn().item()
            param.data[index] = original - h
            minus = loss_fn().item()
            param.data[index] = original
            estimate[index] = (plus - minus) / (2 * h)
        numeric.append(estimate)

    difference = math.sqrt(sum(np.sum((a - n) ** 2) for a, n in zip(analytic, numeric)))
    scale = math.sqrt(sum(np.sum(a * a) for a in analytic)) + math.sqrt(
        sum(np.sum(n * n) for n in numeric)
    )
    error = difference / max(scale, 1e-12)
    logger.debug("gradient check over %d parameters: %.3g" % (len(params), error))
    return error
