"""Dense tensors with reverse-mode automatic differentiation.

Every tensor remembers the operation that produced it (define-by-run), so a
single backward pass over the recorded graph yields gradients for all inputs
that asked for them.  Arrays are plain numpy; float32 is the training dtype,
float64 the verification dtype.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Finiteness guard: enabled by the test suite, off by default so the hot
# training path does not pay for the checks.
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._consumed = False
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # -- backward ------------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Run one reverse pass, accumulating into ``.grad`` of every
        reachable tensor with ``requires_grad``.  The recorded graph is
        consumed: a second backward through it raises."""
        if self._consumed:
            raise RuntimeError("backward already run through this graph")
        if self._backward_fn is None and not self._parents:
            raise RuntimeError("backward on a tensor with no recorded operations")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed gradient shape {seed.shape} does not match output "
                    f"shape {self.data.shape}")

        order = self._toposort()
        grads = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy() if node._backward_fn is None else g
            else:
                node.grad = node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if _FINITE_CHECKS and not np.all(np.isfinite(pg)):
                    raise FloatingPointError("non-finite gradient")
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
            node._consumed = True
            node._backward_fn = None

    def _toposort(self):
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        order.reverse()
        return order

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _coerce(other)
        out = self.data + other.data

        def bwd(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)

        return Tensor._make(out, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other)
        out = self.data - other.data

        def bwd(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape)

        return Tensor._make(out, (self, other), bwd)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        other = _coerce(other)
        out = self.data * other.data
        a, b = self, other

        def bwd(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(out, (self, other), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def square(self):
        x = self.data

        def bwd(g):
            return (2.0 * x * g,)

        return Tensor._make(x * x, (self,), bwd)

    def sqrt(self):
        out = np.sqrt(self.data)

        def bwd(g):
            return (g * (0.5 / out),)

        return Tensor._make(out, (self,), bwd)

    def log(self):
        x = self.data

        def bwd(g):
            return (g / x,)

        return Tensor._make(np.log(x), (self,), bwd)

    def clip(self, lo, hi):
        x = self.data
        mask = (x >= lo) & (x <= hi)

        def bwd(g):
            return (g * mask,)

        return Tensor._make(np.clip(x, lo, hi), (self,), bwd)

    # -- reductions / reshaping ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(out, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def bwd(g):
            return (g.reshape(old),)

        return Tensor._make(self.data.reshape(shape), (self,), bwd)

    def select_image(self, i: int):
        """Slice one entry off the leading (batch) axis; the backward pass
        scatters the gradient back into an otherwise-zero batch."""
        n = self.data.shape[0]
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for batch of {n}")
        rest = self.data.shape[1:]

        def bwd(g):
            z = np.zeros((n,) + rest, dtype=g.dtype)
            z[i] = g
            return (z,)

        return Tensor._make(self.data[i], (self,), bwd)

    def select_pixels(self, flat_idx):
        """Gather pixel vectors from a (C, H, W) tensor.

        ``flat_idx`` indexes the flattened H*W spatial domain; the result is
        (P, C), one embedding/probability vector per selected pixel.  The
        backward pass scatter-adds back into the spatial grid.
        """
        if self.data.ndim != 3:
            raise ValueError("select_pixels expects a (C, H, W) tensor")
        c, h, w = self.data.shape
        idx = np.asarray(flat_idx, dtype=np.int64)
        flat = self.data.reshape(c, h * w)
        out = flat[:, idx].T

        def bwd(g):
            z = np.zeros((h * w, c), dtype=g.dtype)
            np.add.at(z, idx, g)
            return (z.T.reshape(c, h, w),)

        return Tensor._make(out, (self,), bwd)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape the operand actually had."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if len(tensors) == 0:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), bwd)


# -- verification harness ----------------------------------------------------

def finite_diff_check(forward_fn, point, eps=1e-5):
    """Max relative error between the analytic gradient of a scalar-valued
    function and central finite differences, evaluated in the dtype of
    ``point`` (use float64 for meaningful tolerances)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.asarray(point.data if isinstance(point, Tensor) else point)

    x = Tensor(base.copy(), requires_grad=True)
    y = forward_fn(x)
    if y.data.size != 1:
        raise ValueError("forward_fn must be scalar-valued")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite forward value")
    y.backward(np.ones_like(y.data))
    analytic = x.grad.reshape(-1)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = float(forward_fn(Tensor(base)).data)
        flat[i] = saved - eps
        lo = float(forward_fn(Tensor(base)).data)
        flat[i] = saved
        numeric[i] = (hi - lo) / (2.0 * eps)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("non-finite forward value in finite differences")

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- deterministic randomness --------------------------------------------------

class Rng:
    """Counter-based random stream: (seed, stream) fully determines the
    sequence, and independent streams are cheap to split off."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def split(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def normal(self, shape=(), mean=0.0, std=1.0, dtype=np.float64):
        if std < 0:
            raise ValueError("std must be non-negative")
        return (mean + std * self._gen.standard_normal(shape)).astype(dtype)

    def uniform(self, lo=0.0, hi=1.0, shape=()):
        return self._gen.uniform(lo, hi, shape)

    def integers(self, lo, hi, shape=()):
        return self._gen.integers(lo, hi, shape)

    def uniform_sphere(self, dim: int):
        """Uniform sample from the unit sphere in R^dim."""
        if dim < 1:
            raise ValueError("dim must be at least 1")
        while True:
            v = self._gen.standard_normal(dim)
            n = np.linalg.norm(v)
            if n > 1e-12:
                return v / n


def random_normal(rng: Rng, shape, mean=0.0, std=1.0, dtype=np.float64):
    return Tensor(rng.normal(shape, mean, std, dtype=dtype))


def random_uniform_sphere(rng: Rng, dim: int):
    return rng.uniform_sphere(dim)
