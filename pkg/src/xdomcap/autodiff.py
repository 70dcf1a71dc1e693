"""Reverse-mode differentiation over small dense float64 arrays.

Every model in the package builds its forward pass from the ops in this
module. A ``Tensor`` remembers the op that produced it; calling
``backward`` on a result walks the recorded graph in reverse topological
order and accumulates gradients into every leaf that requires them.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (sampling, rollouts, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, seed=None):
        backward(self, seed)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self._op})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None or t.grad.shape != t.data.shape:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out leading dims and size-1 dims introduced by numpy broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(out: Tensor, seed=None):
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not out.requires_grad:
        raise AutodiffError("backward called on a tensor with no recorded graph; run a forward pass first")
    if seed is None:
        if out.data.size != 1:
            raise AutodiffError("seed gradient required for non-scalar output")
        seed = np.ones_like(out.data)
    seed = np.asarray(seed, dtype=DTYPE)
    if seed.shape != out.data.shape:
        raise ShapeError("backward", seed.shape, out.data.shape)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accum(node, g)
            continue
        # interior nodes hand gradients to parents through a scratch dict
        for p, pg in node._backward(g):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                _accum(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def check_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _result(data, (a, b), "add",
                   lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _result(data, (a, b), "sub",
                   lambda g: ((a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _result(data, (a, b), "mul",
                   lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                              (b, _unbroadcast(g * a.data, b.shape))))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: ((a, g * c),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return (a, ga), (b, gb)

    return _result(data, (a, b), "matmul", bw)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b, fused. ``x`` may carry any number of leading batch dims."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError("linear", x.shape, w.shape, () if b is None else b.shape)
    data = x.data @ w.data
    if b is not None:
        data = data + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        out = [(x, g @ w.data.T), (w, x.data.reshape(-1, x.shape[-1]).T @ g2)]
        if b is not None:
            out.append((b, g2.sum(axis=0)))
        return out

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, parents, "linear", bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), "tanh", lambda g: ((a, g * (1.0 - y * y)),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), "sigmoid", lambda g: ((a, g * y * (1.0 - y)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), "relu", lambda g: ((a, g * mask),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), "sum", lambda g: ((a, np.broadcast_to(g, a.shape).copy()),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return [(t, np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
                for i, t in enumerate(tensors)]

    return _result(data, tensors, "concat", bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape)
    data = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _result(data, (table,), "embedding", bw)


def softmax_array(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    y = softmax_array(a.data)

    def bw(g):
        return ((a, y * (g - (g * y).sum(axis=-1, keepdims=True))),)

    return _result(y, (a,), "softmax", bw)


def nll(logits: Tensor, targets, weights=None, smoothing: float = 0.0) -> Tensor:
    """Weighted negative log-likelihood of ``targets`` under softmax(logits).

    Returns the scalar ``-sum_i w_i log softmax(logits_i)[target_i]``.
    With unit weights this is the summed cross-entropy. Logits may hold
    ``-inf`` for masked classes; masked classes get exactly zero probability.
    ``smoothing`` > 0 mixes the one-hot target with a uniform distribution
    over the unmasked classes.
    """
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError("nll", logits.shape, targets.shape)
    w = np.ones(t.shape[0]) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    if w.shape[0] != t.shape[0]:
        raise ShapeError("nll", logits.shape, np.shape(weights))
    lp = log_softmax_array(z)
    rows = np.arange(t.shape[0])
    picked = lp[rows, t]
    active = w != 0
    if np.any(~np.isfinite(picked[active])):
        raise NonFiniteError("nll: target has zero probability")
    value = -np.sum(w[active] * picked[active])
    if smoothing:
        support = np.isfinite(z)
        n_sup = support.sum(axis=1)
        uniform_term = np.where(support, lp, 0.0).sum(axis=1) / n_sup
        value = (1.0 - smoothing) * value - smoothing * np.sum(w[active] * uniform_term[active])

    def bw(g):
        p = np.exp(lp)
        if smoothing:
            p -= smoothing * support / n_sup[:, None]
            p[rows, t] -= 1.0 - smoothing
        else:
            p[rows, t] -= 1.0
        return ((logits, (float(g) * w[:, None] * p).reshape(logits.shape)),)

    return _result(np.asarray(value), (logits,), "nll", bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    return nll(logits, targets)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * mask, (a,), "dropout", lambda g: ((a, g * mask),))


def masked_max_over_time(a: Tensor, valid) -> Tensor:
    """Max over axis 1 of a (B, T, F) tensor, ignoring positions where ``valid`` is False."""
    valid = np.asarray(valid, dtype=bool)
    if a.data.ndim != 3 or valid.shape != a.shape[:2]:
        raise ShapeError("max_over_time", a.shape, valid.shape)
    if not np.all(valid.any(axis=1)):
        raise AutodiffError("max_over_time: a row has no valid position")
    z = np.where(valid[:, :, None], a.data, -np.inf)
    idx = np.argmax(z, axis=1)  # (B, F)
    b_idx, f_idx = np.indices(idx.shape)
    data = z[b_idx, idx, f_idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[b_idx, idx, f_idx] = g
        return ((a, ga),)

    return _result(data, (a,), "max_over_time", bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution of a (B, T, E) sequence with a (width, E, F) filter bank."""
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[2] != w.shape[1] or b.shape != (w.shape[2],):
        raise ShapeError("conv1d", x.shape, w.shape, b.shape)
    B, T, E = x.shape
    width, _, F = w.shape
    if T < width:
        raise ShapeError("conv1d", x.shape, w.shape, b.shape)
    L = T - width + 1
    data = b.data + sum(x.data[:, k:k + L, :] @ w.data[k] for k in range(width))

    def bw(g):
        g2 = g.reshape(-1, F)
        gw = np.stack([x.data[:, k:k + L, :].reshape(-1, E).T @ g2 for k in range(width)])
        gx = np.zeros_like(x.data)
        for k in range(width):
            gx[:, k:k + L, :] += g @ w.data[k].T
        return (x, gx), (w, gw), (b, g2.sum(axis=0))

    return _result(data, (x, w, b), "conv1d", bw)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor,
              keep=None) -> tuple[Tensor, Tensor]:
    """One LSTM step with gates ordered (i, f, o, g).

    ``keep`` is an optional (B,) 0/1 array; rows with keep=0 carry their
    previous (h, c) through unchanged, which lets padded sequences share
    a batch.
    """
    H = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * H) or w_h.shape != (H, 4 * H) or bias.shape != (4 * H,) \
            or c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise ShapeError("lstm_cell", x.shape, h.shape, c.shape, w_x.shape, w_h.shape, bias.shape)
    z = x.data @ w_x.data + h.data @ w_h.data + bias.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    o = _sigmoid(z[:, 2 * H:3 * H])
    gg = np.tanh(z[:, 3 * H:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if keep is not None:
        k = np.asarray(keep, dtype=DTYPE)[:, None]
        c_out = k * c_new + (1.0 - k) * c.data
        h_out = k * h_new + (1.0 - k) * h.data
    else:
        k = None
        c_out, h_out = c_new, h_new

    parents = (x, h, c, w_x, w_h, bias)
    # both outputs share one backward; gradients arriving at either are
    # combined in a hidden joint node
    joint = _result(np.concatenate([h_out, c_out], axis=1), parents, "lstm_cell", None)
    if joint.requires_grad:
        def bw(g):
            gh, gc = g[:, :H], g[:, H:]
            gh_new = gh if k is None else gh * k
            gc_new = gc if k is None else gc * k
            gc_tot = gc_new + gh_new * o * (1.0 - tc * tc)
            dz = np.concatenate([
                gc_tot * gg * i * (1.0 - i),
                gc_tot * c.data * f * (1.0 - f),
                gh_new * tc * o * (1.0 - o),
                gc_tot * i * (1.0 - gg * gg),
            ], axis=1)
            gc_prev = gc_tot * f
            gh_prev = dz @ w_h.data.T
            if k is not None:
                gc_prev = gc_prev + gc * (1.0 - k)
                gh_prev = gh_prev + gh * (1.0 - k)
            return ((x, dz @ w_x.data.T), (h, gh_prev), (c, gc_prev),
                    (w_x, x.data.T @ dz), (w_h, h.data.T @ dz), (bias, dz.sum(axis=0)))
        joint._backward = bw
    h_t = _slice_cols(joint, 0, H)
    c_t = _slice_cols(joint, H, 2 * H)
    return h_t, c_t


def _slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, lo:hi] = g
        return ((a, ga),)

    return _result(a.data[:, lo:hi], (a,), "slice", bw)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows ``a[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return ((a, ga),)

    return _result(a.data[index], (a,), "gather_rows", bw)


def stack_time(tensors: Sequence[Tensor]) -> Tensor:
    """Stack a list of (B, D) tensors into (B, T, D)."""
    data = np.stack([t.data for t in tensors], axis=1)

    def bw(g):
        return [(t, g[:, i]) for i, t in enumerate(tensors)]

    return _result(data, tensors, "stack_time", bw)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named learnable tensors plus their gradient buffers and init records."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._params: dict[str, Tensor] = {}
        self.init_schemes: dict[str, str] = {}
        self._rng = np.random.default_rng(self.rng_seed)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, value, init: str = "given") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        self.init_schemes[name] = init
        return t

    def uniform(self, name: str, shape, scale: float = 0.08) -> Tensor:
        return self.add(name, self._rng.uniform(-scale, scale, size=shape), f"uniform({-scale},{scale})")

    def xavier(self, name: str, shape, fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
        fan_in = shape[-2] if fan_in is None else fan_in
        fan_out = shape[-1] if fan_out is None else fan_out
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self._rng.uniform(-limit, limit, size=shape), "xavier_uniform")

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape), "zeros")

    def lstm_bias(self, name: str, hidden: int, forget: float = 1.0) -> Tensor:
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget
        return self.add(name, b, f"zeros_forget{forget}")

    def zero_grad(self):
        for t in self._params.values():
            t.grad.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(t.grad ** 2) for t in self._params.values())))

    def flat_values(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([t.grad.ravel() for t in self._params.values()])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for k, v in snap.items():
            self._params[k].data[...] = v

    def copy(self) -> "ParamStore":
        other = ParamStore(self.rng_seed)
        for k, v in self._params.items():
            other.add(k, v.data.copy(), self.init_schemes[k])
        return other

    def check_finite(self):
        for k, v in self._params.items():
            if not np.all(np.isfinite(v.data)):
                raise NonFiniteError(f"parameter {k} is not finite")


class Adam:
    def __init__(self, params: ParamStore, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        """Apply one bias-corrected Adam update, then zero the gradients."""
        for k, t in self.params.items():
            if not np.all(np.isfinite(t.grad)):
                raise NonFiniteError(f"gradient of {k} is not finite")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, t in self.params.items():
            g = t.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            g.fill(0.0)


def adam_step(params: ParamStore, state: Adam):
    state.step()


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """max|a-b| scaled by the larger of max|a| and max|b|."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / denom)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
