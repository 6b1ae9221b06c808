"""Dense-tensor engine with reverse-mode differentiation.

Covers exactly the operations the waveform/graph models need: folded
matrix product, strided valid 1D convolution, relu/tanh/add/scale
elementwise ops, reshape/concat plumbing, node mixing by a constant
propagation matrix, mean-squared-error loss and an L2 weight penalty.

Tensors wrap a numpy array; each op appends a tape node (the output
tensor itself) holding its parents and a closure that maps the upstream
gradient to per-parent gradients.  ``backward`` replays the tape in
reverse topological order.  Everything is deterministic: identical
inputs and op order give bitwise-identical outputs and gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Tensor:
    """Numpy-backed tensor, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad and _backward is None else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def parameter(data, name: str = "") -> Tensor:
    """Trainable leaf tensor with a zero-initialized gradient buffer."""
    return Tensor(np.array(data), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _tracked(inputs) -> bool:
    return any(isinstance(t, Tensor) and t.requires_grad for t in inputs)


def _node(data, parents, backward_fn) -> Tensor:
    if not _tracked(parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b with b strictly 2-D; leading axes of a are folded.

    a: (..., m, k), b: (k, n) -> (..., m, n).  Gradients: da = g b^T,
    db = fold(a)^T fold(g).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = a.data.shape[-1]
            n = g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _node(out, (a, b), backward)


def mix_nodes(m: np.ndarray, h: Tensor) -> Tensor:
    """Left-multiply the node axis by a constant (N, N) matrix: (..., N, F) -> (..., N, F)."""
    h = _as_tensor(h)
    m = np.asarray(m, dtype=h.dtype)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or h.data.ndim < 2 or h.data.shape[-2] != m.shape[0]:
        raise ShapeError(f"mix_nodes shapes incompatible: {m.shape} x {h.shape}")
    out = np.matmul(m, h.data)

    def backward(g):
        return (np.matmul(m.T, g),)

    return _node(out, (h,), backward)


# ---------------------------------------------------------------------------
# convolution

def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided 1D convolution along the second-to-last axis.

    x: (..., T, C), kernels: (K, C, F) -> (..., T', F) with
    T' = (T - K) // stride + 1 and y[..., j, f] = sum_{u,c} k[u,c,f] x[..., j*stride+u, c].
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if kernels.data.ndim != 3:
        raise ShapeError(f"kernels must be (K, C, F), got {kernels.shape}")
    K, C, F = kernels.data.shape
    if x.data.ndim < 2 or x.data.shape[-1] != C:
        raise ShapeError(f"conv1d input {x.shape} incompatible with kernels {kernels.shape}")
    T = x.data.shape[-2]
    if K > T:
        raise ShapeError(f"kernel length {K} exceeds input length {T}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    J = (T - K) // stride + 1
    span = (J - 1) * stride + 1
    lead = x.data.shape[:-2]
    xf = x.data.reshape(-1, T, C)
    kd = kernels.data

    # one small GEMM per kernel offset keeps peak memory at O(input),
    # unlike an im2col fold which is K times larger
    out = np.zeros((xf.shape[0] * J, F), dtype=np.result_type(xf, kd))
    for u in range(K):
        sl = np.ascontiguousarray(xf[:, u:u + span:stride, :]).reshape(-1, C)
        out += sl @ kd[u]
    out = out.reshape(*lead, J, F)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(-1, J, F)
        g2 = g3.reshape(-1, F)
        gk = None
        if kernels.requires_grad:
            gk = np.empty_like(kd)
            for u in range(K):
                sl = np.ascontiguousarray(xf[:, u:u + span:stride, :]).reshape(-1, C)
                gk[u] = sl.T @ g2
        gx = None
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for u in range(K):
                # y[..., j] consumed x[..., j*stride + u]; distinct targets per u
                gxf[:, u:u + span:stride, :] += g3 @ kd[u].T
            gx = gxf.reshape(x.data.shape)
        return gx, gk

    return _node(out, (x, kernels), backward)


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _node(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g, g

    return _node(out, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a (F,) bias over the last axis of x (..., F)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias {b.shape} does not match last axis of {x.shape}")
    out = x.data + b.data

    def backward(g):
        gb = g.reshape(-1, b.data.shape[0]).sum(axis=0) if b.requires_grad else None
        return g, gb

    return _node(out, (x, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = x.data * c

    def backward(g):
        return (g * c,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    """Row-major reshape; gradients are the inverse reshape."""
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _node(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.data.size,))


def concat_last(parts) -> Tensor:
    """Concatenate on the last axis; all leading axes must agree."""
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat leading dims differ: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(
            g[..., bounds[i]:bounds[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _node(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; gradient is 2 (pred - target) / n."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    if target.size < 1:
        raise ShapeError("mse needs at least one element")
    diff = pred.data - target
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return _node(out, (pred,), backward)


def l2_penalty(params, coeff: float) -> Tensor:
    """coeff * sum of squared entries over the listed tensors (scalar)."""
    params = [_as_tensor(p) for p in params]
    coeff = float(coeff)
    if coeff < 0:
        raise ShapeError(f"l2 coefficient must be >= 0, got {coeff}")
    total = sum(float((p.data * p.data).sum()) for p in params)
    dtype = params[0].dtype if params else np.float64
    out = np.asarray(coeff * total, dtype=dtype)

    def backward(g):
        return tuple(
            g * 2.0 * coeff * p.data if p.requires_grad else None for p in params
        )

    return _node(out, tuple(params), backward)


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into each reachable parameter's .grad.

    loss must be a scalar.  Parameters not on the path keep their existing
    (zero-initialized) gradient buffers.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        got = getattr(loss, "shape", type(loss))
        raise ShapeError(f"backward requires a scalar loss, got {got}")
    if not loss.requires_grad:
        return

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf parameter
            node.grad = node.grad + g if node.grad is not None else np.array(g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (isinstance(p, Tensor) and p.requires_grad):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
