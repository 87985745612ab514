"""A small dense reverse-mode differentiation engine over 2-D float64 arrays.

Every op takes and returns :class:`Tensor` objects. An op records its parents
and a closure mapping the output gradient to one gradient per parent; calling
:func:`backward` on a 1x1 result sweeps the recorded graph in reverse
topological order and accumulates into the ``grad`` of every leaf that
``requires_grad`` (parameters included).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numba
import numpy as np
from scipy import sparse


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {v.shape}")
        self.value = v
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.value[0, 0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scalar_mul(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scalar_mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor with Adam moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, value, name=None):
        super().__init__(value, requires_grad=True, name=name)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


def _op(value, parents, backward_fn):
    t = Tensor(value, parents=tuple(parents), backward_fn=backward_fn)
    if not t.requires_grad:
        t.parents, t.backward_fn = (), None
    return t


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _op(av @ bv, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _op(a.value + c, (a,), lambda g: (g,))


def add_bias_row(x: Tensor, b: Tensor) -> Tensor:
    if b.shape != (1, x.shape[1]):
        raise ValueError(f"add_bias_row: bias shape {b.shape} does not fit {x.shape}")
    return _op(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "elementwise_mul")
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _op(a.value * c, (a,), lambda g: (g * c,))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    av, bv = a.value, b.value
    return _op(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xv = x.value
    scale = np.where(xv > 0, 1.0, slope)
    return _op(xv * scale, (x,), lambda g: (g * scale,))


def row_softmax(x: Tensor) -> Tensor:
    xv = x.value
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _op(s, (x,), back)


def global_mean_rows(x: Tensor) -> Tensor:
    n = x.shape[0]
    return _op(x.value.mean(axis=0, keepdims=True), (x,),
               lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sigmoid(x: Tensor) -> Tensor:
    xv = x.value
    s = np.empty_like(xv)
    pos = xv >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _op(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    xv = x.value
    if np.any(xv <= 0):
        raise ValueError("log of non-positive value")
    return _op(np.log(xv), (x,), lambda g: (g / xv,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; the gradient is zero where the floor is active."""
    xv = x.value
    keep = xv >= lo
    return _op(np.where(keep, xv, lo), (x,), lambda g: (g * keep,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xv = x.value
    keep = (xv >= lo) & (xv <= hi)
    return _op(np.clip(xv, lo, hi), (x,), lambda g: (g * keep,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    return _op(np.array([[x.value.sum()]]), (x,),
               lambda g: (np.full(x.shape, g[0, 0]),))


def gaussian_edge_kernel(offsets: np.ndarray, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Per-edge Gaussian weights ``exp(-sigma_k * ||offset_e - mu_k||^2)``.

    Parameters
    ----------
    offsets : (E, d) array
        ``u_j - u_i`` for every (receiver i, sender j) edge.
    mu : (K, d) Tensor
    log_sigma : (1, K) Tensor
        ``sigma_k = exp(log_sigma_k)`` keeps every precision positive.

    Returns
    -------
    (E, K) Tensor
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    if mu.shape[1] != offsets.shape[1] or log_sigma.shape != (1, mu.shape[0]):
        raise ValueError(f"gaussian_edge_kernel: offsets {offsets.shape}, mu {mu.shape}, "
                         f"log_sigma {log_sigma.shape}")
    sig = np.exp(log_sigma.value)                       # (1, K)
    diff = offsets[:, None, :] - mu.value[None, :, :]   # (E, K, d)
    sq = np.einsum("ekd,ekd->ek", diff, diff)           # (E, K)
    phi = np.exp(-sig * sq)

    def back(g):
        gp = g * phi                                    # (E, K)
        d_mu = 2.0 * sig.T * np.einsum("ek,ekd->kd", gp, diff)
        d_ls = -(gp * sq).sum(axis=0, keepdims=True) * sig
        return d_mu, d_ls

    return _op(phi, (mu, log_sigma), back)


class EdgeIndex:
    """Directed (receiver, sender) pairs sorted by receiver, self loops included.

    ``edge_aggregate`` uses the fixed CSR layout so that only the values change
    between calls.
    """

    def __init__(self, num_nodes: int, edges: np.ndarray, self_loops: bool = True):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        recv = [e[:, 0], e[:, 1]]
        send = [e[:, 1], e[:, 0]]
        if self_loops:
            ar = np.arange(num_nodes)
            recv.append(ar)
            send.append(ar)
        recv, send = np.concatenate(recv), np.concatenate(send)
        order = np.lexsort((send, recv))
        self.num_nodes = num_nodes
        self.receivers = recv[order]
        self.senders = send[order]
        self.indptr = np.searchsorted(self.receivers, np.arange(num_nodes + 1))

    @property
    def num_edges(self) -> int:
        return len(self.receivers)

    def offsets(self, coords: np.ndarray) -> np.ndarray:
        return coords[self.senders] - coords[self.receivers]

    def matrix(self, values: np.ndarray) -> sparse.csr_matrix:
        n = self.num_nodes
        return sparse.csr_matrix((values, self.senders, self.indptr), shape=(n, n))


@numba.njit(cache=True)
def _edge_dot(g, h, receivers, senders, num_k):
    """``out[e, k] = g[receivers[e]] . h[senders[e], k*P:(k+1)*P]``."""
    width = g.shape[1]
    out = np.empty((receivers.shape[0], num_k))
    for e in range(receivers.shape[0]):
        r, s = receivers[e], senders[e]
        for k in range(num_k):
            acc = 0.0
            base = k * width
            for p in range(width):
                acc += g[r, p] * h[s, base + p]
            out[e, k] = acc
    return out


def edge_aggregate(phi: Tensor, h: Tensor, index: EdgeIndex) -> Tensor:
    """``out[i, p] = sum_k sum_{e: recv(e)=i} phi[e, k] * h[send(e), k*P + p]``.

    ``h`` holds K column blocks of width P, one per kernel.
    """
    num_k = phi.shape[1]
    if phi.shape[0] != index.num_edges or h.shape[0] != index.num_nodes or h.shape[1] % num_k:
        raise ValueError(f"edge_aggregate: phi {phi.shape}, h {h.shape}, "
                         f"{index.num_edges} edges on {index.num_nodes} nodes")
    width = h.shape[1] // num_k
    hv, pv = h.value, phi.value
    mats = [index.matrix(pv[:, k]) for k in range(num_k)]
    out = np.zeros((index.num_nodes, width))
    for k, m in enumerate(mats):
        out += m @ hv[:, k * width:(k + 1) * width]

    def back(g):
        dh = None
        if h.requires_grad:
            dh = np.empty_like(hv)
            for k, m in enumerate(mats):
                dh[:, k * width:(k + 1) * width] = m.T @ g
        dphi = None
        if phi.requires_grad:
            dphi = _edge_dot(np.ascontiguousarray(g), hv, index.receivers, index.senders, num_k)
        return dphi, dh

    return _op(out, (phi, h), back)


# ----------------------------------------------------------------------------
# Backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf that requires grad."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 loss, got {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------------------------
# Optimizer


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            p.m *= b1
            p.m += (1.0 - b1) * p.grad
            p.v *= b2
            p.v += (1.0 - b2) * p.grad * p.grad
            p.value -= self.lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)


# ----------------------------------------------------------------------------
# Checkpoints: b"SMGC", u32 version, u32 count, then per parameter
# u32 name length, utf-8 name, u32 rows, u32 cols, rows*cols little-endian f64.

MAGIC = b"SMGC"
VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        r, c = p.shape
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", r, c))
        out.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        r, c = struct.unpack_from("<II", data, pos)
        pos += 8
        out[name] = np.frombuffer(data, dtype="<f8", count=r * c, offset=pos).reshape(r, c).copy()
        pos += 8 * r * c
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
