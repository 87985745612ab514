"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from surfgda.diffcore import Tensor


def central_diff(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    """Largest ``|a - n| / max(1, |a|)``."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_op_gradient(build, arrays, h=1e-5, weight_seed=0):
    """Compare backward() against central differences for ``sum(R * build(*tensors))``.

    A fixed random projection R makes every output entry matter.
    """
    from surfgda import diffcore as dc

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = np.random.default_rng(weight_seed).standard_normal(out.shape)
    loss = dc.sum(dc.elementwise_mul(out, Tensor(proj)))
    dc.backward(loss)

    def f(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).value * proj).sum())

    numeric = central_diff(f, [a.copy() for a in arrays], h)
    return max(max_rel_error(t.grad, n) for t, n in zip(tensors, numeric))


def naive_graph_conv(weight_kqp, bias, mu, sigma, features, coords, edges):
    """Direct triple sum over closed neighborhoods, no vectorization."""
    n = features.shape[0]
    num_k, m_in, m_out = weight_kqp.shape
    nbrs = [{i} for i in range(n)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    out = np.zeros((n, m_out))
    for i in range(n):
        for p in range(m_out):
            total = 0.0
            for j in sorted(nbrs[i]):
                for q in range(m_in):
                    for k in range(num_k):
                        d = coords[j] - coords[i] - mu[k]
                        total += weight_kqp[k, q, p] * features[j, q] * np.exp(-sigma[k] * float(d @ d))
            out[i, p] = total + bias[p]
    return out


def random_connected_graph(rng, n, extra_edges=None):
    """Random spanning tree plus extra random edges."""
    edges = set()
    perm = rng.permutation(n)
    for t in range(1, n):
        a, b = perm[t], perm[rng.integers(0, t)]
        edges.add((min(a, b), max(a, b)))
    extra = n if extra_edges is None else extra_edges
    for _ in range(extra):
        a, b = rng.integers(0, n, 2)
        if a != b:
            edges.add((min(a, b), max(a, b)))
    return np.array(sorted(edges), dtype=np.int64)
