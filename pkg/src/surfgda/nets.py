"""Spectral graph convolution and the segmentator / discriminator networks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import EdgeIndex, Parameter, Tensor
from .mesh import SurfaceGraph
from .spectral import SpectralEmbedding

LEAKY_SLOPE = 0.01
# Mean closed-neighborhood size of a triangle mesh. At init every kernel is
# close to 1, so a convolution adds about this many correlated taps per node.
NEIGHBORHOOD_GAIN = 7.0


@dataclass
class GraphInput:
    """Everything a forward pass needs about one graph, precomputed once."""

    index: EdgeIndex
    offsets: np.ndarray
    features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.index.num_nodes

    @classmethod
    def build(cls, graph: SurfaceGraph, embedding: SpectralEmbedding) -> GraphInput:
        if embedding.num_nodes != graph.num_nodes:
            raise ValueError(f"embedding has {embedding.num_nodes} rows, graph has {graph.num_nodes} nodes")
        index = EdgeIndex(graph.num_nodes, graph.edges)
        feats = np.hstack([embedding.coords, graph.node_scalar[:, None]])
        return cls(index, index.offsets(embedding.coords), feats)


def _activate(z: Tensor, activation: str) -> Tensor:
    if activation == "leaky_relu":
        return dc.leaky_relu(z, LEAKY_SLOPE)
    if activation == "softmax":
        return dc.row_softmax(z)
    if activation == "sigmoid":
        return dc.sigmoid(z)
    if activation == "none":
        return z
    raise ValueError(f"unknown activation {activation!r}")


class Module:
    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update({f"{name}.{k}": v for k, v in val.named_parameters().items()})
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update({f"{name}.{i}.{k}": v for k, v in item.named_parameters().items()})
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ValueError(f"checkpoint does not match architecture: {missing[:4]}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.shape} vs {state[k].shape}")
            p.value[...] = state[k]
            p.m[...] = 0.0
            p.v[...] = 0.0


class GraphConvLayer(Module):
    """One spectral graph convolution with ``num_kernels`` Gaussian kernels.

    ``weight[q, k*M_out + p]`` is the filter tap from input map q to output
    map p under kernel k.
    """

    def __init__(self, in_features: int, out_features: int, num_kernels: int = 6,
                 embed_dim: int = 3, activation: str = "leaky_relu"):
        self.in_features, self.out_features = in_features, out_features
        self.num_kernels, self.embed_dim = num_kernels, embed_dim
        self.activation = activation
        self.weight = Parameter(np.zeros((in_features, num_kernels * out_features)))
        self.bias = Parameter(np.zeros((1, out_features)))
        self.mu = Parameter(np.zeros((num_kernels, embed_dim)))
        self.log_sigma = Parameter(np.zeros((1, num_kernels)))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.value[0])

    def weight_block(self) -> np.ndarray:
        """Weights as a ``(K, M_in, M_out)`` array."""
        w = self.weight.value.reshape(self.in_features, self.num_kernels, self.out_features)
        return w.transpose(1, 0, 2)

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.num_kernels * self.in_features
        limit = np.sqrt(6.0 / (fan_in + self.out_features)) / NEIGHBORHOOD_GAIN
        self.weight.value[...] = rng.uniform(-limit, limit, self.weight.shape)
        self.bias.value[...] = 0.0
        self.mu.value[...] = rng.uniform(-0.05, 0.05, self.mu.shape)
        self.log_sigma.value[...] = 0.0

    def pre_activation(self, x: Tensor, g: GraphInput) -> Tensor:
        if x.shape[1] != self.in_features:
            raise ValueError(f"layer expects {self.in_features} features, got {x.shape[1]}")
        if x.shape[0] != g.num_nodes:
            raise ValueError(f"{x.shape[0]} feature rows for a {g.num_nodes}-node graph")
        phi = dc.gaussian_edge_kernel(g.offsets, self.mu, self.log_sigma)
        h = dc.matmul(x, self.weight)
        return dc.add_bias_row(dc.edge_aggregate(phi, h, g.index), self.bias)

    def __call__(self, x: Tensor, g: GraphInput) -> Tensor:
        return _activate(self.pre_activation(x, g), self.activation)

    def manifest(self) -> str:
        return f"graphconv {self.in_features} {self.out_features} K={self.num_kernels} {self.activation}"


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, activation: str = "leaky_relu"):
        self.in_features, self.out_features = in_features, out_features
        self.activation = activation
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros((1, out_features)))

    def init(self, rng: np.random.Generator) -> None:
        limit = np.sqrt(6.0 / (self.in_features + self.out_features))
        self.weight.value[...] = rng.uniform(-limit, limit, self.weight.shape)
        self.bias.value[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return _activate(dc.add_bias_row(dc.matmul(x, self.weight), self.bias), self.activation)

    def manifest(self) -> str:
        return f"linear {self.in_features} {self.out_features} {self.activation}"


class _Net(Module):
    kind = ""

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)

    def manifest(self) -> str:
        return "\n".join([f"net {self.kind}"] + [layer.manifest() for layer in self.layers]) + "\n"


class SegmentatorNet(_Net):
    """Three graph convolutions, widths ``in -> 256 -> 128 -> C``, softmax output."""

    kind = "segmentator"

    def __init__(self, num_parcels: int = 8, in_features: int = 4, hidden=(256, 128),
                 num_kernels: int = 6, embed_dim: int = 3):
        widths = [in_features, *hidden, num_parcels]
        self.layers = [
            GraphConvLayer(widths[i], widths[i + 1], num_kernels, embed_dim,
                           "softmax" if i == len(widths) - 2 else "leaky_relu")
            for i in range(len(widths) - 1)
        ]

    @property
    def num_parcels(self) -> int:
        return self.layers[-1].out_features

    def __call__(self, g: GraphInput) -> Tensor:
        x = Tensor(g.features)
        for layer in self.layers:
            x = layer(x, g)
        return x


class DiscriminatorNet(_Net):
    """Graph convolutions ``C -> 128 -> 64``, mean pooling, then ``64 -> 32 -> 16 -> 1``."""

    kind = "discriminator"

    def __init__(self, num_parcels: int = 8, conv=(128, 64), fc=(32, 16),
                 num_kernels: int = 6, embed_dim: int = 3):
        widths = [num_parcels, *conv]
        self.convs = [GraphConvLayer(widths[i], widths[i + 1], num_kernels, embed_dim)
                      for i in range(len(widths) - 1)]
        fw = [widths[-1], *fc, 1]
        self.fcs = [Linear(fw[i], fw[i + 1], "sigmoid" if i == len(fw) - 2 else "leaky_relu")
                    for i in range(len(fw) - 1)]

    @property
    def layers(self):
        return self.convs + self.fcs

    def pooled(self, seg_probs: Tensor, g: GraphInput) -> Tensor:
        x = seg_probs
        for conv in self.convs:
            x = conv(x, g)
        return dc.global_mean_rows(x)

    def __call__(self, seg_probs: Tensor, g: GraphInput) -> Tensor:
        if seg_probs.shape[1] != self.convs[0].in_features:
            raise ValueError(f"discriminator expects {self.convs[0].in_features} maps, "
                             f"got {seg_probs.shape[1]}")
        x = self.pooled(seg_probs, g)
        for fc in self.fcs:
            x = fc(x)
        return x


class PointwiseNet(_Net):
    """Per-node fully connected net ``in -> 256 -> 128 -> C``; no graph structure."""

    kind = "pointwise"

    def __init__(self, num_parcels: int = 8, in_features: int = 4, hidden=(256, 128)):
        widths = [in_features, *hidden, num_parcels]
        self.layers = [Linear(widths[i], widths[i + 1],
                              "softmax" if i == len(widths) - 2 else "leaky_relu")
                       for i in range(len(widths) - 1)]

    @property
    def num_parcels(self) -> int:
        return self.layers[-1].out_features

    def __call__(self, g: GraphInput) -> Tensor:
        x = Tensor(g.features)
        for layer in self.layers:
            x = layer(x)
        return x


def init_params(net: _Net, seed: int) -> _Net:
    net.init_params(seed)
    return net


def save_net(net: _Net, path) -> None:
    """Checkpoint plus a plain-text architecture manifest at ``<path>.manifest``."""
    path = Path(path)
    dc.save_checkpoint(net.named_parameters(), path)
    Path(str(path) + ".manifest").write_text(net.manifest(), newline="\n")


def load_net(net: _Net, path) -> _Net:
    path = Path(path)
    manifest = Path(str(path) + ".manifest")
    if manifest.exists() and manifest.read_text() != net.manifest():
        raise ValueError(f"{path}: architecture manifest does not match the requested network")
    net.load_state_dict(dc.load_checkpoint(path))
    return net
