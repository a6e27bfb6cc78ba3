"""Parameterized layers built on the autodiff engine."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Container whose ``Tensor`` attributes with ``requires_grad`` are parameters.

    Parameters are discovered in attribute-assignment order, which makes
    naming and iteration deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            key = (missing or extra)[0]
            raise KeyError(f"parameter mismatch at {key!r} (missing={len(missing)}, unexpected={len(extra)})")
        for name, p in own.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arrays[name].shape} vs {p.shape}")
            p.data[...] = arrays[name]


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


def uniform_param(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = uniform_param(rng, (n_in, n_out), bound)
        self.bias = uniform_param(rng, (n_out,), bound)

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Stack of linear maps with ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    def zero_(self) -> None:
        for layer in self.layers:
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over axis -2 of a ``(B, T, d)`` input."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Args:
            x: ``(B, T, d)`` tokens.
            mask: boolean ``(B, T, T)`` (or broadcastable); ``mask[b, i, j]``
                allows token ``i`` to attend to token ``j``.
        """
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(y):
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = ad.matmul(q, k.swap_last()) * (1.0 / np.sqrt(dh))
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None], scores.shape)
        attn = ad.softmax_lastdim(scores, mask)
        y = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(y)


class TransformerLayer(Module):
    """Post-norm block: attention and feed-forward, each with residual + layer norm."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = MLP([d, ffn_mult * d, d], rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ffn(x))


def sinusoidal_embedding(length: int, d: int) -> np.ndarray:
    """Standard sin/cos positional table of shape ``(length, d)``."""
    pos = np.arange(length)[:, None].astype(np.float64)
    dims = np.arange(0, d, 2).astype(np.float64)
    angle = pos / np.power(10000.0, dims / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


class Relation:
    """Edges of one type feeding a :class:`HeteroConv` destination set.

    Attributes:
        feats: ``(S, d)`` source node features.
        coords: ``(S, 2)`` source node coordinates (tensor or array).
        src, dst: edge endpoint indices, messages flow ``src -> dst``.
    """

    __slots__ = ("feats", "coords", "src", "dst")

    def __init__(self, feats, coords, src, dst):
        self.feats = feats
        self.coords = coords
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)


class HeteroConv(Module):
    """Max-pooled heterogeneous message passing with a self transform.

    For destination node ``i`` and every relation ``r``::

        z_i = g(x_i) + sum_r f_r( max_{j in N_r(i)} m_r([x_i, x_j, (c_j - c_i) / s]) )

    where all of ``g``, ``m_r``, ``f_r`` are two-layer MLPs and an empty
    neighborhood contributes nothing for that relation.
    """

    def __init__(self, d: int, relations: list[str], rng: np.random.Generator,
                 coord_scale: float = 10.0):
        self.coord_scale = float(coord_scale)
        self.relations = list(relations)
        self.self_fn = MLP([d, d, d], rng)
        self.message = {r: MLP([2 * d + 2, d, d], rng) for r in self.relations}
        self.transform = {r: MLP([d, d, d], rng) for r in self.relations}

    def __call__(self, x: Tensor, coords, relations: dict[str, Relation]) -> Tensor:
        rows = x.shape[0]
        coords = ad.as_tensor(coords)
        z = self.self_fn(x)
        for name in self.relations:
            rel = relations.get(name)
            if rel is None or rel.dst.size == 0:
                continue
            xi = ad.gather_rows(x, rel.dst)
            xj = ad.gather_rows(rel.feats, rel.src)
            dc = (ad.gather_rows(rel.coords, rel.src) - ad.gather_rows(coords, rel.dst)) * (
                1.0 / self.coord_scale)
            msg = self.message[name](ad.concat([xi, xj, dc], axis=-1))
            pooled = ad.segment_max(msg, rel.dst, rows)
            filled = np.unique(rel.dst)
            branch = self.transform[name](ad.gather_rows(pooled, filled))
            z = z + ad.scatter_rows(branch, filled, rows)
        return z
