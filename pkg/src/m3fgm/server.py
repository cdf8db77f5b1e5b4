"""Server-side graph model: node masking plus two multi-granularity layers.

Client rows live on axis -2 of every embedding tensor, so a batch of windows
is simply a leading axis.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .graph import ClusterAssignment, MultiGraph
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    concat,
    matmul,
    relu,
    segment_mean,
    take,
    where,
)


def masked_count(mr: float, n: int) -> int:
    """floor(mr * n), robust to representation error such as 0.29 * 100."""
    return int(math.floor(mr * n + 1e-9))


@dataclass
class MaskNodeLayer:
    h_s: Tensor
    mr: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.mr <= 1.0:
            raise ValueError(f"mask rate must lie in [0, 1], got {self.mr}")


def mask_nodes(
    layer: MaskNodeLayer,
    h_all,
    rng: np.random.Generator | int | None = None,
    training: bool = True,
    v_off=None,
) -> tuple[Tensor, np.ndarray]:
    """Replace floor(mr*N) uniformly drawn client rows with the shared ``h_s``.

    ``v_off`` forces the masked set instead of drawing it. Outside training
    nothing is masked.
    """
    h_all = as_tensor(h_all)
    if h_all.ndim < 2 or h_all.shape[-2] == 0:
        raise DimensionError("mask_nodes: no client rows")
    n = h_all.shape[-2]
    if v_off is None:
        if not training:
            return h_all, np.zeros(0, dtype=np.intp)
        k = masked_count(layer.mr, n)
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        v_off = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.intp)
    v_off = np.asarray(v_off, dtype=np.intp)
    if v_off.size == 0:
        return h_all, v_off
    mask = np.zeros((n, 1), dtype=bool)
    mask[v_off] = True
    return where(mask, layer.h_s, h_all), v_off


def substitute_offline(layer: MaskNodeLayer, h_partial, offline, n: int, online=None) -> Tensor:
    """Assemble all N rows from the online uploads, filling offline rows with ``h_s``.

    ``h_partial`` holds the online rows in ascending client order.
    """
    offline = np.unique(np.asarray(list(offline), dtype=np.intp))
    if online is None:
        online = np.setdiff1d(np.arange(n), offline)
    online = np.asarray(online, dtype=np.intp)
    if np.intersect1d(online, offline).size:
        raise ValueError("substitute_offline: online and offline sets overlap")
    if np.union1d(online, offline).tolist() != list(range(n)):
        raise ValueError("substitute_offline: online and offline sets do not cover all clients")
    if online.size and not np.all(np.diff(online) > 0):
        raise ValueError("substitute_offline: online indices must be ascending")
    mask = np.zeros((n, 1), dtype=bool)
    mask[offline] = True
    if online.size == 0:
        h = layer.h_s
        lead = () if h_partial is None else as_tensor(h_partial).shape[:-2]
        return where(mask, h, Tensor(np.zeros(lead + (n, h.shape[-1]))))
    h_partial = as_tensor(h_partial)
    if h_partial.shape[-2] != online.size:
        raise DimensionError(f"substitute_offline: {h_partial.shape[-2]} rows for {online.size} online clients")
    pos = np.zeros(n, dtype=np.intp)
    pos[online] = np.arange(online.size)
    full = take(h_partial, pos, axis=-2)
    if offline.size == 0:
        return full
    return where(mask, layer.h_s, full)


def cluster_init(z_in0, a: ClusterAssignment) -> Tensor:
    """Per-cluster mean of member rows."""
    counts = np.bincount(a.label, minlength=a.m)
    if np.any(counts == 0):
        raise ValueError("cluster_init: empty cluster")
    return segment_mean(z_in0, np.arange(a.n), a.label, a.m)


@dataclass
class MgmpSublayer:
    w_self: Tensor
    w_nbr: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "MgmpSublayer":
        k = 1.0 / np.sqrt(d_in)
        return cls(Tensor(rng.uniform(-k, k, (d_in, d_out)), requires_grad=True),
                   Tensor(rng.uniform(-k, k, (d_in, d_out)), requires_grad=True),
                   Tensor(np.zeros(d_out), requires_grad=True))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w_self", self.w_self), (f"{prefix}.w_nbr", self.w_nbr), (f"{prefix}.b", self.b)]


def sublayer_forward(s: MgmpSublayer, x_src, x_dst, src, dst) -> Tensor:
    """``ReLU(x_v W_self + mean_{u->v} x_u W_nbr + b)`` for each destination row v."""
    x_src, x_dst = as_tensor(x_src), as_tensor(x_dst)
    agg = segment_mean(x_src, src, dst, x_dst.shape[-2])
    return relu(matmul(x_dst, s.w_self) + matmul(agg, s.w_nbr) + s.b)


@dataclass
class MgmpLayer:
    sub_to_clu: MgmpSublayer
    sub_clu: MgmpSublayer
    sub_cli: MgmpSublayer
    w_l: Tensor  # applied to cluster rows before they are concatenated back
    proj: Tensor  # (2H, H) reconciliation after concatenation

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator) -> "MgmpLayer":
        k = 1.0 / np.sqrt(hidden)
        return cls(
            MgmpSublayer.init(hidden, hidden, rng),
            MgmpSublayer.init(hidden, hidden, rng),
            MgmpSublayer.init(hidden, hidden, rng),
            Tensor(rng.uniform(-k, k, (hidden, hidden)), requires_grad=True),
            Tensor(rng.uniform(-k / np.sqrt(2), k / np.sqrt(2), (2 * hidden, hidden)), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return (self.sub_to_clu.named_parameters(f"{prefix}.sub_to_clu")
                + self.sub_clu.named_parameters(f"{prefix}.sub_clu")
                + self.sub_cli.named_parameters(f"{prefix}.sub_cli")
                + [(f"{prefix}.w_l", self.w_l), (f"{prefix}.proj", self.proj)])


def mgmp_forward(layer: MgmpLayer, z_in, zc_in, g: MultiGraph) -> tuple[Tensor, Tensor]:
    """Client -> cluster, cluster <-> cluster, cluster -> client, client <-> client."""
    z_in, zc_in = as_tensor(z_in), as_tensor(zc_in)
    if z_in.shape[-2] != g.n or zc_in.shape[-2] != g.m:
        raise DimensionError(
            f"mgmp_forward: got {z_in.shape[-2]} client / {zc_in.shape[-2]} cluster rows "
            f"for a graph with {g.n} / {g.m}"
        )
    zc_mid = sublayer_forward(layer.sub_to_clu, z_in, zc_in, g.cross.src, g.cross.dst)
    csrc, cdst = g.cluster_edges()
    zc = sublayer_forward(layer.sub_clu, zc_mid, zc_mid, csrc, cdst)
    back = take(matmul(zc, layer.w_l), g.assignment.label, axis=-2)
    z_star = matmul(concat([z_in, back]), layer.proj)
    src, dst = g.client_edges()
    z = sublayer_forward(layer.sub_cli, z_star, z_star, src, dst)
    return z, zc


@dataclass
class ServerModel:
    mask: MaskNodeLayer
    layers: list[MgmpLayer]
    graph: MultiGraph

    def __post_init__(self):
        if len(self.layers) != 2:
            raise ValueError(f"the server model has exactly 2 MGMP layers, got {len(self.layers)}")

    @classmethod
    def init(cls, graph: MultiGraph, hidden: int = 64, mr: float = 0.25,
             rng: np.random.Generator | int | None = 0) -> "ServerModel":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        mask = MaskNodeLayer(Tensor(np.zeros(hidden), requires_grad=True), mr)
        return cls(mask, [MgmpLayer.init(hidden, rng) for _ in range(2)], graph)

    @property
    def hidden(self) -> int:
        return self.mask.h_s.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("mask.h_s", self.mask.h_s)]
        for k, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layers.{k}")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(f"{n}: shape {arr.shape} does not match {p.data.shape}")
            p.data = arr.copy()
            p.grad = np.zeros_like(p.data)

    def clone(self) -> "ServerModel":
        graph = self.graph
        self.graph = None
        try:
            dup = copy.deepcopy(self)
        finally:
            self.graph = graph
        dup.graph = graph
        return dup


def server_forward(
    sm: ServerModel,
    h,
    mode: str = "train",
    rng: np.random.Generator | int | None = None,
    offline=(),
    v_off=None,
) -> Tensor:
    """Spatial embeddings for all clients.

    ``mode="train"``: ``h`` holds all N rows and MaskNode draws (or is forced
    to ``v_off``). ``mode="infer"``: ``h`` holds only the online rows and the
    ``offline`` rows are filled with ``h_s``.
    """
    g = sm.graph
    if mode == "train":
        h = as_tensor(h)
        if h.shape[-2] != g.n:
            raise DimensionError(f"server_forward: train mode needs all {g.n} rows, got {h.shape[-2]}")
        z0, _ = mask_nodes(sm.mask, h, rng, training=True, v_off=v_off)
    elif mode == "infer":
        z0 = substitute_offline(sm.mask, h, offline, g.n)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    zc = cluster_init(z0, g.assignment)
    z = z0
    for layer in sm.layers:
        out, zc = mgmp_forward(layer, z, zc, g)
        z = out + z
    return z
