"""Client-side model: GRU encoder and the online/offline sub-decoders.

Weights are stored input-major, so an affine map reads ``x @ W + b``.
All functions accept leading batch axes.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamState, adam_step
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    backward,
    concat,
    matmul,
    _unbroadcast,
    logistic,
    make_op,
    mse,
    select,
    stack,
)


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Linear":
        return cls(_uniform(rng, (d_in, d_out), 1.0 / np.sqrt(d_in)), _zeros((d_out,)))

    def __call__(self, x) -> Tensor:
        return matmul(x, self.w) + self.b

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


@dataclass
class GruCell:
    w_z: Tensor
    u_z: Tensor
    w_r: Tensor
    u_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator) -> "GruCell":
        k = 1.0 / np.sqrt(hidden)
        return cls(
            w_z=_uniform(rng, (d_in, hidden), k), u_z=_uniform(rng, (hidden, hidden), k),
            w_r=_uniform(rng, (d_in, hidden), k), u_r=_uniform(rng, (hidden, hidden), k),
            w_h=_uniform(rng, (d_in, hidden), k), u_h=_uniform(rng, (hidden, hidden), k),
            b_z=_zeros((hidden,)), b_r=_zeros((hidden,)), b_h=_zeros((hidden,)),
        )

    @property
    def d_in(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden(self) -> int:
        return self.u_z.shape[0]

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        names = ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h", "b_z", "b_r", "b_h")
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


def gru_step(cell: GruCell, x, h) -> Tensor:
    """One GRU update, recorded as a single tape node.

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    c = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * c.
    """
    x, h = as_tensor(x), as_tensor(h)
    if x.shape[-1] != cell.d_in or h.shape[-1] != cell.hidden:
        raise DimensionError(
            f"gru_step: expected input dim {cell.d_in} and hidden {cell.hidden}, "
            f"got {x.shape} and {h.shape}"
        )
    xd, hd = x.data, h.data
    wz, uz, wr, ur, wh, uh = (cell.w_z.data, cell.u_z.data, cell.w_r.data,
                              cell.u_r.data, cell.w_h.data, cell.u_h.data)
    z = logistic(xd @ wz + hd @ uz + cell.b_z.data)
    r = logistic(xd @ wr + hd @ ur + cell.b_r.data)
    rh = r * hd
    c = np.tanh(xd @ wh + rh @ uh + cell.b_h.data)
    out = (1.0 - z) * hd + z * c
    parents = (x, h, cell.w_z, cell.u_z, cell.w_r, cell.u_r, cell.w_h, cell.u_h, cell.b_z, cell.b_r, cell.b_h)
    need = [p.requires_grad for p in parents]

    def backward(g):
        dz = g * (c - hd)
        dc = g * z
        dh = g * (1.0 - z)
        da_c = dc * (1.0 - c * c)
        drh = da_c @ uh.T
        dh = dh + drh * r
        da_r = drh * hd * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dh = dh + da_r @ ur.T + da_z @ uz.T
        dx = (da_z @ wz.T + da_r @ wr.T + da_c @ wh.T) if need[0] else None
        lead = out.shape[:-1]
        x2 = np.broadcast_to(xd, lead + xd.shape[-1:]).reshape(-1, xd.shape[-1])
        h2 = np.broadcast_to(hd, out.shape).reshape(-1, out.shape[-1])
        rh2 = rh.reshape(-1, out.shape[-1])
        az2, ar2, ac2 = (a.reshape(-1, a.shape[-1]) for a in (da_z, da_r, da_c))

        def wgrad(k, left, right):
            return left.T @ right if need[k] else None

        return (
            None if dx is None else _unbroadcast(dx, xd.shape), _unbroadcast(dh, hd.shape),
            wgrad(2, x2, az2), wgrad(3, h2, az2),
            wgrad(4, x2, ar2), wgrad(5, h2, ar2),
            wgrad(6, x2, ac2), wgrad(7, rh2, ac2),
            az2.sum(axis=0) if need[8] else None,
            ar2.sum(axis=0) if need[9] else None,
            ac2.sum(axis=0) if need[10] else None,
        )

    return make_op(out, parents, backward, "gru")


@dataclass
class SubDecoder:
    cell: GruCell
    proj: Linear

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator) -> "SubDecoder":
        return cls(GruCell.init(d, hidden, rng), Linear.init(hidden, d, rng))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return self.cell.named_parameters(f"{prefix}.cell") + self.proj.named_parameters(f"{prefix}.proj")


@dataclass
class ClientModel:
    encoder: list[GruCell]
    fuse: Linear
    dec_on: SubDecoder
    dec_off: SubDecoder

    @classmethod
    def init(cls, d: int = 1, hidden: int = 64, spatial: int = 64, layers: int = 1,
             rng: np.random.Generator | int | None = 0) -> "ClientModel":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        enc = [GruCell.init(d if k == 0 else hidden, hidden, rng) for k in range(layers)]
        return cls(
            encoder=enc,
            fuse=Linear.init(hidden + spatial, hidden, rng),
            dec_on=SubDecoder.init(d, hidden, rng),
            dec_off=SubDecoder.init(d, hidden, rng),
        )

    @property
    def hidden(self) -> int:
        return self.encoder[-1].hidden

    @property
    def d(self) -> int:
        return self.encoder[0].d_in

    @property
    def spatial(self) -> int:
        return self.fuse.w.shape[0] - self.hidden

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for k, cell in enumerate(self.encoder):
            out += cell.named_parameters(f"encoder.{k}")
        out += self.fuse.named_parameters("fuse")
        out += self.dec_on.named_parameters("dec_on")
        out += self.dec_off.named_parameters("dec_off")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def online_parameters(self) -> list[Tensor]:
        """Encoder, fuse map and online sub-decoder: the parameters trained on L_on."""
        return [p for n, p in self.named_parameters() if not n.startswith("dec_off.")]

    def offline_parameters(self) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if n.startswith("dec_off.")]

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

    def clone(self) -> "ClientModel":
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def encode(m: ClientModel, x) -> Tensor:
    """Fold the encoder stack over the S steps of ``x`` (shape ``(..., S, D)``)."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"encode: need at least one timestep, got shape {x.shape}")
    lead = x.shape[:-2]
    hs = [Tensor(np.zeros(lead + (cell.hidden,))) for cell in m.encoder]
    for t in range(x.shape[-2]):
        inp = select(x, t, axis=-2)
        for k, cell in enumerate(m.encoder):
            hs[k] = gru_step(cell, inp, hs[k])
            inp = hs[k]
    return hs[-1]


def _rollout(dec: SubDecoder, h0: Tensor, last_obs, horizon: int) -> Tensor:
    if horizon < 1:
        raise DimensionError(f"decode: horizon must be >= 1, got {horizon}")
    hid, inp = h0, as_tensor(last_obs)
    outs = []
    for _ in range(horizon):
        hid = gru_step(dec.cell, inp, hid)
        inp = dec.proj(hid)
        outs.append(inp)
    return stack(outs, axis=-2)


def decode_online(m: ClientModel, h, s, last_obs, horizon: int) -> Tensor:
    """Autoregressive forecast seeded by ``fuse([h, s])``; returns ``(..., T, D)``."""
    h, s = as_tensor(h), as_tensor(s)
    if s.shape[-1] != m.spatial:
        raise DimensionError(f"decode_online: spatial embedding dim {s.shape[-1]} != {m.spatial}")
    return _rollout(m.dec_on, m.fuse(concat([h, s])), last_obs, horizon)


def decode_offline(m: ClientModel, h, last_obs, horizon: int) -> Tensor:
    """Autoregressive forecast seeded by ``h`` alone."""
    h = as_tensor(h)
    if h.shape[-1] != m.dec_off.cell.hidden:
        raise DimensionError(f"decode_offline: hidden dim {h.shape[-1]} != {m.dec_off.cell.hidden}")
    return _rollout(m.dec_off, h, last_obs, horizon)


def loss_on(pred_on, y) -> Tensor:
    return mse(pred_on, y)


def loss_off(pred_off, pred_on_detached) -> Tensor:
    """Distillation loss pulling the offline forecast towards the online one."""
    target = as_tensor(pred_on_detached)
    if target.requires_grad:
        raise ValueError("loss_off: the online prediction must be detached")
    return mse(pred_off, target)


@dataclass
class WindowSample:
    x: np.ndarray  # (S, D) history
    y: np.ndarray  # (T, D) target
    client: int
    t: int  # index of the last history step


@dataclass
class WindowBatch:
    """Several windows of one client stacked along a leading axis."""

    x: np.ndarray  # (B, S, D)
    y: np.ndarray  # (B, T, D)
    client: int = 0
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    def __post_init__(self):
        if self.x.ndim != 3 or self.y.ndim != 3 or self.x.shape[0] != self.y.shape[0]:
            raise DimensionError(f"WindowBatch: inconsistent shapes {self.x.shape}, {self.y.shape}")
        if self.t.size == 0:
            self.t = np.arange(self.x.shape[0], dtype=np.intp)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    @property
    def last_obs(self) -> np.ndarray:
        return self.x[:, -1, :]

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.x[idx], self.y[idx], self.client, self.t[idx])

    @classmethod
    def from_samples(cls, samples: list[WindowSample]) -> "WindowBatch":
        if not samples:
            raise ValueError("empty batch")
        return cls(np.stack([s.x for s in samples]), np.stack([s.y for s in samples]),
                   samples[0].client, np.array([s.t for s in samples], dtype=np.intp))

    def samples(self) -> list[WindowSample]:
        return [WindowSample(self.x[k], self.y[k], self.client, int(self.t[k])) for k in range(len(self))]


def local_train_round(
    m: ClientModel,
    batch: WindowBatch,
    s,
    opt_on: AdamState,
    opt_off: AdamState,
) -> tuple[float, float]:
    """One two-phase update on ``batch`` with spatial embeddings ``s`` held fixed.

    Phase 1 steps the encoder, fuse map and online sub-decoder on L_on while
    the offline sub-decoder is untouched. Phase 2 steps only the offline
    sub-decoder on L_off, using the encoder output and online forecast of the
    same forward pass as constants.
    """
    if len(batch) == 0:
        raise ValueError("local_train_round: empty batch")
    s = as_tensor(s).detach()
    h = encode(m, batch.x)
    pred_on = decode_online(m, h, s, batch.last_obs, batch.horizon)
    l_on = loss_on(pred_on, batch.y)
    backward(l_on)
    adam_step(opt_on, m.online_parameters())

    pred_off = decode_offline(m, h.detach(), batch.last_obs, batch.horizon)
    l_off = loss_off(pred_off, pred_on.detach())
    backward(l_off)
    adam_step(opt_off, m.offline_parameters())
    return l_on.item(), l_off.item()


def make_optimizers(m: ClientModel, lr: float) -> tuple[AdamState, AdamState]:
    return (AdamState.for_params(m.online_parameters(), lr=lr),
            AdamState.for_params(m.offline_parameters(), lr=lr))
