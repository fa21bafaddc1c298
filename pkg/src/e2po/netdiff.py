"""Trainable velocity field, the frozen toy text encoder, and the gradient
plumbing (flat parameter vectors, checkpoints, finite-difference helpers)."""

import hashlib
import json
import math
from typing import Callable, Optional

import torch
import torch.nn as nn

from .errors import NumericalFailure

CKPT_HEADER = b"E2PO-CKPT-v1\n"
DTYPE = torch.float64


def _init_linear(layer: nn.Linear, gen: torch.Generator, zero: bool = False):
    if zero:
        nn.init.zeros_(layer.weight)
        nn.init.zeros_(layer.bias)
        return
    # scaled-uniform fan-in, same family as the torch default but with an
    # explicit generator so construction is seed-reproducible
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


def time_features(t, n_features: int = 8, dtype=DTYPE) -> torch.Tensor:
    """Sinusoidal embedding of the scalar time: sin/cos at dyadic frequencies."""
    if n_features % 2 != 0:
        raise ValueError("n_features must be even")
    if not torch.is_tensor(t):
        t = torch.tensor(float(t), dtype=dtype)
    t = t.reshape(-1, 1).to(dtype)
    freqs = torch.tensor([2.0**i for i in range(n_features // 2)], dtype=dtype)
    ang = 2.0 * math.pi * t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class VelocityField(nn.Module):
    """Small MLP mapping (x_t, time features, condition) -> velocity.

    Three tanh hidden layers (smooth, so finite-difference checks are
    clean); the output layer starts at zero so the untrained field is the
    zero map.
    """

    def __init__(self, data_dim: int, cond_dim: int, hidden: int = 64,
                 n_time_features: int = 8, seed: int = 0):
        super().__init__()
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.n_time_features = n_time_features
        gen = torch.Generator().manual_seed(seed)
        in_dim = data_dim + n_time_features + cond_dim
        self.fc1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.fc3 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, data_dim, dtype=DTYPE)
        for layer in (self.fc1, self.fc2, self.fc3):
            _init_linear(layer, gen)
        _init_linear(self.out, gen, zero=True)

    def forward(self, xt: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        squeeze = xt.dim() == 1
        if squeeze:
            xt = xt.unsqueeze(0)
        if not torch.isfinite(xt).all():
            raise ValueError("non-finite state input to velocity field")
        n = xt.shape[0]
        tf = time_features(t, self.n_time_features, dtype=xt.dtype)
        if tf.shape[0] == 1 and n > 1:
            tf = tf.expand(n, -1)
        if cond.dim() == 1:
            cond = cond.unsqueeze(0).expand(n, -1)
        h = torch.cat([xt, tf, cond], dim=-1)
        h = torch.tanh(self.fc1(h))
        h = torch.tanh(self.fc2(h))
        h = torch.tanh(self.fc3(h))
        v = self.out(h)
        return v.squeeze(0) if squeeze else v

    # -- flat parameter-vector view used by checkpoints and grad checks --

    def param_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def load_param_vector(self, vec: torch.Tensor):
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(vec[offset:offset + n].reshape(p.shape))
                offset += n
        if offset != vec.numel():
            raise ValueError(f"parameter vector length {vec.numel()} != model size {offset}")

    def checksum(self) -> str:
        return hashlib.sha256(self.param_vector().numpy().tobytes()).hexdigest()

    def clone(self) -> "VelocityField":
        other = VelocityField(self.data_dim, self.cond_dim,
                              hidden=self.fc1.out_features,
                              n_time_features=self.n_time_features)
        other.load_param_vector(self.param_vector())
        return other


def grad_params(field: nn.Module, scalar_loss: Callable[[nn.Module], torch.Tensor]) -> torch.Tensor:
    """Gradient of ``scalar_loss(field)`` w.r.t. the flat parameter vector."""
    params = [p for p in field.parameters() if p.requires_grad]
    loss = scalar_loss(field)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append(torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1))
    g = torch.cat(flat)
    if not torch.isfinite(g).all():
        idx = int(torch.nonzero(~torch.isfinite(g))[0])
        raise NumericalFailure("non-finite gradient", where=f"parameter index {idx}")
    return g


def finite_difference_grad(f: Callable[[torch.Tensor], float], x: torch.Tensor,
                           indices, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function at selected coordinates."""
    out = torch.zeros(len(indices), dtype=DTYPE)
    for j, i in enumerate(indices):
        xp = x.clone(); xp[i] += h
        xm = x.clone(); xm[i] -= h
        out[j] = (f(xp) - f(xm)) / (2.0 * h)
    return out


class FrozenEncoder(nn.Module):
    """Fixed random text encoder: a token-wise affine+tanh layer followed
    by a mixing layer across positions. Gradients flow to the input
    embeddings but never to the weights.

    Weight matrices are square orthogonal so the map is near-isotropic:
    the semantic shift produced by a bounded embedding perturbation is
    then roughly uniform across tokens, which keeps the reachable
    anchor-cosine range stable across prompts and seeds. ``gain`` sets the
    tanh preactivation scale (the strength of the nonlinearity) and the
    output is rescaled by 1/gain so feature magnitudes track embedding
    magnitudes.
    """

    def __init__(self, seq_len: int, in_dim: int, out_dim: int,
                 hidden: int = 32, seed: int = 0, gain: float = 1.0):
        super().__init__()
        if out_dim != in_dim or hidden != in_dim:
            raise ValueError("encoder uses square layers: need hidden == out_dim == in_dim")
        self.seq_len = seq_len
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.gain = gain
        gen = torch.Generator().manual_seed(seed)

        def ortho(n):
            q, r = torch.linalg.qr(torch.randn(n, n, generator=gen, dtype=DTYPE))
            return q * torch.sign(torch.diagonal(r))

        self.w_token = nn.Parameter(ortho(in_dim), requires_grad=False)
        self.b_token = nn.Parameter(torch.zeros(hidden, dtype=DTYPE), requires_grad=False)
        self.w_mix = nn.Parameter(
            torch.eye(seq_len, dtype=DTYPE)
            + 0.1 / math.sqrt(seq_len) * torch.randn(seq_len, seq_len, generator=gen, dtype=DTYPE),
            requires_grad=False)
        self.w_out = nn.Parameter(ortho(hidden), requires_grad=False)
        self.b_out = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE), requires_grad=False)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[-1] != self.in_dim:
            raise ValueError(f"expected embedding dim {self.in_dim}, got {embeddings.shape[-1]}")
        if embeddings.shape[-2] != self.seq_len:
            raise ValueError(f"expected sequence length {self.seq_len}, got {embeddings.shape[-2]}")
        h = torch.tanh(self.gain * (embeddings @ self.w_token) + self.b_token)
        h = self.w_mix @ h
        return (h @ self.w_out + self.b_out) / self.gain

    def checksum(self) -> str:
        blob = b"".join(p.detach().numpy().tobytes() for p in self.parameters())
        return hashlib.sha256(blob).hexdigest()


def pool(features: torch.Tensor, index_set) -> torch.Tensor:
    """Mean of the feature rows at the content indices."""
    idx = list(index_set)
    if not idx:
        raise ValueError("index_set must be nonempty")
    if max(idx) >= features.shape[-2]:
        raise ValueError(f"index {max(idx)} out of range for {features.shape[-2]} rows")
    return features[..., idx, :].mean(dim=-2)


def save_checkpoint(field: VelocityField, path):
    """Versioned flat-vector checkpoint: header line, JSON manifest line,
    then the raw little-endian float64 parameters."""
    manifest = {
        "data_dim": field.data_dim,
        "cond_dim": field.cond_dim,
        "hidden": field.fc1.out_features,
        "n_time_features": field.n_time_features,
        "shapes": [list(p.shape) for p in field.parameters()],
    }
    vec = field.param_vector().to(torch.float64).numpy()
    if vec.dtype.byteorder == ">":
        vec = vec.byteswap().newbyteorder()
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER)
        fh.write(json.dumps(manifest).encode() + b"\n")
        fh.write(vec.tobytes())


def load_checkpoint(path) -> VelocityField:
    import numpy as np

    with open(path, "rb") as fh:
        header = fh.readline()
        if header != CKPT_HEADER:
            raise ValueError(f"bad checkpoint header {header!r} in {path}")
        manifest = json.loads(fh.readline().decode())
        raw = fh.read()
    vec = torch.from_numpy(np.frombuffer(raw, dtype="<f8").copy())
    field = VelocityField(manifest["data_dim"], manifest["cond_dim"],
                          hidden=manifest["hidden"],
                          n_time_features=manifest["n_time_features"])
    field.load_param_vector(vec)
    return field
