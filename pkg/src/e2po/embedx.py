"""Embedding-perturbed exploration: content index sets, learnable
perturbation tensors, and the diversity/anchor optimization that shapes
them into semantically distinct but anchored condition variants."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import torch

from .errors import NoContentError, NumericalFailure
from .netdiff import FrozenEncoder, pool

DTYPE = torch.float64
COS_NORM_FLOOR = 1e-12


@dataclass
class PromptSpec:
    """A tokenized prompt with its static embedding slice and the ordered
    index set of optimizable content positions."""

    tokens: Tuple[int, ...]
    embeddings: torch.Tensor           # (S, d), never mutated
    index_set: Tuple[int, ...]
    prompt_id: int = 0

    @property
    def content_length(self) -> int:
        return len(self.index_set)

    @property
    def seq_len(self) -> int:
        return len(self.tokens)


@dataclass
class PerturbationSet:
    """The K-1 learnable perturbation tensors plus their constraints.

    ``deltas`` is stored stacked as (K-1, L, d); rows are clipped to
    ``max_norm`` after every optimizer step and immutable once frozen.
    """

    deltas: torch.Tensor
    sigma_init: float
    max_norm: float
    frozen: bool = False
    loss_history: List[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.deltas.shape[0]

    def clip_rows_(self):
        if self.frozen:
            raise ValueError("perturbation set is frozen")
        with torch.no_grad():
            norms = self.deltas.norm(dim=-1, keepdim=True)
            scale = (self.max_norm / norms.clamp_min(COS_NORM_FLOOR)).clamp(max=1.0)
            self.deltas.mul_(scale)

    def freeze(self) -> "PerturbationSet":
        self.deltas = self.deltas.detach().clone()
        self.deltas.requires_grad_(False)
        self.frozen = True
        return self


def build_index_set(tokens: Sequence[int], special_ids: Set[int]) -> Tuple[int, ...]:
    """Positions of content tokens: everything whose id is not a special
    (boundary or padding) id, in order."""
    idx = tuple(i for i, tok in enumerate(tokens) if tok not in special_ids)
    if not idx:
        raise NoContentError(f"prompt {list(tokens)} has no optimizable content tokens")
    return idx


def init_perturbations(K: int, L: int, d: int, sigma_init: float,
                       rng: torch.Generator, max_norm: float = 0.05) -> PerturbationSet:
    """K-1 tensors with i.i.d. N(0, sigma_init^2) entries."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if sigma_init <= 0:
        raise ValueError(f"sigma_init must be > 0, got {sigma_init}")
    deltas = sigma_init * torch.randn(K - 1, L, d, generator=rng, dtype=DTYPE)
    return PerturbationSet(deltas=deltas, sigma_init=sigma_init, max_norm=max_norm)


def apply_perturbation(spec: PromptSpec, delta: torch.Tensor) -> torch.Tensor:
    """E with delta row j added at content position index_set[j]; other
    rows untouched and the input left unmodified."""
    if delta.shape[0] != spec.content_length or delta.shape[1] != spec.embeddings.shape[1]:
        raise ValueError(
            f"delta shape {tuple(delta.shape)} incompatible with content length "
            f"{spec.content_length} and dim {spec.embeddings.shape[1]}")
    perturbed = spec.embeddings.clone()
    idx = torch.tensor(spec.index_set, dtype=torch.long)
    perturbed = perturbed.index_add(0, idx, delta)
    return perturbed


def _unit(vectors: torch.Tensor) -> torch.Tensor:
    norms = vectors.norm(dim=-1, keepdim=True)
    if (norms <= 0).any():
        raise ValueError("zero-norm vector in cosine computation")
    return vectors / norms.clamp_min(COS_NORM_FLOOR)


def diversity_loss(embeddings: torch.Tensor) -> torch.Tensor:
    """Mean pairwise cosine similarity over the K variants (ordered pairs,
    self-pairs excluded): value in [-1, 1]."""
    if embeddings.shape[0] < 2:
        raise ValueError("diversity loss needs at least 2 embeddings")
    u = _unit(embeddings)
    K = u.shape[0]
    cos = u @ u.T
    return (cos.sum() - cos.diagonal().sum()) / (K * (K - 1))


def anchor_loss(embeddings: torch.Tensor, anchor: torch.Tensor,
                mu: float, eps: float) -> torch.Tensor:
    """Sum of hinge penalties max(0, |cos(e_k, anchor) - mu| - eps)."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    u = _unit(embeddings)
    a = _unit(anchor.unsqueeze(0)).squeeze(0)
    cos = u @ a
    return torch.clamp((cos - mu).abs() - eps, min=0.0).sum()


@dataclass
class EmbedOptConfig:
    steps: int = 300
    lr: float = 1e-3
    lambda_div: float = 50.0
    mu: float = 0.80
    eps: float = 0.01
    sigma_init: float = 1e-4
    max_norm: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)


def variant_embeddings(spec: PromptSpec, enc: FrozenEncoder,
                       deltas: torch.Tensor) -> torch.Tensor:
    """Pooled global embeddings of all perturbed variants, batched: (K-1, d')."""
    n = deltas.shape[0]
    tilde = spec.embeddings.unsqueeze(0).expand(n, -1, -1).clone()
    idx = torch.tensor(spec.index_set, dtype=torch.long)
    tilde[:, idx, :] = tilde[:, idx, :] + deltas
    return pool(enc(tilde), spec.index_set)


def anchor_embedding(spec: PromptSpec, enc: FrozenEncoder) -> torch.Tensor:
    with torch.no_grad():
        return pool(enc(spec.embeddings), spec.index_set)


def optimize_embeddings(spec: PromptSpec, enc: FrozenEncoder, K: int,
                        cfg: EmbedOptConfig, rng: torch.Generator) -> PerturbationSet:
    """Optimize the K-1 perturbations under
    L_emb = lambda_div * L_div + L_anc, clipping each delta row to
    max_norm after every step; returns the frozen set with its loss
    trajectory recorded."""
    pset = init_perturbations(K, spec.content_length, spec.embeddings.shape[1],
                              cfg.sigma_init, rng, max_norm=cfg.max_norm)
    e_anc = anchor_embedding(spec, enc)
    pset.deltas.requires_grad_(True)
    opt = torch.optim.Adam([pset.deltas], lr=cfg.lr, betas=cfg.betas)
    for step in range(cfg.steps):
        opt.zero_grad()
        e_k = variant_embeddings(spec, enc, pset.deltas)
        loss = anchor_loss(e_k, e_anc, cfg.mu, cfg.eps)
        if pset.count >= 2:
            loss = loss + cfg.lambda_div * diversity_loss(e_k)
        if not torch.isfinite(loss):
            raise NumericalFailure("embedding objective became non-finite", where=f"step {step}")
        loss.backward()
        opt.step()
        pset.clip_rows_()
        pset.loss_history.append(loss.item())
    return pset.freeze()


def optimize_embeddings_joint(specs: Sequence[PromptSpec], enc: FrozenEncoder,
                              K: int, cfg: EmbedOptConfig,
                              rng: torch.Generator) -> List[PerturbationSet]:
    """Optimize perturbations for several same-shape prompts in one Adam
    loop. The total objective is the sum of the per-prompt objectives;
    since the prompts share no parameters and Adam updates elementwise,
    each prompt follows the same trajectory it would follow alone. This
    exists because running one 300-step loop per prompt per iteration is
    the dominant cost of training."""
    if not specs:
        raise ValueError("optimize_embeddings_joint needs at least one prompt")
    L = specs[0].content_length
    d = specs[0].embeddings.shape[1]
    for spec in specs:
        if spec.content_length != L or spec.embeddings.shape != specs[0].embeddings.shape:
            raise ValueError("joint optimization requires same-shape prompts")
    P = len(specs)
    psets = [init_perturbations(K, L, d, cfg.sigma_init, rng, max_norm=cfg.max_norm)
             for _ in specs]
    deltas = torch.stack([p.deltas for p in psets])           # (P, K-1, L, d)
    deltas.requires_grad_(True)
    base = torch.stack([s.embeddings for s in specs])          # (P, S, d)
    idx = torch.tensor(specs[0].index_set, dtype=torch.long)
    with torch.no_grad():
        anchors = _unit(pool(enc(base), specs[0].index_set))   # (P, d')

    opt = torch.optim.Adam([deltas], lr=cfg.lr, betas=cfg.betas)
    histories = [[] for _ in specs]
    for step in range(cfg.steps):
        opt.zero_grad()
        tilde = base.unsqueeze(1).expand(P, K - 1, -1, -1).clone()
        tilde[:, :, idx, :] = tilde[:, :, idx, :] + deltas
        feats = enc(tilde.reshape(P * (K - 1), -1, d))
        e_k = feats[:, idx, :].mean(dim=1).reshape(P, K - 1, -1)
        u = _unit(e_k)
        cos_anchor = torch.einsum("pkd,pd->pk", u, anchors)
        anc = torch.clamp((cos_anchor - cfg.mu).abs() - cfg.eps, min=0.0).sum(dim=1)
        per_prompt = anc
        if K - 1 >= 2:
            gram = torch.einsum("pkd,pjd->pkj", u, u)
            div = ((gram.sum(dim=(1, 2)) - gram.diagonal(dim1=1, dim2=2).sum(dim=1))
                   / ((K - 1) * (K - 2)))
            per_prompt = per_prompt + cfg.lambda_div * div
        loss = per_prompt.sum()
        if not torch.isfinite(loss):
            raise NumericalFailure("embedding objective became non-finite", where=f"step {step}")
        loss.backward()
        opt.step()
        with torch.no_grad():
            norms = deltas.norm(dim=-1, keepdim=True)
            deltas.mul_((cfg.max_norm / norms.clamp_min(COS_NORM_FLOOR)).clamp(max=1.0))
        vals = per_prompt.detach()
        for p in range(P):
            histories[p].append(vals[p].item())
    for p, pset in enumerate(psets):
        pset.deltas = deltas[p].detach().clone()
        pset.loss_history = histories[p]
        pset.frozen = True
    return psets
