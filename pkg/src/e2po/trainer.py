"""End-to-end training loop: flow-matching pretraining, per-iteration
embedding optimization, rollout collection, NFT policy updates, old-policy
refresh and EMA tracking."""

import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Tuple

import torch

from . import diagnostics, embedx, flowcore, nftloss, rewardlab, schedule
from .config import RunConfig
from .errors import NumericalFailure
from .netdiff import DTYPE, FrozenEncoder, VelocityField, pool

log = logging.getLogger("e2po")

PAD_ID, SOS_ID, EOS_ID = 0, 1, 2
SPECIAL_IDS = {PAD_ID, SOS_ID, EOS_ID}

# fixed offsets deriving independent RNG streams from the run seed
_STREAMS = ("world", "model", "pretrain", "prompts", "embed", "rollout", "loss", "eval")


def make_streams(seed: int) -> Dict[str, torch.Generator]:
    gens = {}
    for i, name in enumerate(_STREAMS):
        gens[name] = torch.Generator().manual_seed(seed * 9973 + 17 * i + 1)
    return gens


@dataclass
class World:
    """Everything frozen for a run: the task, the toy text pipeline, and
    the per-mode prompts with their anchor conditions."""

    task: rewardlab.TaskSpec
    encoder: FrozenEncoder
    embedding_table: torch.Tensor
    prompts: List[embedx.PromptSpec]
    anchor_conditions: torch.Tensor      # (M, cond_dim)

    def anchor_context(self, mode: int) -> schedule.ConditionContext:
        return schedule.ConditionContext(vector=self.anchor_conditions[mode], kind="original")


def build_world(cfg: RunConfig, gens) -> World:
    task = rewardlab.TaskSpec(dim=cfg.dim, n_modes=cfg.n_modes,
                              radius=cfg.radius, mode_std=cfg.mode_std)
    # vocabulary: PAD/SOS/EOS plus one object token per mode
    vocab = 3 + cfg.n_modes
    gen = gens["world"]
    # random token directions at a fixed row norm, so the reachable
    # semantic shift under the max-norm delta clip is uniform across tokens
    table = torch.randn(vocab, cfg.embed_dim, generator=gen, dtype=DTYPE)
    table = cfg.embed_scale * table / table.norm(dim=1, keepdim=True)
    seq_len = 4
    encoder = FrozenEncoder(seq_len, cfg.embed_dim, cfg.cond_dim,
                            hidden=cfg.encoder_hidden,
                            seed=cfg.seed * 9973 + 101, gain=cfg.encoder_gain)
    prompts = []
    anchors = []
    for m in range(cfg.n_modes):
        tokens = (SOS_ID, 3 + m, EOS_ID, PAD_ID)
        emb = table[list(tokens)].clone()
        idx = embedx.build_index_set(tokens, SPECIAL_IDS)
        spec = embedx.PromptSpec(tokens=tokens, embeddings=emb, index_set=idx, prompt_id=m)
        prompts.append(spec)
        anchors.append(embedx.anchor_embedding(spec, encoder))
    return World(task=task, encoder=encoder, embedding_table=table,
                 prompts=prompts, anchor_conditions=torch.stack(anchors))


@dataclass
class BufferEntry:
    """One prompt's G*K rollout outcomes for a single iteration."""

    prompt_id: int
    x0: torch.Tensor                 # (G*K, D) generated samples
    raw: torch.Tensor                # (G*K,) raw rewards vs the original prompt
    r: torch.Tensor                  # (G*K,) optimality probabilities
    record: nftloss.GroupRecord
    cond_orig: torch.Tensor          # (cond_dim,) anchor condition
    cond_variants: torch.Tensor      # (K-1, cond_dim); stored for inspection only
    l_emb_final: float


@dataclass
class TrainState:
    policy: VelocityField
    policy_old: VelocityField
    policy_ref: VelocityField
    theta_ema: torch.Tensor
    iteration: int = 0
    buffer: List[BufferEntry] = dc_field(default_factory=list)


@dataclass
class RunResult:
    metrics: List[diagnostics.MetricsRow]
    final_reward: float
    final_mode_coverage: float
    state: Optional[TrainState] = None
    csv_path: Optional[str] = None


def pretrain_flow(cfg: RunConfig, world: World, gen: torch.Generator) -> Tuple[VelocityField, List[float]]:
    """Train the reference velocity field on mixture data with the
    per-mode anchor conditions; returns the field and its loss curve."""
    field = VelocityField(cfg.dim, cfg.cond_dim, seed=cfg.seed * 9973 + 7)
    opt = torch.optim.Adam(field.parameters(), lr=cfg.pretrain_lr)
    centers = world.task.centers
    losses = []
    for it in range(cfg.pretrain_iters):
        modes = torch.randint(0, cfg.n_modes, (cfg.pretrain_batch,), generator=gen)
        x0 = centers[modes] + cfg.mode_std * torch.randn(
            cfg.pretrain_batch, cfg.dim, generator=gen, dtype=DTYPE)
        x1 = torch.randn(cfg.pretrain_batch, cfg.dim, generator=gen, dtype=DTYPE)
        t = torch.rand(cfg.pretrain_batch, generator=gen, dtype=DTYPE)
        xt = (1.0 - t.unsqueeze(1)) * x0 + t.unsqueeze(1) * x1
        cond = world.anchor_conditions[modes]
        v_pred = field(xt, t, cond)
        loss = ((v_pred - (x1 - x0)) ** 2).sum(dim=-1).mean()
        if loss.item() > 1e6:
            raise NumericalFailure("flow pretraining diverged", where=f"iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return field, losses


def fm_loss(field: VelocityField, x0, x1, t, cond) -> torch.Tensor:
    """Flow-matching regression loss on a batch (used by tests and checks)."""
    xt = (1.0 - t.unsqueeze(1)) * x0 + t.unsqueeze(1) * x1
    return ((field(xt, t, cond) - (x1 - x0)) ** 2).sum(dim=-1).mean()


def collect_rollouts(state: TrainState, world: World, prompt_ids, cfg: RunConfig,
                     gens, deltas_by_prompt) -> List[BufferEntry]:
    """Sample G noise seeds x K conditions per prompt under the old
    policy, score against the original prompt, and append to the buffer.

    ``deltas_by_prompt`` maps prompt id -> frozen PerturbationSet (or
    None when K == 1).
    """
    entries = []
    gen = gens["rollout"]
    for pid in prompt_ids:
        spec = world.prompts[pid]
        c_orig = world.anchor_conditions[pid]
        pset = deltas_by_prompt.get(pid)
        if pset is not None and pset.count > 0:
            with torch.no_grad():
                variants = embedx.variant_embeddings(spec, world.encoder, pset.deltas)
            l_emb = pset.loss_history[-1] if pset.loss_history else 0.0
        else:
            variants = torch.zeros(0, cfg.cond_dim, dtype=DTYPE)
            l_emb = 0.0
        K = 1 + variants.shape[0]
        x1 = torch.randn(cfg.G, cfg.dim, generator=gen, dtype=DTYPE)
        x1 = x1.unsqueeze(1).expand(cfg.G, K, cfg.dim).reshape(cfg.G * K, cfg.dim)

        def cond_at(step: int) -> torch.Tensor:
            t = 1.0 - step / cfg.train_sample_steps
            g = 1.0 if cfg.static_schedule else schedule.gamma(t, cfg.rho)
            rows = [c_orig]
            for k in range(K - 1):
                rows.append(g * variants[k] + (1.0 - g) * c_orig)
            cond = torch.stack(rows)                       # (K, Dc)
            return cond.unsqueeze(0).expand(cfg.G, K, -1).reshape(cfg.G * K, -1)

        try:
            x0 = flowcore.sample_batch(state.policy_old, x1, cond_at,
                                       cfg.train_sample_steps,
                                       noise_scale=cfg.noise_scale, rng=gen)
        except NumericalFailure as exc:
            raise NumericalFailure(f"rollout failed for prompt {pid}: {exc}") from exc
        if cfg.reward == "discrete":
            raw = rewardlab.reward_discrete(x0, world.task, pid, cfg.hit_radius)
        else:
            raw = rewardlab.reward_continuous(x0, world.task.centers[pid], cfg.bandwidth)
        r, record = nftloss.optimality_probability(raw, cfg.std_floor)
        entries.append(BufferEntry(prompt_id=pid, x0=x0, raw=raw, r=r,
                                   record=record, cond_orig=c_orig.clone(),
                                   cond_variants=variants.clone(), l_emb_final=l_emb))
    state.buffer.extend(entries)
    return entries


def _nft_batch_loss(state: TrainState, entry: BufferEntry, cfg: RunConfig,
                    gen: torch.Generator) -> torch.Tensor:
    """Loss for one buffer entry, conditioning strictly on the anchor."""
    n = entry.x0.shape[0]
    t = 1.0 - torch.rand(n, generator=gen, dtype=DTYPE)    # in (0, 1]
    eps = torch.randn(n, cfg.dim, generator=gen, dtype=DTYPE)
    x0 = entry.x0
    xt = (1.0 - t.unsqueeze(1)) * x0 + t.unsqueeze(1) * eps
    v_target = eps - x0
    cond = entry.cond_orig.unsqueeze(0).expand(n, -1)
    with torch.no_grad():
        v_old = state.policy_old(xt, t, cond)
        v_ref = state.policy_ref(xt, t, cond)
    v_theta = state.policy(xt, t, cond)
    if cfg.loss_form == "velocity":
        loss = nftloss.nft_loss_velocity(v_old, v_theta, v_target, entry.r, cfg.beta)
    else:
        loss = nftloss.nft_loss_x0(xt, t, v_old, v_theta, x0, entry.r,
                                   cfg.beta, cfg.denom_floor)
    if cfg.beta_kl > 0.0:
        loss = loss + cfg.beta_kl * nftloss.kl_proxy(v_theta, v_ref)
    return loss


def policy_update(state: TrainState, cfg: RunConfig, gens,
                  opt: torch.optim.Optimizer) -> None:
    """One epoch over the buffer: one clipped optimizer step per entry,
    followed by an EMA update."""
    if not state.buffer:
        raise ValueError("policy_update requires a nonempty buffer")
    gen = gens["loss"]
    for entry in state.buffer:
        loss = _nft_batch_loss(state, entry, cfg, gen)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(state.policy.parameters(), cfg.grad_clip)
        opt.step()
        state.theta_ema = ema_update(state.theta_ema, state.policy.param_vector(),
                                     cfg.ema_decay)


def ema_update(theta_ema: torch.Tensor, theta: torch.Tensor, decay: float) -> torch.Tensor:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    return decay * theta_ema + (1.0 - decay) * theta


def eval_policy(field: VelocityField, world: World, cfg: RunConfig,
                gen: torch.Generator) -> Tuple[float, float]:
    """Mean reward and union mode coverage of anchor-conditioned samples
    from the given policy, over all prompts."""
    rewards = []
    all_samples = []
    for pid in range(cfg.n_modes):
        cond = world.anchor_conditions[pid]
        x1 = torch.randn(cfg.eval_samples, cfg.dim, generator=gen, dtype=DTYPE)
        x0 = flowcore.sample_batch(field, x1, lambda s: cond.unsqueeze(0).expand(cfg.eval_samples, -1),
                                   cfg.inference_steps)
        if cfg.reward == "discrete":
            raw = rewardlab.reward_discrete(x0, world.task, pid, cfg.hit_radius)
        else:
            raw = rewardlab.reward_continuous(x0, world.task.centers[pid], cfg.bandwidth)
        rewards.append(raw.mean().item())
        all_samples.append(x0)
    coverage = diagnostics.mode_coverage(torch.cat(all_samples), world.task)
    return sum(rewards) / len(rewards), coverage


def eval_field(state: TrainState, cfg: RunConfig) -> VelocityField:
    """Policy used for evaluation rollouts: the EMA shadow if enabled."""
    if cfg.use_ema:
        shadow = state.policy.clone()
        shadow.load_param_vector(state.theta_ema)
        return shadow
    return state.policy


def run(cfg: RunConfig, out_dir: Optional[str] = None,
        run_name: str = "run") -> RunResult:
    """Full training procedure; deterministic given (config, seed)."""
    cfg.validate()
    gens = make_streams(cfg.seed)
    world = build_world(cfg, gens)
    theta_ref, _ = pretrain_flow(cfg, world, gens["pretrain"])
    policy = theta_ref.clone()
    state = TrainState(policy=policy, policy_old=theta_ref.clone(),
                       policy_ref=theta_ref, theta_ema=policy.param_vector().clone())
    opt = torch.optim.AdamW(state.policy.parameters(), lr=cfg.policy_lr,
                            weight_decay=cfg.weight_decay)
    embed_cfg = embedx.EmbedOptConfig(steps=cfg.t_emb, lr=cfg.embed_lr,
                                      lambda_div=cfg.lambda_div, mu=cfg.mu,
                                      eps=cfg.eps, sigma_init=cfg.sigma_init,
                                      max_norm=cfg.max_norm)
    rows: List[diagnostics.MetricsRow] = []
    zero_flags = deque(maxlen=diagnostics.DEFAULT_WINDOW)
    smoothed_std = None
    cached_deltas: Dict[int, embedx.PerturbationSet] = {}
    t_start = time.monotonic()

    for it in range(cfg.iterations):
        state.iteration = it
        prompt_ids = torch.randint(0, cfg.n_modes, (cfg.prompt_batch,),
                                   generator=gens["prompts"]).tolist()
        deltas_by_prompt: Dict[int, Optional[embedx.PerturbationSet]] = {}
        if cfg.K <= 1:
            for pid in sorted(set(prompt_ids)):
                deltas_by_prompt[pid] = None
        else:
            fresh = []
            for pid in sorted(set(prompt_ids)):
                if cfg.cache_deltas and pid in cached_deltas:
                    deltas_by_prompt[pid] = cached_deltas[pid]
                else:
                    fresh.append(pid)
            if fresh:
                psets = embedx.optimize_embeddings_joint(
                    [world.prompts[pid] for pid in fresh], world.encoder,
                    cfg.K, embed_cfg, gens["embed"])
                for pid, pset in zip(fresh, psets):
                    deltas_by_prompt[pid] = pset
                    if cfg.cache_deltas:
                        cached_deltas[pid] = pset

        entries = collect_rollouts(state, world, prompt_ids, cfg, gens, deltas_by_prompt)
        policy_update(state, cfg, gens, opt)
        state.policy_old.load_param_vector(state.policy.param_vector())

        for e in entries:
            zero_flags.append(e.record.zero_std)
        reward_mean = sum(e.record.mean_raw for e in entries) / len(entries)
        reward_std = sum(e.record.std_raw for e in entries) / len(entries)
        smoothed_std = (reward_std if smoothed_std is None
                        else diagnostics.DEFAULT_ALPHA * reward_std
                        + (1.0 - diagnostics.DEFAULT_ALPHA) * smoothed_std)
        disp = sum(diagnostics.dispersion(e.x0) for e in entries) / len(entries)
        coverage = diagnostics.mode_coverage(torch.cat([e.x0 for e in entries]), world.task)
        l_emb = sum(e.l_emb_final for e in entries) / len(entries)
        zratio = diagnostics.zero_std_ratio(list(zero_flags))
        wallclock = time.monotonic() - t_start if cfg.record_wallclock else 0.0
        rows.append(diagnostics.MetricsRow(
            iteration=it, reward_mean=reward_mean, reward_std=reward_std,
            zero_std_ratio=zratio, smoothed_std=smoothed_std, dispersion=disp,
            mode_coverage=coverage, l_emb_final=l_emb, wallclock_s=wallclock))
        state.buffer.clear()
        if os.environ.get("E2PO_LOG", "info") != "quiet":
            print(f"iter={it} reward_mean={reward_mean:.6g} "
                  f"reward_std={reward_std:.6g} zero_std_ratio={zratio:.6g}")

    final_reward, final_coverage = eval_policy(eval_field(state, cfg), world,
                                               cfg, gens["eval"])
    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"metrics_{run_name}_{cfg.seed}.csv")
        diagnostics.export_csv(rows, csv_path)
    return RunResult(metrics=rows, final_reward=final_reward,
                     final_mode_coverage=final_coverage, state=state,
                     csv_path=csv_path)
