"""Tests for world construction, rollouts, policy updates, and the run loop."""

import pytest
import torch

from e2po import embedx, trainer
from e2po.config import RunConfig
from e2po.nftloss import optimality_probability
from e2po.trainer import (BufferEntry, TrainState, build_world,
                          collect_rollouts, ema_update, eval_field,
                          make_streams, policy_update, pretrain_flow, run)

DT = torch.float64


def tiny_cfg(**kw):
    base = dict(seed=42, iterations=3, G=2, K=1, n_modes=4, prompt_batch=2,
                pretrain_iters=20, train_sample_steps=4, inference_steps=4,
                eval_samples=8, t_emb=10)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="module")
def small_world():
    cfg = tiny_cfg()
    gens = make_streams(cfg.seed)
    return cfg, build_world(cfg, gens)


class TestMakeStreams:
    def test_streams_are_distinct_and_reproducible(self):
        a = make_streams(42)
        b = make_streams(42)
        assert set(a) == {"world", "model", "pretrain", "prompts",
                          "embed", "rollout", "loss", "eval"}
        for name in a:
            x = torch.randn(3, generator=a[name], dtype=DT)
            y = torch.randn(3, generator=b[name], dtype=DT)
            assert torch.equal(x, y)

    def test_different_seeds_differ(self):
        a = make_streams(1)["rollout"]
        b = make_streams(2)["rollout"]
        assert not torch.equal(torch.randn(4, generator=a, dtype=DT),
                               torch.randn(4, generator=b, dtype=DT))


class TestBuildWorld:
    def test_shapes(self, small_world):
        cfg, world = small_world
        assert len(world.prompts) == cfg.n_modes
        assert world.anchor_conditions.shape == (cfg.n_modes, cfg.cond_dim)
        assert world.embedding_table.shape == (3 + cfg.n_modes, cfg.embed_dim)

    def test_token_rows_have_fixed_norm(self, small_world):
        cfg, world = small_world
        norms = world.embedding_table.norm(dim=1)
        assert torch.allclose(norms, torch.full_like(norms, cfg.embed_scale))

    def test_prompts_have_single_content_token(self, small_world):
        _, world = small_world
        for spec in world.prompts:
            assert spec.index_set == (1,)
            assert spec.tokens[0] == trainer.SOS_ID
            assert spec.tokens[2] == trainer.EOS_ID

    def test_anchor_conditions_distinct(self, small_world):
        _, world = small_world
        c = world.anchor_conditions
        u = c / c.norm(dim=1, keepdim=True)
        gram = u @ u.T
        off = gram[~torch.eye(len(c), dtype=torch.bool)]
        assert off.max() < 0.95


def make_state(cfg, world, gens):
    field, _ = pretrain_flow(cfg, world, gens["pretrain"])
    policy = field.clone()
    return TrainState(policy=policy, policy_old=field.clone(), policy_ref=field,
                      theta_ema=policy.param_vector().clone())


class TestCollectRollouts:
    def test_baseline_group_shape(self, small_world):
        cfg, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        entries = collect_rollouts(state, world, [0, 2], cfg, gens, {0: None, 2: None})
        assert len(entries) == 2
        for e in entries:
            assert e.x0.shape == (cfg.G, cfg.dim)
            assert e.raw.shape == (cfg.G,)
            assert torch.all((e.r >= 0.0) & (e.r <= 1.0))
        assert state.buffer == entries

    def test_group_covers_all_variants(self, small_world):
        cfg, world = small_world
        cfg4 = tiny_cfg(K=4)
        gens = make_streams(cfg4.seed)
        state = make_state(cfg4, world, gens)
        pset = embedx.optimize_embeddings(world.prompts[1], world.encoder, 4,
                                          embedx.EmbedOptConfig(steps=5),
                                          gens["embed"])
        entries = collect_rollouts(state, world, [1], cfg4, gens, {1: pset})
        e = entries[0]
        assert e.x0.shape == (cfg4.G * 4, cfg4.dim)
        assert e.cond_variants.shape == (3, cfg4.cond_dim)
        probs, record = optimality_probability(e.raw, cfg4.std_floor)
        assert torch.equal(probs, e.r)
        assert record.zero_std == e.record.zero_std

    def test_rewards_scored_against_anchor_prompt(self, small_world):
        # a degenerate policy stuck at a far-off point earns zero reward
        cfg, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        entries = collect_rollouts(state, world, [3], cfg, gens, {3: None})
        raw = entries[0].raw
        assert torch.all((raw == 0.0) | (raw == 1.0))


class TestPolicyUpdate:
    def test_equal_rewards_leave_policy_unchanged_without_kl(self, small_world):
        cfg, world = small_world
        cfg = tiny_cfg(beta_kl=0.0)
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        before = state.policy.checksum()
        collect_rollouts(state, world, [0], cfg, gens, {0: None})
        entry = state.buffer[0]
        state.buffer[0] = BufferEntry(
            prompt_id=entry.prompt_id, x0=entry.x0, raw=torch.ones_like(entry.raw),
            r=torch.full_like(entry.r, 0.5), record=entry.record,
            cond_orig=entry.cond_orig, cond_variants=entry.cond_variants,
            l_emb_final=entry.l_emb_final)
        opt = torch.optim.AdamW(state.policy.parameters(), lr=cfg.policy_lr,
                                weight_decay=0.0)
        policy_update(state, cfg, gens, opt)
        assert state.policy.checksum() == before

    def test_mixed_rewards_move_policy(self, small_world):
        cfg, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        before = state.policy.checksum()
        collect_rollouts(state, world, [0], cfg, gens, {0: None})
        entry = state.buffer[0]
        raw = torch.tensor([1.0, 0.0], dtype=DT)
        r, record = optimality_probability(raw, cfg.std_floor)
        state.buffer[0] = BufferEntry(
            prompt_id=entry.prompt_id, x0=entry.x0, raw=raw, r=r, record=record,
            cond_orig=entry.cond_orig, cond_variants=entry.cond_variants,
            l_emb_final=entry.l_emb_final)
        opt = torch.optim.AdamW(state.policy.parameters(), lr=cfg.policy_lr,
                                weight_decay=cfg.weight_decay)
        policy_update(state, cfg, gens, opt)
        assert state.policy.checksum() != before

    def test_empty_buffer_rejected(self, small_world):
        cfg, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        opt = torch.optim.AdamW(state.policy.parameters(), lr=cfg.policy_lr)
        with pytest.raises(ValueError):
            policy_update(state, cfg, gens, opt)


class TestDecoupling:
    def test_variant_conditions_do_not_enter_the_update(self, small_world):
        cfg = tiny_cfg(K=4)
        _, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        pset = embedx.optimize_embeddings(world.prompts[0], world.encoder, 4,
                                          embedx.EmbedOptConfig(steps=5),
                                          gens["embed"])
        collect_rollouts(state, world, [0], cfg, gens, {0: pset})

        def grad_after_mutation(mutate):
            probe = TrainState(policy=state.policy.clone(),
                               policy_old=state.policy_old.clone(),
                               policy_ref=state.policy_ref.clone(),
                               theta_ema=state.theta_ema.clone())
            e = state.buffer[0]
            variants = e.cond_variants.clone()
            if mutate:
                variants += 123.456
            probe.buffer.append(BufferEntry(
                prompt_id=e.prompt_id, x0=e.x0.clone(), raw=e.raw.clone(),
                r=e.r.clone(), record=e.record, cond_orig=e.cond_orig.clone(),
                cond_variants=variants, l_emb_final=e.l_emb_final))
            loss = trainer._nft_batch_loss(
                probe, probe.buffer[0], cfg,
                torch.Generator().manual_seed(555))
            loss.backward()
            return torch.cat([p.grad.reshape(-1)
                              for p in probe.policy.parameters()
                              if p.grad is not None])

        g_ref = grad_after_mutation(False)
        g_mut = grad_after_mutation(True)
        assert torch.equal(g_ref, g_mut)


class TestEmaUpdate:
    def test_hand_value(self):
        ema = torch.tensor([1.0, 2.0], dtype=DT)
        theta = torch.tensor([3.0, 4.0], dtype=DT)
        out = ema_update(ema, theta, 0.9)
        assert torch.allclose(out, torch.tensor([1.2, 2.2], dtype=DT))

    def test_decay_zero_tracks_theta(self):
        ema = torch.zeros(3, dtype=DT)
        theta = torch.ones(3, dtype=DT)
        assert torch.equal(ema_update(ema, theta, 0.0), theta)

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            ema_update(torch.zeros(1, dtype=DT), torch.zeros(1, dtype=DT), 1.0)


class TestRun:
    def test_metrics_row_per_iteration(self, tmp_path):
        cfg = tiny_cfg(iterations=4)
        res = run(cfg, str(tmp_path), "t")
        assert len(res.metrics) == 4
        assert [m.iteration for m in res.metrics] == [0, 1, 2, 3]
        assert res.csv_path is not None

    def test_zero_iterations_still_evaluates(self, tmp_path):
        cfg = tiny_cfg(iterations=0)
        res = run(cfg, str(tmp_path), "t0")
        assert res.metrics == []
        assert 0.0 <= res.final_reward <= 1.0

    def test_buffer_cleared_between_iterations(self, tmp_path):
        cfg = tiny_cfg(iterations=2)
        res = run(cfg, str(tmp_path), "tb")
        assert res.state.buffer == []

    def test_deterministic_csv(self, tmp_path):
        cfg = tiny_cfg(iterations=3, K=2, t_emb=5)
        a = run(cfg, str(tmp_path / "a"), "d")
        b = run(cfg, str(tmp_path / "b"), "d")
        with open(a.csv_path, "rb") as fa, open(b.csv_path, "rb") as fb:
            assert fa.read() == fb.read()

    def test_wallclock_zero_by_default(self, tmp_path):
        cfg = tiny_cfg(iterations=2)
        res = run(cfg, str(tmp_path), "w")
        assert all(m.wallclock_s == 0.0 for m in res.metrics)


class TestEvalField:
    def test_uses_ema_weights_when_enabled(self, small_world):
        cfg, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        state.theta_ema = state.policy.param_vector() + 1.0
        field = eval_field(state, tiny_cfg(use_ema=True))
        assert torch.allclose(field.param_vector(),
                              state.policy.param_vector() + 1.0)

    def test_uses_raw_weights_when_disabled(self, small_world):
        cfg, world = small_world
        gens = make_streams(cfg.seed)
        state = make_state(cfg, world, gens)
        state.theta_ema = state.policy.param_vector() + 1.0
        field = eval_field(state, tiny_cfg(use_ema=False))
        assert field.checksum() == state.policy.checksum()
