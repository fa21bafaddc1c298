"""Experiment runner: pretrain / train / compare / diagnose subcommands."""

import argparse

import logging
import os
import sys

from . import diagnostics, netdiff, trainer
from .config import RunConfig, parse_config, parse_sweep
from .errors import ConfigError, E2POError

log = logging.getLogger("e2po")

COMPARE_HEADER = "G,K,seed,final_reward,final_zero_std_ratio,final_mode_coverage"


def _setup_logging():
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("E2PO_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(args) -> RunConfig:
    if args.config:
        return parse_config(args.config)
    return RunConfig().validate()


def _seeds(args, cfg: RunConfig):
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --seeds value {args.seeds!r}") from exc
        if not seeds:
            raise ConfigError("seed list is empty")
        return seeds
    return [cfg.seed]


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    for seed in _seeds(args, cfg):
        run_cfg = _with_seed(cfg, seed)
        gens = trainer.make_streams(run_cfg.seed)
        world = trainer.build_world(run_cfg, gens)
        field, losses = trainer.pretrain_flow(run_cfg, world, gens["pretrain"])
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"pretrained_{args.name}_{seed}.ckpt")
        netdiff.save_checkpoint(field, path)
        log.info("pretrained seed=%d final_fm_loss=%.6g -> %s",
                 seed, losses[-1] if losses else float("nan"), path)
    return 0


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    out = RunConfig(**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__})
    out.seed = seed
    return out


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    for seed in _seeds(args, cfg):
        run_cfg = _with_seed(cfg, seed)
        result = trainer.run(run_cfg, out_dir=args.out, run_name=args.name)
        netdiff.save_checkpoint(result.state.policy,
                                os.path.join(args.out, f"policy_{args.name}_{seed}.ckpt"))
        log.info("seed=%d final_reward=%.6g final_mode_coverage=%.6g metrics=%s",
                 seed, result.final_reward, result.final_mode_coverage, result.csv_path)
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    sweep_text = args.sweep or cfg.sweep
    if not sweep_text:
        raise ConfigError("compare needs a sweep: pass --sweep or set 'sweep' in the config")
    pairs = parse_sweep(sweep_text)
    seeds = _seeds(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for g, k in pairs:
        for seed in seeds:
            run_cfg = _with_seed(cfg, seed)
            run_cfg.G, run_cfg.K = g, k
            run_cfg.validate()
            name = f"{args.name}_G{g}K{k}"
            result = trainer.run(run_cfg, out_dir=args.out, run_name=name)
            final_z = result.metrics[-1].zero_std_ratio if result.metrics else 0.0
            rows.append((g, k, seed, result.final_reward, final_z,
                         result.final_mode_coverage))
    path = os.path.join(args.out, f"compare_{args.name}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(COMPARE_HEADER + "\n")
        for g, k, seed, rew, z, cov in rows:
            fh.write(f"{g},{k},{seed},{rew:.9g},{z:.9g},{cov:.9g}\n")
    # ranking by mean final reward across seeds
    by_pair = {}
    for g, k, seed, rew, _, _ in rows:
        by_pair.setdefault((g, k), []).append(rew)
    ranking = sorted(((sum(v) / len(v), gk) for gk, v in by_pair.items()), reverse=True)
    print("ranking (mean final reward):")
    for mean_rew, (g, k) in ranking:
        print(f"  G={g} K={k}: {mean_rew:.6g}")
    print(f"wrote {path}")
    return 0


def cmd_diagnose(args) -> int:
    if not args.metrics:
        raise ConfigError("diagnose needs --metrics <csv>")
    rows = diagnostics.parse_csv(args.metrics)
    if not rows:
        print(f"{args.metrics}: header only, no iterations recorded")
        return 0
    stds = [r.reward_std for r in rows]
    smoothed = diagnostics.smooth(stds, diagnostics.DEFAULT_ALPHA)
    tail = rows[max(0, int(0.8 * len(rows))):]
    print(f"{args.metrics}: {len(rows)} iterations")
    print(f"  final reward_mean      {rows[-1].reward_mean:.6g}")
    print(f"  final zero_std_ratio   {rows[-1].zero_std_ratio:.6g}")
    print(f"  final smoothed_std     {smoothed[-1]:.6g}")
    print(f"  tail mean mode_coverage {sum(r.mode_coverage for r in tail) / len(tail):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2po",
                                     description="Embedding-perturbed exploration experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("pretrain", cmd_pretrain), ("train", cmd_train),
                     ("compare", cmd_compare), ("diagnose", cmd_diagnose)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seeds", default=None, help="comma-separated seed list")
        p.add_argument("--name", default="run", help="run name used in output filenames")
        p.set_defaults(fn=fn)
    sub.choices["compare"].add_argument("--sweep", default=None,
                                        help="budget sweep, e.g. 8x1,4x2,2x4,1x8")
    sub.choices["diagnose"].add_argument("--metrics", default=None,
                                         help="metrics CSV to summarize")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (E2POError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
