"""Run configuration: all tunables with their default settings, plus the
flat ``key = value`` config-file parser."""

from dataclasses import dataclass, fields as dataclass_fields
from typing import Optional

from .errors import ConfigError


@dataclass
class RunConfig:
    # experiment shape
    seed: int = 42
    iterations: int = 150
    G: int = 4                      # latent group size (distinct noise seeds)
    K: int = 4                      # semantic variants, anchor included
    reward: str = "discrete"        # discrete | continuous
    bandwidth: float = 1.0
    hit_radius: float = 1.1
    loss_form: str = "x0"           # x0 | velocity
    prompt_batch: int = 4

    # embedding-perturbed exploration
    sigma_init: float = 1e-4
    max_norm: float = 0.05
    lambda_div: float = 50.0
    mu: float = 0.80
    eps: float = 0.01
    rho: float = 0.4
    t_emb: int = 300
    embed_lr: float = 1e-3
    static_schedule: bool = False   # gamma == 1 at every step (ablation)
    cache_deltas: bool = False      # reuse optimized deltas across iterations

    # policy optimization
    policy_lr: float = 3e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    beta: float = 1.0
    beta_kl: float = 1e-4
    std_floor: float = 1e-6
    denom_floor: float = 1e-8
    ema_decay: float = 0.99
    use_ema: bool = True

    # sampling
    train_sample_steps: int = 10
    inference_steps: int = 40
    noise_scale: float = 0.0

    # task
    dim: int = 2
    n_modes: int = 8
    radius: float = 4.0
    mode_std: float = 0.3

    # toy text pipeline
    embed_dim: int = 16
    cond_dim: int = 16
    encoder_hidden: int = 16
    encoder_gain: float = 4.0
    embed_scale: float = 0.085

    # pretraining and evaluation
    pretrain_iters: int = 800
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3
    eval_samples: int = 64

    # bookkeeping
    record_wallclock: bool = False  # off by default so metrics CSVs are reproducible
    sweep: str = ""                 # "GxK,GxK,..." list for the compare command

    def validate(self):
        if self.G < 1 or self.K < 1:
            raise ConfigError(f"G and K must be >= 1, got G={self.G} K={self.K}")
        if self.G * self.K < 2:
            raise ConfigError(f"G*K must be >= 2 for group statistics, got {self.G * self.K}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if self.reward not in ("discrete", "continuous"):
            raise ConfigError(f"reward must be 'discrete' or 'continuous', got {self.reward!r}")
        if self.loss_form not in ("x0", "velocity"):
            raise ConfigError(f"loss_form must be 'x0' or 'velocity', got {self.loss_form!r}")
        if self.sigma_init <= 0:
            raise ConfigError(f"sigma_init must be > 0, got {self.sigma_init}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclass_fields(RunConfig)}


def _coerce(key: str, raw: str, line_no: int):
    typ = _FIELD_TYPES[key]
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: cannot parse value {raw!r} for key {key!r}") from exc


def parse_config(path) -> RunConfig:
    """Parse a flat ``key = value`` file ('#' starts a comment). Unknown
    keys are an error; missing keys fall back to the defaults above."""
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {line_no}: expected 'key = value', got {line.rstrip()!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"line {line_no}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw, line_no))
    return cfg.validate()


def parse_sweep(text: str):
    """Parse a budget sweep spec like '8x1,4x2,2x4,1x8' into (G, K) pairs."""
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.lower().split("x")
        if len(parts) != 2:
            raise ConfigError(f"bad sweep entry {chunk!r}; expected GxK")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"bad sweep entry {chunk!r}; expected integers GxK") from exc
    if not pairs:
        raise ConfigError("sweep list is empty")
    budget = pairs[0][0] * pairs[0][1]
    for g, k in pairs:
        if g * k != budget:
            raise ConfigError(f"sweep entry {g}x{k} breaks the shared budget N={budget}")
    return pairs
