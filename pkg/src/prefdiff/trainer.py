"""Optimization loop over a preference dataset for one training method.

The reference model is a frozen clone of the initial parameters taken before
step 1. Batches are sampled uniformly with replacement; the per-item step
index and noise draws are resampled every step, so each step is a fresh
Monte Carlo estimate of the chosen loss's expectation. Runs are fully
deterministic given (config, dataset, seed).
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffusion as df
from . import losses
from . import net
from .datapipe import _child_seed

METHODS = ("sft", "image_dpo", "text_dpo", "bidpo", "bidpo_region")
CONFIG_FORMAT = "prefdiff-run-config"
CONFIG_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    method: str = "bidpo"
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta: float = 0.1
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 50
    seed: int = 0
    # schedule: total noise matches the 1000-step convention at desk length
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    omega_mode: str = "constant"
    # network
    grid: int = 16
    channels: int = 3
    hidden: int = 256
    time_dim: int = 32
    parameterization: str = "eps"
    dtype: str = "float32"
    # ablation plumbing
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 128
    # pretraining may treat both pair sides as plain image-caption examples;
    # the sft ablation row itself always uses the preferred halves only
    sft_on_both_pair_sides: bool = False
    # fraction of sft items trained with a blanked caption encoding, as in
    # classifier-free-guidance training; gives the pretrained base strong
    # image quality with weak caption adherence, like a production backbone
    caption_dropout: float = 0.0
    eval_every: int = 0
    eval_prompts_per_dim: int = 8
    eval_samples_per_prompt: int = 4

    def net_config(self):
        return net.NetConfig(grid=self.grid, channels=self.channels,
                             hidden=self.hidden, time_dim=self.time_dim,
                             parameterization=self.parameterization)

    def schedule(self):
        return df.make_schedule(self.T, self.beta_start, self.beta_end, self.omega_mode)


def validate_config(config):
    if config.method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {config.method!r}")
    if config.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    for name in ("steps", "batch_size", "T", "grid", "channels", "hidden", "time_dim"):
        if getattr(config, name) < (0 if name == "steps" else 1):
            raise ValueError(f"{name} must be positive")
    for name in ("learning_rate", "beta"):
        if getattr(config, name) <= 0:
            raise ValueError(f"{name} must be positive")
    if config.warmup_steps < 0:
        raise ValueError("warmup_steps must be nonnegative")


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    margin: float
    lr: float


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def __eq__(self, other):
        return isinstance(other, MetricsLog) and self.records == other.records \
            and self.evals == other.evals


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(m=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
                   v=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam with bias correction; updates parameters in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for li, (w, b) in enumerate(params.layers):
        for arr, g, m, v in ((w, grads.layers[li][0], state.m[li][0], state.v[li][0]),
                             (b, grads.layers[li][1], state.m[li][1], state.v[li][1])):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * np.square(g)
            arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def sgd_step(params, grads, lr):
    for li, (w, b) in enumerate(params.layers):
        w -= lr * grads.layers[li][0]
        b -= lr * grads.layers[li][1]
    return params


def warmup_lr(step, base_lr, warmup_steps):
    """Linear ramp 0 -> base_lr over warmup_steps, then constant."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


# ---------------------------------------------------------------------------
# training

def _copy_for_training(params, dtype):
    layers = [(w.astype(dtype, copy=True), b.astype(dtype, copy=True))
              for w, b in params.layers]
    return net.DenoiserParams(cfg=params.cfg, layers=layers, trainable=True)


class _BatchArrays:
    """Dataset pre-encoded into stacked arrays for fast batch assembly."""

    def __init__(self, dataset, dtype, grid, channels):
        shape = (grid, grid, channels)
        for p in dataset:
            if p.x0_w.shape != shape:
                raise ValueError(f"pair image shape {p.x0_w.shape} != configured {shape}")
        self.x0_w = np.stack([p.x0_w for p in dataset]).astype(dtype)
        self.x0_l = np.stack([p.x0_l for p in dataset]).astype(dtype)
        self.enc_w = np.stack([net.encode_caption(p.y_w).vector for p in dataset])
        self.enc_l = np.stack([net.encode_caption(p.y_l).vector for p in dataset])
        self.masks_w = []
        self.masks_l = []
        for p in dataset:
            mask_w, mask_l = losses.pair_masks(p, use_region=True)
            self.masks_w.append(mask_w)
            self.masks_l.append(mask_l)


def _batch_loss(method, theta, ref, arrays, idx, t_arr, rng, beta, sched, dtype,
                sft_both_sides=False, caption_dropout=0.0):
    shape = arrays.x0_w.shape[1:]
    n = len(idx)
    eps_w = rng.standard_normal((n,) + shape).astype(dtype)
    if method == "sft":
        x0, enc = arrays.x0_w[idx], arrays.enc_w[idx]
        if sft_both_sides:
            flip = rng.random(n) < 0.5
            x0 = np.where(flip[:, None, None, None], arrays.x0_l[idx], x0)
            enc = np.where(flip[:, None], arrays.enc_l[idx], enc)
        if caption_dropout > 0.0:
            enc = np.where((rng.random(n) < caption_dropout)[:, None], 0.0, enc)
        per_item, pt = losses.sft_batch(theta, x0, enc, t_arr, eps_w, sched)
        return losses.scalarize(per_item, pt, np.zeros(n))
    if method == "image_dpo":
        eps_l = rng.standard_normal((n,) + shape).astype(dtype)
        out = losses.diffusion_dpo_batch(theta, ref, arrays.x0_w[idx], arrays.x0_l[idx],
                                         arrays.enc_w[idx], t_arr, eps_w, eps_l, beta, sched)
        return losses.scalarize(*out)
    if method == "text_dpo":
        out = losses.text_dpo_batch(theta, ref, arrays.x0_w[idx], arrays.enc_w[idx],
                                    arrays.enc_l[idx], t_arr, eps_w, beta, sched)
        return losses.scalarize(*out)
    eps_l = rng.standard_normal((n,) + shape).astype(dtype)
    if method == "bidpo_region":
        masks_w = [arrays.masks_w[i] for i in idx]
        masks_l = [arrays.masks_l[i] for i in idx]
    else:
        masks_w = masks_l = None
    out = losses.bidpo_batch(theta, ref, arrays.x0_w[idx], arrays.x0_l[idx],
                             arrays.enc_w[idx], arrays.enc_l[idx], t_arr, eps_w, eps_l,
                             beta, sched, masks_w=masks_w, masks_l=masks_l)
    return losses.scalarize(*out)


def train(config, dataset, init_params=None):
    """Run the configured method over a preference dataset.

    The reference is a frozen clone of the initial parameters (either
    ``init_params`` or a fresh seeded init). Returns (DenoiserParams,
    MetricsLog); raises NumericDivergenceError naming the step on a
    non-finite loss.
    """
    validate_config(config)
    if not dataset:
        raise ValueError("dataset must be non-empty")
    dtype = np.dtype(config.dtype)
    sched = config.schedule()
    if init_params is None:
        params = net.init_params(config.net_config(), seed=config.seed, dtype=dtype)
    else:
        if init_params.cfg != config.net_config():
            raise ValueError("init_params network shape differs from config")
        params = _copy_for_training(init_params, dtype)
    ref = net.clone_frozen(params)
    arrays = _BatchArrays(dataset, dtype, config.grid, config.channels)
    state = AdamState.zeros(params)
    rng = np.random.default_rng(np.random.SeedSequence(_child_seed(config.seed, "train")))
    log = MetricsLog()

    eval_prompts = None
    if config.eval_every > 0:
        from . import evalbench
        from .datapipe import dataset_captions
        eval_prompts = evalbench.sample_prompts(
            dims=sorted({p.dimension for p in dataset}),
            n_per_dim=config.eval_prompts_per_dim,
            seed=_child_seed(config.seed, "eval-prompts"),
            exclude=dataset_captions(dataset))

    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        t_arr = rng.integers(0, sched.T, size=config.batch_size)
        try:
            loss = _batch_loss(config.method, params, ref, arrays, idx, t_arr, rng,
                               config.beta, sched, dtype,
                               sft_both_sides=config.sft_on_both_pair_sides,
                               caption_dropout=config.caption_dropout)
        except df.NumericDivergenceError as exc:
            raise df.NumericDivergenceError(f"step {step}: {exc}") from exc
        grads = loss.backward()
        lr = warmup_lr(step, config.learning_rate, config.warmup_steps)
        if config.optimizer == "adam":
            adam_step(params, grads, state, lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
        else:
            sgd_step(params, grads, lr)
        log.records.append(StepRecord(step=step, loss=loss.value,
                                      grad_norm=grads.global_norm(),
                                      margin=loss.margin, lr=lr))
        if eval_prompts and (step + 1) % config.eval_every == 0:
            from . import evalbench
            card = evalbench.evaluate(params, eval_prompts,
                                      config.eval_samples_per_prompt, sched,
                                      seed=_child_seed(config.seed, "eval", step))
            log.evals.append({"step": step + 1, "validity": card.validity,
                              **{f"acc_{d}": a for d, a in card.per_dimension.items()}})
    return params, log


# ---------------------------------------------------------------------------
# run config and metrics files

def save_config(config, path):
    record = {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, **asdict(config)}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh, indent=2)
    os.replace(tmp, path)


def load_config(path, **overrides):
    with open(path) as fh:
        record = json.load(fh)
    if record.pop("format", None) != CONFIG_FORMAT or record.pop("version", None) != CONFIG_VERSION:
        raise ValueError(f"not a {CONFIG_FORMAT} v{CONFIG_VERSION} file: {path}")
    config = TrainConfig(**record)
    return replace(config, **overrides) if overrides else config


def write_metrics(log, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for rec in log.records:
            fh.write(json.dumps({"kind": "step", **asdict(rec)}) + "\n")
        for rec in log.evals:
            fh.write(json.dumps({"kind": "eval", **rec}) + "\n")
    os.replace(tmp, path)
