"""Losses, optimizer, schedule, and the training loop.

The density loss is a per-image sum of squared pixel errors averaged
over the batch; the localization loss is a pixel-wise focal term. Both
are built from the autodiff ops so one backward pass covers the whole
network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grad import (
    Tape,
    Tensor,
    add,
    affine,
    clamp,
    crop2d,
    log,
    mul,
    pow_const,
    sub,
    sum_all,
    zero_grad,
)
from .model import ModelConfig, forward, init_params, pad_to_multiple


class NumericError(RuntimeError):
    """Raised when optimization hits non-finite numbers."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_initial: float = 3e-4
    lr_final: float = 1.5e-6
    iterations: int = 2000
    beta_loss: float = 0.01
    gamma: float = 2.0
    alpha: float = 0.25
    val_fraction: float = 0.1
    seed: int = 0
    clamp_eps: float = 1e-7
    conventional_alpha: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 50

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {}
        for key, value in d.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown train config key {key!r}")
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            step=0,
        )


@dataclass
class Checkpoint:
    params: dict
    state: AdamState
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    history: list = field(default_factory=list)


def euclidean_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Sum of squared pixel errors per image, averaged over the batch."""
    d = sub(pred, gt)
    return affine(sum_all(mul(d, d)), 1.0 / pred.shape[0])


def focal_loss(pred: Tensor, gt: Tensor, gamma: float = 2.0,
               alpha: float = 0.25, eps: float = 1e-7,
               conventional_alpha: bool = False) -> Tensor:
    """Pixel-wise focal loss, negated sum over pixels, mean over batch.

    alpha weights the positive term only; the negative term stays
    unweighted unless conventional_alpha selects the usual (1 - alpha)
    factor. Predictions are clamped to [eps, 1-eps] before the logs.
    """
    p = clamp(pred, eps, 1.0 - eps)
    one_minus_p = affine(p, -1.0, 1.0)
    pos = mul(mul(log(p), pow_const(one_minus_p, gamma)), gt)
    neg = mul(mul(log(one_minus_p), pow_const(p, gamma)),
              affine(gt, -1.0, 1.0))
    neg_weight = (1.0 - alpha) if conventional_alpha else 1.0
    total = add(affine(pos, alpha), affine(neg, neg_weight))
    return affine(sum_all(total), -1.0 / pred.shape[0])


def total_loss(pred_density: Tensor, gt_density: Tensor, pred_loc: Tensor,
               gt_loc: Tensor, cfg: TrainConfig) -> Tensor:
    den = euclidean_loss(pred_density, gt_density)
    loc = focal_loss(pred_loc, gt_loc, cfg.gamma, cfg.alpha, cfg.clamp_eps,
                     cfg.conventional_alpha)
    return add(den, affine(loc, cfg.beta_loss))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Geometric interpolation from lr_initial down to lr_final."""
    if not 0 <= step < cfg.iterations:
        raise ValueError(
            f"step {step} outside [0, {cfg.iterations})"
        )
    if cfg.iterations == 1:
        return cfg.lr_initial
    frac = step / (cfg.iterations - 1)
    return cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** frac


def xavier_init(shape, rng) -> Tensor:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    Fans follow the conv-kernel convention: receptive field size times
    shape[1] in, shape[0] out; 1-D shapes use the single dim for both.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) >= 2:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
    else:
        fan_in = fan_out = shape[0]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One in-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for parameter {name!r} at step {t}"
            )
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**t)
        v_hat = state.v[name] / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def _assemble(batch):
    """Stack TrainingPatch-likes into arrays the network consumes."""
    hw = {(p.image.shape[0], p.image.shape[1]) for p in batch}
    if len(hw) != 1:
        raise ValueError(f"patches have mixed sizes: {sorted(hw)}")
    x = np.stack([p.image.transpose(2, 0, 1) for p in batch])
    den = np.stack([p.density_gt[None] for p in batch])
    loc = np.stack([p.loc_gt[None] for p in batch])
    return x, den, loc


def _batch_losses(batch, params, model_cfg, train_cfg):
    """Forward a batch and build (total, den, loc) loss Tensors.

    With a tape open the graph is recorded; without one this is a pure
    evaluation. Outputs are cropped back to the unpadded patch size
    before the losses, so supervision happens at full resolution.
    """
    x, den_gt, loc_gt = _assemble(batch)
    h, w = x.shape[2], x.shape[3]
    xp, (top, left) = pad_to_multiple(x)
    den_pred, loc_pred = forward(Tensor(xp), params, model_cfg)
    if (top, left) != (0, 0) or xp.shape[2:] != (h, w):
        den_pred = crop2d(den_pred, top, left, h, w)
        loc_pred = crop2d(loc_pred, top, left, h, w)
    den_t = Tensor(den_gt)
    loc_t = Tensor(loc_gt)
    l_den = euclidean_loss(den_pred, den_t)
    l_loc = focal_loss(loc_pred, loc_t, train_cfg.gamma, train_cfg.alpha,
                       train_cfg.clamp_eps, train_cfg.conventional_alpha)
    total = add(l_den, affine(l_loc, train_cfg.beta_loss))
    return total, l_den, l_loc


def split_train_val(n: int, cfg: TrainConfig, rng) -> tuple:
    """Seeded permutation split; val size is floor(n * val_fraction)."""
    order = rng.permutation(n)
    n_val = int(n * cfg.val_fraction)
    return order[n_val:], order[:n_val]


def train(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          log_path=None, checkpoint_path=None, checkpoint_every: int = 0,
          resume_from=None, progress=None) -> Checkpoint:
    """Run the optimization loop and return the final Checkpoint.

    Batches are sampled per step from a child generator seeded by
    (seed, step), which makes a resumed run bitwise-identical to an
    uninterrupted one. log_path receives one JSON line per logged step:
    {"step", "lr", "train_loss", "val_loss"}.
    """
    patches = list(dataset)
    if not patches:
        raise ValueError("dataset is empty")

    if resume_from is not None:
        ckpt = (resume_from if isinstance(resume_from, Checkpoint)
                else load_checkpoint(resume_from))
        params, state = ckpt.params, ckpt.state
        history = list(ckpt.history)
        model_cfg, train_cfg = ckpt.model_cfg, ckpt.train_cfg
    else:
        params = init_params(model_cfg)
        state = AdamState.fresh(params)
        history = []

    split_rng = np.random.default_rng(train_cfg.seed)
    train_idx, val_idx = split_train_val(len(patches), train_cfg, split_rng)
    if len(train_idx) < train_cfg.batch_size:
        raise ValueError(
            f"{len(train_idx)} training patches cannot fill a batch of "
            f"{train_cfg.batch_size}; lower batch_size"
        )

    log_fh = open(log_path, "a") if log_path else None
    try:
        for step in range(state.step, train_cfg.iterations):
            lr = lr_schedule(step, train_cfg)
            picker = np.random.default_rng([train_cfg.seed, step])
            chosen = picker.choice(
                train_idx, size=train_cfg.batch_size, replace=False
            )
            batch = [patches[i] for i in chosen]
            with Tape() as tape:
                total, l_den, l_loc = _batch_losses(
                    batch, params, model_cfg, train_cfg
                )
                tape.backward(total)
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, state, lr, train_cfg.adam_beta1,
                      train_cfg.adam_beta2, train_cfg.adam_eps)
            zero_grad(params)

            last = step == train_cfg.iterations - 1
            if step % train_cfg.val_every == 0 or last:
                val_loss = None
                if len(val_idx):
                    vtot, _, _ = _batch_losses(
                        [patches[i] for i in val_idx], params,
                        model_cfg, train_cfg,
                    )
                    val_loss = vtot.item()
                record = {
                    "step": step,
                    "lr": lr,
                    "train_loss": total.item(),
                    "val_loss": val_loss,
                }
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if progress:
                    progress(record)
            if (checkpoint_path and checkpoint_every
                    and state.step % checkpoint_every == 0 and not last):
                save_checkpoint(
                    checkpoint_path,
                    Checkpoint(params, state, model_cfg, train_cfg, history),
                )
    finally:
        if log_fh:
            log_fh.close()

    ckpt = Checkpoint(params, state, model_cfg, train_cfg, history)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, ckpt)
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Full-precision npz: params + both Adam moments + JSON metadata."""
    arrays = {}
    for name, p in ckpt.params.items():
        arrays["p__" + name] = p.data
        arrays["m__" + name] = ckpt.state.m[name]
        arrays["v__" + name] = ckpt.state.v[name]
    meta = json.dumps(
        {
            "step": ckpt.state.step,
            "model_cfg": asdict(ckpt.model_cfg),
            "train_cfg": asdict(ckpt.train_cfg),
            "history": ckpt.history,
        }
    )
    arrays["__meta__"] = np.array(meta)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params, m, v = {}, {}, {}
        for key in z.files:
            if key.startswith("p__"):
                params[key[3:]] = Tensor(z[key], requires_grad=True)
            elif key.startswith("m__"):
                m[key[3:]] = np.array(z[key])
            elif key.startswith("v__"):
                v[key[3:]] = np.array(z[key])
    return Checkpoint(
        params=params,
        state=AdamState(m=m, v=v, step=int(meta["step"])),
        model_cfg=ModelConfig.from_dict(meta["model_cfg"]),
        train_cfg=TrainConfig.from_dict(meta["train_cfg"]),
        history=list(meta["history"]),
    )
