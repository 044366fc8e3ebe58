"""Losses, deep-supervision weighting, SGD with polynomial decay, train loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accum, _wrap
from .errors import ConfigError, DimensionMismatchError, NumericalAbortError
from .network import SegmentationModel, save_checkpoint
from .phantom import LabeledVolume, sample_patch


def halving_ds_weights(n_heads: int) -> list[float]:
    """Per-head weights halving from the finest head, normalized to sum 1."""
    if n_heads < 1:
        raise ConfigError("need at least one supervised head")
    raw = [2.0 ** (n_heads - 1 - i) for i in range(n_heads)]
    total = sum(raw)
    return [w / total for w in raw]


@dataclass
class LossConfig:
    lambda_dice: float = 0.5
    lambda_ce: float = 0.5
    dice_smooth: float = 1e-5
    ds_weights: list[float] = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if self.lambda_dice + self.lambda_ce <= 0:
            raise ConfigError("lambda_dice + lambda_ce must be positive")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be positive")
        if abs(sum(self.ds_weights) - 1.0) > 1e-12:
            raise ConfigError(f"ds_weights must sum to 1, got {sum(self.ds_weights)}")
        if any(b >= a for a, b in zip(self.ds_weights, self.ds_weights[1:])) and len(self.ds_weights) > 1:
            raise ConfigError("ds_weights must strictly decrease with depth")


def dice_loss(probs: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss of the foreground probability map, averaged over the batch.

    probs is (B, 1, D, H, W) in [0, 1]; target is a binary volume of the same
    spatial shape. Loss per sample is 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s).
    """
    t = np.asarray(target, dtype=np.float64).reshape(probs.shape)
    if probs.ndim != 5 or probs.shape[1] != 1:
        raise DimensionMismatchError("channel", 1, probs.shape[1] if probs.ndim == 5 else None)
    axes = (1, 2, 3, 4)
    inter = (probs.data * t).sum(axis=axes)
    p_sum = probs.data.sum(axis=axes)
    t_sum = t.sum(axis=axes)
    denom = p_sum + t_sum + smooth
    per_sample = 1.0 - (2.0 * inter + smooth) / denom
    batch = probs.shape[0]
    out = per_sample.mean()

    def backward():
        def fn(g):
            shape = (batch, 1, 1, 1, 1)
            num = 2.0 * t * denom.reshape(shape) - (2.0 * inter + smooth).reshape(shape)
            _accum(probs, (-float(g) / batch) * num / (denom**2).reshape(shape), own=True)

        return fn

    return _wrap(np.asarray(out), (probs,), backward)


def cross_entropy_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean voxelwise negative log-likelihood, log-sum-exp stabilized.

    logits is (B, C, D, H, W); target holds class indices of shape (B, D, H, W).
    """
    if logits.ndim != 5:
        raise DimensionMismatchError("rank", 5, logits.ndim)
    t = np.asarray(target)
    if t.shape != logits.shape[:1] + logits.shape[2:]:
        raise DimensionMismatchError("target", logits.shape[:1] + logits.shape[2:], t.shape)
    n_classes = logits.shape[1]
    if t.min() < 0 or t.max() >= n_classes:
        raise ConfigError(f"target class indices must lie in [0, {n_classes})")
    t = t.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    softmax = e / e.sum(axis=1, keepdims=True)
    picked = np.take_along_axis(np.log(softmax), t[:, None], axis=1)[:, 0]
    n_vox = picked.size
    out = -picked.sum() / n_vox

    def backward():
        def fn(g):
            grad = softmax.copy()
            np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], 1) - 1.0, 1)
            _accum(logits, (float(g) / n_vox) * grad, own=True)

        return fn

    return _wrap(np.asarray(out), (logits,), backward)


def downsample_labels(target: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label shrink by strided sampling (origin-aligned)."""
    if factor == 1:
        return target
    return np.ascontiguousarray(target[:, ::factor, ::factor, ::factor])


def combined_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> tuple[Tensor, float, float]:
    """lambda_dice * Dice + lambda_ce * CE for one head; returns parts as floats."""
    fg = ad.slice_channels(ad.softmax_channel(logits), 1, 2)
    d = dice_loss(fg, target, cfg.dice_smooth)
    c = cross_entropy_loss(logits, target)
    return ad.weighted_sum([d, c], [cfg.lambda_dice, cfg.lambda_ce]), d.item(), c.item()


def deep_supervision_loss(
    heads: list[Tensor], target: np.ndarray, cfg: LossConfig
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of per-head combined losses, finest head first.

    Each head's target is the full-resolution label volume shrunk by the
    head's downsampling factor with nearest-neighbor sampling.
    """
    if len(cfg.ds_weights) != len(heads):
        raise ConfigError(
            f"ds_weights has {len(cfg.ds_weights)} entries for {len(heads)} heads"
        )
    target = np.asarray(target)
    full = target.shape[1]
    terms = []
    dice_part = ce_part = 0.0
    for weight, head in zip(cfg.ds_weights, heads):
        factor = full // head.shape[2]
        if head.shape[2] * factor != full:
            raise ConfigError(f"head resolution {head.shape[2:]} does not divide {target.shape[1:]}")
        t = downsample_labels(target, factor)
        term, d_val, c_val = combined_loss(head, t, cfg)
        terms.append(term)
        dice_part += weight * d_val
        ce_part += weight * c_val
    total = ad.weighted_sum(terms, cfg.ds_weights)
    return total, {"dice": dice_part, "ce": ce_part}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """SGD with momentum under polynomial learning-rate decay."""

    lr0: float
    total_iters: int
    power: float = 0.9
    momentum: float = 0.99
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iter: int = 0

    def lr_at(self, t: int) -> float:
        return self.lr0 * (1.0 - t / self.total_iters) ** self.power


def make_optim_state(model: SegmentationModel, lr0: float, total_iters: int, power: float = 0.9, momentum: float = 0.99) -> OptimState:
    vel = {name: np.zeros_like(t.data) for name, t in model.named_parameters()}
    return OptimState(lr0, total_iters, power, momentum, vel)


def sgd_poly_step(named_params, state: OptimState) -> float:
    """One update: v <- momentum*v + g; p <- p - lr(t)*v. Returns the lr used."""
    if state.iter >= state.total_iters:
        raise ConfigError(f"optimizer exhausted: iter {state.iter} >= T {state.total_iters}")
    lr = state.lr_at(state.iter)
    for name, p in named_params:
        g = p.grad
        if g is None:
            raise ConfigError(f"parameter '{name}' has no gradient")
        if not np.isfinite(g).all():
            raise NumericalAbortError(state.iter, f"non-finite gradient in '{name}'")
        v = state.velocity[name]
        v *= state.momentum
        v += g
        p.data -= lr * v
    state.iter += 1
    return lr


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TraceRecord:
    iter: int
    lr: float
    total: float
    dice: float
    ce: float


def write_trace(path, records: list[TraceRecord]) -> None:
    lines = [
        f"{r.iter}\t{r.lr:.17g}\t{r.total:.17g}\t{r.dice:.17g}\t{r.ce:.17g}" for r in records
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_trace(path) -> list[TraceRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        it, lr, total, dice, ce = line.split("\t")
        records.append(TraceRecord(int(it), float(lr), float(total), float(dice), float(ce)))
    return records


def train_loop(
    dataset: list[LabeledVolume],
    model: SegmentationModel,
    loss_cfg: LossConfig,
    optim: OptimState,
    iterations: int,
    batch_size: int = 2,
    fg_bias: float = 0.5,
    seed: int = 0,
    augment: bool = True,
    trace_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    progress=None,
) -> list[TraceRecord]:
    """Deterministic patch-based training; NaN losses abort with the iteration.

    All randomness (volume choice, patch positions, flips) flows from one
    generator seeded with `seed`, so equal seeds give bit-identical traces.
    Writes periodic checkpoints plus `final` and `best` (lowest total loss)
    when checkpoint_dir is given.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    rng = np.random.default_rng(seed)
    patch = model.config.patch_shape
    records: list[TraceRecord] = []
    best_loss = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for t in range(iterations):
        images, labels = [], []
        for _ in range(batch_size):
            vol = dataset[int(rng.integers(len(dataset)))]
            img, lbl = sample_patch(vol, patch, rng, fg_bias, augment=augment)
            images.append(img)
            labels.append(lbl)
        x = Tensor(np.stack(images)[:, None])
        y = np.stack(labels).astype(np.int64)

        model.zero_grad()
        final, aux = model.forward(x)
        loss, parts = deep_supervision_loss([final] + aux, y, loss_cfg)
        total = loss.item()
        if not np.isfinite(total):
            raise NumericalAbortError(t)
        loss.backward()
        lr = sgd_poly_step(model.named_parameters(), optim)

        records.append(TraceRecord(t, lr, total, parts["dice"], parts["ce"]))
        if progress is not None:
            progress(records[-1])
        if total < best_loss:
            best_loss = total
            if ckpt_dir is not None:
                best_params = {n: p.data.copy() for n, p in model.named_parameters()}
        if ckpt_dir is not None and checkpoint_every and (t + 1) % checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"iter_{t + 1:06d}.ckpt", model)

    if trace_path is not None:
        write_trace(trace_path, records)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ckpt", model)
        if best_params is not None:
            current = {n: p.data.copy() for n, p in model.named_parameters()}
            for name, p in model.named_parameters():
                p.data = best_params[name]
            save_checkpoint(ckpt_dir / "best.ckpt", model)
            for name, p in model.named_parameters():
                p.data = current[name]
    return records
