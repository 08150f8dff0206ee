"""Training loop: decoupled-weight-decay Adam with two learning-rate groups,
global gradient-norm clipping, step-decay schedule, horizontal-flip
augmentation, and a per-step tab-separated loss log."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor, backward
from .config import Config
from .data import ClipSample, flip_clip
from .model import Model


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


class AdamW:
    """Adam with decoupled weight decay; per-parameter base learning rates."""

    def __init__(self, params_with_lr: list, weight_decay: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.items = [(t, lr) for t, lr in params_with_lr]
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state = [AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
                      for t, _ in self.items]

    def step(self, lr_factor: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for (tensor, base_lr), st in zip(self.items, self.state):
            if tensor.grad is None:
                continue
            g = tensor.grad
            st.m = b1 * st.m + (1 - b1) * g
            st.v = b2 * st.v + (1 - b2) * (g * g)
            m_hat = st.m / bc1
            v_hat = st.v / bc2
            lr = base_lr * lr_factor
            tensor.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * tensor.data)


def clip_global_norm(tensors: list, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the post-clip global norm.
    """
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float((t.grad * t.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
        return math.sqrt(sum(float((t.grad * t.grad).sum())
                             for t in tensors if t.grad is not None))
    return norm


@dataclass
class TrainResult:
    model: Model
    log_lines: list
    final_rng_state: dict
    steps: int


def _check_finite(breakdown, step: int) -> None:
    for name, tensor in (("mask", breakdown.mask), ("ref", breakdown.ref),
                         ("diversity", breakdown.diversity)):
        if not np.all(np.isfinite(tensor.data)):
            raise TrainingDiverged(
                f"non-finite {name} loss at step {step}; aborting")


def train(config: Config, dataset: list, log_path: str | None = None,
          hooks=None) -> TrainResult:
    """Train on a clip list; returns the model, the loss log, and RNG state.

    Everything is driven by ``config.seed``: initialisation, shuffling,
    augmentation and dropout each consume their own child stream, so a rerun
    with the same seed reproduces the log byte for byte.
    """
    root = np.random.SeedSequence(config.seed)
    init_ss, order_ss, aug_ss, drop_ss = root.spawn(4)
    model = Model.init(config, np.random.Generator(np.random.PCG64(init_ss)))
    order_rng = np.random.Generator(np.random.PCG64(order_ss))
    aug_rng = np.random.Generator(np.random.PCG64(aug_ss))
    drop_rng = np.random.Generator(np.random.PCG64(drop_ss))

    encoder_names = {name for name, _ in model.encoder_parameters()}
    groups = []
    for name, tensor in model.named_parameters():
        lr = config.optim.encoder_lr if name in encoder_names else config.optim.lr
        groups.append((tensor, lr))
    opt = AdamW(groups, weight_decay=config.optim.weight_decay)
    tensors = [t for t, _ in groups]

    log_lines = ["step\tmask\tref\tdiv\ttotal"]
    step = 0
    batch = max(1, config.optim.batch_size)
    for epoch in range(config.optim.epochs):
        lr_factor = (1.0 / config.optim.drop_factor
                     if epoch >= config.optim.drop_epoch else 1.0)
        order = order_rng.permutation(len(dataset))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            model.zero_grads()
            comps = np.zeros(4)
            for i in idx:
                clip = dataset[int(i)]
                frames, gt, tokens = clip.frames, clip.gt, clip.tokens
                if aug_rng.random() < 0.5:
                    frames, gt, tokens = flip_clip(frames, gt, tokens)
                pred = model.forward(frames, tokens, train=True, rng=drop_rng)
                breakdown, _ = model.loss(pred, gt)
                _check_finite(breakdown, step)
                backward(breakdown.total * (1.0 / len(idx)))
                comps += np.array([breakdown.mask.data.item(),
                                   breakdown.ref.data.item(),
                                   breakdown.diversity.data.item(),
                                   breakdown.total.data.item()])
            comps /= len(idx)
            clip_global_norm(tensors, config.optim.clip_norm)
            opt.step(lr_factor)
            log_lines.append(f"{step}\t{comps[0]:.6f}\t{comps[1]:.6f}"
                             f"\t{comps[2]:.6f}\t{comps[3]:.6f}")
            if hooks:
                hooks(step, model, comps)
            step += 1

    if log_path:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return TrainResult(model=model, log_lines=log_lines,
                       final_rng_state=order_rng.bit_generator.state, steps=step)
