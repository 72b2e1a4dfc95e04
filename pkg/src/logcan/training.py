"""SGD with momentum and poly decay, the training objective, and synthetic data."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .config import ModelConfig
from .decoder import init_model, model_forward
from .tensor import Tape, Tensor, add, cross_entropy, scale


def poly_lr(iteration: int, max_iter: int, base_lr: float = 0.01, power: float = 0.9) -> float:
    """``base_lr * (1 - iteration / max_iter) ** power``."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimState:
    max_iter: int
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return poly_lr(self.iteration, self.max_iter, self.base_lr, self.power)


def sgd_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState, lr: float | None = None
) -> dict[str, Tensor]:
    """One momentum-SGD update; returns new parameter tensors and advances ``state``.

    ``g <- grad + weight_decay * theta``, ``v <- momentum * v + g``,
    ``theta <- theta - lr * v``.  ``lr`` defaults to the poly schedule.
    """
    lr = state.lr if lr is None else lr
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        theta = p.data.astype(np.float64)
        g = g.astype(np.float64) + state.weight_decay * theta
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        out[name] = Tensor(theta - lr * v, requires_grad=True, dtype=p.dtype)
    state.iteration += 1
    return out


def segmentation_loss(
    image: Tensor, labels: np.ndarray, config: ModelConfig, params: Mapping[str, Tensor]
) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy on the main logits plus ``aux_weight`` times that of the GCA logits.

    Returns ``(total, main_cross_entropy, logits)``.
    """
    logits, aux = model_forward(image, config, params)
    main = cross_entropy(logits, labels)
    total = main
    if config.aux_weight:
        total = add(main, scale(cross_entropy(aux, labels), config.aux_weight))
    return total, main, logits


@dataclass
class TrainHistory:
    """Per-step objective values, recorded before each update."""

    loss: list[float] = field(default_factory=list)
    seg_loss: list[float] = field(default_factory=list)


def train(
    images: np.ndarray,
    labels: np.ndarray,
    config: ModelConfig,
    steps: int,
    params: Mapping[str, Tensor] | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[dict[str, Tensor], TrainHistory]:
    """Full-batch training; returns final parameters and the loss history."""
    if params is None:
        params = init_model(config, images.shape[2], images.shape[3])
    params = dict(params)
    state = OptimState(steps, config.base_lr, config.momentum, config.weight_decay, config.power)
    x = Tensor(images)
    history = TrainHistory()
    for step in range(steps):
        with Tape() as tape:
            loss, main, _ = segmentation_loss(x, labels, config, params)
        grads = tape.gradients(loss, params)
        history.loss.append(loss.item())
        history.seg_loss.append(main.item())
        if callback is not None:
            callback(step, history.loss[-1])
        params = sgd_step(params, grads, state)
    return params, history


def class_palette(classes: int) -> np.ndarray:
    """Evenly spaced hues, ``classes x 3`` RGB in [0, 1]."""
    return np.array([colorsys.hsv_to_rgb(k / classes, 0.8, 0.9) for k in range(classes)])


def synth_data(
    seed: int, n: int, extents: tuple[int, int] = (64, 64), classes: int = 6,
    block: int = 16, rects: int = 2, noise: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded toy segmentation batch.

    Labels are a grid of ``block x block`` tiles with random classes, overpainted
    by ``rects`` random rectangles with sides of 4 to ``block`` pixels whose
    corners sit on a 4-pixel lattice.  Images are the labels rendered with a
    fixed per-class colour plus Gaussian noise, centred around zero.  Returns float32 ``n x 3 x H x W``
    images and uint8 ``n x H x W`` labels.
    """
    h, w = extents
    if h % 32 or w % 32:
        raise ValueError(f"extents {h}x{w} must be divisible by 32")
    rng = np.random.default_rng(seed)
    labels = np.empty((n, h, w), dtype=np.uint8)
    for i in range(n):
        tiles = rng.integers(0, classes, size=(h // block, w // block))
        lab = np.kron(tiles, np.ones((block, block), dtype=np.int64))
        for _ in range(rects):
            # sides of 4..block pixels keep any one class from dominating an image
            rh, rw = rng.integers(1, block // 4 + 1, size=2) * 4
            y0 = rng.integers(0, (h - rh) // 4 + 1) * 4
            x0 = rng.integers(0, (w - rw) // 4 + 1) * 4
            lab[y0:y0 + rh, x0:x0 + rw] = rng.integers(0, classes)
        labels[i] = lab
    colors = class_palette(classes)
    images = colors[labels].transpose(0, 3, 1, 2) - 0.5
    images = images + noise * rng.standard_normal(images.shape)
    return images.astype(np.float32), labels
