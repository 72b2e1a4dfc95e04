"""Central-difference gradient checks in 64-bit mode.

Relative error between analytic gradient ``a`` and numerical gradient ``n``
(restricted to the probed coordinates) is ``|a - n|_2 / max(|a|_2, |n|_2, 1e-6)``.
The floor keeps structurally zero gradients (e.g. a ReLU unit dead on every
pixel) from turning finite-difference round-off into a unit error.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .class_aware import gca_forward, lca_forward
from .config import ModelConfig
from .decoder import init_model, model_forward
from .tensor import Tape, Tensor

Loss = Callable[[Mapping[str, Tensor]], Tensor]

STEP = 1e-4
PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4
GRAD_FLOOR = 1e-6


def rel_error(analytic, numeric) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), GRAD_FLOOR)
    return float(np.linalg.norm(a - n) / denom)


def _as_params(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in arrays.items()}


def numerical_gradient(loss: Loss, arrays: Mapping[str, np.ndarray], name: str, coords, step: float = STEP):
    """Central differences of ``loss`` w.r.t. flat ``coords`` of ``arrays[name]``."""
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    flat = base[name].reshape(-1)
    out = []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        up = loss(_as_params(base)).item()
        flat[c] = orig - step
        down = loss(_as_params(base)).item()
        flat[c] = orig
        out.append((up - down) / (2 * step))
    return np.array(out)


def analytic_gradient(loss: Loss, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    params = _as_params(arrays)
    with Tape() as tape:
        value = loss(params)
    return tape.gradients(value, params)


def check_gradients(
    loss: Loss,
    arrays: Mapping[str, np.ndarray],
    max_coords: int | None = None,
    seed: int = 0,
    step: float = STEP,
) -> dict[str, float]:
    """Per-tensor relative error of the tape gradient against central differences.

    With ``max_coords`` set, each tensor is probed at that many random
    coordinates, and an extra ``"<direction>"`` entry compares the directional
    derivative along a random unit direction over all tensors jointly.
    """
    rng = np.random.default_rng(seed)
    grads = analytic_gradient(loss, arrays)
    errors = {}
    for name, arr in arrays.items():
        size = np.size(arr)
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        numeric = numerical_gradient(loss, arrays, name, coords, step)
        errors[name] = rel_error(grads[name].reshape(-1)[coords], numeric)
    if max_coords is not None:
        direction = {k: rng.standard_normal(np.shape(v)) for k, v in arrays.items()}
        norm = np.sqrt(sum(np.sum(v * v) for v in direction.values()))
        direction = {k: v / norm for k, v in direction.items()}

        def shifted(h):
            return loss(_as_params({k: np.asarray(v, np.float64) + h * direction[k] for k, v in arrays.items()})).item()

        numeric = (shifted(step) - shifted(-step)) / (2 * step)
        analytic = sum(np.sum(grads[k] * direction[k]) for k in arrays)
        errors["<direction>"] = rel_error([analytic], [numeric])
    return errors


# -- suites -------------------------------------------------------------------


def _weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` via a contraction, so gradients are non-trivial."""
    flat = T.reshape(x, (1, 1, x.size))
    return T.matmul_batched(flat, Tensor(weights.reshape(1, x.size, 1), dtype=np.float64))


def primitive_cases(seed: int = 7) -> dict[str, tuple[Loss, dict[str, np.ndarray]]]:
    """Small random instance of every differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal

    def case(fn, arrays, out_shape):
        w = r(out_shape)
        return (lambda p: _weighted_sum(fn(p), w)), arrays

    grid_x = r((2, 3, 4, 6))
    return {
        "matmul_batched": case(lambda p: T.matmul_batched(p["a"], p["b"]),
                               {"a": r((2, 3, 4)), "b": r((2, 4, 5))}, (2, 3, 5)),
        "softmax": case(lambda p: T.softmax(p["x"], axis=1), {"x": r((2, 5, 3))}, (2, 5, 3)),
        "conv2d_3x3": case(lambda p: T.conv2d(p["x"], p["w"], p["b"]),
                           {"x": r((1, 2, 5, 4)), "w": r((3, 2, 3, 3)), "b": r(3)}, (1, 3, 5, 4)),
        "conv2d_3x3_stride2": case(lambda p: T.conv2d(p["x"], p["w"], p["b"], stride=2),
                                   {"x": r((2, 2, 6, 4)), "w": r((3, 2, 3, 3)), "b": r(3)}, (2, 3, 3, 2)),
        "conv2d_1x1": case(lambda p: T.conv2d(p["x"], p["w"], p["b"]),
                           {"x": r((2, 3, 3, 2)), "w": r((4, 3, 1, 1)), "b": r(4)}, (2, 4, 3, 2)),
        "upsample_x2": case(lambda p: T.upsample_bilinear(p["x"], 2), {"x": r((1, 2, 3, 4))}, (1, 2, 6, 8)),
        "upsample_x4": case(lambda p: T.upsample_bilinear(p["x"], 4), {"x": r((1, 1, 2, 2))}, (1, 1, 8, 8)),
        "patch_split": case(lambda p: T.patch_split(p["x"], (2, 3)), {"x": grid_x}, (12, 3, 2, 2)),
        "patch_merge": case(lambda p: T.patch_merge(p["x"], (2, 2)), {"x": r((4, 2, 3, 2))}, (1, 2, 6, 4)),
        "relu": case(lambda p: T.relu(p["x"]), {"x": r((3, 4)) + 0.5}, (3, 4)),
        "add": case(lambda p: T.add(p["a"], p["b"]), {"a": r((2, 3)), "b": r((2, 3))}, (2, 3)),
        "scale": case(lambda p: T.scale(p["x"], -1.5), {"x": r((4,))}, (4,)),
        "concat": case(lambda p: T.concat([p["a"], p["b"]], axis=1),
                       {"a": r((1, 2, 2, 2)), "b": r((1, 3, 2, 2))}, (1, 5, 2, 2)),
        "reshape": case(lambda p: T.reshape(p["x"], (6, 2)), {"x": r((3, 4))}, (6, 2)),
        "swap_last": case(lambda p: T.swap_last(p["x"]), {"x": r((2, 3, 4))}, (2, 4, 3)),
        "repeat_batch": case(lambda p: T.repeat_batch(p["x"], 3), {"x": r((2, 2, 3))}, (6, 2, 3)),
        "sum_all": case(lambda p: T.sum_all(p["x"]), {"x": r((2, 3))}, (1,)),
        "cross_entropy": (
            (lambda p, lab=rng.integers(0, 4, (2, 3, 3)): T.cross_entropy(p["x"], lab)),
            {"x": r((2, 4, 3, 3))},
        ),
    }


def lca_case(seed: int = 7, channels: int = 8, extent: int = 8, classes: int = 3, grid=(2, 2)):
    """LCA forward plus cross-entropy on a ``1 x channels x extent x extent`` input."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    arrays = {
        "r": r((1, channels, extent, extent)),
        "c_g": r((1, classes, channels)),
        "lca.cls1.weight": r((channels, channels, 1, 1)) * 0.5,
        "lca.cls1.bias": r(channels) * 0.1,
        "lca.cls2.weight": r((classes, channels, 1, 1)) * 0.5,
        "head.weight": r((classes, channels, 1, 1)) * 0.5,
        "head.bias": r(classes) * 0.1,
    }
    labels = rng.integers(0, classes, (1, extent, extent))

    def loss(p):
        out = lca_forward(p["r"], p["c_g"], grid, p, "lca")
        return T.cross_entropy(T.conv2d(out, p["head.weight"], p["head.bias"]), labels)

    return loss, arrays


def gca_case(seed: int = 7, channels: int = 8, extent: int = 4, classes: int = 3):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    arrays = {
        "r_g": r((1, channels, extent, extent)),
        "gca.cls1.weight": r((channels, channels, 1, 1)) * 0.5,
        "gca.cls1.bias": r(channels) * 0.1,
        "gca.cls2.weight": r((classes, channels, 1, 1)) * 0.5,
        "gca.cls2.bias": r(classes) * 0.1,
    }
    w = r((1, classes, channels))

    def loss(p):
        _, reps = gca_forward(p["r_g"], p)
        return _weighted_sum(reps.reps, w)

    return loss, arrays


def decoder_case(seed: int = 7, extent: int = 32, width_factor: float = 1 / 16, classes: int = 3, d: int = 8):
    config = ModelConfig(classes=classes, width_factor=width_factor, d=d, grids=((1, 1),) * 4, seed=seed)
    params = init_model(config, extent, extent, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # non-zero biases so every branch is exercised
    arrays = {k: v.data + (0.05 * rng.standard_normal(v.shape) if k.endswith(".bias") else 0) for k, v in params.items()}
    image = Tensor(rng.standard_normal((1, 3, extent, extent)), dtype=np.float64)
    labels = rng.integers(0, classes, (1, extent, extent))

    def loss(p):
        logits, aux = model_forward(image, config, p)
        return T.add(T.cross_entropy(logits, labels), T.scale(T.cross_entropy(aux, labels), config.aux_weight))

    return loss, arrays


def run_suite(seed: int = 7, coords_per_tensor: int = 4) -> dict[str, float]:
    """Max relative error per check: every primitive, GCA, LCA and the full network."""
    results = {}
    for name, (loss, arrays) in primitive_cases(seed).items():
        results[name] = max(check_gradients(loss, arrays, seed=seed).values())
    loss, arrays = gca_case(seed)
    results["gca_forward"] = max(check_gradients(loss, arrays, seed=seed).values())
    loss, arrays = lca_case(seed)
    results["lca_forward"] = max(check_gradients(loss, arrays, seed=seed).values())
    loss, arrays = decoder_case(seed)
    results["decoder_end_to_end"] = max(
        check_gradients(loss, arrays, max_coords=coords_per_tensor, seed=seed).values()
    )
    return results
