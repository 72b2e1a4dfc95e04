"""Multi-scale class-aware segmentation network.

Wiring (stage 4 is the deepest, stride 32)::

    r1..r4          = toy backbone(image)
    D_g, C'_g       = GCA(r4)
    Y4              = F4 + LCA(F4, map4(C'_g)),        F4 = fmap4(r4)
    Y_i (i = 3..1)  = F_i + LCA(F_i, map_i(C'_g)),     F_i = fmap_i([r_i, up2(Y_{i+1})])
    logits          = up4(head(Y1 + up2(Y2) + up4(Y3) + up2(up4(Y4))))
    aux logits      = up2(up4(up4(D_g logits)))

``fmap`` is a 3x3 convolution plus rectifier to the working width ``d``,
``map`` a per-stage 1x1 convolution over class vectors, ``head`` a 1x1
convolution to ``K`` logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .class_aware import gca_forward, lca_forward
from .config import ModelConfig
from .graph import ModuleGraph, add_class_map, add_gca, add_lca_core
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    relu,
    reshape,
    swap_last,
    upsample_bilinear,
)

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class FeaturePyramid:
    r1: Tensor
    r2: Tensor
    r3: Tensor
    r4: Tensor

    @property
    def stages(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.r1, self.r2, self.r3, self.r4)


# -- graphs -------------------------------------------------------------------


def _add_backbone(g: ModuleGraph, image: str, config: ModelConfig) -> list[str]:
    x = g.relu(g.conv2d(image, config.stem_channels, 3, "backbone.stem", stride=2))
    outs = []
    for i, c in enumerate(config.stage_channels, 1):
        x = g.relu(g.conv2d(x, c, 3, f"backbone.stage{i}", stride=2), f"r{i}")
        outs.append(x)
    return outs


def _add_upsample(g: ModuleGraph, x: str, factor: int) -> str:
    for f in _factor_chain(factor):
        x = g.upsample(x, f)
    return x


def _factor_chain(factor: int) -> list[int]:
    chain = {1: [], 2: [2], 4: [4], 8: [4, 2], 16: [4, 4], 32: [4, 4, 2]}
    return chain[factor]


def build_decoder_graph(config: ModelConfig, batch: int, height: int, width: int) -> ModuleGraph:
    """Graph of the whole network (backbone included) for an ``batch x 3 x height x width`` input."""
    g = ModuleGraph()
    grids = config.effective_grids(height, width)
    image = g.input("image", (batch, 3, height, width))
    r = _add_backbone(g, image, config)
    d, k = config.d, config.classes
    aux, c_g = add_gca(g, r[3], d, k)
    ys: dict[int, str] = {}
    for i in (4, 3, 2, 1):
        x = r[i - 1] if i == 4 else g.concat([r[i - 1], g.upsample(ys[i + 1], 2)])
        f = g.relu(g.conv2d(x, d, 3, f"stage{i}.fmap"))
        cg = add_class_map(g, c_g, d, f"stage{i}.cmap")
        ys[i] = g.add(f, add_lca_core(g, f, cg, grids[i - 1], k, f"stage{i}.lca"), f"y{i}")
    fused = ys[1]
    for i in (2, 3, 4):
        fused = g.add(fused, _add_upsample(g, ys[i], 2 ** (i - 1)))
    logits = g.upsample(g.conv2d(fused, k, 1, "head"), 4, "logits")
    _add_upsample(g, aux, 32)
    return g


def build_lca_module_graph(
    in_shape: tuple[int, int, int, int],
    classes: int = 6,
    d: int = 40,
    grid: tuple[int, int] = (4, 4),
    class_width: int | None = None,
    prefix: str = "lca",
) -> ModuleGraph:
    """One LCA module as dropped into a network: feature mapping, class mapping,
    pre-classifier and the local class-aware core.

    ``class_width`` is the width of the incoming global class vectors
    (defaults to the input channel count).
    """
    n, c, h, w = in_shape
    g = ModuleGraph()
    r = g.input("features", in_shape)
    c_g = g.input("class_reps", (n, classes, class_width or c))
    f = g.relu(g.conv2d(r, d, 3, f"{prefix}.fmap"))
    cg = add_class_map(g, c_g, d, f"{prefix}.cmap")
    add_lca_core(g, f, cg, grid, classes, f"{prefix}.lca")
    return g


def build_gca_graph(in_shape, classes: int = 6, hidden: int = 40) -> ModuleGraph:
    g = ModuleGraph()
    add_gca(g, g.input("features", in_shape), hidden, classes)
    return g


# -- parameters ---------------------------------------------------------------


def init_params(graph: ModuleGraph, seed: int = 42, dtype=np.float32) -> dict[str, Tensor]:
    """He-normal weights and zero biases for every parameter in ``graph``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in graph.param_shapes().items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return params


def init_model(config: ModelConfig, height: int = 64, width: int = 64, dtype=np.float32) -> dict[str, Tensor]:
    return init_params(build_decoder_graph(config, 1, height, width), config.seed, dtype)


# -- forward ------------------------------------------------------------------


def _conv(x, params, prefix, stride=1):
    return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=stride)


def toy_backbone_forward(image: Tensor, params: Params) -> FeaturePyramid:
    """Stride-2 3x3 convolutions with rectifiers; stage outputs at strides 4/8/16/32."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects N x 3 x H x W images, got {image.shape}")
    if image.shape[2] % 32 or image.shape[3] % 32:
        raise ShapeError(f"image extents {image.shape[2]}x{image.shape[3]} must be divisible by 32")
    x = relu(_conv(image, params, "backbone.stem", stride=2))
    outs = []
    for i in range(1, 5):
        x = relu(_conv(x, params, f"backbone.stage{i}", stride=2))
        outs.append(x)
    return FeaturePyramid(*outs)


def feature_map(x: Tensor, stage: int, params: Params) -> Tensor:
    """3x3 convolution to the working width, then a rectifier."""
    return relu(_conv(x, params, f"stage{stage}.fmap"))


def class_map(c: Tensor, params: Params, prefix: str) -> Tensor:
    """Linear map ``N x K x C' -> N x K x d`` shared across classes (a 1x1 convolution)."""
    n, k, cin = c.shape
    t = reshape(swap_last(c), (n, cin, k, 1))
    y = _conv(t, params, prefix)
    return swap_last(reshape(y, (n, y.shape[1], k)))


def _upsample(x: Tensor, factor: int) -> Tensor:
    for f in _factor_chain(factor):
        x = upsample_bilinear(x, f)
    return x


def decoder_forward(
    pyramid: FeaturePyramid, config: ModelConfig, params: Params
) -> tuple[Tensor, Tensor]:
    """Returns ``(logits, aux_logits)``, both ``N x K x H x W`` at input resolution."""
    r = pyramid.stages
    for i in range(3):
        a, b = r[i].shape, r[i + 1].shape
        if (a[2], a[3]) != (2 * b[2], 2 * b[3]):
            raise ShapeError(f"stage {i + 2}: extents {b[2]}x{b[3]} are not half of stage {i + 1} {a[2]}x{a[3]}")
    grids = config.effective_grids(4 * r[0].shape[2], 4 * r[0].shape[3])
    dist, c_g = gca_forward(r[3], params, "gca")
    ys: dict[int, Tensor] = {}
    for i in (4, 3, 2, 1):
        try:
            x = r[i - 1] if i == 4 else concat([r[i - 1], upsample_bilinear(ys[i + 1], 2)])
            f = feature_map(x, i, params)
            cg = class_map(c_g.reps, params, f"stage{i}.cmap")
            ys[i] = add(f, lca_forward(f, cg, grids[i - 1], params, f"stage{i}.lca"))
        except (ShapeError, KeyError) as exc:
            raise ShapeError(f"stage {i}: {exc}") from exc
    fused = ys[1]
    for i in (2, 3, 4):
        fused = add(fused, _upsample(ys[i], 2 ** (i - 1)))
    logits = upsample_bilinear(_conv(fused, params, "head"), 4)
    aux = _upsample(dist.logits, 32)
    return logits, aux


def model_forward(image: Tensor, config: ModelConfig, params: Params) -> tuple[Tensor, Tensor]:
    return decoder_forward(toy_backbone_forward(image, params), config, params)
