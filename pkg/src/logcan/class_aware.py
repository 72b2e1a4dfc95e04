"""Global and local class-aware context modules.

Both modules summarise a feature map into one descriptor per class, using a
pre-classified class-probability map as aggregation weights:

* GCA aggregates over the whole (deepest) feature map.
* LCA aggregates inside each patch of a grid, measures pixel/local-class
  similarity, and uses that affinity to mix in the global descriptors.

Normalisation: aggregation weights are softmax-normalised over the spatial
axis per class (so every descriptor is a convex combination of pixel
features), and the affinity is softmax-normalised over classes per pixel.
No temperature is applied before either softmax.

Parameters are read from a flat ``name -> Tensor`` mapping. A pre-classifier
under prefix ``p`` uses ``p.cls1.weight``, ``p.cls1.bias`` (hidden layer)
and ``p.cls2.weight`` plus an optional ``p.cls2.bias`` (class logits).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    matmul_batched,
    patch_merge,
    patch_split,
    relu,
    repeat_batch,
    reshape,
    softmax,
    swap_last,
)

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class ClassDistribution:
    """Per-class probability maps plus the logits they came from.

    ``normalization_axis`` is ``"class"`` (each pixel sums to one over K)
    or ``"spatial"`` (each class map sums to one over H*W).
    """

    probs: Tensor
    logits: Tensor
    normalization_axis: str


@dataclass(frozen=True)
class GlobalClassReps:
    reps: Tensor  # N x K x C'


@dataclass(frozen=True)
class LocalClassReps:
    reps: Tensor  # (N*Nh*Nw) x K x C
    grid: tuple[int, int]
    patch: tuple[int, int]


@dataclass(frozen=True)
class AffinityMap:
    aff: Tensor  # (N*Nh*Nw) x (h*w) x K, rows sum to one


@dataclass(frozen=True)
class LCAOutput:
    output: Tensor
    distribution: ClassDistribution
    local_reps: LocalClassReps
    affinity: AffinityMap


def class_logits(r: Tensor, params: Params, prefix: str) -> Tensor:
    """Two 1x1 convolutions with a rectifier in between: ``N x C x H x W -> N x K x H x W``.

    The second convolution's bias is optional; LCA pre-classifiers omit it
    because a per-class constant cancels in their spatial softmax.
    """
    hidden = relu(conv2d(r, params[f"{prefix}.cls1.weight"], params[f"{prefix}.cls1.bias"]))
    return conv2d(hidden, params[f"{prefix}.cls2.weight"], params.get(f"{prefix}.cls2.bias"))


def normalize_distribution(logits: Tensor, axis: str) -> Tensor:
    n, k, h, w = logits.shape
    if axis == "class":
        return softmax(logits, axis=1)
    if axis == "spatial":
        return reshape(softmax(reshape(logits, (n, k, h * w)), axis=2), (n, k, h, w))
    raise ValueError(f"normalization axis must be 'class' or 'spatial', got {axis!r}")


def pre_classify(r: Tensor, params: Params, prefix: str, axis: str = "class") -> ClassDistribution:
    logits = class_logits(r, params, prefix)
    return ClassDistribution(normalize_distribution(logits, axis), logits, axis)


def aggregate_classes(weights: Tensor, features: Tensor) -> Tensor:
    """``B x K x P`` weights times ``B x C x P`` features -> ``B x K x C`` descriptors."""
    return matmul_batched(weights, swap_last(features))


def gca_forward(r_g: Tensor, params: Params, prefix: str = "gca") -> tuple[ClassDistribution, GlobalClassReps]:
    """Global class representations of the deepest feature map."""
    n, c, h, w = r_g.shape
    dist = pre_classify(r_g, params, prefix, axis="spatial")
    k = dist.probs.shape[1]
    reps = aggregate_classes(reshape(dist.probs, (n, k, h * w)), reshape(r_g, (n, c, h * w)))
    return dist, GlobalClassReps(reps)


def _check_lca_inputs(r: Tensor, c_g: Tensor, params: Params, prefix: str) -> int:
    if r.ndim != 4:
        raise ShapeError(f"LCA expects an N x C x H x W feature map, got {r.shape}")
    k = params[f"{prefix}.cls2.weight"].shape[0]
    if c_g.ndim != 3 or c_g.shape[0] != r.shape[0] or c_g.shape[1] != k:
        raise ShapeError(f"global class reps {c_g.shape} do not match batch {r.shape[0]} and {k} classes")
    if c_g.shape[2] != r.shape[1]:
        raise ShapeError(
            f"channel mismatch: global class reps have width {c_g.shape[2]}, features have {r.shape[1]}"
        )
    return k


def _lca(r, c_g, grid, params, prefix):
    k = _check_lca_inputs(r, c_g, params, prefix)
    n, c, hh, ww = r.shape
    gh, gw = grid
    if hh % gh or ww % gw:
        raise ShapeError(f"LCA: feature extents {hh}x{ww} not divisible by grid {gh}x{gw}")
    h, w = hh // gh, ww // gw
    b = n * gh * gw

    logits = class_logits(r, params, prefix)
    r_l = swap_last(reshape(patch_split(r, grid), (b, c, h * w)))  # B x hw x C
    d_l = softmax(reshape(patch_split(logits, grid), (b, k, h * w)), axis=2)
    c_l = matmul_batched(d_l, r_l)  # B x K x C
    aff = softmax(matmul_batched(r_l, swap_last(c_l)), axis=2)  # B x hw x K
    r_o = matmul_batched(aff, repeat_batch(c_g, gh * gw))  # B x hw x C
    out = patch_merge(reshape(swap_last(r_o), (b, c, h, w)), grid)
    return out, logits, d_l, c_l, aff


def lca_details(
    r: Tensor, c_g: Tensor, grid: tuple[int, int], params: Params, prefix: str = "lca"
) -> LCAOutput:
    """Like :func:`lca_forward`, but also returns the class distribution
    (spatially normalised within each patch), local class reps and affinity."""
    out, logits, d_l, c_l, aff = _lca(r, c_g, grid, params, prefix)
    n, k, hh, ww = logits.shape
    gh, gw = grid
    h, w = hh // gh, ww // gw
    probs = patch_merge(reshape(d_l, (d_l.shape[0], k, h, w)), grid)
    return LCAOutput(
        output=out,
        distribution=ClassDistribution(probs, logits, "spatial"),
        local_reps=LocalClassReps(c_l, (gh, gw), (h, w)),
        affinity=AffinityMap(aff),
    )


def lca_forward(
    r: Tensor, c_g: Tensor, grid: tuple[int, int], params: Params, prefix: str = "lca"
) -> Tensor:
    """Augment ``r`` (``N x C x H x W``) with global class reps ``c_g`` (``N x K x C``)
    through per-patch local class representations.  Returns ``N x C x H x W``.

    Per patch: class weights ``D_l`` (softmax over the patch's pixels) pool
    local class reps ``C_l = D_l R_l``; the affinity ``softmax_K(R_l C_l^T)``
    then mixes the global reps, ``R_o = A C_g``; patches are merged back.
    """
    return _lca(r, c_g, grid, params, prefix)[0]


def lca_global_variant(r: Tensor, c_g: Tensor, params: Params, prefix: str = "lca") -> Tensor:
    """Whole-map LCA (a single patch) computed without patch splitting."""
    k = _check_lca_inputs(r, c_g, params, prefix)
    n, c, hh, ww = r.shape
    logits = class_logits(r, params, prefix)
    feats = swap_last(reshape(r, (n, c, hh * ww)))  # N x HW x C
    weights = softmax(reshape(logits, (n, k, hh * ww)), axis=2)
    reps = matmul_batched(weights, feats)
    aff = softmax(matmul_batched(feats, swap_last(reps)), axis=2)
    return reshape(swap_last(matmul_batched(aff, c_g)), (n, c, hh, ww))
