"""Declarative layer graphs.

A :class:`ModuleGraph` lists layers in execution order, each naming the
primitive it runs (the same names the tape records), its input tensors, its
output shape and the parameter shapes it owns.  Builders propagate and check
shapes as layers are appended, so a finished graph is shape-consistent.

The decoder initialises its parameters from the graph and the profiler
reads costs off it; tests compare it op-for-op with what the forward pass
actually records.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

from .tensor import ShapeError


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple[str, ...]
    out_shape: tuple[int, ...]
    params: dict[str, tuple[int, ...]] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


class ModuleGraph:
    """Ordered layer descriptors with shape propagation.

    Every builder method returns the name of the tensor it produces, which
    is also the layer name.
    """

    def __init__(self):
        self.inputs: dict[str, tuple[int, ...]] = {}
        self.layers: list[Layer] = []
        self._shapes: dict[str, tuple[int, ...]] = {}
        self._counter = 0

    def __len__(self) -> int:
        return len(self.layers)

    def shape(self, name: str) -> tuple[int, ...]:
        try:
            return self._shapes[name]
        except KeyError:
            raise ShapeError(f"unresolved tensor {name!r} in graph") from None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            out.update(layer.params)
        return out

    def _name(self, kind: str, name: str | None) -> str:
        self._counter += 1
        name = name or f"{kind}_{self._counter}"
        if name in self._shapes:
            raise ValueError(f"duplicate tensor name {name!r}")
        return name

    def _add(self, kind, inputs, out_shape, name=None, params=None, **attrs) -> str:
        for i in inputs:
            self.shape(i)
        name = self._name(kind, name)
        self.layers.append(Layer(name, kind, tuple(inputs), tuple(out_shape), dict(params or {}), attrs))
        self._shapes[name] = tuple(out_shape)
        return name

    def extend(self, other: "ModuleGraph", prefix: str) -> dict[str, str]:
        """Append ``other`` under a name prefix; its inputs become graph inputs."""
        rename = {}
        for name, shape in other.inputs.items():
            rename[name] = self.input(f"{prefix}/{name}", shape)
        for layer in other.layers:
            new = f"{prefix}/{layer.name}"
            self.layers.append(
                Layer(new, layer.kind, tuple(rename[i] for i in layer.inputs), layer.out_shape,
                      {f"{prefix}/{k}": v for k, v in layer.params.items()}, dict(layer.attrs))
            )
            self._shapes[new] = layer.out_shape
            rename[layer.name] = new
        return rename

    # -- builders -----------------------------------------------------------

    def input(self, name: str, shape) -> str:
        if name in self._shapes:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.inputs[name] = tuple(shape)
        self._shapes[name] = tuple(shape)
        return name

    def conv2d(self, x: str, cout: int, kernel: int, prefix: str, stride: int = 1, bias: bool = True,
               name=None) -> str:
        n, cin, h, w = self.shape(x)
        if stride == 2 and (h % 2 or w % 2):
            raise ShapeError(f"{prefix}: stride-2 conv on odd extents {h}x{w}")
        params = {f"{prefix}.weight": (cout, cin, kernel, kernel)}
        if bias:
            params[f"{prefix}.bias"] = (cout,)
        return self._add("conv2d", [x], (n, cout, h // stride, w // stride), name or prefix, params,
                         kernel=kernel, stride=stride, prefix=prefix)

    def relu(self, x: str, name=None) -> str:
        return self._add("relu", [x], self.shape(x), name)

    def add(self, a: str, b: str, name=None) -> str:
        if self.shape(a) != self.shape(b):
            raise ShapeError(f"add shape mismatch: {self.shape(a)} vs {self.shape(b)}")
        return self._add("add", [a, b], self.shape(a), name)

    def matmul(self, a: str, b: str, name=None) -> str:
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 3 or len(sb) != 3 or sa[0] != sb[0] or sa[2] != sb[1]:
            raise ShapeError(f"matmul shape mismatch: {sa} x {sb}")
        return self._add("matmul_batched", [a, b], (sa[0], sa[1], sb[2]), name)

    def softmax(self, x: str, axis: int, name=None) -> str:
        return self._add("softmax", [x], self.shape(x), name, axis=axis)

    def upsample(self, x: str, factor: int, name=None) -> str:
        n, c, h, w = self.shape(x)
        return self._add("upsample_bilinear", [x], (n, c, h * factor, w * factor), name, factor=factor)

    def patch_split(self, x: str, grid, name=None) -> str:
        n, c, h, w = self.shape(x)
        gh, gw = grid
        if h % gh or w % gw:
            raise ShapeError(f"patch_split: extents {h}x{w} not divisible by grid {gh}x{gw}")
        return self._add("patch_split", [x], (n * gh * gw, c, h // gh, w // gw), name, grid=tuple(grid))

    def patch_merge(self, x: str, grid, name=None) -> str:
        b, c, h, w = self.shape(x)
        gh, gw = grid
        if b % (gh * gw):
            raise ShapeError(f"patch_merge: batch {b} not divisible by grid {gh}x{gw}")
        return self._add("patch_merge", [x], (b // (gh * gw), c, h * gh, w * gw), name, grid=tuple(grid))

    def reshape(self, x: str, shape, name=None) -> str:
        if prod(shape) != prod(self.shape(x)):
            raise ShapeError(f"cannot reshape {self.shape(x)} to {tuple(shape)}")
        return self._add("reshape", [x], tuple(shape), name)

    def swap_last(self, x: str, name=None) -> str:
        s = self.shape(x)
        return self._add("swap_last", [x], s[:-2] + (s[-1], s[-2]), name)

    def repeat_batch(self, x: str, times: int, name=None) -> str:
        s = self.shape(x)
        return self._add("repeat_batch", [x], (s[0] * times,) + s[1:], name, times=times)

    def concat(self, xs, axis: int = 1, name=None) -> str:
        shapes = [self.shape(x) for x in xs]
        ref = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
                raise ShapeError(f"concat shape mismatch: {shapes}")
        ref[axis] = sum(s[axis] for s in shapes)
        return self._add("concat", list(xs), tuple(ref), name, axis=axis)


# -- reusable sub-graphs ------------------------------------------------------


def add_class_logits(g: ModuleGraph, r: str, hidden: int, classes: int, prefix: str,
                     bias: bool = True) -> str:
    h = g.relu(g.conv2d(r, hidden, 1, f"{prefix}.cls1"))
    return g.conv2d(h, classes, 1, f"{prefix}.cls2", bias=bias)


def add_class_map(g: ModuleGraph, c: str, width: int, prefix: str) -> str:
    """1x1 convolution along the channel axis of ``N x K x C'`` class vectors."""
    n, k, cin = g.shape(c)
    t = g.reshape(g.swap_last(c, f"{prefix}/t"), (n, cin, k, 1), f"{prefix}/as_map")
    y = g.conv2d(t, width, 1, prefix)
    return g.swap_last(g.reshape(y, (n, width, k), f"{prefix}/flat"), f"{prefix}/out")


def add_gca(g: ModuleGraph, r_g: str, hidden: int, classes: int, prefix: str = "gca") -> tuple[str, str]:
    """Returns ``(class_logits, class_reps)`` tensor names."""
    n, c, h, w = g.shape(r_g)
    logits = add_class_logits(g, r_g, hidden, classes, prefix)
    probs = g.softmax(g.reshape(logits, (n, classes, h * w)), axis=2)
    probs = g.reshape(probs, (n, classes, h, w))
    reps = g.matmul(g.reshape(probs, (n, classes, h * w)), g.swap_last(g.reshape(r_g, (n, c, h * w))),
                    f"{prefix}/reps")
    return logits, reps


def add_lca_core(g: ModuleGraph, r: str, c_g: str, grid, classes: int, prefix: str) -> str:
    n, c, hh, ww = g.shape(r)
    gh, gw = grid
    if hh % gh or ww % gw:
        raise ShapeError(f"{prefix}: extents {hh}x{ww} not divisible by grid {gh}x{gw}")
    h, w = hh // gh, ww // gw
    b = n * gh * gw
    logits = add_class_logits(g, r, c, classes, prefix, bias=False)
    r_l = g.swap_last(g.reshape(g.patch_split(r, grid), (b, c, h * w)))
    d_l = g.softmax(g.reshape(g.patch_split(logits, grid), (b, classes, h * w)), axis=2)
    c_l = g.matmul(d_l, r_l, f"{prefix}/local_reps")
    aff = g.softmax(g.matmul(r_l, g.swap_last(c_l)), axis=2, name=f"{prefix}/affinity")
    r_o = g.matmul(aff, g.repeat_batch(c_g, gh * gw))
    return g.patch_merge(g.reshape(g.swap_last(r_o), (b, c, h, w)), grid, f"{prefix}/out")
