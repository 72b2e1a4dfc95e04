"""Analytic parameter, FLOP and activation-memory accounting over a ModuleGraph.

Counting conventions (all exact integers computed from shapes):

* ``conv2d``: ``k*k*Cin*Cout*Ho*Wo`` multiply-adds per sample (bias excluded).
* ``matmul_batched``: ``B*M*P*Q`` multiply-adds.
* ``upsample_bilinear``: 4 multiply-adds per output element.
* ``softmax``: 3 operations per element (exp, sum, divide); ``relu`` and
  ``add``: 1 per element.  These are not multiply-adds and count the same
  under both conventions.
* data movement (split/merge/reshape/transpose/concat/repeat): free.

Under the ``"flops"`` convention a multiply-add counts as 2 operations;
under ``"macs"`` it counts as 1.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import prod
from typing import Iterable, Sequence

from .graph import Layer, ModuleGraph

SOFTMAX_OPS_PER_ELEMENT = 3
UPSAMPLE_MACS_PER_ELEMENT = 4
BYTES_PER_ELEMENT = 4
CONVENTIONS = ("flops", "macs")


@dataclass(frozen=True)
class CostReport:
    module: str
    params: int
    flops: int
    activation_bytes: int
    convention: str = "flops"

    def row(self) -> list:
        return [self.module, self.params, self.flops, self.activation_bytes]


def _check_convention(convention: str) -> int:
    if convention not in CONVENTIONS:
        raise ValueError(f"flop convention must be one of {CONVENTIONS}, got {convention!r}")
    return 2 if convention == "flops" else 1


def layer_macs_and_ops(layer: Layer, graph: ModuleGraph) -> tuple[int, int]:
    """``(multiply_adds, other_ops)`` for one layer."""
    out = prod(layer.out_shape)
    kind = layer.kind
    if kind == "conv2d":
        n, cout, ho, wo = layer.out_shape
        cin = graph.shape(layer.inputs[0])[1]
        k = layer.attrs["kernel"]
        return k * k * cin * cout * ho * wo * n, 0
    if kind == "matmul_batched":
        b, m, p = graph.shape(layer.inputs[0])
        return b * m * p * layer.out_shape[2], 0
    if kind == "upsample_bilinear":
        return UPSAMPLE_MACS_PER_ELEMENT * out, 0
    if kind == "softmax":
        return 0, SOFTMAX_OPS_PER_ELEMENT * out
    if kind in ("relu", "add"):
        return 0, out
    return 0, 0


def count_params(graph: ModuleGraph) -> int:
    return sum(prod(s) for s in graph.param_shapes().values())


def count_flops(graph: ModuleGraph, input_shape: Sequence[int] | None = None, convention: str = "flops") -> int:
    """Total operations of ``graph``.

    ``input_shape``, when given, must match the graph's (single) input; graphs
    are built for a concrete input, so it only guards against mismatches.
    """
    per_mac = _check_convention(convention)
    if input_shape is not None:
        shapes = list(graph.inputs.values())
        if not shapes or tuple(shapes[0][-len(input_shape):]) != tuple(input_shape):
            raise ValueError(f"input shape {tuple(input_shape)} does not match graph input {shapes[:1]}")
    total = 0
    for layer in graph.layers:
        macs, ops = layer_macs_and_ops(layer, graph)
        total += per_mac * macs + ops
    return total


def estimate_memory(graph: ModuleGraph, input_shape: Sequence[int] | None = None) -> int:
    """Peak bytes of live activations under sequential execution.

    A tensor is live from the step that produces it (graph inputs from the
    start) through the last step that reads it; graph outputs are released
    after the step that produces them.
    """
    del input_shape  # graph already carries concrete shapes
    last_use: dict[str, int] = {}
    for step, layer in enumerate(graph.layers):
        for name in layer.inputs:
            last_use[name] = step
    nbytes = {name: prod(s) * BYTES_PER_ELEMENT for name, s in graph.inputs.items()}
    born = {name: 0 for name in graph.inputs}
    for step, layer in enumerate(graph.layers):
        nbytes[layer.name] = prod(layer.out_shape) * BYTES_PER_ELEMENT
        born[layer.name] = step
    peak = 0
    for step in range(len(graph.layers)):
        live = sum(
            b for name, b in nbytes.items()
            if born[name] <= step <= last_use.get(name, born[name])
        )
        peak = max(peak, live)
    return peak


def profile(graph: ModuleGraph, module: str = "graph", convention: str = "flops") -> CostReport:
    return CostReport(module, count_params(graph), count_flops(graph, convention=convention),
                      estimate_memory(graph), convention)


# -- calibration --------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    d: int
    params: int
    flops: int
    deviation: float


def calibrate_width(
    target_params: float,
    target_flops: float,
    sweep: Iterable[int],
    build,
    convention: str = "flops",
) -> tuple[int, list[SweepRow]]:
    """Choose the width minimising ``|params/target - 1| + |flops/target - 1|``.

    ``build(d)`` returns the graph for width ``d``.  Ties go to the smaller
    width.  Returns the chosen width and the full sweep table.
    """
    rows = []
    for d in sweep:
        g = build(d)
        p, f = count_params(g), count_flops(g, convention=convention)
        dev = abs(p / target_params - 1.0) + abs(f / target_flops - 1.0)
        rows.append(SweepRow(d, p, f, dev))
    if not rows:
        raise ValueError("calibrate_width needs a non-empty sweep")
    best = min(rows, key=lambda r: (r.deviation, r.d))
    return best.d, rows


# -- reports ------------------------------------------------------------------


def format_table(reports: Sequence[CostReport]) -> str:
    unit = "GFLOPs" if not reports or reports[0].convention == "flops" else "GMACs"
    lines = [f"{'module':<12} {'params (M)':>11} {unit:>10} {'memory (MB)':>12}"]
    for r in reports:
        lines.append(f"{r.module:<12} {r.params / 1e6:>11.3f} {r.flops / 1e9:>10.3f} {r.activation_bytes / 2**20:>12.1f}")
    return "\n".join(lines)


def format_csv(reports: Sequence[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["module", "params", "flops", "activation_bytes"])
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def format_sweep(rows: Sequence[SweepRow], chosen: int) -> str:
    lines = [f"{'d':>5} {'params':>10} {'flops':>15} {'deviation':>10}"]
    for r in rows:
        mark = "  <-" if r.d == chosen else ""
        lines.append(f"{r.d:>5} {r.params:>10} {r.flops:>15} {r.deviation:>10.4f}{mark}")
    return "\n".join(lines)
