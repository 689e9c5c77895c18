"""
Static analysis of layer graphs: receptive field, parameters, FLOPs and
memory traffic, plus an execution-based check of the receptive field.

Receptive fields here are theoretical supports (the set of input pixels
that can influence an output unit), propagated with

    r' = r + (k - 1) * j,    j' = j * s

through convolutions and pools. At a join (residual add or concat) the
widest field wins and the jumps must agree. Gradient-weighted "effective"
receptive fields are not computed.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import GraphError, LayerGraph, Node, infer_shapes
from .runtime import execute
from .weights import WeightStore

Number = Union[int, Fraction]
BYTES_PER_ELEMENT = 4


class ReceptiveFieldError(GraphError):
    pass


def _norm(v: Fraction) -> Number:
    return int(v) if v.denominator == 1 else v


@dataclass(frozen=True)
class RFInfo:
    """Support size ``r`` and jump ``j`` in input pixels along one axis.

    ``offset`` is the input coordinate of the field center of output index
    0 (linearized across upsampling layers).
    """

    r: Number
    j: Number
    offset: float = 0.0


def _propagate(node: Node, ins: List[RFInfo], axis: int) -> RFInfo:
    kind = node.kind
    p = node.params
    if kind in ("conv", "maxpool"):
        src = ins[0]
        k, s, pad = p["kernel"][axis], p["stride"][axis], p["padding"][axis]
        return RFInfo(_norm(Fraction(src.r) + (k - 1) * Fraction(src.j)),
                      _norm(Fraction(src.j) * s),
                      src.offset + ((k - 1) / 2 - pad) * float(src.j))
    if kind in ("bn", "relu"):
        return ins[0]
    if kind == "upsample":
        src = ins[0]
        f = p["factor"]
        if f == 1:
            return src
        j = Fraction(src.j)
        r = Fraction(src.r) + (j if p["mode"] == "bilinear" else 0)
        offset = src.offset + float(j) * (0.5 / f - 0.5)
        return RFInfo(_norm(r), _norm(j / f), offset)
    if kind in ("add", "concat"):
        jumps = {Fraction(i.j) for i in ins}
        if len(jumps) != 1:
            raise ReceptiveFieldError(
                f"{node.id}: join of fields with different jumps {sorted(map(str, jumps))}")
        return max(ins, key=lambda i: Fraction(i.r))
    raise ReceptiveFieldError(f"no receptive-field rule for {kind!r}")


def receptive_fields(graph: LayerGraph, axis: int = 0) -> Dict[str, RFInfo]:
    """RFInfo for every node; ``axis`` 0 is height, 1 is width."""
    out: Dict[str, RFInfo] = {}
    for node in graph.nodes:
        if node.kind == "input":
            out[node.id] = RFInfo(1, 1, 0.0)
        else:
            out[node.id] = _propagate(node, [out[i] for i in node.inputs], axis)
    return out


def receptive_field(graph: LayerGraph, node_id: Optional[str] = None, axis: int = 0) -> RFInfo:
    node_id = node_id or graph.output_id
    graph.node(node_id)
    return receptive_fields(graph, axis)[node_id]


# -- impulse response --------------------------------------------------------

def positive_store(graph: LayerGraph) -> WeightStore:
    """Weights under which every path carries a strictly positive signal.

    Conv kernels average their window (all taps 1/(cin*kh*kw)) so that
    magnitudes neither overflow nor vanish with depth; BN is the identity.
    """
    entries = []
    for node in graph.nodes:
        p = node.params
        if node.kind == "conv":
            kh, kw = p["kernel"]
            shape = (p["cout"], p["cin"], kh, kw)
            entries.append((node.weight("weight"), np.full(shape, 1.0 / (p["cin"] * kh * kw))))
            if p["bias"]:
                entries.append((node.weight("bias"), np.zeros(p["cout"])))
        elif node.kind == "bn":
            c = p["channels"]
            entries += [(node.weight("gamma"), np.ones(c)), (node.weight("beta"), np.zeros(c)),
                        (node.weight("mean"), np.zeros(c)), (node.weight("var"), np.ones(c))]
    return WeightStore(entries)


@dataclass
class SupportMeasurement:
    node_id: str
    output_pixel: Tuple[int, int]
    rows: Tuple[int, int]
    cols: Tuple[int, int]
    fits: bool
    evaluations: int = 0

    @property
    def size(self) -> Tuple[int, int]:
        return (self.rows[1] - self.rows[0] + 1, self.cols[1] - self.cols[0] + 1)


def _first_true(lo: int, hi: int, pred) -> int:
    """Smallest i in [lo, hi] with pred(i); pred(hi) must hold and pred must be monotone."""
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _last_true(lo: int, hi: int, pred) -> int:
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if pred(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def impulse_support_oracle(graph: LayerGraph, input_dims: Sequence[int],
                           node_ids: Optional[Sequence[str]] = None,
                           store: Optional[WeightStore] = None) -> Dict[str, SupportMeasurement]:
    """Measure receptive-field support by forward impulse responses.

    With strictly positive weights, an output unit is positive exactly when
    the input impulse lies inside its receptive field. For each node, the
    unit lit by a center impulse is chosen, then the extent of its field is
    found by bisection over impulse positions along the center row and
    column. ``fits`` is False when the field touches the image border, in
    which case the measured extent is clipped. Kernels smaller than their
    stride leave holes in the support, which bisection cannot measure.
    """
    n, c, h, w = (int(v) for v in input_dims)
    store = store if store is not None else positive_store(graph)
    node_ids = list(node_ids) if node_ids is not None else [graph.output_id]
    infer_shapes(graph, (1, c, h, w))
    cy, cx = h // 2, w // 2
    results = {}
    for nid in node_ids:
        calls = 0

        def response(y: int, x: int) -> np.ndarray:
            nonlocal calls
            calls += 1
            img = np.zeros((1, c, h, w), dtype=np.float32)
            img[:, :, y, x] = 1.0
            return execute(graph, store, img, [nid])[nid][0].sum(axis=0)

        lit = np.argwhere(response(cy, cx) > 0)
        if lit.size == 0:
            raise ReceptiveFieldError(f"{nid}: impulse response vanished")
        oy = (lit[:, 0].min() + lit[:, 0].max()) // 2
        ox = (lit[:, 1].min() + lit[:, 1].max()) // 2

        def reaches(y: int, x: int) -> bool:
            return bool(response(y, x)[oy, ox] > 0)

        top = _first_true(0, cy, lambda y: reaches(y, cx))
        bottom = _last_true(cy, h - 1, lambda y: reaches(y, cx))
        left = _first_true(0, cx, lambda x: reaches(cy, x))
        right = _last_true(cx, w - 1, lambda x: reaches(cy, x))
        fits = top > 0 and left > 0 and bottom < h - 1 and right < w - 1
        results[nid] = SupportMeasurement(nid, (int(oy), int(ox)), (top, bottom),
                                          (left, right), fits, calls)
    return results


# -- params / FLOPs / memory -------------------------------------------------

@dataclass
class NodeProfile:
    id: str
    kind: str
    params: int = 0
    stats: int = 0
    macs: int = 0
    flops: int = 0
    mem_bytes: int = 0
    out_dims: Tuple[int, ...] = ()
    r: Optional[Number] = None
    j: Optional[Number] = None


@dataclass
class ProfileReport:
    """Per-node costs. ``params`` are learnable values, ``stats`` BN running statistics."""

    name: str
    nodes: List[NodeProfile] = field(default_factory=list)
    input_dims: Tuple[int, ...] = ()

    def total(self, attr: str) -> int:
        return sum(getattr(n, attr) for n in self.nodes)

    @property
    def params(self) -> int:
        return self.total("params")

    @property
    def stats(self) -> int:
        return self.total("stats")

    @property
    def macs(self) -> int:
        return self.total("macs")

    @property
    def flops(self) -> int:
        return self.total("flops")

    @property
    def mem_bytes(self) -> int:
        return self.total("mem_bytes")

    def by_kind(self, kind: str) -> List[NodeProfile]:
        return [n for n in self.nodes if n.kind == kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        cols = ["id", "kind", "params", "macs", "flops", "mem_bytes", "r", "j"]
        wr.writerow(cols)
        for n in self.nodes:
            wr.writerow([n.id, n.kind, n.params, n.macs, n.flops, n.mem_bytes,
                         "" if n.r is None else n.r, "" if n.j is None else n.j])
        wr.writerow(["total", "", self.params, self.macs, self.flops, self.mem_bytes, "", ""])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'id':<34} {'kind':<9} {'params':>10} {'macs':>15} {'flops':>15} " \
               f"{'mem_bytes':>14} {'r':>6} {'j':>4}"
        lines = [f"# {self.name}  input {'x'.join(map(str, self.input_dims))}", head]
        for n in self.nodes:
            r = "" if n.r is None else str(n.r)
            j = "" if n.j is None else str(n.j)
            lines.append(f"{n.id:<34} {n.kind:<9} {n.params:>10} {n.macs:>15} {n.flops:>15} "
                         f"{n.mem_bytes:>14} {r:>6} {j:>4}")
        lines.append(f"{'total':<34} {'':<9} {self.params:>10} {self.macs:>15} "
                     f"{self.flops:>15} {self.mem_bytes:>14}")
        lines.append(f"# GMACs {self.macs / 1e9:.2f}  GFLOPs {self.flops / 1e9:.2f}  "
                     f"params {self.params / 1e6:.3f}M  traffic {self.mem_bytes / 2**20:.1f} MiB")
        return "\n".join(lines)


def _weight_elems(node: Node) -> Tuple[int, int]:
    p = node.params
    if node.kind == "conv":
        kh, kw = p["kernel"]
        return p["cout"] * p["cin"] * kh * kw + (p["cout"] if p["bias"] else 0), 0
    if node.kind == "bn":
        return 2 * p["channels"], 2 * p["channels"]
    return 0, 0


def _numel(dims) -> int:
    return int(np.prod(dims, dtype=np.int64))


def _node_costs(node: Node, shapes) -> Tuple[int, int, int]:
    """(macs, flops, mem_bytes) for one node under the unfused memory model."""
    if node.kind == "input":
        return 0, 0, 0
    out = _numel(shapes[node.id])
    ins = sum(_numel(shapes[i]) for i in node.inputs)
    learn, stats = _weight_elems(node)
    mem = BYTES_PER_ELEMENT * (ins + learn + stats + out)
    p = node.params
    if node.kind == "conv":
        kh, kw = p["kernel"]
        macs = p["cin"] * kh * kw * out
        return macs, 2 * macs, mem
    if node.kind in ("bn", "relu", "add"):
        return 0, out, mem
    if node.kind == "maxpool":
        kh, kw = p["kernel"]
        return 0, out * (kh * kw - 1), mem
    if node.kind == "upsample":
        return 0, (4 * out if p["mode"] == "bilinear" and p["factor"] > 1 else 0), mem
    if node.kind == "concat":
        return 0, 0, mem
    raise GraphError(f"no cost rule for {node.kind!r}")


def _report(graph: LayerGraph, input_dims, params=True, compute=True, memory=True,
            with_rf=False) -> ProfileReport:
    shapes = infer_shapes(graph, input_dims) if input_dims is not None else None
    rfs = receptive_fields(graph) if with_rf else {}
    report = ProfileReport(graph.name, input_dims=tuple(input_dims) if input_dims else ())
    for node in graph.nodes:
        np_ = NodeProfile(node.id, node.kind)
        if params:
            np_.params, np_.stats = _weight_elems(node)
        if shapes is not None:
            macs, flops, mem = _node_costs(node, shapes)
            np_.out_dims = shapes[node.id]
            if compute:
                np_.macs, np_.flops = macs, flops
            if memory:
                np_.mem_bytes = mem
        if node.id in rfs:
            np_.r, np_.j = rfs[node.id].r, rfs[node.id].j
        report.nodes.append(np_)
    return report


def count_params(graph: LayerGraph) -> ProfileReport:
    """Learnable parameters (conv weights/biases, BN gamma/beta) and BN statistics."""
    return _report(graph, None)


def count_flops(graph: LayerGraph, input_dims: Sequence[int]) -> ProfileReport:
    """Full per-node profile: params, macs, flops and memory traffic.

    Convolutions report macs = cin*kh*kw*outputs and flops = 2*macs.
    Elementwise nodes (bn, relu, add) report one flop per output element
    and no macs; concat and upsample report no macs.
    """
    return _report(graph, input_dims)


def memory_traffic_estimate(graph: LayerGraph, input_dims: Sequence[int]) -> ProfileReport:
    """Upper-bound traffic assuming no fusion: 4 bytes x (inputs + weights + outputs) per node."""
    return _report(graph, input_dims, params=False, compute=False)


def profile(graph: LayerGraph, input_dims: Sequence[int]) -> ProfileReport:
    """count_flops plus the receptive field (height axis) of every node."""
    return _report(graph, input_dims, with_rf=True)
