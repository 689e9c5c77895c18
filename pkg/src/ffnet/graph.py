"""Immutable layer graphs, a small builder for them, and static shape inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .kernels import ShapeError, conv_output_size

Dims = Tuple[int, int, int, int]

NODE_KINDS = ("input", "conv", "bn", "relu", "add", "maxpool", "upsample", "concat")
BN_SUFFIXES = ("gamma", "beta", "mean", "var")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: Tuple[str, ...] = ()
    params: dict = field(default_factory=dict)
    weights: Tuple[str, ...] = ()

    def weight(self, suffix: str) -> str:
        return f"{self.id}.{suffix}"


@dataclass(frozen=True)
class LayerGraph:
    """A topologically ordered DAG of layer nodes.

    ``taps`` lists the backbone feature maps handed to the Up-head, finest
    first; ``pyramid`` lists the Up-head outputs, also finest first. Both
    are empty for graphs that are not full segmentation models.
    """

    name: str
    nodes: Tuple[Node, ...]
    output_id: str
    taps: Tuple[Tuple[str, str], ...] = ()
    pyramid: Tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise GraphError(f"graph must have exactly one input node, found {len(inputs)}")
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise GraphError(f"unknown node kind {n.kind!r}")
            if n.id in seen:
                raise GraphError(f"duplicate node id {n.id!r}")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"node {n.id!r} consumes {i!r} before it is defined")
            seen.add(n.id)
        refs = [self.output_id, *self.pyramid, *(t for _, t in self.taps)]
        for r in refs:
            if r not in seen:
                raise GraphError(f"unknown node id {r!r}")

    @cached_property
    def index(self) -> Dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes if n.kind == "input")

    @property
    def input_channels(self) -> int:
        return self.index[self.input_id].params["channels"]

    def node(self, node_id: str) -> Node:
        try:
            return self.index[node_id]
        except KeyError:
            raise GraphError(f"unknown node id {node_id!r}") from None

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out

    def ancestors(self, node_ids: Iterable[str]) -> List[Node]:
        """Nodes needed to compute ``node_ids``, in execution order."""
        need = set()
        stack = list(node_ids)
        while stack:
            nid = stack.pop()
            if nid in need:
                continue
            need.add(nid)
            stack.extend(self.node(nid).inputs)
        return [n for n in self.nodes if n.id in need]

    def weight_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for n in self.nodes:
            p = n.params
            if n.kind == "conv":
                kh, kw = p["kernel"]
                shapes[n.weight("weight")] = (p["cout"], p["cin"], kh, kw)
                if p["bias"]:
                    shapes[n.weight("bias")] = (p["cout"],)
            elif n.kind == "bn":
                for s in BN_SUFFIXES:
                    shapes[n.weight(s)] = (p["channels"],)
        return shapes

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def summary(self) -> str:
        kinds = {}
        for n in self.nodes:
            kinds[n.kind] = kinds.get(n.kind, 0) + 1
        body = ", ".join(f"{k}={v}" for k, v in kinds.items())
        return f"{self.name}: {len(self.nodes)} nodes ({body})"


class GraphBuilder:
    """Mutable helper that appends nodes and tracks channel counts.

    Every method returns the id of the node it created, so subgraphs are
    composed by threading ids through plain function calls.
    """

    def __init__(self, name: str = "graph", in_channels: int = 3):
        self.name = name
        self.nodes: List[Node] = []
        self.channels: Dict[str, int] = {}
        self._add(Node("input", "input", params={"channels": in_channels}), in_channels)

    @property
    def input(self) -> str:
        return "input"

    def _add(self, node: Node, channels: int) -> str:
        if node.id in self.channels:
            raise GraphError(f"duplicate node id {node.id!r}")
        for i in node.inputs:
            if i not in self.channels:
                raise GraphError(f"unknown input {i!r} for {node.id!r}")
        self.nodes.append(node)
        self.channels[node.id] = channels
        return node.id

    def conv(self, name: str, x: str, cout: int, kernel: int, stride: int = 1,
             padding: Optional[int] = None, bias: bool = False) -> str:
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
        if padding is None:
            padding = (kh // 2, kw // 2)
        ph, pw = (padding, padding) if isinstance(padding, int) else padding
        params = {"cin": self.channels[x], "cout": cout, "kernel": (kh, kw),
                  "stride": (sh, sw), "padding": (ph, pw), "bias": bias}
        weights = (f"{name}.weight",) + ((f"{name}.bias",) if bias else ())
        return self._add(Node(name, "conv", (x,), params, weights), cout)

    def bn(self, name: str, x: str, eps: float = 1e-5) -> str:
        c = self.channels[x]
        weights = tuple(f"{name}.{s}" for s in BN_SUFFIXES)
        return self._add(Node(name, "bn", (x,), {"channels": c, "eps": eps}, weights), c)

    def relu(self, name: str, x: str) -> str:
        return self._add(Node(name, "relu", (x,)), self.channels[x])

    def add(self, name: str, a: str, b: str) -> str:
        if self.channels[a] != self.channels[b]:
            raise GraphError(f"add {name!r}: channel mismatch {self.channels[a]} vs {self.channels[b]}")
        return self._add(Node(name, "add", (a, b)), self.channels[a])

    def maxpool(self, name: str, x: str, kernel: int, stride: int, padding: int = 0) -> str:
        params = {"kernel": (kernel, kernel), "stride": (stride, stride),
                  "padding": (padding, padding)}
        return self._add(Node(name, "maxpool", (x,), params), self.channels[x])

    def upsample(self, name: str, x: str, factor: int, mode: str) -> str:
        if mode not in ("nearest", "bilinear"):
            raise GraphError(f"unknown upsample mode {mode!r}")
        if factor < 1:
            raise GraphError("upsample factor must be >= 1")
        return self._add(Node(name, "upsample", (x,), {"factor": factor, "mode": mode}),
                         self.channels[x])

    def concat(self, name: str, xs: Sequence[str]) -> str:
        if not xs:
            raise GraphError("concat needs at least one input")
        return self._add(Node(name, "concat", tuple(xs)), sum(self.channels[x] for x in xs))

    def conv_bn(self, name: str, x: str, cout: int, kernel: int, stride: int = 1,
                act: bool = True) -> str:
        y = self.conv(f"{name}.conv", x, cout, kernel, stride)
        y = self.bn(f"{name}.bn", y)
        return self.relu(f"{name}.relu", y) if act else y

    def finish(self, output: str, taps=(), pyramid=()) -> LayerGraph:
        return LayerGraph(self.name, tuple(self.nodes), output, tuple(taps), tuple(pyramid))


def infer_shapes(graph: LayerGraph, input_dims: Sequence[int]) -> Dict[str, Dims]:
    """Output dims for every node, computed from shape rules alone.

    Raises ShapeError when any rule produces a non-positive dimension or
    when an add/concat receives spatially mismatched operands (typically an
    input size not divisible by the model's output stride).
    """
    if len(input_dims) != 4:
        raise ShapeError(f"input dims must be (n, c, h, w), got {tuple(input_dims)}")
    n, c, h, w = (int(v) for v in input_dims)
    if min(n, c, h, w) < 1:
        raise ShapeError(f"input dims must be positive, got {tuple(input_dims)}")
    if c != graph.input_channels:
        raise ShapeError(f"graph expects {graph.input_channels} input channels, got {c}")
    shapes: Dict[str, Dims] = {}
    for node in graph.nodes:
        p = node.params
        ins = [shapes[i] for i in node.inputs]
        if node.kind == "input":
            shapes[node.id] = (n, c, h, w)
        elif node.kind in ("conv", "maxpool"):
            (kh, kw), (sh, sw), (ph, pw) = p["kernel"], p["stride"], p["padding"]
            xn, xc, xh, xw = ins[0]
            if node.kind == "conv" and xc != p["cin"]:
                raise ShapeError(f"{node.id}: expects {p['cin']} channels, got {xc}")
            try:
                oh = conv_output_size(xh, kh, sh, ph)
                ow = conv_output_size(xw, kw, sw, pw)
            except ShapeError as exc:
                raise ShapeError(f"{node.id}: {exc}") from None
            cout = p["cout"] if node.kind == "conv" else xc
            shapes[node.id] = (xn, cout, oh, ow)
        elif node.kind in ("bn", "relu"):
            shapes[node.id] = ins[0]
        elif node.kind == "add":
            if ins[0] != ins[1]:
                raise ShapeError(f"{node.id}: add of mismatched shapes {ins[0]} and {ins[1]}")
            shapes[node.id] = ins[0]
        elif node.kind == "upsample":
            f = p["factor"]
            xn, xc, xh, xw = ins[0]
            shapes[node.id] = (xn, xc, xh * f, xw * f)
        elif node.kind == "concat":
            base = ins[0]
            for s in ins[1:]:
                if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
                    raise ShapeError(f"{node.id}: concat of mismatched shapes {base} and {s}")
            shapes[node.id] = (base[0], sum(s[1] for s in ins), base[2], base[3])
    return shapes
