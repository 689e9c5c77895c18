"""Graph execution, batch-norm folding and batch-norm statistics calibration."""
from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels as K
from .graph import Dims, GraphError, LayerGraph, Node, infer_shapes
from .weights import WeightStore, check_store


class FoldError(GraphError):
    pass


def eval_node(node: Node, inputs: Sequence[np.ndarray], store: Mapping, out=None,
              workspace: Optional[K.Workspace] = None) -> np.ndarray:
    p = node.params
    kind = node.kind
    if kind == "conv":
        bias = store[node.weight("bias")] if p["bias"] else None
        return K.conv2d(inputs[0], store[node.weight("weight")], bias,
                        p["stride"], p["padding"], out=out, workspace=workspace)
    if kind == "bn":
        return K.batchnorm_infer(inputs[0], *(store[node.weight(s)] for s in
                                              ("gamma", "beta", "mean", "var")),
                                 eps=p["eps"], out=out)
    if kind == "relu":
        return K.relu(inputs[0], out=out)
    if kind == "add":
        return K.add(inputs[0], inputs[1], out=out)
    if kind == "maxpool":
        return K.maxpool2d(inputs[0], p["kernel"], p["stride"], p["padding"], out=out)
    if kind == "upsample":
        return K.upsample(inputs[0], p["factor"], p["mode"], out=out)
    if kind == "concat":
        return K.concat_channels(inputs, out=out)
    raise GraphError(f"cannot execute node kind {kind!r}")


def execute(graph: LayerGraph, store: Mapping, x: np.ndarray,
            outputs: Optional[Sequence[str]] = None,
            hook: Optional[Callable[[Node, List[np.ndarray], np.ndarray], None]] = None,
            ) -> Dict[str, np.ndarray]:
    """Straightforward executor: evaluates only what ``outputs`` need.

    Intermediates are released as soon as their last consumer has run.
    ``hook(node, inputs, result)`` is called after every node.
    """
    outputs = list(outputs) if outputs is not None else [graph.output_id]
    order = graph.ancestors(outputs)
    last_use: Dict[str, int] = {}
    for i, n in enumerate(order):
        for src in n.inputs:
            last_use[src] = i
    keep = set(outputs)
    values: Dict[str, np.ndarray] = {}
    for i, node in enumerate(order):
        if node.kind == "input":
            values[node.id] = K.as_tensor(x)
            continue
        ins = [values[s] for s in node.inputs]
        values[node.id] = eval_node(node, ins, store)
        if hook is not None:
            hook(node, ins, values[node.id])
        for s in set(node.inputs):
            if last_use.get(s) == i and s not in keep:
                del values[s]
    return {k: values[k] for k in outputs}


@dataclass
class InferenceResult:
    logits: np.ndarray
    pyramid: Tuple[np.ndarray, ...]


class InferenceSession:
    """Bound graph + weights + input dims with a preplanned buffer pool.

    Activation buffers are assigned by a liveness pass at construction:
    a node's buffer returns to the pool after its last consumer runs and is
    reused by a later node of identical dims. Requested outputs are copied
    out, so nothing leaks between runs.
    """

    def __init__(self, graph: LayerGraph, store: Mapping, input_dims: Sequence[int],
                 threads: Optional[int] = None, permissive: bool = False):
        check_store(graph, store, permissive=permissive)
        self.graph = graph
        self.store = store
        self.input_dims: Dims = tuple(int(v) for v in input_dims)
        self.threads = threads
        self.shapes = infer_shapes(graph, self.input_dims)
        self.order = list(graph.nodes)
        self._retain = [graph.output_id, *graph.pyramid]
        self._slots, self.buffers = self._plan()
        self.workspace = K.Workspace()

    def _plan(self):
        last_use: Dict[str, int] = {}
        for i, n in enumerate(self.order):
            for s in n.inputs:
                last_use[s] = i
        free: Dict[Dims, List[int]] = {}
        slot_dims: List[Dims] = []
        slots: Dict[str, int] = {}
        retained = set(self._retain)
        for i, node in enumerate(self.order):
            if node.kind == "input":
                continue
            dims = self.shapes[node.id]
            pool = free.get(dims)
            if pool:
                slots[node.id] = pool.pop()
            else:
                slots[node.id] = len(slot_dims)
                slot_dims.append(dims)
            for s in set(node.inputs):
                if last_use.get(s) == i and s in slots and s not in retained:
                    free.setdefault(self.shapes[s], []).append(slots[s])
        buffers = [np.empty(d, dtype=K.DTYPE) for d in slot_dims]
        return slots, buffers

    @property
    def buffer_bytes(self) -> int:
        return sum(b.nbytes for b in self.buffers)

    def run(self, x: np.ndarray) -> InferenceResult:
        x = K.as_tensor(x)
        if x.shape != self.input_dims:
            raise K.TensorError(f"session expects input {self.input_dims}, got {x.shape}")
        limits = threadpool_limits(self.threads) if self.threads else nullcontext()
        values: Dict[str, np.ndarray] = {}
        with limits:
            for node in self.order:
                if node.kind == "input":
                    values[node.id] = x
                    continue
                out = self.buffers[self._slots[node.id]]
                values[node.id] = eval_node(node, [values[s] for s in node.inputs],
                                            self.store, out=out, workspace=self.workspace)
        return InferenceResult(values[self.graph.output_id].copy(),
                               tuple(values[p].copy() for p in self.graph.pyramid))


def run_inference(session: InferenceSession, x: np.ndarray) -> InferenceResult:
    return session.run(x)


def fold_batchnorm(graph: LayerGraph, store: Mapping) -> Tuple[LayerGraph, WeightStore]:
    """Absorb every batch norm into the convolution feeding it.

    w' = w * g / sqrt(v + eps) per output channel, b' = (b - m) * g / sqrt(v + eps) + beta.
    The BN node disappears and its consumers read the conv directly.
    """
    consumers = graph.consumers()
    rename: Dict[str, str] = {}
    changes: Dict[str, np.ndarray] = {}
    folded_convs: Dict[str, Node] = {}
    for node in graph.nodes:
        if node.kind != "bn":
            continue
        src = graph.node(node.inputs[0])
        if src.kind != "conv":
            raise FoldError(f"{node.id}: batch norm follows {src.kind} {src.id!r}, not a conv")
        if len(consumers[src.id]) != 1:
            raise FoldError(f"{node.id}: conv {src.id!r} has other consumers; cannot fold")
        gamma, beta, mean, var = (store[node.weight(s)].astype(np.float64)
                                  for s in ("gamma", "beta", "mean", "var"))
        scale = gamma / np.sqrt(var + node.params["eps"])
        w = store[src.weight("weight")].astype(np.float64)
        b = (store[src.weight("bias")].astype(np.float64) if src.params["bias"]
             else np.zeros(w.shape[0]))
        changes[src.weight("weight")] = (w * scale[:, None, None, None]).astype(np.float32)
        changes[src.weight("bias")] = ((b - mean) * scale + beta).astype(np.float32)
        rename[node.id] = src.id
        folded_convs[src.id] = Node(src.id, "conv", src.inputs, {**src.params, "bias": True},
                                    (src.weight("weight"), src.weight("bias")))

    def r(i: str) -> str:
        return rename.get(i, i)

    nodes = []
    for node in graph.nodes:
        if node.id in rename:
            continue
        node = folded_convs.get(node.id, node)
        nodes.append(Node(node.id, node.kind, tuple(r(i) for i in node.inputs),
                          node.params, node.weights))
    new_graph = LayerGraph(graph.name, tuple(nodes), r(graph.output_id),
                           tuple((k, r(v)) for k, v in graph.taps),
                           tuple(r(p) for p in graph.pyramid))
    # keep conv weight/bias adjacent so stores stay in graph order
    entries = []
    for node in new_graph.nodes:
        for wname in node.weights:
            entries.append((wname, changes[wname] if wname in changes else store[wname]))
    return new_graph, WeightStore(entries)


def calibrate_batchnorm(graph: LayerGraph, store: Mapping, x: np.ndarray, seed: int = 0,
                        gamma_range=(0.5, 1.5), beta_scale: float = 0.1) -> WeightStore:
    """Replace BN statistics with those observed on ``x`` and draw random affine terms.

    Each BN's running mean/var are set to the per-channel mean/variance of
    its input during a sequential forward pass (earlier BNs already
    updated), which keeps activations of deep random networks well scaled.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    current = dict(store)

    def hook(node, ins, result):
        if node.kind != "bn":
            return
        a = ins[0].astype(np.float64)
        mean = a.mean(axis=(0, 2, 3))
        var = a.var(axis=(0, 2, 3)) + 1e-3
        c = node.params["channels"]
        current[node.weight("mean")] = mean.astype(np.float32)
        current[node.weight("var")] = var.astype(np.float32)
        current[node.weight("gamma")] = rng.uniform(*gamma_range, size=c).astype(np.float32)
        current[node.weight("beta")] = (beta_scale * rng.standard_normal(c)).astype(np.float32)
        result[...] = K.batchnorm_infer(ins[0], *(current[node.weight(s)] for s in
                                                  ("gamma", "beta", "mean", "var")),
                                        eps=node.params["eps"])

    execute(graph, current, x, hook=hook)
    return WeightStore([(k, current[k]) for k in store])
