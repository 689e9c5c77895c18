"""
Batch-norm folding and latency measurement
==========================================

Folding rewrites every conv+BN pair as a single conv with a bias. The
outputs agree to float32 rounding while the graph gets shorter.
"""
import numpy as np

from ffnet import (InferenceSession, ModelConfig, benchmark, build_model, calibrate_batchnorm,
                   fold_batchnorm, init_random)

cfg = ModelConfig("resnet22s", "C", "C", "C", input_hw=(256, 512))
graph = build_model(cfg)
x = np.random.default_rng(0).standard_normal((1, 3, 256, 512)).astype(np.float32)

# random weights with BN statistics taken from x, so activations stay O(1)
store = calibrate_batchnorm(graph, init_random(graph, seed=0), x)
folded_graph, folded_store = fold_batchnorm(graph, store)
print(f"nodes: {len(graph.nodes)} -> {len(folded_graph.nodes)}")

a = InferenceSession(graph, store, x.shape).run(x).logits
b = InferenceSession(folded_graph, folded_store, x.shape).run(x).logits
print(f"max |logit difference| = {np.abs(a - b).max():.2e}  (logits up to {np.abs(a).max():.1f})")

# latency; warmup passes are run but not recorded
for fold in (False, True):
    rep = benchmark(cfg, iters=5, warmup=1, fold_bn=fold)
    print(rep.summary())
