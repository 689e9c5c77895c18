"""FFNet segmentation networks: construction, analysis and a numpy inference engine."""
from .analysis import (RFInfo, count_flops, count_params, impulse_support_oracle,
                       memory_traffic_estimate, profile, receptive_field, receptive_fields)
from .bench import BenchReport, benchmark
from .builder import (build_backbone, build_model, build_seg_head, build_stem, build_up_head,
                      backbone_graph, stem_graph)
from .config import (BACKBONES, BackboneConfig, ConfigError, ModelConfig, get_backbone,
                     load_config, parse_config, render_config)
from .graph import GraphBuilder, LayerGraph, infer_shapes
from .runtime import (InferenceSession, calibrate_batchnorm, fold_batchnorm, run_inference)
from .weights import WeightStore, init_random, load_weights, save_weights

__version__ = "0.1.0"
