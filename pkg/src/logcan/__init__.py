"""Class-aware multi-scale segmentation decoder on a small numpy tensor engine."""
from .class_aware import gca_forward, lca_forward, lca_global_variant, pre_classify
from .config import ModelConfig, default_config
from .decoder import build_decoder_graph, build_lca_module_graph, decoder_forward, model_forward
from .estimator import ClassAwareSegmenter
from .metrics import MetricReport, metrics_compute
from .tensor import Tape, Tensor

__all__ = [
    "ClassAwareSegmenter",
    "MetricReport",
    "ModelConfig",
    "Tape",
    "Tensor",
    "build_decoder_graph",
    "build_lca_module_graph",
    "decoder_forward",
    "default_config",
    "gca_forward",
    "lca_forward",
    "lca_global_variant",
    "metrics_compute",
    "model_forward",
    "pre_classify",
]

__version__ = "0.1.0"
