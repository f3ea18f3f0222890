"""Test-time adaptation by distilling a mixture of per-domain experts.

A student network adapts its feature extractor to an unseen domain with one
gradient step of unlabeled knowledge distillation from a transformer that
aggregates frozen per-super-domain expert features; the whole procedure is
trained episodically so that the single adaptation step is maximally useful.
"""

__version__ = "0.1.0"

from .adapt import AdaptConfig, DivergenceError, MaskSpec, UpdateCounter, dist_update, mask_experts, test_time_adapt
from .metrics import MetricReport, accuracy, macro_f1, pearson_r, worst_case_metric
from .nets import AggregatorConfig, ModelState, StudentConfig, aggregate, expert_features, init_params, student_features, student_logits
from .params import ParamStore, load_checkpoint, save_checkpoint
from .synthdata import (
    BenchmarkSpec,
    DomainDataset,
    DomainRegistry,
    Episode,
    SuperDomainMap,
    cluster_domains,
    generate_benchmark,
    load_registry,
    sample_episode,
    save_registry,
)

__all__ = [
    "AdaptConfig",
    "AggregatorConfig",
    "BenchmarkSpec",
    "DivergenceError",
    "DomainDataset",
    "DomainRegistry",
    "Episode",
    "MaskSpec",
    "MetricReport",
    "ModelState",
    "ParamStore",
    "StudentConfig",
    "SuperDomainMap",
    "UpdateCounter",
    "accuracy",
    "aggregate",
    "cluster_domains",
    "dist_update",
    "expert_features",
    "generate_benchmark",
    "init_params",
    "load_checkpoint",
    "load_registry",
    "macro_f1",
    "mask_experts",
    "pearson_r",
    "sample_episode",
    "save_checkpoint",
    "save_registry",
    "student_features",
    "student_logits",
    "test_time_adapt",
    "worst_case_metric",
    "__version__",
]
