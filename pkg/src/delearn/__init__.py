"""Rule-threshold learning with a data-assessing row mask model."""

from .data import Dataset, Sample, Schema, load_dataset
from .estimator import BRClassifier, DELClassifier
from .rules import RuleSet, classify_boolean, load_ruleset, parse_ruleset
from .synth import GeneratorConfig, br_classify, generate, preset, synthetic_ruleset
from .trainer import TOOL_VERSION, Metrics, TrainConfig, compute_metrics, evaluate, train

__version__ = TOOL_VERSION

__all__ = [
    "BRClassifier",
    "DELClassifier",
    "Dataset",
    "GeneratorConfig",
    "Metrics",
    "RuleSet",
    "Sample",
    "Schema",
    "TrainConfig",
    "br_classify",
    "classify_boolean",
    "compute_metrics",
    "evaluate",
    "generate",
    "load_dataset",
    "load_ruleset",
    "parse_ruleset",
    "preset",
    "synthetic_ruleset",
    "train",
]
