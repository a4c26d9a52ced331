"""Streaming, federated threat detection: compact online classifiers that share parameters, never records."""
from fedstream.dag_pipeline import FeedbackStore, Pipeline, PipelineConfig, RunReport, make_model, run_stream
from fedstream.featurizer import (
    FeatureDef,
    FeatureSchema,
    FeatureVector,
    LogRecord,
    default_schema,
    featurize,
    numeric_schema,
    parse_record,
)
from fedstream.federation import Community, CommunityConfig, MessageBus, SharingSchedule
from fedstream.forest_classifier import Ensemble
from fedstream.mlp_classifier import MlpHyper, MlpModel
from fedstream.model_core import (
    ClassLabel,
    ClassScores,
    Classifier,
    MergeWeights,
    ModelEnvelope,
    export,
    load_model,
    merge,
)
from fedstream.nb_classifier import NaiveBayesModel

__version__ = "0.1.0"

__all__ = [
    "ClassLabel", "ClassScores", "Classifier", "Community", "CommunityConfig", "Ensemble", "FeatureDef",
    "FeatureSchema", "FeatureVector", "FeedbackStore", "LogRecord", "MergeWeights", "MessageBus",
    "MlpHyper", "MlpModel", "ModelEnvelope", "NaiveBayesModel", "Pipeline", "PipelineConfig", "RunReport", "SharingSchedule", "default_schema",
    "export", "featurize", "load_model", "make_model", "merge", "numeric_schema", "parse_record",
    "run_stream",
]
