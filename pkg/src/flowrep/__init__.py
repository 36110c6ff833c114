"""flowrep: flow-vector extraction, unsupervised traffic encoders, and
frozen-embedding device-type classification."""

__version__ = "0.1.0"

from .schema import (
    CustomFlow,
    DatasetManifest,
    FlowKey,
    FlowValidationError,
    SCHEMA,
    VECTOR_LENGTH,
    VectorSchema,
)
from .store import StoreFormatError, read_flow_store, write_flow_store
from .featurize import CategoricalView, categorical_view, denormalize_slots, normalize, normalize_slots
from .encoders import EncoderConfig, TrafficFilter, TrainedEncoder, build_model, train
from .downstream import ClassifierConfig, ClassifierInstance, evaluate, train_classifier, window_embeddings
from .metrics import EvalReport, evaluate_predictions
