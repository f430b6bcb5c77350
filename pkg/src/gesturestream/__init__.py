"""Streaming 3D hand-gesture recognition.

A spatial graph convolution over hand joints feeds a temporal transformer
encoder. Windows are classified offline, and a cached single-output attention
path labels live streams frame by frame.
"""
from .continual import ContinualEncoder, ContinualEncoderState, KVMemory, co_so_att_step, reset_state
from .data import (DatasetManifest, SyntheticConfig, gen_synthetic, import_shrec21, load_canonical,
                   resample_window, save_canonical, write_synthetic)
from .estimators import GestureClassifier, OnlineGestureRecognizer, SkeletonNormalizer
from .exceptions import (ConfigError, DataError, DegenerateSkeletonError, GestureStreamError, InputError,
                         LabelError, MissingReferenceError, NumericError, ParseError, ShapeError,
                         StateError)
from .metrics import (MatchResult, MetricsReport, detection_rate, evaluate, false_positive_rate,
                      jaccard_index, match_events)
from .model import GestureModel, ModelConfig
from .online import ThresholdTable, extract_events, learn_thresholds, stream_recognize
from .skeleton import (NO_GESTURE, Distance, GestureEvent, HandTopology, SkeletonSequence,
                       SpatialConfiguration, UniLabeling, build_adjacency, build_topology,
                       normalize_adjacency, partition_graph)
from .training import TrainConfig, TrainHistory, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
