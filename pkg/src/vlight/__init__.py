"""Retinal vessel segmentation: multi-scale patch training, efficient
encoder-decoders, tiled multi-scale inference and FOV-restricted evaluation."""

from .data import DatasetKind, DatasetIndex, FundusRecord, compute_fov_mask, load_dataset, read_record
from .nets import (ConvKind, ModelFamily, ModelSpec, Upsampling, build_model,
                   parameter_count, pixel_shuffle)
from .sampling import AugmentConfig, LabeledPatch, PatchSampler, SamplerConfig, rescale_record
from .tiling import (Binarization, InferenceConfig, ProbabilityMap, TileGrid,
                     binarize, otsu_threshold, plan_tiles, predict_multiscale, predict_tiled)
from .training import Checkpoint, TrainConfig, bce_loss, learning_rate, load_checkpoint, save_checkpoint, train
from .metrics import ConfusionCounts, MetricReport, confusion_counts, evaluate, pr_auc, roc_auc, scores

__version__ = "0.1.0"
