"""Two-network semi-supervised segmentation with min-max similarity training."""
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .data import AugmentConfig, SplitManifest, augment_heavy, augment_pair, batch_stream, disjoint_split, scan_dataset
from .errors import (CheckpointError, CheckpointIncompatibleError, CheckpointIntegrityError, DatasetError,
                     ParameterError, ShapeError, SplitError, TrainingAbort, ValidationError, WeightsLoadError)
from .evaluation import EvalSettings, MetricsReport, dsc, evaluate_set, predict, write_report
from .losses import (LossWeights, info_nce_all_negative, pixel_info_nce, similarity_loss, sup_loss, total_loss,
                     weighted_bce, weighted_iou)
from .models import HeadConfig, MMSNet, ModelConfig, SegNetConfig, init_params
from .synthdata import SynthConfig, generate_dataset, generate_unlabeled_variants
from .training import TrainConfig, train, train_supervised_baseline

__version__ = "0.1.0"
