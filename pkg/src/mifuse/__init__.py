"""Source-free domain adaptation by fusing a classifier teacher and an audio-language-model teacher."""

__version__ = "0.1.0"

from .errors import (
    ContractError, DatasetError, InputError, MiFuseError, MissingCacheEntry, ShapeError,
    TrainingAborted, TransportError, ValidationError,
)
from .uncertainty import ProbDist, TeacherSampleSet, entropy, kl_divergence, mean_dist, mutual_information
from .fusion import FusedLabel, FusionConfig, ablation_cells, fuse, fuse_batch, select_lower_entropy
from .numkit import MlpClassifier, adamw_step, backward, forward, forward_batch, init_classifier
from .dataio import FeatureDataset, SynthShiftSpec, generate_synth_shift, load_dataset, save_dataset, split
from .teachers import (
    CacheOnlyProvider, EmaState, HttpLalmProvider, NoisyOracle, NoisyOracleConfig, TeacherCache,
    ema_update, lalm_predict, mc_dropout_predict,
)
from .adapt import AdaptConfig, AdaptState, adapt_student, lr_scan, train_source
from .evalkit import EvalReport, evaluate, unweighted_accuracy
