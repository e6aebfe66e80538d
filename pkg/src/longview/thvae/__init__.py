from .cells import ResidualCell1, ResidualCell2, SqueezeExcitation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigurationError, ThVaeConfig
from .model import (
    ElboTerms,
    EncodedSegment,
    LatentHierarchy,
    Mode,
    NumericError,
    ThVae,
    TrainingInstabilityError,
    WeightSource,
    attention_weights,
    elbo,
    encode_keyphrases,
    encode_segment,
    encode_timeline,
    gaussian_kl,
    hierarchy_forward,
)
from .train import (
    Decode,
    TrainingReport,
    UntrainedModelError,
    generate_summary,
    kl_weight,
    reconstruct,
    token_accuracy,
    train,
)
from .vocab import Vocabulary
