from .layers import (
    BatchNorm,
    Conv1D,
    ConvTranspose1D,
    Dense,
    Dropout,
    Embedding,
    Flatten,
    LeakyReLU,
    MissingCacheError,
    ReLU,
    Reshape,
    Sequential,
    ShapeError,
    Softmax,
    auto_embedding_dim,
)
from .losses import kl_unit_gaussian, mse, sparse_ce
from .optim import Adam
from .checkpoint import CheckpointError, count_parameters, load_checkpoint, save_checkpoint
