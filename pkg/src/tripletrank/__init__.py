"""Fine-grained similarity embeddings learned with a triplet ranking loss.

The package covers the full pipeline at desk scale: synthetic data with a
planted ground-truth embedding (`datagen`), streaming weighted-reservoir
triplet sampling (`sampler`), a multiscale convolutional embedding network
with exact numpy forward/backward passes (`net`), the triplet hinge ranking
objective (`rankloss`), momentum-SGD training in single-worker and
asynchronous multi-worker modes (`trainer`), and triplet ranking metrics
(`evaluation`).
"""

from tripletrank.data import (
    Dataset,
    ImageRecord,
    NegativeKind,
    RelevanceSource,
    Triplet,
    load_dataset,
    load_relevance,
    save_dataset,
    save_relevance,
)
from tripletrank.datagen import GenConfig, generate, generate_split, oracle_rank
from tripletrank.net import MultiscaleNet, load_checkpoint, parse_net_config, save_checkpoint
from tripletrank.rankloss import LossConfig, loss_grad, objective, squared_distance, triplet_hinge
from tripletrank.sampler import BufferSet, SamplerConfig
from tripletrank.trainer import TrainConfig, momentum_step, pretrain_softmax, random_pixel_shift, train, train_async
from tripletrank.evaluation import dataset_embedder, rank_pool, score_at_top_k, similarity_precision

__version__ = "0.1.0"
