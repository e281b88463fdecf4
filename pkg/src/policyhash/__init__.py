"""Learning-to-hash with listwise policy-gradient supervision.

An encoder produces per-bit Bernoulli probabilities; a sampled binary code is
rewarded by its average precision against a database of codes produced by a
periodically synchronised copy of the same encoder.
"""

from .codec import PackedCode, log_prob, log_prob_grad, pack_bits, sample, threshold
from .dataset import LabeledDataset, SplitSpec, generate_synthetic, split
from .encoder import EncoderParams, LayerSpec, backward, check_gradients, forward
from .objectives import RewardConfig, TripletConfig, policy_gradient, reward, triplet_loss
from .retrieval import CodeDatabase, average_precision, hamming_distance, mean_average_precision, rank
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CodeDatabase",
    "EncoderParams",
    "LabeledDataset",
    "LayerSpec",
    "PackedCode",
    "RewardConfig",
    "SplitSpec",
    "TrainConfig",
    "TripletConfig",
    "average_precision",
    "backward",
    "check_gradients",
    "fit",
    "forward",
    "generate_synthetic",
    "hamming_distance",
    "log_prob",
    "log_prob_grad",
    "mean_average_precision",
    "pack_bits",
    "policy_gradient",
    "rank",
    "reward",
    "sample",
    "split",
    "threshold",
    "triplet_loss",
]
