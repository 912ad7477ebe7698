"""Cross-modal audio/visual retrieval trained with a semi-hard to hard triplet curriculum."""

from .data import PairedDataset, SyntheticSpec, generate_synthetic, load_dataset, split
from .evaluation import evaluate_retrieval, mean_average_precision
from .model import ModelPair, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, run_ablation, run_curriculum
from .triplets import TripletCategory, mine_triplets, triplet_loss

__version__ = "0.1.0"
