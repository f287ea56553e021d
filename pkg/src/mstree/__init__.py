"""Market segmentation trees: decision trees whose leaves hold response models."""
from .benchmarks import ClusteredModel, fit_clustered, kmeans, tune_k
from .data import (AuctionPayload, ChoicePayload, ContextSchema, Dataset, SchemaError,
                   Variable)
from .datagen import (gen_auctions, gen_cmt_truth, gen_context_free, gen_kmeans_truth,
                      load_truth, true_probs)
from .ingest import export, ingest
from .leaves import (ConstantModel, FitConfig, IsotonicModel, LogisticModel, MNLModel,
                     OptionSpecificMNL, isotonic_fit, leaf_loss, mnl_predict, pava)
from .metrics import brier, mae_vs_truth, mean_nll, per_leaf_improvement, roc_auc
from .pruning import PruneConfig, prune
from .trainer import TrainConfig, candidate_splits, evaluate_split, grow, select_split
from .tree import Split, Tree, describe, deserialize, route, serialize, tree_loss

__version__ = "0.1.0"
