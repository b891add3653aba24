"""Cluster-guided federated recommendation simulator."""
from .comms import (CommLedger, baseline_download_bytes, ours_download_bytes,
                    record_transfer, reduction_rate)
from .dataset import (DatasetStats, InteractionDataset, Interactions, compute_stats,
                      filter_min_interactions, ingest, load, split_leave_one_out)
from .evaluation import evaluate_all, hr_at_k, ndcg_at_k, rank_target
from .federation import (MODES, VARIANT_NAMES, ClientState, FederationConfig, Simulator,
                         apply_ldp, client_round, run_federation, select_participants)
from .model import LearningRates, bce_gradients, bce_loss, predict, sgd_step
from .structure import (ClusterAssignment, ContrastiveConfig, aggregate, build_mask,
                        contrastive_gradients, contrastive_loss, kmeans, random_labels)

__version__ = "0.1.0"
