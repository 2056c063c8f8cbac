"""Personalised, fairness-aware tile caching for 360-degree video via
decentralised multi-task federated learning."""
from .baselines import GlobalModel, fedavg, fedprox, heuristic_popular
from .bounds import BoundReport, coverage_trial, evaluate_bound, max_rademacher_over_cover, mc_rademacher
from .data import GenConfig, HeadSample, fov_tiles, ingest_trace, synth_noniid, tile_index
from .discrepancy import DiscrepancyMatrix, estimate_discrepancy
from .dmtfl import init_state, run_dmtfl, w_step
from .domain import (AlphaMatrix, BsDataset, CachingModel, HyperParams, MixtureWeights, Sample,
                     TileGrid, validate_dataset)
from .evalcli import ExperimentConfig, MetricRow, avg_cache_hit, cache_set_from_model, min_per_bs_hit, run_experiment
from .numerics import EpsCover, build_eps_cover, project_capped_simplex, project_simplex
from .objective import (empirical_loss, full_objective, grad_alpha, grad_phi, penalty_P, predict,
                        sample_loss, weighted_objective)

__version__ = "0.1.0"
