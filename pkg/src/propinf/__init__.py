"""Efficient graph property inference via approximated shadow models."""

from .approx import (ApproxResult, CGConfig, InfluenceSet, Perturbation,
                     approximate, error_criterion, influenced_nodes,
                     residual_gradient_norm, retrain_exact)
from .attack import (AttackModelParams, AttackSample, AttackTrainConfig,
                     Metrics, evaluate, featurize_blackbox, featurize_whitebox,
                     infer_property, load_samples, roc_auc, save_samples,
                     train_attack)
from .errors import ConfigError, DataError, PhaseError, PropinfError
from .graph import (AttributedGraph, CommunityPartition, PropertySpec,
                    WalkConfig, compute_property, generate_sbm, load_graph,
                    louvain_partition, modularity, sample_reference_graph,
                    sample_target_graphs, save_graph, split_target_auxiliary)
from .model import (ModelParams, PropagatedFeatures, TrainConfig, gradient,
                    hessian_vector_product, loss, posteriors, propagate, train)
from .pipeline import (ExperimentConfig, ExperimentReport, build_fixture,
                       emit_report, fit_bound_constant, load_config,
                       run_attack, run_shadow_baseline)
from .selection import (PerturbationPool, SelectionConfig, SelectionResult,
                        default_budget, generate_perturbations,
                        pairwise_edit_distance, select)

__version__ = "0.1.0"
