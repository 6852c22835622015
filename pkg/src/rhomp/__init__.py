"""Retrospective higher-order Markov processes for next-state prediction."""

__version__ = "0.1.0"

from .baselines import (KneserNeyModel, MarkovModel, discount, fit_kneser_ney, fit_mc,
                        kn_predict, mc_predict)
from .corpus import (CorpusError, EmptyCorpusError, ParseError, StateSpace, TrailCorpus,
                     TransitionCounts, count_transitions, encode_trails, merge_counts,
                     parse_trails, preprocess, split_train_test, write_trails)
from .evaluation import (FAMILIES, Cascade, EvalReport, aggregate_reports, evaluate,
                         frequency_buckets, order_sweep, precision_at_k, ranked_states,
                         reciprocal_rank, train_family)
from .model import (AlphaSelection, FitTrace, RhompModel, SamplingError, StationaryResult,
                    TrainerConfig, beta_from_alpha, chebyshev_nodes, fit_fixed_weights,
                    gradients, log_likelihood, normalize_factor_pair, predict_topk,
                    random_initial_model, sample_trail, select_alpha, stationary_distribution,
                    transition_distribution, weights_from_beta)
from .modelio import dump_model, dumps_model, load_model, loads_model
from .stochastic import ColumnStochasticMatrix, ProjectionError, project_columns, project_to_simplex
