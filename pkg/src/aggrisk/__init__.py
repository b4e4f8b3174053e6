"""Ad hoc aggregate risk analysis over year event tables."""

from .analytics import LossReport, ep_curve, summary_stats, tail_value_at_risk, value_at_risk
from .engine import ExecConfig, execute, run_marginal, run_query, sequential_oracle
from .financial import apply_aggregate_terms, apply_occurrence_terms, inverse_incomplete_beta, sample_event_loss
from .genio import GeneratorConfig, generate_dataset, load_dataset, synthesize
from .querylang import compile_query, parse_query
from .tables import Dataset, DataError

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "Dataset",
    "ExecConfig",
    "GeneratorConfig",
    "LossReport",
    "apply_aggregate_terms",
    "apply_occurrence_terms",
    "compile_query",
    "ep_curve",
    "execute",
    "generate_dataset",
    "inverse_incomplete_beta",
    "load_dataset",
    "parse_query",
    "run_marginal",
    "run_query",
    "sample_event_loss",
    "sequential_oracle",
    "summary_stats",
    "synthesize",
    "tail_value_at_risk",
    "value_at_risk",
]
