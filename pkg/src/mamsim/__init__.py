"""Simulation engine for Bayesian adaptive multi-arm multi-stage designs.

Workflow: parse and validate a design document (:mod:`mamsim.config`), run
seeded replicates of the adaptive trial (:mod:`mamsim.engine`) in parallel
batches (:mod:`mamsim.montecarlo`), and aggregate operating characteristics
(:mod:`mamsim.report`).  Posteriors come from a Laplace-approximated
Bayesian GLM (:mod:`mamsim.glm`); data generation and adaptation rules live
in :mod:`mamsim.datagen` and :mod:`mamsim.rules`.
"""

__version__ = "0.1.0"

from .config import (  # noqa: F401
    ModelSpec,
    SpecError,
    TrialSpec,
    ValidatedSpec,
    parse_spec,
    serialize_spec,
    validate_spec,
)
from .engine import TrialResult, run_trial  # noqa: F401
from .montecarlo import (  # noqa: F401
    BatchResult,
    combine_shards,
    load_shard,
    run_batch,
    save_shard,
)
from .report import emit_plot_data, summarize  # noqa: F401
from .rules import RuleSpec  # noqa: F401
