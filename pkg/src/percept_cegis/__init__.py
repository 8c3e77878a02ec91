"""Controller synthesis against simulators with learned perception error models.

The package alternates three steps: synthesise controller parameters on a
cheap surrogate model, falsify them on the full simulator, and refine the
surrogate's perception error sets from the counterexamples found.
"""

from .core import Box, ConfigError, ScenarioId, Trace, ValidationError, alpha, layout
from .falsifier import BOConfig, FalsifyResult, SearchSpace, falsify, random_search
from .learner import LearnConfig, build_error_model, fit_bounds, learn
from .orchestrator import LoopConfig, RunReport, derive_seed, run_loop, write_run_dir
from .sim import default_emulator, default_scenario, simulate, simulate_point
from .surrogate import ErrorModel, OutputSelector, SurrogateModel, contains, rollout_batch
from .synthesizer import SynthConfig, synthesize
from .temporal import builtin_specs, evaluate_bool, parse_formula, robustness

__version__ = "0.1.0"
