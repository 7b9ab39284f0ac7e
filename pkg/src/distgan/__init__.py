"""Simulated multi-user GAN training: users keep their data private and
cooperate through gradients, generated samples and scores only."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import ByLabel, Dataset, Shard, load_idx, make_gaussian_1d, make_ring, partition
from .gan import DiscriminatorOracle, NetworkOracle, NoiseSource, TrainConfig
from .harness import compare_runs, execute, run_experiment
from .kernels import BACKEND
from .metrics import CoverageReport, MetricsRecord, mode_coverage
from .nn import Network, NetworkSpec, NumericError, ParamVector, build_network, forward
from .protocol import MaxMagnitude, MessageLog, RandomFraction, ServerState, Threshold, audit_channel
from .strategies import (
    RunResult,
    StrategyConfig,
    build_and_run,
    run_averaged,
    run_baseline,
    run_federated,
    run_round_robin,
)

__version__ = "0.1.0"
