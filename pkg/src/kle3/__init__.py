"""Ergodic exploration from equilibrium policies, with sample-based coverage
measures and downstream active-learning benchmarks."""

from .dynamics import (
    BenchmarkSystem,
    CartDoublePendulum,
    CartPole,
    DivergenceError,
    IntegratorChain,
    LinearModel,
    NumericOverflowError,
    Quadcopter,
    Trajectory,
    TransitionModel,
    cart_double_pendulum,
    cart_pole,
    double_integrator,
    double_integrator_2d,
    linearize,
    linearized_model,
    quadcopter,
    rollout,
    step_dynamics,
)
from .policies import (
    EquilibriumPolicy,
    LyapunovCertificate,
    SynthesisError,
    lqr_policy,
    lqr_synthesize,
    lyapunov_trace,
)
from .distributions import (
    DegenerateDistributionError,
    SearchDomain,
    SpatialDistribution,
    boltzmann_softmax_distribution,
    gaussian_mixture_density,
    q_value_target,
    ucb_target,
    uniform_distribution,
    uniform_samples,
    variance_target,
)
from .measures import (
    SigmaKernel,
    UnsupportedDimensionError,
    fourier_ergodic_metric,
    jensen_objective,
    kl_objective,
    reconstruct_density,
    time_avg_density,
)
from .controller import (
    AdjointDivergenceError,
    AdjointSolution,
    KLE3Config,
    KLE3Controller,
    adjoint_backward,
    attractiveness_report,
    exploratory_correction,
    mode_insertion_gradient,
    run_exploration,
    select_window,
)
from .streams import stream, trial_seed

__version__ = "0.1.0"
