"""Deterministic preparation of total-spin-zero (supersinglet) states of
N spin-j particles by collective projective measurements and conditional
subensemble rotations, with an optical nondemolition readout model and a
seeded experiment harness."""

from .hilbert import (
    CollectiveObservable,
    DensityOperator,
    EnsembleShape,
    ImpossibleOutcomeError,
    PureState,
    SubensembleMask,
    apply_projection,
    apply_rotation,
    build_observable,
    expectation,
    magnetization_distribution,
    projector,
    total_spin_squared,
    variance,
)
from .multiplets import (
    MultipletTable,
    SingletBasis,
    catalan_singlet_count,
    fidelities,
    multiplet_counts,
    normalized_total_spin_squared,
    singlet_basis,
)
from .protocol import (
    MeasurementEvent,
    ProtocolConfig,
    RoundRecord,
    SequenceLimitError,
    TrajectoryResult,
    make_initial_state,
    rotation_angle,
    run_procedure,
    run_sequence,
)
from .qnd import (
    GaussianPosterior,
    OpticalSettings,
    PhotonOutcome,
    QndMeasurement,
    TruncationError,
    effective_projector_check,
    gaussian_posterior,
    outcome_distribution,
    posterior_state,
    recommended_settings,
    truncation_mass,
)
from .runner import (
    ExperimentConfig,
    PRESETS,
    RunArchive,
    preset_config,
    replay,
    run_experiment,
    run_trajectory,
    summarize,
)
from .sampler import (
    OutcomeDistribution,
    RandomStream,
    derive_seed,
    sample_accept_reject,
    sample_exact,
)

__version__ = "0.1.0"
