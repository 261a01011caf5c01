"""Line-outage detection and localization for distribution grids.

Synthesizes voltage-increment streams from a linearized feeder model, runs a
sequential Bayesian change-point detector on them, and localizes the
out-of-service branches through conditional-correlation tests.
"""

from .grid import (
    AdmittanceMatrix,
    Branch,
    GridTopology,
    Island,
    SingularBlockError,
    TopologyError,
    apply_outage,
    build_admittance,
    bundled_feeders,
    islands,
    kron_reduce,
    load_feeder,
    parse_feeder,
    random_feeder,
)
from .gaussmodel import (
    CoordinateLayout,
    EstimationPrior,
    GaussianModel,
    conditional_corr,
    conditional_cov,
    estimate_post_outage,
    kl_divergence,
    log_density,
    model_from_grid,
    model_from_topology,
)
from .detector import (
    DetectionReport,
    DetectionRule,
    DetectorConfig,
    DetectorState,
    GeometricPrior,
    adaptive_step,
    decide,
    expected_delay_bound,
    posterior_direct,
    posterior_update,
    run_detector,
)
from .localizer import (
    LocalizationReport,
    PairScore,
    PhasorWindow,
    Thresholds,
    estimate_admittance,
    rank_changes,
    scan_pairs,
    thresholds_from_bootstrap,
)
from .simgen import (
    MeasurementFrame,
    MeasurementStream,
    Scenario,
    SensorSchedule,
    generate,
    parse_stream,
    sample_outage_time,
    write_stream,
)
from .experiments import (
    ExperimentConfig,
    MetricsTable,
    emit_heatmap,
    run_experiment,
    run_pmu_sweep,
)

__all__ = [
    "AdmittanceMatrix",
    "Branch",
    "CoordinateLayout",
    "DetectionReport",
    "DetectionRule",
    "DetectorConfig",
    "DetectorState",
    "EstimationPrior",
    "ExperimentConfig",
    "GaussianModel",
    "GeometricPrior",
    "GridTopology",
    "Island",
    "LocalizationReport",
    "MeasurementFrame",
    "MeasurementStream",
    "MetricsTable",
    "PairScore",
    "PhasorWindow",
    "Scenario",
    "SensorSchedule",
    "SingularBlockError",
    "Thresholds",
    "TopologyError",
    "adaptive_step",
    "apply_outage",
    "build_admittance",
    "bundled_feeders",
    "conditional_corr",
    "conditional_cov",
    "decide",
    "emit_heatmap",
    "estimate_admittance",
    "estimate_post_outage",
    "expected_delay_bound",
    "generate",
    "islands",
    "kl_divergence",
    "kron_reduce",
    "load_feeder",
    "log_density",
    "model_from_grid",
    "model_from_topology",
    "parse_feeder",
    "parse_stream",
    "posterior_direct",
    "posterior_update",
    "random_feeder",
    "rank_changes",
    "run_detector",
    "run_experiment",
    "run_pmu_sweep",
    "sample_outage_time",
    "scan_pairs",
    "thresholds_from_bootstrap",
    "write_stream",
]
