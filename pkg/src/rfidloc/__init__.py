"""Coverage, CRLB and MLE localization for passive UHF RFID with 3D patch antennas."""
from .coverage import BISTATIC, MONOSTATIC, CoverageMap, GridSpec, coverage_map, coverage_percentage
from .estimation import (
    CrlbResult,
    FisherInfo,
    MeasurementSet,
    crlb,
    crlb_rmse,
    fisher_information,
    log_likelihood,
    mle_grid_search,
    simulate_measurements,
)
from .experiments import (
    CalibrationError,
    ConfigError,
    LocalizationResult,
    Scenario,
    SweepResult,
    build_scenario,
    calibrate_link_budget,
    coverage_vs_reflection,
    evaluate_accuracy,
    run_accuracy_sweep,
    run_coverage_sweep,
)
from .config import RunConfig, load_config
from .propagation import Position3D, RadioParams, ReaderAntenna

__version__ = "0.1.0"
