"""Battery SOC/SOH estimation: 1RC model, diagonal-forgetting RLS, EKF and the joint estimator."""

from .adaptive import (AutoTuneConfig, AutoTuneState, TagConfig, autotune_step, condition_number,
                       excitation_tag, init_autotune)
from .ekf import (EkfModel, EkfState, coulomb_count, effective_q, ekf_predict, ekf_update, init_ekf,
                  set_model_params)
from .experiment import (ComparisonTable, ConfigError, ExperimentConfig, ProfileSpec, SyntheticSpec,
                         emit_tables, load_config, parse_config, run_experiment)
from .joint import (ESTIMATORS, Estimate, EstimateTrace, ErrorReport, InsufficientExcitationError,
                    JointConfig, JointState, error_report, init_joint, joint_step, run_estimator,
                    soh_metrics)
from .model import (CellState, DomainError, DriveProfile, EcmParams, NoiseConfig, OcvCurve,
                    ProfileParseError, TruthTrace, default_ocv_curve, default_params, discretize_rc,
                    inject_noise, load_profile, make_synthetic_profile, ocv, simulate_profile,
                    simulate_step, terminal_voltage)
from .rls import (DffRlsState, MffRlsState, NonPhysicalError, NumericalError, UnidentifiableError,
                  arx_to_ecm, build_regressor, dffrls_step, ecm_to_arx, init_dffrls, init_mffrls,
                  mffrls_step, update_information_matrix)

__version__ = "0.1.0"
