//! Mutual-information registration: the MI estimator, the pyramid optimizer
//! with random hyperparameter search, the exhaustive MI plate identifier, and
//! the affine regression network.

mod mi;
mod pyramid;
mod regressor;

pub use mi::{entropy, image_entropy, mutual_information, JointHistogram, MiEvaluator, DEFAULT_BINS};
pub use pyramid::{
    build_pyramid, identify_by_mi, random_search, random_search_with, register_affine,
    register_affine_from, sample_search_config, step_size, MiIdentification, PyramidConfig,
    PyramidKind, RegistrationResult, SearchConfig, SearchOutcome, TrialRecord, FD_DELTA,
    ITERATION_STEP, MAX_ITERATIONS, MAX_RESOLUTIONS, MIN_LEVEL_SIZE,
};
pub use regressor::{
    finetune_regressor, init_regressor, predict_affine, pretrain_regressor, regressor_spec,
    synthetic_pair, train_regressor, RegistrationPair, RegressorConfig, RegressorOutcome,
    REGRESSOR_INPUT_SIZE,
};
