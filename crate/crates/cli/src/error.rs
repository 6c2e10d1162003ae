use slotforge::config::ConfigError;
use slotforge::datagen::DatagenError;
use slotforge::evaluation::EvalError;
use slotforge::losses::LossError;
use slotforge::metrics::MetricError;
use slotforge::model::ModelError;
use slotforge::tensor::TensorError;
use slotforge::theory::TheoryError;
use slotforge::trainer::TrainError;
use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Diverged(String),
    #[error("io/format error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(_) | ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::DegenerateFeatures | ModelError::DegenerateSlot { .. } => CliError::Diverged(e.to_string()),
            ModelError::Tensor(t) => t.into(),
            ModelError::Config(_) | ModelError::Input(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::Degenerate { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::DegenerateSlot { .. } => CliError::Diverged(e.to_string()),
            LossError::Tensor(t) => t.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::DegenerateSlot { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(_) => CliError::Config(e.to_string()),
            EvalError::Model(e) => e.into(),
            EvalError::Metric(e) => e.into(),
            EvalError::Loss(e) => e.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Model(e) => e.into(),
            TrainError::Loss(e) => e.into(),
            TrainError::Theory(e) => e.into(),
        }
    }
}
