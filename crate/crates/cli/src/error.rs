use thiserror::Error;

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("stage {stage} cannot run: missing {missing}")]
    Dependency { stage: String, missing: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] longreg::Error),
}

impl PipelineError {
    /// 2 for bad or missing input, 3 when a solver gives up.
    pub fn exit_code(&self) -> u8 {
        use longreg::Error as E;
        match self {
            PipelineError::Core(
                E::Unbounded
                | E::NumericalFailure(_)
                | E::VoxelSolve { .. }
                | E::DegenerateConfiguration(_)
                | E::RotationNearPi { .. }
                | E::NonFiniteField,
            ) => 3,
            _ => 2,
        }
    }
}
