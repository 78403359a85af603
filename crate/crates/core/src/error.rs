use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate 6-D rotation: columns are zero or parallel")]
    DegenerateRotation,
    #[error("matrix is not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("motion clip needs at least 2 frames, got {0}")]
    ClipTooShort(usize),
    #[error("unknown motion category `{0}`")]
    UnknownCategory(String),
    #[error("frame {0} is not available in the history buffer")]
    MissingFrame(u64),
    #[error("point cloud contains a non-finite coordinate")]
    NonFinitePoint,
    #[error("rollout segment needs {needed} frames, got {got}")]
    SegmentTooShort { needed: usize, got: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (sequence {sequence}, frame {frame})")]
    NonFiniteLoss { epoch: usize, batch: usize, sequence: String, frame: usize },
    #[error("sequence is too short for {what}: needs {needed}, got {got}")]
    SequenceTooShort { what: &'static str, needed: usize, got: usize },
    #[error("foot joint {0} has no hip-knee chain")]
    NoLegChain(usize),
    #[error("aborted by the caller: {0}")]
    Aborted(String),
}
