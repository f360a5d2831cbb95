use alloc::string::String;

/// Errors raised by the core algorithms.
///
/// The leading kebab-case word of each message is stable and is what the
/// command line prints; tests match on the variants.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty-context: attention over zero keys")]
    EmptyContext,
    #[error("non-finite: input contains NaN or infinity")]
    NonFinite,
    #[error("shape-mismatch: {what} (expected {expected}, found {found})")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("mixed-group: heads in one group reference different KV caches")]
    MixedGroup,
    #[error("empty-group: a group needs at least one head")]
    EmptyGroup,
    #[error("invalid-granularity: block size {0}")]
    InvalidGranularity(usize),
    #[error("bad-block: block {block} out of {count}")]
    BadBlock { block: usize, count: usize },
    #[error("stale-selection: built for {expected} tokens, cache holds {found}")]
    StaleSelection { expected: usize, found: usize },
    #[error("degenerate-normalizer: every head output is zero")]
    DegenerateNormalizer,
    #[error("underdetermined: need at least two distinct granularities")]
    Underdetermined,
    #[error("bad-norms: statistics cover {found} dimensions, vector has {expected}")]
    BadNorms { expected: usize, found: usize },
    #[error("no-data: dataset is empty")]
    NoData,
    #[error("not-schedulable: streaming groups produce no task")]
    NotSchedulable,
    #[error("duplicate-task: group {0} appears twice in one batch")]
    DuplicateTask(u64),
    #[error("infeasible-spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
