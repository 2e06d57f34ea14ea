use thiserror::Error;

use crate::geometry::{Asid, FrameNum, PageNum};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("failed to parse configuration: {0}")]
    Parse(String),
    #[error("unknown application profile `{0}`")]
    UnknownProfile(String),
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PageTableError {
    #[error("virtual page {vpage:#x} is already mapped")]
    AlreadyMapped { vpage: PageNum },
    #[error("virtual page {vpage:#x} is not mapped")]
    NotMapped { vpage: PageNum },
    #[error("virtual page {vpage:#x} lies inside coalesced frame {vframe:#x}")]
    InsideCoalesced { vpage: PageNum, vframe: FrameNum },
    #[error("cannot coalesce virtual frame {vframe:#x}: {reason}")]
    NotCoalescible { vframe: FrameNum, reason: String },
    #[error("virtual frame {vframe:#x} is not coalesced")]
    NotCoalesced { vframe: FrameNum },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("out of memory: requested {requested} base pages, {free} free")]
    OutOfMemory { requested: u64, free: u64 },
    #[error("asid {asid} does not own virtual page {vpage:#x}")]
    Protection { asid: Asid, vpage: PageNum },
    #[error("allocation request must cover at least one page")]
    EmptyRequest,
    #[error("no owner-compatible frame available for asid {asid}")]
    WouldViolateSoftGuarantee { asid: Asid },
    #[error(transparent)]
    PageTable(#[from] PageTableError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    PageTable(#[from] PageTableError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("asid {asid} touched {vaddr:#x} outside its declared buffers")]
    Protection { asid: Asid, vaddr: u64 },
    #[error("weighted speedup undefined: application {index} has zero standalone IPC")]
    ZeroAloneIpc { index: usize },
    #[error("weighted speedup needs one standalone run per application ({expected} expected, {got} given)")]
    AloneCountMismatch { expected: usize, got: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
