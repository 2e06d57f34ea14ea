//! Simulator for a GPU memory manager that coalesces base pages into large
//! pages in place, splinters and compacts on deallocation, and models the
//! TLB hierarchy, page walks and demand paging around it.

pub mod allocator;
pub mod coalescer;
pub mod compaction;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod memory;
pub mod page_table;
pub mod paging;
pub mod suite;
pub mod tlb;
pub mod walker;

pub use error::{Error, Result};
pub use geometry::{Asid, PageGeometry, PhysAddr, VirtAddr};
