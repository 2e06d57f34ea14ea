//! Page geometry and the address/identity types shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Base-page number (virtual or physical, depending on context).
pub type PageNum = u64;
/// Large-frame number (virtual or physical, depending on context).
pub type FrameNum = u64;

/// Address-space identifier: one per concurrently running application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Asid(pub u16);

impl fmt::Display for Asid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Virtual byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtAddr(pub u64);

/// Physical byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhysAddr(pub u64);

/// Anything that is a byte address in some address space.
pub trait Address: Copy {
    fn raw(self) -> u64;
}

impl Address for VirtAddr {
    fn raw(self) -> u64 {
        self.0
    }
}

impl Address for PhysAddr {
    fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{:#x}", self.0)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{:#x}", self.0)
    }
}

/// The base/large page-size pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PageGeometry {
    pub base_page_bytes: u64,
    pub large_page_bytes: u64,
}

impl Default for PageGeometry {
    fn default() -> Self {
        Self {
            base_page_bytes: 4096,
            large_page_bytes: 2 * 1024 * 1024,
        }
    }
}

impl PageGeometry {
    pub fn new(base_page_bytes: u64, large_page_bytes: u64) -> Result<Self, ConfigError> {
        let g = Self {
            base_page_bytes,
            large_page_bytes,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.base_page_bytes.is_power_of_two() {
            return Err(ConfigError::invalid(
                "geometry.base_page_bytes",
                "must be a power of two",
            ));
        }
        if !self.large_page_bytes.is_power_of_two() {
            return Err(ConfigError::invalid(
                "geometry.large_page_bytes",
                "must be a power of two",
            ));
        }
        if self.large_page_bytes <= self.base_page_bytes {
            return Err(ConfigError::invalid(
                "geometry.large_page_bytes",
                "must be larger than base_page_bytes",
            ));
        }
        Ok(())
    }

    /// Number of base-page slots in one large frame (512 at 4KB/2MB).
    #[inline]
    pub fn slots_per_large_frame(&self) -> u64 {
        self.large_page_bytes / self.base_page_bytes
    }

    #[inline]
    pub fn base_page_of<A: Address>(&self, a: A) -> PageNum {
        a.raw() / self.base_page_bytes
    }

    #[inline]
    pub fn large_frame_of<A: Address>(&self, a: A) -> FrameNum {
        a.raw() / self.large_page_bytes
    }

    #[inline]
    pub fn slot_in_frame<A: Address>(&self, a: A) -> u64 {
        (a.raw() % self.large_page_bytes) / self.base_page_bytes
    }

    #[inline]
    pub fn page_offset<A: Address>(&self, a: A) -> u64 {
        a.raw() % self.base_page_bytes
    }

    #[inline]
    pub fn is_frame_aligned<A: Address>(&self, a: A) -> bool {
        a.raw() % self.large_page_bytes == 0
    }

    /// Frame that contains a given base-page number.
    #[inline]
    pub fn frame_of_page(&self, page: PageNum) -> FrameNum {
        page / self.slots_per_large_frame()
    }

    #[inline]
    pub fn slot_of_page(&self, page: PageNum) -> u64 {
        page % self.slots_per_large_frame()
    }

    #[inline]
    pub fn first_page_of_frame(&self, frame: FrameNum) -> PageNum {
        frame * self.slots_per_large_frame()
    }

    /// Rebuilds a byte address from its (frame, slot, offset) decomposition.
    #[inline]
    pub fn compose(&self, frame: FrameNum, slot: u64, offset: u64) -> u64 {
        frame * self.large_page_bytes + slot * self.base_page_bytes + offset
    }

    /// Number of base pages needed to hold `bytes`.
    #[inline]
    pub fn pages_for_bytes(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.base_page_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn base_page_examples() {
        let g = PageGeometry::default();
        assert_eq!(g.base_page_of(VirtAddr(0)), 0);
        assert_eq!(g.base_page_of(VirtAddr(4096)), 1);
        assert_eq!(g.base_page_of(PhysAddr(2_097_152)), 512);
        assert_eq!(g.slots_per_large_frame(), 512);
    }

    #[test]
    fn frame_and_slot_examples() {
        let g = PageGeometry::default();
        assert_eq!((g.large_frame_of(VirtAddr(0)), g.slot_in_frame(VirtAddr(0))), (0, 0));
        let a = PhysAddr(2_097_152 + 4096);
        assert_eq!((g.large_frame_of(a), g.slot_in_frame(a)), (1, 1));
        let last = VirtAddr(4_194_303);
        assert_eq!((g.large_frame_of(last), g.slot_in_frame(last)), (1, 511));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(PageGeometry::new(3000, 2 * 1024 * 1024).is_err());
        assert!(PageGeometry::new(4096, 4096).is_err());
        assert!(PageGeometry::new(4096, 3 * 1024 * 1024).is_err());
        assert!(PageGeometry::new(4096, 65536).is_ok());
    }

    proptest! {
        #[test]
        fn decomposition_round_trips(addr in 0u64..(1u64 << 48)) {
            let g = PageGeometry::default();
            let a = VirtAddr(addr);
            let frame = g.large_frame_of(a);
            let slot = g.slot_in_frame(a);
            prop_assert!(slot < 512);
            prop_assert_eq!(g.base_page_of(a), frame * 512 + slot);
            prop_assert_eq!(g.compose(frame, slot, g.page_offset(a)), addr);
            prop_assert_eq!(g.is_frame_aligned(a), addr % 2_097_152 == 0);
        }
    }
}
