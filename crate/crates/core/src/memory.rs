//! Sparse simulated address space.
//!
//! Regions are mapped explicitly; bytes live in 4KB pages that are created
//! on first write, so a mapped 4GB frame costs nothing until touched.
//! Untouched bytes inside a mapped region read as zero.

use std::collections::BTreeMap;
use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;

/// Nothing is ever mapped below this address.
pub const LOW_GUARD: u64 = 1 << 22;

/// An access outside every mapped region. This indicates a sandbox bug (a
/// check that should have fired did not), never an ordinary program bug.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("simulated memory fault: {len} bytes at {addr:#x} are not mapped")]
pub struct SimFault {
    pub addr: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("region {base:#x}+{len:#x} lies below the 4MB guard")]
    BelowGuard { base: u64, len: u64 },
    #[error("region {base:#x}+{len:#x} overlaps an existing mapping")]
    Overlap { base: u64, len: u64 },
    #[error("no region is mapped at {0:#x}")]
    NotMapped(u64),
}

#[derive(Debug, Default, Clone)]
pub struct SimMemory {
    regions: BTreeMap<u64, u64>,
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl SimMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn map(&mut self, base: u64, len: u64) -> Result<(), MapError> {
        if base < LOW_GUARD {
            return Err(MapError::BelowGuard { base, len });
        }
        let end = base.checked_add(len).ok_or(MapError::Overlap { base, len })?;
        if let Some((&b, &l)) = self.regions.range(..end).next_back() {
            if b + l > base && len > 0 {
                return Err(MapError::Overlap { base, len });
            }
        }
        self.regions.insert(base, len);
        Ok(())
    }

    /// Unmaps the region starting exactly at `base` and discards its bytes.
    pub fn unmap(&mut self, base: u64) -> Result<(), MapError> {
        let len = self.regions.remove(&base).ok_or(MapError::NotMapped(base))?;
        let first = base / PAGE_SIZE;
        let last = (base + len).div_ceil(PAGE_SIZE);
        let doomed: Vec<u64> = self.pages.range(first..last).map(|(&k, _)| k).collect();
        for page in doomed {
            let page_start = page * PAGE_SIZE;
            let page_end = page_start + PAGE_SIZE;
            // Pages shared with a neighbouring region survive.
            if page_start >= base && page_end <= base + len {
                self.pages.remove(&page);
            }
        }
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.regions.iter().map(|(&b, &l)| (b, l))
    }

    pub fn is_mapped(&self, addr: u64, len: u64) -> bool {
        self.check_mapped(addr, len).is_ok()
    }

    fn check_mapped(&self, addr: u64, len: u64) -> Result<(), SimFault> {
        let fault = SimFault { addr, len };
        let end = addr.checked_add(len).ok_or(fault.clone())?;
        let mut cursor = addr;
        while cursor < end {
            match self.regions.range(..=cursor).next_back() {
                Some((&b, &l)) if cursor < b + l => cursor = b + l,
                _ => return Err(fault),
            }
        }
        Ok(())
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, SimFault> {
        let mut out = vec![0u8; len as usize];
        self.read_into(addr, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, addr: u64, out: &mut [u8]) -> Result<(), SimFault> {
        self.check_mapped(addr, out.len() as u64)?;
        let mut done = 0usize;
        while done < out.len() {
            let a = addr + done as u64;
            let page = a / PAGE_SIZE;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(out.len() - done);
            match self.pages.get(&page) {
                Some(p) => out[done..done + n].copy_from_slice(&p[off..off + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), SimFault> {
        self.check_mapped(addr, bytes.len() as u64)?;
        let mut done = 0usize;
        while done < bytes.len() {
            let a = addr + done as u64;
            let page = a / PAGE_SIZE;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(bytes.len() - done);
            let p = self.pages.entry(page).or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]));
            p[off..off + n].copy_from_slice(&bytes[done..done + n]);
            done += n;
        }
        Ok(())
    }

    /// Fills `len` bytes with `byte` without materialising a buffer.
    pub fn fill(&mut self, addr: u64, len: u64, byte: u8) -> Result<(), SimFault> {
        self.check_mapped(addr, len)?;
        let mut done = 0u64;
        while done < len {
            let a = addr + done;
            let page = a / PAGE_SIZE;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE - off as u64).min(len - done) as usize;
            if byte != 0 || self.pages.contains_key(&page) {
                let p = self.pages.entry(page).or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]));
                p[off..off + n].fill(byte);
            }
            done += n as u64;
        }
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, SimFault> {
        let mut buf = [0u8; 8];
        self.read_into(addr, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), SimFault> {
        self.write(addr, &value.to_le_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read_roundtrip() {
        let mut m = SimMemory::new();
        m.map(1 << 32, 1 << 16).unwrap();
        m.write_u64((1 << 32) + 0xFFC, 0x1122_3344_5566_7788).unwrap();
        assert_eq!(m.read_u64((1 << 32) + 0xFFC).unwrap(), 0x1122_3344_5566_7788);
        assert_eq!(m.read((1 << 32) + 0x2000, 4).unwrap(), vec![0; 4]);
    }

    #[test]
    fn low_addresses_are_never_mapped() {
        let mut m = SimMemory::new();
        assert!(matches!(m.map(0x1000, 0x1000), Err(MapError::BelowGuard { .. })));
        assert_eq!(m.read(0x1000, 8), Err(SimFault { addr: 0x1000, len: 8 }));
    }

    #[test]
    fn zero_length_read_is_empty() {
        let m = SimMemory::new();
        assert_eq!(m.read(0x1000, 0).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn access_spanning_adjacent_regions() {
        let mut m = SimMemory::new();
        m.map(1 << 30, 0x100).unwrap();
        m.map((1 << 30) + 0x100, 0x100).unwrap();
        m.write((1 << 30) + 0xFC, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!(m.read((1 << 30) + 0x1FC, 8).is_err());
        assert!(matches!(m.map((1 << 30) + 0x80, 0x10), Err(MapError::Overlap { .. })));
    }

    #[test]
    fn unmap_discards_pages() {
        let mut m = SimMemory::new();
        m.map(1 << 33, 1 << 32).unwrap();
        m.write_u64((1 << 33) + (3 << 30), 7).unwrap();
        m.unmap(1 << 33).unwrap();
        assert!(m.read_u64((1 << 33) + (3 << 30)).is_err());
        m.map(1 << 33, 1 << 32).unwrap();
        assert_eq!(m.read_u64((1 << 33) + (3 << 30)).unwrap(), 0);
    }
}
