//! Mapping between measurement locations and grid cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grid split into square query blocks. Location `k` covers the
/// `block x block` cells of the k-th block in row-major block order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct Layout {
    rows: usize,
    cols: usize,
    block: usize,
    #[serde(skip)]
    coords: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawLayout {
    rows: usize,
    cols: usize,
    block: usize,
}

impl TryFrom<RawLayout> for Layout {
    type Error = Error;
    fn try_from(r: RawLayout) -> Result<Self> {
        Layout::new(r.rows, r.cols, r.block)
    }
}

impl Layout {
    pub fn new(rows: usize, cols: usize, block: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || block == 0 {
            return Err(Error::InvalidRange {
                name: "shape",
                detail: format!("{rows}x{cols} with block {block}"),
            });
        }
        if !rows.is_multiple_of(block) || !cols.is_multiple_of(block) {
            return Err(Error::InvalidRange {
                name: "block",
                detail: format!("block {block} does not divide {rows}x{cols}"),
            });
        }
        let (br, bc) = (rows / block, cols / block);
        let coords = (0..br * bc)
            .map(|loc| {
                let (r0, c0) = ((loc / bc) * block, (loc % bc) * block);
                (0..block)
                    .flat_map(|dr| (0..block).map(move |dc| (r0 + dr) * cols + c0 + dc))
                    .collect()
            })
            .collect();
        Ok(Self {
            rows,
            cols,
            block,
            coords,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn locations(&self) -> usize {
        self.coords.len()
    }

    /// Locations per row of blocks.
    pub fn block_cols(&self) -> usize {
        self.cols / self.block
    }

    pub fn patch_area(&self) -> usize {
        self.block * self.block
    }

    pub fn coords(&self, location: usize) -> Result<&[usize]> {
        self.coords
            .get(location)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownLocation {
                location,
                count: self.coords.len(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_partition_the_grid() {
        let l = Layout::new(4, 6, 2).unwrap();
        assert_eq!(l.locations(), 6);
        let mut seen: Vec<usize> = (0..6).flat_map(|k| l.coords(k).unwrap().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
        assert_eq!(l.coords(1).unwrap(), &[2, 3, 8, 9]);
        assert!(l.coords(6).is_err());
    }

    #[test]
    fn block_must_divide() {
        assert!(Layout::new(5, 4, 2).is_err());
        assert!(Layout::new(4, 4, 0).is_err());
    }
}
