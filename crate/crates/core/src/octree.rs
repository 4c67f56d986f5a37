//! Level-order octree occupancy coding of segment point sets.
//!
//! Within a node, the child index is `(x_bit << 2) | (y_bit << 1) | t_bit`
//! using the coordinate bits of the current level (most significant first),
//! and bit `c` of an occupancy byte (LSB = child 0) marks child `c` as
//! non-empty. Bytes are emitted level by level; the children of each level
//! appear in the order their parents were emitted.

use crate::error::{Error, Result};
use crate::preprocess::Point;

/// Deepest supported tree: Morton codes must fit in 63 bits.
pub const MAX_DEPTH: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctreeParams {
    pub depth: u32,
}

impl OctreeParams {
    pub fn new(depth: u32) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::InvalidArgument(format!("octree depth {depth} not in 1..={MAX_DEPTH}")));
        }
        Ok(Self { depth })
    }

    pub fn cube_side(&self) -> u64 {
        1 << self.depth
    }
}

/// Depth covering the exclusive bounds: `ceil(log2(max(x, y, t)))`, at least 1.
pub fn compute_depth(x_max: u64, y_max: u64, t_max: u64) -> Result<OctreeParams> {
    let bound = x_max.max(y_max).max(t_max);
    if x_max == 0 || y_max == 0 || t_max == 0 {
        return Err(Error::InvalidArgument("octree bounds must be at least 1".into()));
    }
    let depth = bound.next_power_of_two().trailing_zeros();
    if depth == 0 {
        log::debug!("degenerate octree bound {bound}; padding to depth 1");
    }
    OctreeParams::new(depth.max(1))
}

/// Level-ordered occupancy bytes of one octree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyStream {
    pub bytes: Vec<u8>,
    /// Start index of each level in `bytes`; one entry per level.
    pub level_offsets: Vec<usize>,
}

impl OccupancyStream {
    pub fn level(&self, k: usize) -> &[u8] {
        let start = self.level_offsets[k];
        let end = self.level_offsets.get(k + 1).copied().unwrap_or(self.bytes.len());
        &self.bytes[start..end]
    }

    pub fn depth(&self) -> usize {
        self.level_offsets.len()
    }
}

#[inline]
fn spread3(v: u32) -> u64 {
    // places bit i of v at bit 3i
    let mut x = u64::from(v) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact3(code: u64) -> u32 {
    let mut x = code & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Morton code whose base-8 digits are the per-level child indices.
#[inline]
pub fn morton_encode(p: Point) -> u64 {
    (spread3(p.x) << 2) | (spread3(p.y) << 1) | spread3(p.t)
}

#[inline]
pub fn morton_decode(code: u64) -> Point {
    Point::new(compact3(code >> 2), compact3(code >> 1), compact3(code))
}

pub fn build_occupancy(points: &[Point], params: OctreeParams) -> Result<OccupancyStream> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot build an octree from an empty point set".into()));
    }
    let side = params.cube_side();
    let mut codes = Vec::with_capacity(points.len());
    for &p in points {
        if u64::from(p.x) >= side || u64::from(p.y) >= side || u64::from(p.t) >= side {
            return Err(Error::Range(format!("point ({}, {}, {}) outside cube of side {side}", p.x, p.y, p.t)));
        }
        codes.push(morton_encode(p));
    }
    codes.sort_unstable();
    codes.dedup();

    let depth = params.depth;
    let mut bytes = Vec::new();
    let mut level_offsets = Vec::with_capacity(depth as usize);
    for level in 0..depth {
        level_offsets.push(bytes.len());
        let child_shift = 3 * (depth - level - 1);
        let node_shift = child_shift + 3;
        let mut current_node = codes[0] >> node_shift;
        let mut byte = 0u8;
        for &code in &codes {
            let node = code >> node_shift;
            if node != current_node {
                bytes.push(byte);
                byte = 0;
                current_node = node;
            }
            byte |= 1 << ((code >> child_shift) & 7);
        }
        bytes.push(byte);
    }
    Ok(OccupancyStream { bytes, level_offsets })
}

/// Rebuilds the point set from level-ordered occupancy bytes.
///
/// The points come back in Morton order.
pub fn decode_occupancy(bytes: &[u8], params: OctreeParams) -> Result<Vec<Point>> {
    let mut nodes: Vec<u64> = vec![0];
    let mut pos = 0;
    for level in 0..params.depth {
        let mut children = Vec::with_capacity(nodes.len() * 2);
        for &node in &nodes {
            let Some(&byte) = bytes.get(pos) else {
                return Err(Error::Corrupt(format!("occupancy stream exhausted at level {level} after {pos} bytes")));
            };
            if byte == 0 {
                return Err(Error::Corrupt(format!("zero occupancy byte at index {pos}")));
            }
            pos += 1;
            let mut mask = byte;
            while mask != 0 {
                let c = mask.trailing_zeros() as u64;
                children.push((node << 3) | c);
                mask &= mask - 1;
            }
        }
        nodes = children;
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after a complete depth-{} octree",
            bytes.len() - pos,
            params.depth
        )));
    }
    Ok(nodes.into_iter().map(morton_decode).collect())
}
