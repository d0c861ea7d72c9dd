//! Device hierarchy and the mapping of tile coordinates onto devices: cut
//! `i` splits across hierarchy level `i`, so the outermost cut crosses the
//! root link.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcuts::KCutResult;
use crate::tiling::TileCoord;

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyLevel {
    pub label: String,
    pub bandwidth_bytes_per_s: f64,
    /// Children per node; only binary trees are supported.
    #[serde(default = "two", skip_serializing)]
    pub fanout: usize,
}

impl HierarchyLevel {
    pub fn new(label: impl Into<String>, bandwidth_bytes_per_s: f64) -> Self {
        Self {
            label: label.into(),
            bandwidth_bytes_per_s,
            fanout: 2,
        }
    }
}

/// A full binary tree of interconnect levels, root first. Leaves are devices
/// `0..2^depth` in left-to-right order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceHierarchy {
    levels: Vec<HierarchyLevel>,
}

impl DeviceHierarchy {
    pub fn new(levels: Vec<HierarchyLevel>) -> Result<Self> {
        for l in &levels {
            if l.fanout != 2 {
                return Err(Error::InvalidHierarchy(format!(
                    "level `{}` has fanout {}, only binary levels are supported",
                    l.label, l.fanout
                )));
            }
            if !(l.bandwidth_bytes_per_s > 0.0 && l.bandwidth_bytes_per_s.is_finite()) {
                return Err(Error::InvalidHierarchy(format!(
                    "level `{}` has non-positive bandwidth {}",
                    l.label, l.bandwidth_bytes_per_s
                )));
            }
        }
        Ok(Self { levels })
    }

    /// `depth` levels that all share one bandwidth.
    pub fn uniform(depth: usize, bandwidth_bytes_per_s: f64) -> Result<Self> {
        Self::new(
            (0..depth)
                .map(|i| HierarchyLevel::new(format!("L{i}"), bandwidth_bytes_per_s))
                .collect(),
        )
    }

    pub fn levels(&self) -> &[HierarchyLevel] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn devices(&self) -> usize {
        1 << self.levels.len()
    }

    /// Level of the nearest common ancestor of two distinct devices (0 is
    /// the root); `None` when `a == b`.
    pub fn nca_level(&self, a: usize, b: usize) -> Result<Option<usize>> {
        for d in [a, b] {
            if d >= self.devices() {
                return Err(Error::UnknownDevice(d));
            }
        }
        if a == b {
            return Ok(None);
        }
        let diff = a ^ b;
        Ok(Some(self.depth() - 1 - (usize::BITS - 1 - diff.leading_zeros()) as usize))
    }

    /// Levels whose bandwidth exceeds that of the level below, i.e. where a
    /// slower link sits closer to the leaves.
    pub fn monotonicity_warnings(&self) -> Vec<String> {
        self.levels
            .windows(2)
            .filter(|w| w[0].bandwidth_bytes_per_s > w[1].bandwidth_bytes_per_s)
            .map(|w| {
                format!(
                    "level `{}` ({} B/s) is faster than inner level `{}` ({} B/s); outer cuts will use the faster link",
                    w[0].label, w[0].bandwidth_bytes_per_s, w[1].label, w[1].bandwidth_bytes_per_s
                )
            })
            .collect()
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy serialize") + "\n"
    }
}

pub fn parse_hierarchy(text: &str) -> Result<DeviceHierarchy> {
    let raw: DeviceHierarchy = serde_json::from_str(text)?;
    DeviceHierarchy::new(raw.levels)
}

/// Bijection between tile coordinates and devices. Branch bit `b` of cut `i`
/// picks child `b` at level `i`, so the device id spells the coordinate
/// with the outermost cut as the most significant bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementMap {
    k: usize,
    pub warnings: Vec<String>,
}

impl PlacementMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn devices(&self) -> usize {
        1 << self.k
    }

    pub fn device_of(&self, coord: &TileCoord) -> Result<usize> {
        if coord.len() != self.k {
            return Err(Error::CutCountMismatch {
                expected: self.k,
                got: coord.len(),
            });
        }
        Ok(coord.index())
    }

    pub fn coord_of(&self, device: usize) -> Result<TileCoord> {
        if device >= self.devices() {
            return Err(Error::UnknownDevice(device));
        }
        Ok(TileCoord::from_index(device, self.k))
    }

    /// Hierarchy level whose links cut `i` splits across.
    pub fn level_of_cut(&self, i: usize) -> usize {
        i
    }
}

pub fn place_cuts(k: usize, h: &DeviceHierarchy) -> Result<PlacementMap> {
    if h.depth() != k {
        return Err(Error::DepthMismatch { depth: h.depth(), k });
    }
    Ok(PlacementMap {
        k,
        warnings: h.monotonicity_warnings(),
    })
}

pub fn place(r: &KCutResult, h: &DeviceHierarchy) -> Result<PlacementMap> {
    place_cuts(r.k, h)
}
