//! Communication topologies over the chain of agents and the partitions they
//! induce.
//!
//! Links exist only between adjacent agents, `ℓ_{i,i+1}` for `i < N-1`, so a
//! topology over `N` agents is a vector of `N-1` flags ordered upstream to
//! downstream.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Topology {
    links: Vec<bool>,
}

impl Topology {
    /// All links disabled (fully decentralized).
    pub fn empty(agents: usize) -> Self {
        Self {
            links: vec![false; agents.saturating_sub(1)],
        }
    }

    /// All links enabled (centralized).
    pub fn full(agents: usize) -> Self {
        Self {
            links: vec![true; agents.saturating_sub(1)],
        }
    }

    pub fn from_links(links: Vec<bool>) -> Self {
        Self { links }
    }

    /// Parses a string of `0`/`1` flags, upstream link first.
    pub fn from_bits(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Schema(format!("invalid link flag {other:?} in {bits:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_links)
    }

    pub fn to_bits(&self) -> String {
        self.links.iter().map(|&l| if l { '1' } else { '0' }).collect()
    }

    pub fn agents(&self) -> usize {
        self.links.len() + 1
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[bool] {
        &self.links
    }

    /// Whether link `ℓ_{i,i+1}` is enabled.
    pub fn is_enabled(&self, i: usize) -> bool {
        self.links.get(i).copied().unwrap_or(false)
    }

    /// Number of enabled links, `|Λ|`.
    pub fn enabled_count(&self) -> usize {
        self.links.iter().filter(|&&l| l).count()
    }

    /// Copy with link `i` flipped.
    pub fn toggled(&self, i: usize) -> Self {
        let mut links = self.links.clone();
        links[i] = !links[i];
        Self { links }
    }

    /// Number of links whose state differs.
    pub fn hamming(&self, other: &Topology) -> usize {
        self.links.iter().zip(&other.links).filter(|(a, b)| a != b).count()
    }

    /// Enabled links incident to agent `j`.
    pub fn degree(&self, j: usize) -> usize {
        let up = j > 0 && self.is_enabled(j - 1);
        let down = self.is_enabled(j);
        up as usize + down as usize
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bits())
    }
}

/// Disjoint coalitions covering every agent, sorted by smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    /// Normalizes the blocks (members ascending, blocks by first member).
    /// Panics on empty or overlapping blocks.
    pub fn new(mut blocks: Vec<Vec<usize>>) -> Self {
        for b in &mut blocks {
            b.sort_unstable();
            assert!(!b.is_empty(), "empty coalition");
        }
        blocks.sort_by_key(|b| b[0]);
        let mut seen: Vec<usize> = blocks.iter().flatten().copied().collect();
        seen.sort_unstable();
        let len = seen.len();
        seen.dedup();
        assert_eq!(len, seen.len(), "overlapping coalitions");
        Self { blocks }
    }

    pub fn singletons(agents: usize) -> Self {
        Self {
            blocks: (0..agents).map(|i| vec![i]).collect(),
        }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block containing `agent`.
    pub fn block_of(&self, agent: usize) -> Option<&[usize]> {
        self.blocks.iter().find(|b| b.contains(&agent)).map(|b| b.as_slice())
    }

    /// Canonical key, e.g. `0-3|4|5,7`.
    pub fn key(&self) -> String {
        self.blocks.iter().map(|b| block_key(b)).collect::<Vec<_>>().join("|")
    }
}

/// Compact label of a coalition: `a-b` for contiguous runs, otherwise a list.
pub fn block_key(block: &[usize]) -> String {
    let contiguous = block.windows(2).all(|w| w[1] == w[0] + 1);
    match (block.first(), block.last()) {
        (Some(a), Some(b)) if contiguous && a != b => format!("{a}-{b}"),
        (Some(a), _) if block.len() == 1 => a.to_string(),
        _ => block.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    }
}

/// Coalitions induced by `topology`: the connected components of the chain
/// graph restricted to enabled links.
pub fn partition_of(topology: &Topology, agents: usize) -> Partition {
    let mut blocks = Vec::new();
    let mut current = Vec::new();
    for i in 0..agents {
        current.push(i);
        if !topology.is_enabled(i) || i + 1 == agents {
            blocks.push(std::mem::take(&mut current));
        }
    }
    Partition { blocks }
}

/// The incumbent followed by every topology one link toggle away, in link
/// order.
pub fn candidate_set(current: &Topology) -> Vec<Topology> {
    std::iter::once(current.clone())
        .chain((0..current.link_count()).map(|i| current.toggled(i)))
        .collect()
}

/// Network cost of holding `topology` for `interval` steps, `c_ℓ |Λ| T_Λ`.
pub fn network_cost_total(topology: &Topology, link_cost: f64, interval: usize) -> f64 {
    link_cost * topology.enabled_count() as f64 * interval as f64
}

/// Share of agent `j` over a prediction horizon, `N_p (c_ℓ/2) n_ℓ,j`.
pub fn network_cost_agent(topology: &Topology, agent: usize, link_cost: f64, horizon: usize) -> f64 {
    horizon as f64 * link_cost / 2.0 * topology.degree(agent) as f64
}
