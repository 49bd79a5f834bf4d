//! Machine topology: sockets, last-level-cache domains (chiplets) and cores.
//!
//! Cores are numbered canonically: socket-major, then domain-major, then by
//! position inside the domain. Domain ids are global across the machine and
//! follow the same order, so "lowest index" tie-breaks are reproducible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type CoreId = usize;
pub type DomainId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("malformed topology field `{field}`: {message}")]
    Parse { field: &'static str, message: String },
    #[error("invalid topology: {0}")]
    Validation(String),
    #[error("core {core} out of range (machine has {total} cores)")]
    CoreOutOfRange { core: CoreId, total: usize },
}

/// Counts per level, as written in a scenario file or on the command line
/// (`"1x4x8"`: 1 socket, 4 LLC domains per socket, 8 cores per domain).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub sockets: usize,
    pub llc_per_socket: usize,
    pub cores_per_llc: usize,
}

impl TopologySpec {
    pub fn new(sockets: usize, llc_per_socket: usize, cores_per_llc: usize) -> Self {
        Self {
            sockets,
            llc_per_socket,
            cores_per_llc,
        }
    }

    pub fn build(&self) -> Result<MachineTopology, TopologyError> {
        build_topology(self)
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}",
            self.sockets, self.llc_per_socket, self.cores_per_llc
        )
    }
}

impl FromStr for TopologySpec {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        const FIELDS: [&str; 3] = ["sockets", "llc_per_socket", "cores_per_llc"];
        let parts: Vec<&str> = s
            .split(['x', 'X', '×'])
            .map(str::trim)
            .collect();
        if parts.len() != 3 {
            return Err(TopologyError::Parse {
                field: "layout",
                message: format!("expected SOCKETSxDOMAINSxCORES, got `{s}`"),
            });
        }
        let mut counts = [0usize; 3];
        for (i, part) in parts.iter().enumerate() {
            counts[i] = part.parse().map_err(|_| TopologyError::Parse {
                field: FIELDS[i],
                message: format!("`{part}` is not a non-negative integer"),
            })?;
        }
        Ok(Self::new(counts[0], counts[1], counts[2]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LlcDomain {
    pub domain_id: DomainId,
    pub cores: Vec<CoreId>,
    /// CPU units; always equal to the core count.
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SocketSpec {
    pub llc_domains: Vec<LlcDomain>,
    pub monolithic_llc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    SplitLlc,
    Monolithic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MachineTopology {
    pub sockets: Vec<SocketSpec>,
    pub total_cores: usize,
    #[serde(skip)]
    core_domain: Vec<DomainId>,
    #[serde(skip)]
    core_socket: Vec<usize>,
}

/// Builds a uniform topology from per-level counts.
pub fn build_topology(spec: &TopologySpec) -> Result<MachineTopology, TopologyError> {
    if spec.sockets == 0 {
        return Err(TopologyError::Validation("zero sockets".into()));
    }
    if spec.llc_per_socket == 0 {
        return Err(TopologyError::Validation("zero LLC domains per socket".into()));
    }
    if spec.cores_per_llc == 0 {
        return Err(TopologyError::Validation("zero cores".into()));
    }
    let layout = vec![vec![spec.cores_per_llc; spec.llc_per_socket]; spec.sockets];
    MachineTopology::from_layout(&layout)
}

impl MachineTopology {
    /// Builds a possibly heterogeneous topology: `layout[socket][domain]` is
    /// the core count of that domain.
    pub fn from_layout(layout: &[Vec<usize>]) -> Result<Self, TopologyError> {
        if layout.is_empty() {
            return Err(TopologyError::Validation("zero sockets".into()));
        }
        let mut sockets = Vec::with_capacity(layout.len());
        let mut core_domain = Vec::new();
        let mut core_socket = Vec::new();
        let mut next_core = 0;
        let mut next_domain = 0;
        for (socket_idx, domains) in layout.iter().enumerate() {
            if domains.is_empty() {
                return Err(TopologyError::Validation(format!(
                    "socket {socket_idx} has no LLC domains"
                )));
            }
            let mut llc_domains = Vec::with_capacity(domains.len());
            for &count in domains {
                if count == 0 {
                    return Err(TopologyError::Validation(format!(
                        "LLC domain {next_domain} has zero cores"
                    )));
                }
                let cores: Vec<CoreId> = (next_core..next_core + count).collect();
                core_domain.extend(std::iter::repeat_n(next_domain, count));
                core_socket.extend(std::iter::repeat_n(socket_idx, count));
                next_core += count;
                llc_domains.push(LlcDomain {
                    domain_id: next_domain,
                    cores,
                    capacity: count,
                });
                next_domain += 1;
            }
            let monolithic_llc = llc_domains.len() == 1;
            sockets.push(SocketSpec {
                llc_domains,
                monolithic_llc,
            });
        }
        Ok(Self {
            sockets,
            total_cores: next_core,
            core_domain,
            core_socket,
        })
    }

    pub fn llc_domain_of(&self, core: CoreId) -> Result<DomainId, TopologyError> {
        self.core_domain
            .get(core)
            .copied()
            .ok_or(TopologyError::CoreOutOfRange {
                core,
                total: self.total_cores,
            })
    }

    pub fn socket_of(&self, core: CoreId) -> Result<usize, TopologyError> {
        self.core_socket
            .get(core)
            .copied()
            .ok_or(TopologyError::CoreOutOfRange {
                core,
                total: self.total_cores,
            })
    }

    /// Unchecked domain lookup for hot simulation paths. Panics on a bad core.
    #[inline]
    pub(crate) fn domain_index(&self, core: CoreId) -> DomainId {
        self.core_domain[core]
    }

    pub fn domains(&self) -> impl Iterator<Item = &LlcDomain> {
        self.sockets.iter().flat_map(|s| s.llc_domains.iter())
    }

    pub fn domain(&self, id: DomainId) -> Option<&LlcDomain> {
        self.domains().nth(id)
    }

    pub fn domain_count(&self) -> usize {
        self.sockets.iter().map(|s| s.llc_domains.len()).sum()
    }

    /// A machine is monolithic when every socket has a single shared LLC.
    pub fn kind(&self) -> TopologyKind {
        if self.sockets.iter().all(|s| s.monolithic_llc) {
            TopologyKind::Monolithic
        } else {
            TopologyKind::SplitLlc
        }
    }

    pub fn cores(&self) -> std::ops::Range<CoreId> {
        0..self.total_cores
    }
}
