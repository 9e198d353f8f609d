//! Radial network data model.
//!
//! A [`Feeder`] is an immutable rooted tree of buses connected by lines.
//! Bus 0 is the feeder head (substation) whose squared voltage `v0` is
//! held fixed; every other bus may carry injections and, when marked
//! controllable, a reactive-power actuator with box limits. All electrical
//! quantities are stored in per-unit, voltages as squared magnitudes;
//! physical bases (`base_kv`, `base_mva`) are only used when converting
//! at the I/O boundary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("failed to read feeder file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse feeder file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("bus ids must be contiguous 0..{expected}, missing id {missing}")]
    NonContiguousIds { expected: usize, missing: usize },
    #[error("line ({from},{to}) references unknown bus {unknown}")]
    UnknownLineEndpoint {
        from: usize,
        to: usize,
        unknown: usize,
    },
    #[error("line ({from},{to}) has non-positive impedance (r={r}, x={x})")]
    NonPositiveImpedance {
        from: usize,
        to: usize,
        r: f64,
        x: f64,
    },
    #[error("topology is not a tree rooted at bus 0: {0}")]
    NotATree(String),
    #[error("controllable bus {bus} has invalid q box [{q_min}, {q_max}] (need q_min <= 0 <= q_max)")]
    InvalidQBox { bus: usize, q_min: f64, q_max: f64 },
    #[error("voltage limits must satisfy v_lower < v0 < v_upper, got [{v_lower}, {v0}, {v_upper}]")]
    InvalidVoltageLimits { v_lower: f64, v0: f64, v_upper: f64 },
    #[error("unknown bus id {0}")]
    UnknownBus(usize),
}

/// A single network node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    /// Whether this bus hosts a controllable reactive-power resource.
    #[serde(default)]
    pub controllable: bool,
    /// Lower reactive-power limit in per-unit (<= 0); meaningful only when controllable.
    #[serde(default)]
    pub q_min: f64,
    /// Upper reactive-power limit in per-unit (>= 0); meaningful only when controllable.
    #[serde(default)]
    pub q_max: f64,
}

/// A distribution line joining two buses, with series impedance in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

fn default_v0() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LimitsSection {
    #[serde(default = "default_v0")]
    v0: f64,
    v_lower: f64,
    v_upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasesSection {
    base_kv: f64,
    base_mva: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRow {
    id: usize,
    #[serde(default)]
    controllable: bool,
    #[serde(default)]
    q_min: f64,
    #[serde(default)]
    q_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRow {
    from: usize,
    to: usize,
    r: f64,
    x: f64,
}

/// On-disk schema: sections `[limits]`, `[bases]`, plus `[[buses]]` and
/// `[[lines]]` tables. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    limits: LimitsSection,
    bases: BasesSection,
    buses: Vec<BusRow>,
    lines: Vec<LineRow>,
}

/// Immutable radial feeder. Construction validates the tree topology and
/// all element invariants; afterwards the structure is safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Feeder {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    /// Squared feeder-head voltage, per-unit.
    pub v0: f64,
    /// Per-bus lower bound on squared voltage, per-unit.
    pub v_lower: f64,
    /// Per-bus upper bound on squared voltage, per-unit.
    pub v_upper: f64,
    pub base_kv: f64,
    pub base_mva: f64,
    /// parent[j] = (parent bus, index into `lines`) for every non-root bus.
    parent: Vec<Option<(usize, usize)>>,
    /// children[i] = (child bus, index into `lines`), sorted by child id.
    children: Vec<Vec<(usize, usize)>>,
    /// Bus order for the backward sweep: every bus appears after all of its
    /// subtree. Forward sweep uses the reverse.
    depth_order: Vec<usize>,
}

impl Feeder {
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        v0: f64,
        v_lower: f64,
        v_upper: f64,
        base_kv: f64,
        base_mva: f64,
    ) -> Result<Self, FeederError> {
        if !(v_lower < v0 && v0 < v_upper) {
            return Err(FeederError::InvalidVoltageLimits {
                v_lower,
                v0,
                v_upper,
            });
        }
        let n = buses.len();
        let mut seen = vec![false; n];
        for b in &buses {
            if b.id >= n {
                return Err(FeederError::NonContiguousIds {
                    expected: n,
                    missing: seen.iter().position(|s| !s).unwrap_or(0),
                });
            }
            if seen[b.id] {
                return Err(FeederError::DuplicateBus(b.id));
            }
            seen[b.id] = true;
            if b.controllable && !(b.q_min <= 0.0 && 0.0 <= b.q_max) {
                return Err(FeederError::InvalidQBox {
                    bus: b.id,
                    q_min: b.q_min,
                    q_max: b.q_max,
                });
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(FeederError::NonContiguousIds {
                expected: n,
                missing,
            });
        }
        let mut buses = buses;
        buses.sort_by_key(|b| b.id);

        for l in &lines {
            let unknown = if l.from >= n {
                Some(l.from)
            } else if l.to >= n {
                Some(l.to)
            } else {
                None
            };
            if let Some(unknown) = unknown {
                return Err(FeederError::UnknownLineEndpoint {
                    from: l.from,
                    to: l.to,
                    unknown,
                });
            }
            if l.r <= 0.0 || l.x <= 0.0 {
                return Err(FeederError::NonPositiveImpedance {
                    from: l.from,
                    to: l.to,
                    r: l.r,
                    x: l.x,
                });
            }
        }
        if lines.len() != n.saturating_sub(1) {
            return Err(FeederError::NotATree(format!(
                "{} buses need {} lines, got {}",
                n,
                n.saturating_sub(1),
                lines.len()
            )));
        }

        // Orient every line away from the root with a BFS from bus 0.
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (idx, l) in lines.iter().enumerate() {
            adjacency[l.from].push((l.to, idx));
            adjacency[l.to].push((l.from, idx));
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = std::collections::VecDeque::new();
        visited[0] = true;
        queue.push_back(0usize);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let mut neighbors = adjacency[i].clone();
            neighbors.sort_unstable();
            for (j, line_idx) in neighbors {
                if visited[j] {
                    if parent[i].map(|(p, _)| p) != Some(j) {
                        return Err(FeederError::NotATree(format!(
                            "line ({},{}) closes a cycle",
                            lines[line_idx].from, lines[line_idx].to
                        )));
                    }
                    continue;
                }
                visited[j] = true;
                parent[j] = Some((i, line_idx));
                queue.push_back(j);
            }
        }
        if let Some(unreached) = visited.iter().position(|v| !v) {
            return Err(FeederError::NotATree(format!(
                "bus {unreached} is not connected to the feeder head"
            )));
        }

        // Store lines oriented from parent to child.
        let mut lines = lines;
        for (j, p) in parent.iter().enumerate() {
            if let Some((i, idx)) = p {
                if lines[*idx].from == j {
                    let line = &mut lines[*idx];
                    std::mem::swap(&mut line.from, &mut line.to);
                }
                debug_assert_eq!(lines[*idx].from, *i);
                debug_assert_eq!(lines[*idx].to, j);
            }
        }
        let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (j, p) in parent.iter().enumerate() {
            if let Some((i, idx)) = p {
                children[*i].push((j, *idx));
            }
        }
        for c in &mut children {
            c.sort_unstable();
        }
        // BFS order visits parents before children; reversing it yields a
        // valid leaf-to-root sweep order.
        let depth_order: Vec<usize> = order.into_iter().rev().collect();

        Ok(Feeder {
            buses,
            lines,
            v0,
            v_lower,
            v_upper,
            base_kv,
            base_mva,
            parent,
            children,
            depth_order,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeederError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FeederError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, FeederError> {
        let file: FeederFile = toml::from_str(text)?;
        let buses = file
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                controllable: b.controllable,
                q_min: b.q_min,
                q_max: b.q_max,
            })
            .collect();
        let lines = file
            .lines
            .into_iter()
            .map(|l| Line {
                from: l.from,
                to: l.to,
                r: l.r,
                x: l.x,
            })
            .collect();
        Self::new(
            buses,
            lines,
            file.limits.v0,
            file.limits.v_lower,
            file.limits.v_upper,
            file.bases.base_kv,
            file.bases.base_mva,
        )
    }

    /// Serializes back to the on-disk schema. Reloading the output yields an
    /// identical feeder.
    pub fn to_toml_string(&self) -> String {
        let file = FeederFile {
            limits: LimitsSection {
                v0: self.v0,
                v_lower: self.v_lower,
                v_upper: self.v_upper,
            },
            bases: BasesSection {
                base_kv: self.base_kv,
                base_mva: self.base_mva,
            },
            buses: self
                .buses
                .iter()
                .map(|b| BusRow {
                    id: b.id,
                    controllable: b.controllable,
                    q_min: b.q_min,
                    q_max: b.q_max,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRow {
                    from: l.from,
                    to: l.to,
                    r: l.r,
                    x: l.x,
                })
                .collect(),
        };
        toml::to_string(&file).expect("feeder serialization cannot fail")
    }

    /// Stable digest of the electrical structure, used to tie checkpoints to
    /// the feeder they were trained on.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut canonical = String::new();
        let _ = write!(
            canonical,
            "v0={:.12e};vl={:.12e};vu={:.12e};kv={:.12e};mva={:.12e};",
            self.v0, self.v_lower, self.v_upper, self.base_kv, self.base_mva
        );
        for b in &self.buses {
            let _ = write!(
                canonical,
                "b{}:{}:{:.12e}:{:.12e};",
                b.id, b.controllable, b.q_min, b.q_max
            );
        }
        for l in &self.lines {
            let _ = write!(canonical, "l{}-{}:{:.12e}:{:.12e};", l.from, l.to, l.r, l.x);
        }
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    /// Total bus count including the feeder head.
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Number of non-root buses (the dimension of injection vectors).
    pub fn injection_count(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    /// Lines oriented from parent to child.
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Ids of controllable buses, ascending.
    pub fn controllable_buses(&self) -> Vec<usize> {
        self.buses
            .iter()
            .filter(|b| b.controllable)
            .map(|b| b.id)
            .collect()
    }

    /// Per-controllable-bus (q_min, q_max) boxes, in `controllable_buses` order.
    pub fn q_boxes(&self) -> Vec<(f64, f64)> {
        self.buses
            .iter()
            .filter(|b| b.controllable)
            .map(|b| (b.q_min, b.q_max))
            .collect()
    }

    /// Parent bus of a non-root bus, `None` for the root.
    pub fn parent_of(&self, j: usize) -> Option<usize> {
        self.parent.get(j).copied().flatten().map(|(p, _)| p)
    }

    /// (child bus, line index) pairs below `i`, ascending by child id.
    pub fn children_of(&self, i: usize) -> &[(usize, usize)] {
        &self.children[i]
    }

    /// Index into `lines()` of the line feeding non-root bus `j`.
    pub fn line_into(&self, j: usize) -> Option<usize> {
        self.parent.get(j).copied().flatten().map(|(_, idx)| idx)
    }

    /// Bus order in which every bus appears after its whole subtree
    /// (leaf-to-root).
    pub fn backward_order(&self) -> &[usize] {
        &self.depth_order
    }

    /// All buses whose path to the root passes through `j`, including `j`.
    pub fn subtree_buses(&self, j: usize) -> Result<BTreeSet<usize>, FeederError> {
        if j >= self.buses.len() {
            return Err(FeederError::UnknownBus(j));
        }
        let mut set = BTreeSet::new();
        let mut stack = vec![j];
        while let Some(i) = stack.pop() {
            set.insert(i);
            for (c, _) in &self.children[i] {
                stack.push(*c);
            }
        }
        Ok(set)
    }

    /// Lines along the path from bus 0 down to `j`, in root-to-`j` order.
    /// Empty for the root itself.
    pub fn path_to_root(&self, j: usize) -> Result<Vec<&Line>, FeederError> {
        if j >= self.buses.len() {
            return Err(FeederError::UnknownBus(j));
        }
        let mut rev = Vec::new();
        let mut cur = j;
        while let Some((p, idx)) = self.parent[cur] {
            rev.push(&self.lines[idx]);
            cur = p;
        }
        rev.reverse();
        Ok(rev)
    }
}

/// Ready-made feeders for tests and toy experiments.
pub mod fixtures {
    use super::{Bus, Feeder, Line};

    /// The 13-bus benchmark fixture shipped with the crate, loaded from the
    /// embedded description file.
    pub fn ieee13() -> Feeder {
        Feeder::from_toml_str(include_str!("../fixtures/ieee13.toml"))
            .expect("embedded 13-bus fixture must be valid")
    }

    /// Chain 0-1-...-n with uniform impedance; every non-root bus
    /// controllable with a +/-0.1 pu box.
    pub fn chain(n_non_root: usize, r: f64, x: f64) -> Feeder {
        let buses = (0..=n_non_root)
            .map(|id| Bus {
                id,
                controllable: id != 0,
                q_min: -0.1,
                q_max: 0.1,
            })
            .collect();
        let lines = (0..n_non_root)
            .map(|i| Line {
                from: i,
                to: i + 1,
                r,
                x,
            })
            .collect();
        Feeder::new(buses, lines, 1.0, 0.9025, 1.1025, 12.0, 1.0).unwrap()
    }

    /// Root with `k` leaves, all lines identical; leaves controllable.
    pub fn star(k: usize, r: f64, x: f64) -> Feeder {
        let buses = (0..=k)
            .map(|id| Bus {
                id,
                controllable: id != 0,
                q_min: -0.1,
                q_max: 0.1,
            })
            .collect();
        let lines = (1..=k)
            .map(|to| Line { from: 0, to, r, x })
            .collect();
        Feeder::new(buses, lines, 1.0, 0.9025, 1.1025, 12.0, 1.0).unwrap()
    }

    /// Two buses joined by one line: the smallest feeder with any physics.
    pub fn two_bus(r: f64, x: f64) -> Feeder {
        Feeder::new(
            vec![
                Bus {
                    id: 0,
                    controllable: false,
                    q_min: 0.0,
                    q_max: 0.0,
                },
                Bus {
                    id: 1,
                    controllable: true,
                    q_min: -1.0,
                    q_max: 1.0,
                },
            ],
            vec![Line { from: 0, to: 1, r, x }],
            1.0,
            0.9025,
            1.1025,
            12.0,
            1.0,
        )
        .unwrap()
    }
}
