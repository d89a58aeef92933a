//! Lag-annotated causal graphs.
//!
//! A [`CausalGraph`] holds an ordered list of variables and directed edges
//! `source -> target` annotated with a time lag. Lag-0 edges are
//! contemporaneous and must form a DAG; lag-1 edges connect consecutive time
//! steps and may form arbitrary cycles across time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest lag the simulator and decoder can wire.
pub const MAX_SUPPORTED_LAG: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(String, String, usize)", into = "(String, String, usize)")]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub lag: usize,
}

impl Edge {
    pub fn new(source: impl Into<String>, target: impl Into<String>, lag: usize) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            lag,
        }
    }
}

impl From<(String, String, usize)> for Edge {
    fn from((source, target, lag): (String, String, usize)) -> Self {
        Self { source, target, lag }
    }
}

impl From<Edge> for (String, String, usize) {
    fn from(e: Edge) -> Self {
        (e.source, e.target, e.lag)
    }
}

/// First violated invariant reported by [`CausalGraph::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyName,
    DuplicateVariable(String),
    DuplicateEdge(Edge),
    UnknownEndpoint(Edge),
    /// Variables participating in a lag-0 cycle.
    Lag0Cycle(Vec<String>),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyName => write!(f, "empty variable name"),
            Violation::DuplicateVariable(v) => write!(f, "duplicate variable `{v}`"),
            Violation::DuplicateEdge(e) => {
                write!(f, "duplicate edge {} -> {} (lag {})", e.source, e.target, e.lag)
            }
            Violation::UnknownEndpoint(e) => write!(
                f,
                "edge {} -> {} (lag {}) names an undeclared variable",
                e.source, e.target, e.lag
            ),
            Violation::Lag0Cycle(vs) => write!(f, "lag-0 cycle among {}", vs.join(", ")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalGraph {
    pub variables: Vec<String>,
    pub edges: Vec<Edge>,
}

impl CausalGraph {
    /// Builds a graph and validates it.
    pub fn new(variables: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        let g = Self { variables, edges };
        g.validate().map_err(|v| Error::InvalidGraph(v.to_string()))?;
        Ok(g)
    }

    /// The two-variable graph `X(t-1) -> X(t)`, `Y(t-1) -> Y(t)`, `X(t-1) -> Y(t)`.
    pub fn market_pair() -> Self {
        Self {
            variables: vec!["X".into(), "Y".into()],
            edges: vec![
                Edge::new("X", "X", 1),
                Edge::new("Y", "Y", 1),
                Edge::new("X", "Y", 1),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        for (i, v) in self.variables.iter().enumerate() {
            if v.is_empty() {
                return Err(Violation::EmptyName);
            }
            if self.variables[..i].contains(v) {
                return Err(Violation::DuplicateVariable(v.clone()));
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            if !self.variables.contains(&e.source) || !self.variables.contains(&e.target) {
                return Err(Violation::UnknownEndpoint(e.clone()));
            }
            if self.edges[..i].contains(e) {
                return Err(Violation::DuplicateEdge(e.clone()));
            }
        }
        match self.kahn_order() {
            Ok(_) => Ok(()),
            Err(stuck) => Err(Violation::Lag0Cycle(stuck)),
        }
    }

    /// Rejects lags the simulator and decoder cannot wire.
    pub fn check_supported_lags(&self) -> Result<()> {
        match self.edges.iter().find(|e| e.lag > MAX_SUPPORTED_LAG) {
            Some(e) => Err(Error::UnsupportedLag {
                source_var: e.source.clone(),
                target: e.target.clone(),
                lag: e.lag,
            }),
            None => Ok(()),
        }
    }

    // Kahn's algorithm over lag-0 edges, always picking the earliest declared
    // ready variable. On failure returns the variables left on a cycle.
    fn kahn_order(&self) -> std::result::Result<Vec<usize>, Vec<String>> {
        let n = self.variables.len();
        let idx = |name: &str| self.variables.iter().position(|v| v == name);
        let mut indegree = vec![0usize; n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in self.edges.iter().filter(|e| e.lag == 0) {
            let (Some(s), Some(t)) = (idx(&e.source), idx(&e.target)) else {
                continue;
            };
            indegree[t] += 1;
            children[s].push(t);
        }
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let Some(next) = (0..n).find(|&i| !done[i] && indegree[i] == 0) else {
                let stuck = (0..n)
                    .filter(|&i| !done[i])
                    .map(|i| self.variables[i].clone())
                    .collect();
                return Err(stuck);
            };
            done[next] = true;
            order.push(next);
            for &c in &children[next] {
                indegree[c] -= 1;
            }
        }
        Ok(order)
    }

    /// Variable indices in an order where every lag-0 parent precedes its
    /// child; ties are broken by declaration order.
    pub fn topological_indices(&self) -> Result<Vec<usize>> {
        self.validate()
            .map_err(|v| Error::InvalidGraph(v.to_string()))?;
        self.kahn_order()
            .map_err(|stuck| Error::InvalidGraph(format!("lag-0 cycle among {}", stuck.join(", "))))
    }

    pub fn topological_order(&self) -> Result<Vec<String>> {
        Ok(self
            .topological_indices()?
            .into_iter()
            .map(|i| self.variables[i].clone())
            .collect())
    }

    /// All `(parent, lag)` pairs feeding `variable`, sorted by the parent's
    /// declaration index and then by lag.
    pub fn parents(&self, variable: &str) -> Result<Vec<(String, usize)>> {
        let target = self.index_of(variable)?;
        Ok(self
            .parent_indices(target)
            .into_iter()
            .map(|(p, lag)| (self.variables[p].clone(), lag))
            .collect())
    }

    /// Index form of [`CausalGraph::parents`].
    pub fn parent_indices(&self, target: usize) -> Vec<(usize, usize)> {
        let name = &self.variables[target];
        let mut out: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|e| &e.target == name)
            .filter_map(|e| {
                self.variables
                    .iter()
                    .position(|v| *v == e.source)
                    .map(|p| (p, e.lag))
            })
            .collect();
        out.sort_by_key(|&(p, lag)| (p, lag));
        out
    }

    /// Whether a directed path (over edges of any lag) leads from `from` to `to`.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        let n = self.variables.len();
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            for c in 0..n {
                if !seen[c] && self.parent_indices(c).iter().any(|&(p, _)| p == v) {
                    stack.push(c);
                }
            }
        }
        false
    }
}
