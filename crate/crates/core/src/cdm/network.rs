//! Pipe networks: directed acyclic graphs draining to terminal nodes, where
//! every pipe is a first-order lag with a pure transport delay.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::terrain::Terrain;
use super::FirstOrderLag;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Position in cell units.
    pub x: f64,
    pub y: f64,
    pub elevation: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipe {
    pub from: usize,
    pub to: usize,
    pub length: f64,
    /// Radians, non-negative for downhill pipes.
    pub inclination: f64,
    pub gain: f64,
    /// Lag time constant in steps; zero means pure delay.
    pub tau: f64,
    pub delay: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipeParams {
    /// Delay steps per unit length for a level pipe.
    pub delay_per_length: f64,
    /// Lag time constant (steps) per unit length for a level pipe.
    pub tau_per_length: f64,
    pub gain: f64,
}

impl Default for PipeParams {
    fn default() -> Self {
        Self {
            delay_per_length: 0.4,
            tau_per_length: 0.4,
            gain: 1.0,
        }
    }
}

impl PipeParams {
    /// `round(c · length / (1 + tan(inclination)))`: longer pipes are slower,
    /// steeper ones faster.
    pub fn delay(&self, length: f64, inclination: f64) -> usize {
        (self.delay_per_length * length / (1.0 + inclination.tan())).round() as usize
    }

    pub fn tau(&self, length: f64, inclination: f64) -> f64 {
        self.tau_per_length * length / (1.0 + inclination.tan())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub nodes: usize,
    pub terminals: usize,
    /// Probability that a node also drains into its second-nearest lower node.
    pub split_probability: f64,
    /// Number of nearest lower candidates considered per node.
    pub candidates: usize,
    pub pipes: PipeParams,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            nodes: 500,
            terminals: 5,
            split_probability: 0.15,
            candidates: 2,
            pipes: PipeParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipeNetwork {
    pub nodes: Vec<Node>,
    pub pipes: Vec<Pipe>,
    order: Vec<usize>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
}

/// Flows produced by [`PipeNetwork::propagate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// Per node: local inflow plus everything arriving through pipes.
    pub node_flows: Vec<Vec<f64>>,
    /// Water still inside pipes (delay lines and lag storage) at the end.
    pub in_flight: f64,
}

impl Propagation {
    /// Total water absorbed by terminal nodes over the run.
    pub fn absorbed(&self, net: &PipeNetwork) -> f64 {
        net.terminals().map(|t| self.node_flows[t].iter().sum::<f64>()).sum()
    }
}

impl PipeNetwork {
    /// Validates acyclicity, terminal sinks and drainage of every node.
    pub fn new(nodes: Vec<Node>, pipes: Vec<Pipe>) -> Result<Self> {
        let n = nodes.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (k, p) in pipes.iter().enumerate() {
            if p.from >= n || p.to >= n || p.from == p.to {
                return Err(Error::Network(format!(
                    "pipe {k} joins invalid nodes {} → {}",
                    p.from, p.to
                )));
            }
            if !(p.tau >= 0.0 && p.tau.is_finite() && p.gain.is_finite()) {
                return Err(Error::Network(format!("pipe {k} has invalid gain or time constant")));
            }
            if nodes[p.from].terminal {
                return Err(Error::Network(format!("terminal node {} has an outgoing pipe", p.from)));
            }
            outgoing[p.from].push(k);
            incoming[p.to].push(k);
        }
        // Kahn's algorithm
        let mut indegree: Vec<usize> = incoming.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &k in &outgoing[i] {
                let j = pipes[k].to;
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).expect("some node on a cycle");
            return Err(Error::Network(format!("cycle detected through node {stuck}")));
        }
        // every node must reach a terminal
        let mut drains = vec![false; n];
        for &i in order.iter().rev() {
            drains[i] = nodes[i].terminal || outgoing[i].iter().any(|&k| drains[pipes[k].to]);
        }
        if let Some(i) = drains.iter().position(|d| !d) {
            return Err(Error::Network(format!("node {i} has no path to a terminal")));
        }
        Ok(Self {
            nodes,
            pipes,
            order,
            incoming,
            outgoing,
        })
    }

    /// Random downhill network over `terrain`: the lowest nodes are
    /// terminals; every other node drains to its nearest lower node, and
    /// sometimes also to the next-nearest.
    pub fn random(terrain: &Terrain, spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.nodes < 2 || spec.terminals == 0 || spec.terminals >= spec.nodes {
            return Err(Error::Config(format!(
                "network needs 1 ≤ terminals ({}) < nodes ({})",
                spec.terminals, spec.nodes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes: Vec<Node> = (0..spec.nodes)
            .map(|_| {
                let x = rng.random_range(0.0..terrain.nx as f64);
                let y = rng.random_range(0.0..terrain.ny as f64);
                let elevation = terrain.elevation[terrain.cell_at(x, y)] + rng.random_range(0.0..1e-3);
                Node {
                    x,
                    y,
                    elevation,
                    terminal: false,
                }
            })
            .collect();
        let mut by_height: Vec<usize> = (0..nodes.len()).collect();
        by_height.sort_by(|&a, &b| nodes[a].elevation.total_cmp(&nodes[b].elevation).then(a.cmp(&b)));
        for &i in &by_height[..spec.terminals] {
            nodes[i].terminal = true;
        }
        let mut rank = vec![0; nodes.len()];
        for (r, &i) in by_height.iter().enumerate() {
            rank[i] = r;
        }
        let mut pipes = Vec::new();
        for i in 0..nodes.len() {
            if nodes[i].terminal {
                continue;
            }
            let dist = |j: usize| ((nodes[i].x - nodes[j].x).powi(2) + (nodes[i].y - nodes[j].y).powi(2)).sqrt();
            let mut lower: Vec<(f64, usize)> = by_height[..rank[i]].iter().map(|&j| (dist(j), j)).collect();
            lower.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let fanout = if lower.len() > 1 && rng.random::<f64>() < spec.split_probability {
                2.min(spec.candidates.max(1))
            } else {
                1
            };
            for &(d, j) in lower.iter().take(fanout) {
                let length = (d * terrain.cell_size).max(terrain.cell_size * 0.1);
                let drop = (nodes[i].elevation - nodes[j].elevation).max(0.0);
                let inclination = (drop / length).atan();
                pipes.push(Pipe {
                    from: i,
                    to: j,
                    length,
                    inclination,
                    gain: spec.pipes.gain,
                    tau: spec.pipes.tau(length, inclination),
                    delay: spec.pipes.delay(length, inclination),
                });
            }
        }
        PipeNetwork::new(nodes, pipes)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.terminal)
            .map(|(i, _)| i)
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    /// Routes per-node local inflow series through the network. A node's
    /// outflow is split equally among its outgoing pipes; terminals absorb.
    pub fn propagate(&self, inflows: &[Vec<f64>]) -> Result<Propagation> {
        if inflows.len() != self.nodes.len() {
            return Err(Error::Dimension {
                op: "PipeNetwork::propagate",
                lhs: vec![self.nodes.len()],
                rhs: vec![inflows.len()],
            });
        }
        let steps = inflows.first().map_or(0, Vec::len);
        if let Some(bad) = inflows.iter().find(|s| s.len() != steps) {
            return Err(Error::Dimension {
                op: "PipeNetwork::propagate",
                lhs: vec![steps],
                rhs: vec![bad.len()],
            });
        }
        let mut pipe_out: Vec<Vec<f64>> = vec![Vec::new(); self.pipes.len()];
        let mut node_flows: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let mut in_flight = 0.0;
        for &i in &self.order {
            let mut flow = inflows[i].clone();
            for &k in &self.incoming[i] {
                for (f, v) in flow.iter_mut().zip(&pipe_out[k]) {
                    *f += v;
                }
            }
            let share = 1.0 / self.outgoing[i].len().max(1) as f64;
            for &k in &self.outgoing[i] {
                let p = &self.pipes[k];
                let mut lag = FirstOrderLag::new(p.tau, p.gain)?;
                let d = p.delay;
                let out: Vec<f64> = (0..steps)
                    .map(|t| lag.step(if t >= d { flow[t - d] * share } else { 0.0 }))
                    .collect();
                let queued: f64 = flow[steps.saturating_sub(d)..].iter().map(|v| v * share).sum();
                in_flight += p.gain * queued + lag.storage();
                pipe_out[k] = out;
            }
            node_flows[i] = flow;
        }
        Ok(Propagation { node_flows, in_flight })
    }
}
