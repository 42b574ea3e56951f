//! Finite filtered scenario trees.
//!
//! A [`ScenarioTree`] is a finite filtered probability space: per-time nodes
//! with parent links, strictly positive traded-stock values, an untraded
//! insurance value per node, and a strictly positive physical measure on the
//! leaves.  Information structures are [`Partition`]s of the leaf set;
//! densities, conditional expectations and the risk-neutral measure on the
//! financial sub-filtration are all computed in exact rational arithmetic.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Deserialize;

use crate::error::{EvalError, Result};
use crate::numeric::{parse_rational, scalar_eq, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub struct Node {
    pub time: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub stock: Vec<BigRational>,
    pub insurance: BigRational,
    pub name: String,
}

/// Finite filtered probability space carrying traded stocks and an untraded
/// insurance value.
#[derive(Clone, Debug)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    roots: Vec<NodeId>,
    leaves: Vec<NodeId>,
    /// Physical probability per leaf, strictly positive, summing to one.
    leaf_prob: Vec<BigRational>,
    /// Node path (time 0 ..= horizon) for every leaf.
    paths: Vec<Vec<NodeId>>,
    horizon: usize,
    n_stocks: usize,
    bond_rate: BigRational,
    reveal_times: BTreeSet<usize>,
}

/// Selector for the partitions generated by the observable processes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ObservableSpec {
    /// The single-block partition.
    Trivial,
    /// Initial information: leaves grouped by their time-0 ancestor.
    Initial,
    /// Stock path up to `to`, joined with the initial information.
    StockPath { to: usize },
    /// Full (stock and insurance) path up to `to`.
    FullPath { to: usize },
    /// Stock path up to `stock_to` joined with the full path up to `full_to`.
    StockUntilGivenFull { stock_to: usize, full_to: usize },
}

/// A partition of the leaf set, standing in for a sigma-algebra.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    leaf_to_block: Vec<usize>,
}

impl Partition {
    /// Builds a partition from per-leaf group keys.  Blocks are ordered by
    /// their smallest leaf, leaves ascending within a block.
    pub fn from_keys<K: std::hash::Hash + Eq>(keys: Vec<K>) -> Partition {
        let n = keys.len();
        let mut index: HashMap<K, usize> = HashMap::new();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut leaf_to_block = vec![0usize; n];
        for (leaf, key) in keys.into_iter().enumerate() {
            let block = *index.entry(key).or_insert_with(|| {
                blocks.push(Vec::new());
                blocks.len() - 1
            });
            blocks[block].push(leaf);
            leaf_to_block[leaf] = block;
        }
        Partition { blocks, leaf_to_block }
    }

    pub fn trivial(n_leaves: usize) -> Partition {
        Partition::from_keys(vec![0u8; n_leaves])
    }

    pub fn discrete(n_leaves: usize) -> Partition {
        Partition::from_keys((0..n_leaves).collect::<Vec<_>>())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_to_block.len()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, leaf: usize) -> usize {
        self.leaf_to_block[leaf]
    }

    /// True when every block of `self` lies inside one block of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.n_leaves() != coarser.n_leaves() {
            return false;
        }
        self.blocks.iter().all(|block| {
            let target = coarser.leaf_to_block[block[0]];
            block.iter().all(|&l| coarser.leaf_to_block[l] == target)
        })
    }

    /// Common refinement of two partitions.
    pub fn join(&self, other: &Partition) -> Partition {
        assert_eq!(self.n_leaves(), other.n_leaves());
        let keys: Vec<(usize, usize)> = (0..self.n_leaves())
            .map(|l| (self.leaf_to_block[l], other.leaf_to_block[l]))
            .collect();
        Partition::from_keys(keys)
    }

    /// True when `leaves` (given as a membership mask) is a union of blocks.
    pub fn is_block_union(&self, mask: &[bool]) -> bool {
        if mask.len() != self.n_leaves() {
            return false;
        }
        self.blocks
            .iter()
            .all(|block| block.iter().all(|&l| mask[l]) || block.iter().all(|&l| !mask[l]))
    }

    /// Membership mask of a union of the given block indices.
    pub fn union_mask(&self, block_ids: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.n_leaves()];
        for &b in block_ids {
            for &l in &self.blocks[b] {
                mask[l] = true;
            }
        }
        mask
    }
}

/// A payoff: the discounted net loss per leaf scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Payoff {
    pub values: Vec<Scalar>,
}

impl Payoff {
    pub fn new(values: Vec<Scalar>) -> Payoff {
        Payoff { values }
    }

    pub fn zero(n: usize) -> Payoff {
        Payoff { values: vec![Scalar::zero(); n] }
    }

    pub fn constant(n: usize, v: Scalar) -> Payoff {
        Payoff { values: vec![v; n] }
    }

    pub fn from_ints(vals: &[i64]) -> Payoff {
        Payoff { values: vals.iter().map(|&v| Scalar::from_int(v)).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&self, other: &Payoff) -> Payoff {
        assert_eq!(self.len(), other.len());
        Payoff {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Payoff) -> Payoff {
        assert_eq!(self.len(), other.len());
        Payoff {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: &Scalar) -> Payoff {
        Payoff { values: self.values.iter().map(|v| v * s).collect() }
    }

    /// Pointwise product with the indicator of `mask`.
    pub fn restrict(&self, mask: &[bool]) -> Payoff {
        assert_eq!(self.len(), mask.len());
        Payoff {
            values: self
                .values
                .iter()
                .zip(mask)
                .map(|(v, &m)| if m { v.clone() } else { Scalar::zero() })
                .collect(),
        }
    }
}

/// A value measurable with respect to a partition: one scalar per block.
#[derive(Clone, Debug)]
pub struct ConditionalValue {
    pub partition: Arc<Partition>,
    pub values: Vec<Scalar>,
}

impl ConditionalValue {
    pub fn new(partition: Arc<Partition>, values: Vec<Scalar>) -> ConditionalValue {
        assert_eq!(partition.n_blocks(), values.len());
        ConditionalValue { partition, values }
    }

    /// Broadcasts the per-block values back to a leaf-indexed payoff.
    pub fn as_payoff(&self) -> Payoff {
        let values = (0..self.partition.n_leaves())
            .map(|l| self.values[self.partition.block_of(l)].clone())
            .collect();
        Payoff { values }
    }

    /// Blockwise equality in the appropriate numeric mode.
    pub fn matches(&self, other: &ConditionalValue) -> bool {
        self.partition.blocks() == other.partition.blocks()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| scalar_eq(a, b))
    }
}

/// A density relative to the physical measure, normalized to conditional
/// expectation one on every block of its base partition.
#[derive(Clone, Debug)]
pub struct Density {
    pub weights: Vec<Scalar>,
    pub base: Arc<Partition>,
    pub nonneg: bool,
}

impl Density {
    /// Validates the conditional-expectation-one constraint per base block.
    pub fn new(tree: &ScenarioTree, base: Arc<Partition>, weights: Vec<Scalar>) -> Result<Density> {
        if weights.len() != tree.n_leaves() {
            return Err(EvalError::PartitionMismatch(
                "density weight count differs from leaf count".into(),
            ));
        }
        for (b, block) in base.blocks().iter().enumerate() {
            let mut acc = Scalar::zero();
            let mut mass = Scalar::zero();
            for &l in block {
                let p = Scalar::from_rational(tree.leaf_prob[l].clone());
                acc = acc + &p * &weights[l];
                mass = mass + p;
            }
            if !scalar_eq(&acc, &mass) {
                return Err(EvalError::InvalidConfig(format!(
                    "density has conditional expectation {} != 1 on block {}",
                    &acc / &mass,
                    b
                )));
            }
        }
        let nonneg = weights.iter().all(|w| !w.is_negative());
        Ok(Density { weights, base, nonneg })
    }

    /// The unit density (the physical measure itself).
    pub fn unit(tree: &ScenarioTree, base: Arc<Partition>) -> Density {
        Density {
            weights: vec![Scalar::one(); tree.n_leaves()],
            base,
            nonneg: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Programmatic tree construction; the file-based [`TreeConfig`] funnels into
/// this as well.
pub struct TreeBuilder {
    n_stocks: usize,
    entries: Vec<BuilderNode>,
    bond_rate: BigRational,
    reveal_times: BTreeSet<usize>,
}

struct BuilderNode {
    parent: Option<usize>,
    stock: Vec<BigRational>,
    insurance: BigRational,
    prob: Option<BigRational>,
    name: String,
}

impl TreeBuilder {
    pub fn new(n_stocks: usize) -> TreeBuilder {
        TreeBuilder {
            n_stocks,
            entries: Vec::new(),
            bond_rate: BigRational::zero(),
            reveal_times: BTreeSet::new(),
        }
    }

    pub fn bond_rate(mut self, r: BigRational) -> TreeBuilder {
        self.bond_rate = r;
        self
    }

    pub fn reveal_times<I: IntoIterator<Item = usize>>(mut self, times: I) -> TreeBuilder {
        self.reveal_times = times.into_iter().collect();
        self
    }

    pub fn root(&mut self, stock: Vec<BigRational>, insurance: BigRational) -> usize {
        self.push(None, stock, insurance)
    }

    pub fn child(&mut self, parent: usize, stock: Vec<BigRational>, insurance: BigRational) -> usize {
        self.push(Some(parent), stock, insurance)
    }

    pub fn named(&mut self, node: usize, name: &str) {
        self.entries[node].name = name.to_string();
    }

    pub fn prob(&mut self, node: usize, p: BigRational) {
        self.entries[node].prob = Some(p);
    }

    fn push(&mut self, parent: Option<usize>, stock: Vec<BigRational>, insurance: BigRational) -> usize {
        let id = self.entries.len();
        self.entries.push(BuilderNode {
            parent,
            stock,
            insurance,
            prob: None,
            name: format!("n{}", id),
        });
        id
    }

    pub fn build(self) -> Result<ScenarioTree> {
        let mut nodes: Vec<Node> = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let time = match e.parent {
                None => 0,
                Some(p) => {
                    if p >= i {
                        return Err(EvalError::InvalidConfig(format!(
                            "node {} declared before its parent",
                            e.name
                        )));
                    }
                    nodes[p].time + 1
                }
            };
            nodes.push(Node {
                time,
                parent: e.parent.map(NodeId),
                children: Vec::new(),
                stock: e.stock.clone(),
                insurance: e.insurance.clone(),
                name: e.name.clone(),
            });
        }
        for i in 0..nodes.len() {
            if let Some(NodeId(p)) = nodes[i].parent {
                nodes[p].children.push(NodeId(i));
            }
        }
        let horizon = nodes.iter().map(|n| n.time).max().unwrap_or(0);
        let roots: Vec<NodeId> = (0..nodes.len())
            .filter(|&i| nodes[i].parent.is_none())
            .map(NodeId)
            .collect();
        if roots.is_empty() {
            return Err(EvalError::InvalidConfig("tree has no root".into()));
        }
        let leaves: Vec<NodeId> = (0..nodes.len())
            .filter(|&i| nodes[i].children.is_empty())
            .map(NodeId)
            .collect();
        let mut leaf_prob = Vec::with_capacity(leaves.len());
        for &NodeId(l) in &leaves {
            if nodes[l].time != horizon {
                return Err(EvalError::InvalidConfig(format!(
                    "node {} has no children but sits at time {} < horizon {}",
                    nodes[l].name, nodes[l].time, horizon
                )));
            }
            match &self.entries[l].prob {
                Some(p) if p.is_positive() => leaf_prob.push(p.clone()),
                Some(_) => {
                    return Err(EvalError::InvalidConfig(format!(
                        "leaf {} has non-positive probability",
                        nodes[l].name
                    )))
                }
                None => {
                    return Err(EvalError::InvalidConfig(format!(
                        "leaf {} is missing a probability",
                        nodes[l].name
                    )))
                }
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            if !nodes[i].children.is_empty() && e.prob.is_some() {
                return Err(EvalError::InvalidConfig(format!(
                    "internal node {} carries a probability",
                    nodes[i].name
                )));
            }
        }
        let total: BigRational = leaf_prob.iter().cloned().sum();
        if !total.is_one() {
            return Err(EvalError::InvalidConfig(format!(
                "leaf probabilities sum to {}, expected 1",
                total
            )));
        }
        for n in &nodes {
            if n.stock.len() != self.n_stocks {
                return Err(EvalError::InvalidConfig(format!(
                    "node {} has {} stock coordinates, expected {}",
                    n.name,
                    n.stock.len(),
                    self.n_stocks
                )));
            }
            if n.stock.iter().any(|s| !s.is_positive()) {
                return Err(EvalError::InvalidConfig(format!(
                    "node {} has a non-positive stock value",
                    n.name
                )));
            }
        }
        for t in &self.reveal_times {
            if *t == 0 || *t > horizon {
                return Err(EvalError::InvalidConfig(format!(
                    "reveal time {} outside 1..={}",
                    t, horizon
                )));
            }
        }
        // Insurance may only change across an edge that enters a reveal time.
        for (i, n) in nodes.iter().enumerate() {
            if let Some(NodeId(p)) = n.parent {
                if n.insurance != nodes[p].insurance && !self.reveal_times.contains(&n.time) {
                    return Err(EvalError::InvalidConfig(format!(
                        "insurance changes on the edge into node {} at non-reveal time {}",
                        nodes[i].name, n.time
                    )));
                }
            }
        }
        // Sibling branches must be distinguishable by their observables.
        for n in &nodes {
            for a in 0..n.children.len() {
                for b in (a + 1)..n.children.len() {
                    let (ca, cb) = (&nodes[n.children[a].0], &nodes[n.children[b].0]);
                    if ca.stock == cb.stock && ca.insurance == cb.insurance {
                        return Err(EvalError::InvalidConfig(format!(
                            "children {} and {} of {} carry identical observables",
                            ca.name, cb.name, n.name
                        )));
                    }
                }
            }
        }
        let paths = leaves
            .iter()
            .map(|&NodeId(l)| {
                let mut path = Vec::with_capacity(horizon + 1);
                let mut cur = l;
                loop {
                    path.push(NodeId(cur));
                    match nodes[cur].parent {
                        Some(NodeId(p)) => cur = p,
                        None => break,
                    }
                }
                path.reverse();
                path
            })
            .collect();
        Ok(ScenarioTree {
            nodes,
            roots,
            leaves,
            leaf_prob,
            paths,
            horizon,
            n_stocks: self.n_stocks,
            bond_rate: self.bond_rate,
            reveal_times: self.reveal_times,
        })
    }
}

// ---------------------------------------------------------------------------
// File configuration
// ---------------------------------------------------------------------------

/// Declarative tree description (TOML).  See the repository README for the
/// schema.
#[derive(Debug, Deserialize)]
pub struct TreeConfig {
    #[serde(default)]
    pub bond_rate: Option<String>,
    #[serde(default)]
    pub reveal_times: Vec<usize>,
    pub nodes: Vec<NodeConfig>,
}

#[derive(Debug, Deserialize)]
pub struct NodeConfig {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub stock: Vec<String>,
    pub insurance: String,
    #[serde(default)]
    pub prob: Option<String>,
}

/// Builds a validated tree from a declarative configuration.
pub fn build_tree(cfg: &TreeConfig) -> Result<ScenarioTree> {
    if cfg.nodes.is_empty() {
        return Err(EvalError::InvalidConfig("no nodes declared".into()));
    }
    let n_stocks = cfg.nodes[0].stock.len();
    let mut builder = TreeBuilder::new(n_stocks).reveal_times(cfg.reveal_times.iter().copied());
    if let Some(r) = &cfg.bond_rate {
        builder = builder.bond_rate(parse_rational(r).map_err(EvalError::InvalidConfig)?);
    }
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for nc in &cfg.nodes {
        if ids.contains_key(nc.id.as_str()) {
            return Err(EvalError::InvalidConfig(format!("duplicate node id `{}`", nc.id)));
        }
        let stock = nc
            .stock
            .iter()
            .map(|s| parse_rational(s).map_err(EvalError::InvalidConfig))
            .collect::<Result<Vec<_>>>()?;
        let insurance = parse_rational(&nc.insurance).map_err(EvalError::InvalidConfig)?;
        let idx = match &nc.parent {
            None => builder.root(stock, insurance),
            Some(p) => {
                let &parent = ids.get(p.as_str()).ok_or_else(|| {
                    EvalError::InvalidConfig(format!("node `{}` references unknown parent `{}`", nc.id, p))
                })?;
                builder.child(parent, stock, insurance)
            }
        };
        builder.named(idx, &nc.id);
        if let Some(p) = &nc.prob {
            builder.prob(idx, parse_rational(p).map_err(EvalError::InvalidConfig)?);
        }
        ids.insert(nc.id.as_str(), idx);
    }
    builder.build()
}

/// Parses a TOML tree description.
pub fn parse_tree_config(text: &str) -> Result<ScenarioTree> {
    let cfg: TreeConfig =
        toml::from_str(text).map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    build_tree(&cfg)
}

// ---------------------------------------------------------------------------
// Queries and measure algebra
// ---------------------------------------------------------------------------

impl ScenarioTree {
    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.n_stocks
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn bond_rate(&self) -> &BigRational {
        &self.bond_rate
    }

    pub fn reveal_times(&self) -> &BTreeSet<usize> {
        &self.reveal_times
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn leaf_node(&self, leaf: usize) -> &Node {
        &self.nodes[self.leaves[leaf].0]
    }

    pub fn leaf_name(&self, leaf: usize) -> &str {
        &self.leaf_node(leaf).name
    }

    pub fn leaf_prob(&self, leaf: usize) -> &BigRational {
        &self.leaf_prob[leaf]
    }

    /// Node on the path of `leaf` at the given time.
    pub fn path_node(&self, leaf: usize, time: usize) -> &Node {
        &self.nodes[self.paths[leaf][time].0]
    }

    pub fn path_node_id(&self, leaf: usize, time: usize) -> NodeId {
        self.paths[leaf][time]
    }

    /// Terminal stock value of coordinate `i` on a leaf.
    pub fn terminal_stock(&self, leaf: usize, i: usize) -> &BigRational {
        &self.leaf_node(leaf).stock[i]
    }

    pub fn terminal_insurance(&self, leaf: usize) -> &BigRational {
        &self.leaf_node(leaf).insurance
    }

    /// Probability mass of a set of leaves.
    pub fn mass(&self, leaves: &[usize]) -> BigRational {
        leaves.iter().map(|&l| self.leaf_prob[l].clone()).sum()
    }

    pub fn g_partition(&self) -> Partition {
        self.partition_for(&ObservableSpec::Initial).expect("initial partition")
    }

    /// Partition generated by the selected observables.
    pub fn partition_for(&self, spec: &ObservableSpec) -> Result<Partition> {
        let n = self.n_leaves();
        let check = |t: usize| -> Result<()> {
            if t > self.horizon {
                Err(EvalError::UnknownTime(t))
            } else {
                Ok(())
            }
        };
        match spec {
            ObservableSpec::Trivial => Ok(Partition::trivial(n)),
            ObservableSpec::Initial => {
                let keys: Vec<usize> = (0..n).map(|l| self.paths[l][0].0).collect();
                Ok(Partition::from_keys(keys))
            }
            ObservableSpec::StockPath { to } => {
                check(*to)?;
                let keys: Vec<_> = (0..n)
                    .map(|l| {
                        let mut key: Vec<Vec<BigRational>> = vec![];
                        for t in 0..=*to {
                            key.push(self.path_node(l, t).stock.clone());
                        }
                        (self.paths[l][0].0, key)
                    })
                    .collect();
                Ok(Partition::from_keys(keys))
            }
            ObservableSpec::FullPath { to } => {
                check(*to)?;
                let keys: Vec<_> = (0..n)
                    .map(|l| {
                        let mut key: Vec<(Vec<BigRational>, BigRational)> = vec![];
                        for t in 0..=*to {
                            let node = self.path_node(l, t);
                            key.push((node.stock.clone(), node.insurance.clone()));
                        }
                        (self.paths[l][0].0, key)
                    })
                    .collect();
                Ok(Partition::from_keys(keys))
            }
            ObservableSpec::StockUntilGivenFull { stock_to, full_to } => {
                check(*stock_to)?;
                check(*full_to)?;
                if full_to > stock_to {
                    return Err(EvalError::InvalidConfig(format!(
                        "full path horizon {} exceeds stock path horizon {}",
                        full_to, stock_to
                    )));
                }
                let keys: Vec<_> = (0..n)
                    .map(|l| {
                        let mut full: Vec<(Vec<BigRational>, BigRational)> = vec![];
                        for t in 0..=*full_to {
                            let node = self.path_node(l, t);
                            full.push((node.stock.clone(), node.insurance.clone()));
                        }
                        let mut stock: Vec<Vec<BigRational>> = vec![];
                        for t in 0..=*stock_to {
                            stock.push(self.path_node(l, t).stock.clone());
                        }
                        (self.paths[l][0].0, full, stock)
                    })
                    .collect();
                Ok(Partition::from_keys(keys))
            }
        }
    }

    /// Terminal stock-path partition (the finest financial information).
    pub fn fs_partition(&self) -> Partition {
        self.partition_for(&ObservableSpec::StockPath { to: self.horizon })
            .expect("terminal stock partition")
    }
}

/// Conditional expectation of `payoff` under the measure twisted by `xi`,
/// blockwise on `part`:
/// `sum_B P(w) xi(w) H(w) / sum_B P(w) xi(w)`.
///
/// The density's base partition must be coarser than (or equal to) `part`.
pub fn cond_expectation(
    tree: &ScenarioTree,
    payoff: &Payoff,
    part: &Arc<Partition>,
    xi: &Density,
) -> Result<ConditionalValue> {
    if payoff.len() != tree.n_leaves() {
        return Err(EvalError::PartitionMismatch("payoff length differs from leaf count".into()));
    }
    if !part.refines(&xi.base) {
        return Err(EvalError::PartitionMismatch(
            "density base partition does not coarsen the conditioning partition".into(),
        ));
    }
    let mut values = Vec::with_capacity(part.n_blocks());
    for (b, block) in part.blocks().iter().enumerate() {
        let mut num = Scalar::zero();
        let mut den = Scalar::zero();
        for &l in block {
            let w = Scalar::from_rational(tree.leaf_prob[l].clone()) * xi.weights[l].clone();
            num = num + &w * &payoff.values[l];
            den = den + w;
        }
        if den.is_zero() {
            return Err(EvalError::ZeroBlockMass { block: b });
        }
        values.push(&num / &den);
    }
    Ok(ConditionalValue::new(part.clone(), values))
}

// ---------------------------------------------------------------------------
// Risk-neutral measure on the financial sub-filtration
// ---------------------------------------------------------------------------

/// Solves `sum q_j = 1`, `sum q_j S_i(child_j) = S_i(node)` exactly.
///
/// Returns the unique strictly positive solution, or the appropriate
/// market-structure error.
fn one_step_weights(
    context: &str,
    node_stock: &[BigRational],
    child_stocks: &[Vec<BigRational>],
    growth: &BigRational,
) -> Result<Vec<BigRational>> {
    let g = child_stocks.len();
    let n = node_stock.len();
    if g > n + 1 {
        return Err(EvalError::IncompleteMarket {
            context: context.to_string(),
            branches: g,
            instruments: n + 1,
        });
    }
    // Augmented system rows: mass row, then one row per stock coordinate.
    let mut rows: Vec<Vec<BigRational>> = Vec::with_capacity(n + 1);
    let mut row0 = vec![BigRational::one(); g];
    row0.push(BigRational::one());
    rows.push(row0);
    for i in 0..n {
        let mut row: Vec<BigRational> = child_stocks.iter().map(|c| c[i].clone()).collect();
        row.push(&node_stock[i] * growth);
        rows.push(row);
    }
    // Gaussian elimination with exact pivoting.
    let mut pivot_col_of_row: Vec<usize> = Vec::new();
    let mut r = 0;
    for col in 0..g {
        let mut pivot = None;
        for i in r..rows.len() {
            if !rows[i][col].is_zero() {
                pivot = Some(i);
                break;
            }
        }
        let Some(p) = pivot else { continue };
        rows.swap(r, p);
        let inv = rows[r][col].clone();
        for v in rows[r].iter_mut() {
            *v /= &inv;
        }
        for i in 0..rows.len() {
            if i != r && !rows[i][col].is_zero() {
                let factor = rows[i][col].clone();
                for c in 0..=g {
                    let delta = &rows[r][c] * &factor;
                    rows[i][c] -= delta;
                }
            }
        }
        pivot_col_of_row.push(col);
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    // Inconsistency: a zero row with non-zero right-hand side.
    for row in rows.iter().skip(r) {
        if row[..g].iter().all(|v| v.is_zero()) && !row[g].is_zero() {
            return Err(EvalError::Arbitrage {
                context: context.to_string(),
                reason: "one-step martingale system has no solution".into(),
            });
        }
    }
    if r < g {
        return Err(EvalError::IncompleteMarket {
            context: context.to_string(),
            branches: g,
            instruments: n + 1,
        });
    }
    let mut q = vec![BigRational::zero(); g];
    for (row, &col) in pivot_col_of_row.iter().enumerate() {
        q[col] = rows[row][g].clone();
    }
    if q.iter().any(|v| !v.is_positive()) {
        return Err(EvalError::Arbitrage {
            context: context.to_string(),
            reason: format!(
                "martingale weights not strictly positive: [{}]",
                q.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
            ),
        });
    }
    Ok(q)
}

/// The unique risk-neutral density on the financial sub-filtration.
///
/// The financial quotient (stock paths joined with the initial information)
/// must be arbitrage-free and complete at every one-step node; the resulting
/// weights are constant on terminal stock-path blocks and make every stock
/// coordinate a martingale on the quotient, in exact rational arithmetic.
pub fn risk_neutral_measure(tree: &ScenarioTree) -> Result<Density> {
    let horizon = tree.horizon;
    let mut parts: Vec<Partition> = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        parts.push(tree.partition_for(&ObservableSpec::StockPath { to: t })?);
    }
    // One-step growth factor of the bond; stock values are discounted when
    // the rate is zero, which is the default for valuation trees.
    let growth = BigRational::one() + tree.bond_rate.clone();

    // Cumulative quotient-path probability per stock-path block, per time.
    let mut q_prob: Vec<Vec<BigRational>> = Vec::with_capacity(horizon + 1);
    q_prob.push(vec![BigRational::one(); parts[0].n_blocks()]);
    for t in 0..horizon {
        let coarse = &parts[t];
        let fine = &parts[t + 1];
        // Group the time-(t+1) blocks under their time-t parent block.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); coarse.n_blocks()];
        for (cb, block) in fine.blocks().iter().enumerate() {
            children[coarse.block_of(block[0])].push(cb);
        }
        let mut next = vec![BigRational::zero(); fine.n_blocks()];
        for (pb, kids) in children.iter().enumerate() {
            let leaf0 = coarse.blocks()[pb][0];
            let node_stock = &tree.path_node(leaf0, t).stock;
            let child_stocks: Vec<Vec<BigRational>> = kids
                .iter()
                .map(|&cb| tree.path_node(fine.blocks()[cb][0], t + 1).stock.clone())
                .collect();
            let context = format!(
                "time {} stock-path node containing leaf {}",
                t,
                tree.leaf_name(leaf0)
            );
            let q = one_step_weights(&context, node_stock, &child_stocks, &growth)?;
            for (j, &cb) in kids.iter().enumerate() {
                next[cb] = &q_prob[t][pb] * &q[j];
            }
        }
        q_prob.push(next);
    }

    let g_part = Arc::new(tree.g_partition());
    let terminal = &parts[horizon];
    // Physical mass per terminal stock-path block and per initial atom.
    let block_mass: Vec<BigRational> = terminal.blocks().iter().map(|b| tree.mass(b)).collect();
    let atom_mass: Vec<BigRational> = g_part.blocks().iter().map(|b| tree.mass(b)).collect();
    let mut weights = Vec::with_capacity(tree.n_leaves());
    for l in 0..tree.n_leaves() {
        let b = terminal.block_of(l);
        let a = g_part.block_of(l);
        let w = &q_prob[horizon][b] * &atom_mass[a] / &block_mass[b];
        weights.push(Scalar::from_rational(w));
    }
    Density::new(tree, g_part, weights)
}

// ---------------------------------------------------------------------------
// Canonical test trees
// ---------------------------------------------------------------------------

/// One-period binomial market without insurance risk.
pub fn binomial_tree(
    s0: BigRational,
    up: BigRational,
    down: BigRational,
    p_up: BigRational,
) -> Result<ScenarioTree> {
    let mut b = TreeBuilder::new(1);
    let r = b.root(vec![s0.clone()], BigRational::zero());
    let u = b.child(r, vec![&s0 * &up], BigRational::zero());
    let d = b.child(r, vec![&s0 * &down], BigRational::zero());
    b.named(u, "u");
    b.named(d, "d");
    let q_down = BigRational::one() - &p_up;
    b.prob(u, p_up);
    b.prob(d, q_down);
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rat, rat_int};

    pub(crate) fn two_period_tree() -> ScenarioTree {
        // Financial binomial at both steps, insurance revealed at step 2.
        let mut b = TreeBuilder::new(1).reveal_times([2]);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        let u = b.child(r, vec![rat_int(2)], rat_int(0));
        let d = b.child(r, vec![rat(1, 2)], rat_int(0));
        for (node, s) in [(u, rat_int(4)), (u, rat_int(1)), (d, rat_int(1)), (d, rat(1, 4))] {
            let s_up = b.child(node, vec![s.clone()], rat_int(1));
            let s_dn = b.child(node, vec![s], rat_int(0));
            b.prob(s_up, rat(1, 8));
            b.prob(s_dn, rat(1, 8));
        }
        b.build().unwrap()
    }

    #[test]
    fn binomial_builds() {
        let t = binomial_tree(rat_int(1), rat_int(2), rat(1, 2), rat(1, 2)).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.horizon(), 1);
    }

    #[test]
    fn insurance_change_off_reveal_rejected() {
        let mut b = TreeBuilder::new(1);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        let u = b.child(r, vec![rat_int(2)], rat_int(1));
        let d = b.child(r, vec![rat(1, 2)], rat_int(0));
        b.prob(u, rat(1, 2));
        b.prob(d, rat(1, 2));
        let err = b.build().unwrap_err();
        assert!(matches!(err, EvalError::InvalidConfig(_)), "{err}");
    }

    #[test]
    fn two_period_structure() {
        let t = two_period_tree();
        assert_eq!(t.n_leaves(), 8);
        // Insurance constant across the step-1 edges.
        for l in 0..8 {
            assert_eq!(t.path_node(l, 1).insurance, t.path_node(l, 0).insurance);
        }
        let fs1 = t.partition_for(&ObservableSpec::StockPath { to: 1 }).unwrap();
        assert_eq!(fs1.n_blocks(), 2);
        let fs2 = t.fs_partition();
        assert_eq!(fs2.n_blocks(), 4);
        let f2 = t.partition_for(&ObservableSpec::FullPath { to: 2 }).unwrap();
        assert_eq!(f2.n_blocks(), 8);
        assert!(f2.refines(&fs2));
        assert!(fs2.refines(&fs1));
        assert!(fs1.refines(&t.g_partition()));
    }

    #[test]
    fn trivial_partition_single_block() {
        let t = binomial_tree(rat_int(1), rat_int(2), rat(1, 2), rat(1, 2)).unwrap();
        let p = t.partition_for(&ObservableSpec::Trivial).unwrap();
        assert_eq!(p.n_blocks(), 1);
    }

    #[test]
    fn terminal_stock_partition_separates_binomial_leaves() {
        let t = binomial_tree(rat_int(1), rat_int(2), rat(1, 2), rat(1, 2)).unwrap();
        let p = t.fs_partition();
        assert_eq!(p.n_blocks(), 2);
    }

    #[test]
    fn shared_stock_path_merges_leaves_differing_in_insurance() {
        let t = two_period_tree();
        let p = t.fs_partition();
        for block in p.blocks() {
            assert_eq!(block.len(), 2, "two insurance outcomes per stock path");
        }
    }

    #[test]
    fn unknown_time_rejected() {
        let t = binomial_tree(rat_int(1), rat_int(2), rat(1, 2), rat(1, 2)).unwrap();
        let err = t.partition_for(&ObservableSpec::StockPath { to: 7 }).unwrap_err();
        assert!(matches!(err, EvalError::UnknownTime(7)));
    }

    fn four_leaf_uniform() -> ScenarioTree {
        let mut b = TreeBuilder::new(1);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for (i, s) in [rat_int(4), rat_int(3), rat_int(2), rat(1, 2)].into_iter().enumerate() {
            let l = b.child(r, vec![s], rat_int(0));
            b.named(l, &format!("w{}", i + 1));
            b.prob(l, rat(1, 4));
        }
        b.build().unwrap()
    }

    #[test]
    fn conditional_expectation_examples() {
        let t = four_leaf_uniform();
        let h = Payoff::from_ints(&[1, 2, 3, 4]);
        let trivial = Arc::new(Partition::trivial(4));
        let unit = Density::unit(&t, trivial.clone());
        let v = cond_expectation(&t, &h, &trivial, &unit).unwrap();
        assert_eq!(v.values[0], Scalar::from_ratio(5, 2));

        let c = Payoff::constant(4, Scalar::from_int(7));
        let part = Arc::new(Partition::from_keys(vec![0, 0, 1, 1]));
        let unit2 = Density::unit(&t, Arc::new(Partition::trivial(4)));
        let v = cond_expectation(&t, &c, &part, &unit2).unwrap();
        assert!(v.values.iter().all(|x| *x == Scalar::from_int(7)));

        let v = cond_expectation(&t, &h, &part, &unit2).unwrap();
        assert_eq!(v.values[0], Scalar::from_ratio(3, 2));
        assert_eq!(v.values[1], Scalar::from_ratio(7, 2));
    }

    #[test]
    fn tower_property_exact() {
        let t = two_period_tree();
        let h = Payoff::from_ints(&[3, -1, 2, 0, 5, 1, -2, 4]);
        let fine = Arc::new(t.partition_for(&ObservableSpec::FullPath { to: 1 }).unwrap());
        let coarse = Arc::new(Partition::trivial(8));
        let unit = Density::unit(&t, coarse.clone());
        let inner = cond_expectation(&t, &h, &fine, &unit).unwrap();
        let outer = cond_expectation(&t, &inner.as_payoff(), &coarse, &unit).unwrap();
        let direct = cond_expectation(&t, &h, &coarse, &unit).unwrap();
        assert!(outer.matches(&direct));
    }

    #[test]
    fn risk_neutral_binomial() {
        let t = binomial_tree(rat_int(1), rat_int(2), rat(1, 2), rat(1, 2)).unwrap();
        let q = risk_neutral_measure(&t).unwrap();
        // q_up = 1/3 under P(up) = 1/2, so the density is 2/3 on up, 4/3 on down.
        assert_eq!(q.weights[0], Scalar::from_ratio(2, 3));
        assert_eq!(q.weights[1], Scalar::from_ratio(4, 3));
        assert!(q.nonneg);
    }

    #[test]
    fn risk_neutral_weights_constant_on_stock_blocks_and_martingale() {
        let t = two_period_tree();
        let q = risk_neutral_measure(&t).unwrap();
        let fs = t.fs_partition();
        for block in fs.blocks() {
            for &l in block {
                assert_eq!(q.weights[l], q.weights[block[0]]);
            }
        }
        // Martingale at the root: E_Q[S_T] = S_0.
        let mut acc = Scalar::zero();
        for l in 0..t.n_leaves() {
            let w = Scalar::from_rational(t.leaf_prob(l).clone()) * q.weights[l].clone();
            acc = acc + w * Scalar::from_rational(t.terminal_stock(l, 0).clone());
        }
        assert_eq!(acc, Scalar::one());
    }

    #[test]
    fn trinomial_single_stock_incomplete() {
        let mut b = TreeBuilder::new(1);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for s in [rat_int(2), rat_int(1), rat(1, 2)] {
            let l = b.child(r, vec![s], rat_int(0));
            b.prob(l, rat(1, 3));
        }
        let t = b.build().unwrap();
        let err = risk_neutral_measure(&t).unwrap_err();
        assert!(matches!(err, EvalError::IncompleteMarket { branches: 3, instruments: 2, .. }));
    }

    #[test]
    fn dominating_returns_are_arbitrage() {
        let t = binomial_tree(rat_int(1), rat(11, 10), rat(21, 20), rat(1, 2)).unwrap();
        let err = risk_neutral_measure(&t).unwrap_err();
        assert!(matches!(err, EvalError::Arbitrage { .. }));
    }

    #[test]
    fn config_round_trip() {
        let text = r#"
            reveal_times = [1]

            [[nodes]]
            id = "r"
            stock = ["1"]
            insurance = "0"

            [[nodes]]
            id = "u"
            parent = "r"
            stock = ["2"]
            insurance = "1"
            prob = "1/2"

            [[nodes]]
            id = "d"
            parent = "r"
            stock = ["0.5"]
            insurance = "0"
            prob = "1/2"
        "#;
        let t = parse_tree_config(text).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.leaf_name(0), "u");
    }
}
