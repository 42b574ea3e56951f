//! Two-step market evaluations.
//!
//! The market-consistent extension of an actuarial principle applies the
//! principle conditionally on the terminal stock path (joined with the
//! initial information) and prices the resulting stock-dependent values
//! under the risk-neutral measure.  This module also provides the numeraire
//! change and a black-box market-consistency witness search.

use std::sync::Arc;

use num_rational::BigRational;
use num_traits::Signed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EvalError, Result};
use crate::numeric::{scalar_eq, Scalar};
use crate::principles::{evaluate, evaluate_scaled, PrincipleSpec};
use crate::tree::{
    cond_expectation, risk_neutral_measure, ConditionalValue, Density, ObservableSpec, Partition,
    Payoff, ScenarioTree,
};

/// A black-box map from payoffs to conditional values on a fixed partition.
pub trait EvaluationOracle {
    fn eval(&self, payoff: &Payoff) -> Result<ConditionalValue>;
    fn partition(&self) -> &Arc<Partition>;
    fn label(&self) -> String {
        "oracle".into()
    }
}

impl<F> EvaluationOracle for (Arc<Partition>, F)
where
    F: Fn(&Payoff) -> Result<ConditionalValue>,
{
    fn eval(&self, payoff: &Payoff) -> Result<ConditionalValue> {
        (self.1)(payoff)
    }

    fn partition(&self) -> &Arc<Partition> {
        &self.0
    }
}

/// Precomputed context for the two-step evaluation on a fixed tree.
pub struct TwoStep {
    pub g_part: Arc<Partition>,
    pub fs_part: Arc<Partition>,
    pub rn: Density,
    pub spec: PrincipleSpec,
}

impl TwoStep {
    pub fn new(tree: &ScenarioTree, spec: PrincipleSpec, g_part: Arc<Partition>) -> Result<TwoStep> {
        spec.validate()?;
        let fs_part = Arc::new(tree.fs_partition());
        let rn = risk_neutral_measure(tree)?;
        Ok(TwoStep { g_part, fs_part, rn, spec })
    }

    /// Inner conditional principle given the terminal stock path.
    pub fn inner(&self, tree: &ScenarioTree, payoff: &Payoff) -> Result<ConditionalValue> {
        evaluate(tree, &self.spec, payoff, &self.fs_part)
    }

    /// `E_Q[ inner | initial information ]`.
    pub fn eval(&self, tree: &ScenarioTree, payoff: &Payoff) -> Result<ConditionalValue> {
        let inner = self.inner(tree, payoff)?;
        cond_expectation(tree, &inner.as_payoff(), &self.g_part, &self.rn)
    }
}

/// One-shot two-step market evaluation.
pub fn two_step(
    tree: &ScenarioTree,
    spec: &PrincipleSpec,
    payoff: &Payoff,
    g_part: &Arc<Partition>,
) -> Result<ConditionalValue> {
    let ctx = TwoStep::new(tree, spec.clone(), g_part.clone())?;
    ctx.eval(tree, payoff)
}

/// Owning oracle wrapper so harness checks can treat two-step evaluations as
/// black boxes.
pub struct TwoStepOracle<'t> {
    pub tree: &'t ScenarioTree,
    pub ctx: TwoStep,
}

impl<'t> TwoStepOracle<'t> {
    pub fn new(tree: &'t ScenarioTree, spec: PrincipleSpec, g_part: Arc<Partition>) -> Result<Self> {
        Ok(TwoStepOracle { ctx: TwoStep::new(tree, spec, g_part)?, tree })
    }
}

impl EvaluationOracle for TwoStepOracle<'_> {
    fn eval(&self, payoff: &Payoff) -> Result<ConditionalValue> {
        self.ctx.eval(self.tree, payoff)
    }

    fn partition(&self) -> &Arc<Partition> {
        &self.ctx.g_part
    }

    fn label(&self) -> String {
        format!("two-step[{}]", self.ctx.spec.label())
    }
}

/// Evaluation in units of stock `i`.
///
/// The inner penalty is rescaled by the terminal numeraire value (blockwise),
/// the outer expectation uses the numeraire-change density
/// `S^i_T / S^i_0 * dQ/dP`, and the result satisfies
/// `S^i_0 * PI~(H / S^i_T) = PI(H)`.
pub fn numeraire_transform(
    tree: &ScenarioTree,
    stock_index: usize,
    payoff: &Payoff,
    spec: &PrincipleSpec,
    g_part: &Arc<Partition>,
) -> Result<ConditionalValue> {
    if stock_index >= tree.n_stocks() {
        return Err(EvalError::InvalidParam(format!(
            "stock index {} out of range",
            stock_index
        )));
    }
    for l in 0..tree.n_leaves() {
        if !tree.terminal_stock(l, stock_index).is_positive() {
            return Err(EvalError::NonpositiveNumeraire { index: stock_index, leaf: l });
        }
    }
    let fs_part = Arc::new(tree.fs_partition());
    let rn = risk_neutral_measure(tree)?;

    // Payoff in units of the numeraire.
    let scaled = Payoff::new(
        (0..tree.n_leaves())
            .map(|l| {
                &payoff.values[l]
                    / &Scalar::from_rational(tree.terminal_stock(l, stock_index).clone())
            })
            .collect(),
    );
    // Terminal numeraire value per stock block drives the penalty rescale.
    let block_scale: Vec<Scalar> = fs_part
        .blocks()
        .iter()
        .map(|b| Scalar::from_rational(tree.terminal_stock(b[0], stock_index).clone()))
        .collect();
    let inner = evaluate_scaled(tree, spec, &scaled, &fs_part, Some(&block_scale))?;

    // Initial numeraire value per initial atom.
    let s0: Vec<BigRational> = g_part
        .blocks()
        .iter()
        .map(|b| tree.path_node(b[0], 0).stock[stock_index].clone())
        .collect();
    let weights: Vec<Scalar> = (0..tree.n_leaves())
        .map(|l| {
            let ratio = tree.terminal_stock(l, stock_index) / &s0[g_part.block_of(l)];
            rn.weights[l].clone() * Scalar::from_rational(ratio)
        })
        .collect();
    let twisted = Density::new(tree, g_part.clone(), weights)?;
    cond_expectation(tree, &inner.as_payoff(), g_part, &twisted)
}

/// Initial numeraire values per initial atom, for the change-of-units
/// identity `S^i_0 * PI~ = PI`.
pub fn initial_stock(tree: &ScenarioTree, g_part: &Partition, stock_index: usize) -> Vec<Scalar> {
    g_part
        .blocks()
        .iter()
        .map(|b| Scalar::from_rational(tree.path_node(b[0], 0).stock[stock_index].clone()))
        .collect()
}

/// Outcome of the market-consistency witness search.
#[derive(Clone, Debug)]
pub enum WitnessStatus {
    Pass,
    Fail(MarketConsistencyWitness),
}

/// A replayable violation of `PI(H^S + H) = E_Q[H^S | G] + PI(H)`.
#[derive(Clone, Debug)]
pub struct MarketConsistencyWitness {
    pub financial: Payoff,
    pub payoff: Payoff,
    pub block: usize,
    pub lhs: Scalar,
    pub rhs: Scalar,
}

#[derive(Clone, Debug)]
pub struct WitnessReport {
    pub status: WitnessStatus,
    /// Financial lattice payoffs checked against the pricing identity.
    pub financial_cases: u64,
    /// Whether the financial stage enumerated the whole lattice.
    pub financial_exhaustive: bool,
    /// Sampled additivity pairs with a non-trivial residual payoff.
    pub pair_trials: u64,
    pub seed: u64,
}

impl WitnessReport {
    pub fn passed(&self) -> bool {
        matches!(self.status, WitnessStatus::Pass)
    }
}

pub const LATTICE: [i64; 5] = [-2, -1, 0, 1, 2];

/// Enumerates lattice vectors of the given length, up to `cap` of them.
/// Returns `None` when the enumeration would exceed the cap.
pub fn lattice_vectors(len: usize, cap: u64) -> Option<Vec<Vec<i64>>> {
    let total = (LATTICE.len() as u64).checked_pow(len as u32)?;
    if total > cap {
        return None;
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut idx = vec![0usize; len];
    loop {
        out.push(idx.iter().map(|&i| LATTICE[i]).collect());
        let mut pos = 0;
        loop {
            if pos == len {
                return Some(out);
            }
            idx[pos] += 1;
            if idx[pos] < LATTICE.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn random_lattice_payoff(rng: &mut ChaCha8Rng, len: usize) -> Vec<i64> {
    (0..len).map(|_| LATTICE[rng.gen_range(0..LATTICE.len())]).collect()
}

/// Deterministic per-trial substream so results do not depend on scheduling.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    // splitmix64 step keeps substreams decorrelated.
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(trial.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Searches for violations of market-consistency of a black-box oracle.
///
/// Stage one prices every financial lattice payoff (when the lattice fits
/// under the enumeration cap) against `E_Q[H^S|G] + PI(0)`; stage two samples
/// additive pairs `(H^S, H)` from the lattice with seeded substreams.
pub fn is_market_consistent_witness(
    tree: &ScenarioTree,
    op: &dyn EvaluationOracle,
    g_part: &Arc<Partition>,
    trials: u64,
    seed: u64,
) -> Result<WitnessReport> {
    let fs_part = Arc::new(tree.fs_partition());
    let rn = risk_neutral_measure(tree)?;
    let n = tree.n_leaves();
    let k = fs_part.n_blocks();

    let zero = Payoff::zero(n);
    let base = op.eval(&zero)?;

    let financial_payoff = |vals: &[i64]| -> Payoff {
        Payoff::new(
            (0..n)
                .map(|l| Scalar::from_int(vals[fs_part.block_of(l)]))
                .collect(),
        )
    };

    let mut financial_cases = 0u64;
    let cap = 20_000u64;
    let stage1: Vec<Vec<i64>> = match lattice_vectors(k, cap) {
        Some(v) => v,
        None => {
            let mut rng = trial_rng(seed, 0);
            (0..cap / 4).map(|_| random_lattice_payoff(&mut rng, k)).collect()
        }
    };
    let financial_exhaustive = (LATTICE.len() as u64).pow(k as u32) <= cap;
    for vals in &stage1 {
        let hs = financial_payoff(vals);
        let lhs = op.eval(&hs)?;
        let price = cond_expectation(tree, &hs, g_part, &rn)?;
        financial_cases += 1;
        for b in 0..g_part.n_blocks() {
            let rhs = &price.values[b] + &base.values[b];
            if !scalar_eq(&lhs.values[b], &rhs) {
                return Ok(WitnessReport {
                    status: WitnessStatus::Fail(MarketConsistencyWitness {
                        financial: hs.clone(),
                        payoff: zero.clone(),
                        block: b,
                        lhs: lhs.values[b].clone(),
                        rhs,
                    }),
                    financial_cases,
                    financial_exhaustive,
                    pair_trials: 0,
                    seed,
                });
            }
        }
    }

    let mut pair_trials = 0u64;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t + 1);
        let hs = financial_payoff(&random_lattice_payoff(&mut rng, k));
        let h = Payoff::from_ints(&random_lattice_payoff(&mut rng, n));
        let lhs = op.eval(&hs.add(&h))?;
        let rhs_op = op.eval(&h)?;
        let price = cond_expectation(tree, &hs, g_part, &rn)?;
        pair_trials += 1;
        for b in 0..g_part.n_blocks() {
            let rhs = &price.values[b] + &rhs_op.values[b];
            if !scalar_eq(&lhs.values[b], &rhs) {
                return Ok(WitnessReport {
                    status: WitnessStatus::Fail(MarketConsistencyWitness {
                        financial: hs.clone(),
                        payoff: h.clone(),
                        block: b,
                        lhs: lhs.values[b].clone(),
                        rhs,
                    }),
                    financial_cases,
                    financial_exhaustive,
                    pair_trials,
                    seed,
                });
            }
        }
    }

    Ok(WitnessReport {
        status: WitnessStatus::Pass,
        financial_cases,
        financial_exhaustive,
        pair_trials,
        seed,
    })
}

/// Oracle applying a plain conditional principle on the initial information
/// only; not market-consistent for risk-loaded principles on correlated
/// trees.
pub struct PlainPrincipleOracle<'t> {
    pub tree: &'t ScenarioTree,
    pub spec: PrincipleSpec,
    pub g_part: Arc<Partition>,
}

impl EvaluationOracle for PlainPrincipleOracle<'_> {
    fn eval(&self, payoff: &Payoff) -> Result<ConditionalValue> {
        evaluate(self.tree, &self.spec, payoff, &self.g_part)
    }

    fn partition(&self) -> &Arc<Partition> {
        &self.g_part
    }

    fn label(&self) -> String {
        format!("plain[{}]", self.spec.label())
    }
}

/// Oracle taking a conditional expectation under a fixed density.
pub struct ExpectationOracle<'t> {
    pub tree: &'t ScenarioTree,
    pub density: Density,
    pub g_part: Arc<Partition>,
    pub name: String,
}

impl<'t> ExpectationOracle<'t> {
    pub fn risk_neutral(tree: &'t ScenarioTree, g_part: Arc<Partition>) -> Result<Self> {
        Ok(ExpectationOracle {
            density: risk_neutral_measure(tree)?,
            tree,
            g_part,
            name: "risk-neutral expectation".into(),
        })
    }

    pub fn physical(tree: &'t ScenarioTree, g_part: Arc<Partition>) -> Self {
        ExpectationOracle {
            density: Density::unit(tree, g_part.clone()),
            tree,
            g_part,
            name: "physical expectation".into(),
        }
    }
}

impl EvaluationOracle for ExpectationOracle<'_> {
    fn eval(&self, payoff: &Payoff) -> Result<ConditionalValue> {
        cond_expectation(self.tree, payoff, &self.g_part, &self.density)
    }

    fn partition(&self) -> &Arc<Partition> {
        &self.g_part
    }

    fn label(&self) -> String {
        self.name.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rat, rat_int};
    use crate::tree::{binomial_tree, TreeBuilder};

    /// Stock binomial with a correlated two-point insurance coordinate.
    pub(crate) fn correlated_four_leaf() -> ScenarioTree {
        let mut b = TreeBuilder::new(1).reveal_times([1]);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for (s, y, p) in [
            (rat_int(2), rat_int(1), rat(3, 8)),
            (rat_int(2), rat_int(0), rat(1, 8)),
            (rat(1, 2), rat_int(1), rat(1, 8)),
            (rat(1, 2), rat_int(0), rat(3, 8)),
        ] {
            let l = b.child(r, vec![s], y);
            b.prob(l, p);
        }
        b.build().unwrap()
    }

    #[test]
    fn financial_payoffs_collapse_to_risk_neutral_price() {
        let t = correlated_four_leaf();
        let g = Arc::new(t.g_partition());
        // H depends on the stock only.
        let h = Payoff::new(vec![
            Scalar::from_int(3),
            Scalar::from_int(3),
            Scalar::from_int(-1),
            Scalar::from_int(-1),
        ]);
        let rn = risk_neutral_measure(&t).unwrap();
        let price = cond_expectation(&t, &h, &g, &rn).unwrap();
        for spec in [
            PrincipleSpec::MeanVariance { alpha: rat_int(3) },
            PrincipleSpec::StdDev { beta: rat(1, 2) },
            PrincipleSpec::AVaR { delta: rat(1, 2), level: rat(1, 2) },
            PrincipleSpec::Exponential { gamma: rat_int(1) },
        ] {
            let v = two_step(&t, &spec, &h, &g).unwrap();
            assert!(v.matches(&price), "{}", spec.label());
        }
    }

    #[test]
    fn constant_stock_reduces_to_plain_principle() {
        // No financial market: stock identically one.
        let mut b = TreeBuilder::new(1).reveal_times([1]);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for (y, p) in [(rat_int(2), rat(1, 3)), (rat_int(0), rat(2, 3))] {
            let l = b.child(r, vec![rat_int(1)], y);
            b.prob(l, p);
        }
        let t = b.build().unwrap();
        let g = Arc::new(t.g_partition());
        let h = Payoff::from_ints(&[5, -1]);
        let spec = PrincipleSpec::MeanVariance { alpha: rat_int(2) };
        let v = two_step(&t, &spec, &h, &g).unwrap();
        let plain = evaluate(&t, &spec, &h, &g).unwrap();
        assert!(v.matches(&plain));
    }

    #[test]
    fn independent_product_payoffs_factorize() {
        // H = f(S_T) * Y_T with Y independent of S.
        let mut b = TreeBuilder::new(1).reveal_times([1]);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for (s, y, p) in [
            (rat_int(2), rat_int(1), rat(3, 10)),
            (rat_int(2), rat_int(0), rat(1, 5)),
            (rat(1, 2), rat_int(1), rat(3, 10)),
            (rat(1, 2), rat_int(0), rat(1, 5)),
        ] {
            let l = b.child(r, vec![s], y);
            b.prob(l, p);
        }
        let t = b.build().unwrap();
        let g = Arc::new(t.g_partition());
        let f = |l: usize| Scalar::from_rational(t.terminal_stock(l, 0).clone());
        let y = |l: usize| Scalar::from_rational(t.terminal_insurance(l).clone());
        let h = Payoff::new((0..4).map(|l| f(l) * y(l)).collect());
        let spec = PrincipleSpec::MeanVariance { alpha: rat_int(2) };
        let v = two_step(&t, &spec, &h, &g).unwrap();

        let rn = risk_neutral_measure(&t).unwrap();
        let fs = Payoff::new((0..4).map(f).collect());
        let price_f = cond_expectation(&t, &fs, &g, &rn).unwrap().values[0].clone();
        let y_payoff = Payoff::new((0..4).map(y).collect());
        let pi_y = evaluate(&t, &spec, &y_payoff, &g).unwrap().values[0].clone();
        assert_eq!(v.values[0], price_f * pi_y);
    }

    #[test]
    fn numeraire_martingale_normalization() {
        let t = binomial_tree(rat_int(4), rat_int(2), rat(1, 2), rat(1, 2)).unwrap();
        let g = Arc::new(t.g_partition());
        let h = Payoff::new(
            (0..2)
                .map(|l| Scalar::from_rational(t.terminal_stock(l, 0).clone()))
                .collect(),
        );
        let spec = PrincipleSpec::StdDev { beta: rat(1, 2) };
        let v = numeraire_transform(&t, 0, &h, &spec, &g).unwrap();
        assert_eq!(v.values[0], Scalar::one());
    }

    #[test]
    fn numeraire_identity_exact_for_mean_variance() {
        let t = correlated_four_leaf();
        let g = Arc::new(t.g_partition());
        let h = Payoff::from_ints(&[2, -1, 0, 3]);
        let spec = PrincipleSpec::MeanVariance { alpha: rat_int(2) };
        let direct = two_step(&t, &spec, &h, &g).unwrap();
        let transformed = numeraire_transform(&t, 0, &h, &spec, &g).unwrap();
        let s0 = initial_stock(&t, &g, 0);
        assert_eq!(&s0[0] * &transformed.values[0], direct.values[0]);
    }

    #[test]
    fn deterministic_numeraire_is_plain_discounting() {
        // Second stock identically one acts as the bond.
        let mut b = TreeBuilder::new(2);
        let r = b.root(vec![rat_int(1), rat_int(1)], rat_int(0));
        for (s, p) in [(rat_int(2), rat(1, 2)), (rat(1, 2), rat(1, 2))] {
            let l = b.child(r, vec![s, rat_int(1)], rat_int(0));
            b.prob(l, p);
        }
        let t = b.build().unwrap();
        let g = Arc::new(t.g_partition());
        let h = Payoff::from_ints(&[1, 2]);
        let spec = PrincipleSpec::MeanVariance { alpha: rat_int(1) };
        let direct = two_step(&t, &spec, &h, &g).unwrap();
        let transformed = numeraire_transform(&t, 1, &h, &spec, &g).unwrap();
        assert!(transformed.matches(&direct));
    }

    #[test]
    fn witness_search_examples() {
        let t = correlated_four_leaf();
        let g = Arc::new(t.g_partition());

        let two = TwoStepOracle::new(&t, PrincipleSpec::MeanVariance { alpha: rat_int(2) }, g.clone())
            .unwrap();
        let report = is_market_consistent_witness(&t, &two, &g, 300, 7).unwrap();
        assert!(report.passed());

        let plain = PlainPrincipleOracle {
            tree: &t,
            spec: PrincipleSpec::MeanVariance { alpha: rat_int(2) },
            g_part: g.clone(),
        };
        let report = is_market_consistent_witness(&t, &plain, &g, 300, 7).unwrap();
        assert!(!report.passed());

        let rn = ExpectationOracle::risk_neutral(&t, g.clone()).unwrap();
        let report = is_market_consistent_witness(&t, &rn, &g, 300, 7).unwrap();
        assert!(report.passed());
    }
}
