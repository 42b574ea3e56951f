//! Conditional actuarial evaluation principles.
//!
//! Every principle maps a payoff to one value per block of a conditioning
//! partition, computed under the physical conditional measure.  Mean moments
//! and quantile minimization stay in exact rationals; the standard-deviation
//! and exponential principles (and non-integer semi-deviation exponents)
//! finish in floating point.

use std::sync::Arc;

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::error::{EvalError, Result};
use crate::numeric::{compare, rational_to_f64, Scalar};
use crate::tree::{ConditionalValue, Partition, Payoff, ScenarioTree};

/// Parameter record selecting one conditional evaluation principle.
#[derive(Clone, Debug, PartialEq)]
pub enum PrincipleSpec {
    /// Plain conditional expectation (the risk-load-free baseline).
    Expectation,
    /// `E + (alpha/2) Var`.
    MeanVariance { alpha: BigRational },
    /// `E + beta sqrt(Var)`.
    StdDev { beta: BigRational },
    /// `E + lambda (E[(H - E)_+^q])^(1/q)`.
    SemiDeviation { lambda: BigRational, q: BigRational },
    /// `E + delta AVaR_level(H - E)`.
    AVaR { delta: BigRational, level: BigRational },
    /// `gamma log E[exp(H / gamma)]`.
    Exponential { gamma: BigRational },
}

impl PrincipleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EvalError::InvalidSpec(msg));
        match self {
            PrincipleSpec::Expectation => Ok(()),
            PrincipleSpec::MeanVariance { alpha } => {
                if alpha.is_negative() {
                    return bad(format!("mean-variance loading {} < 0", alpha));
                }
                Ok(())
            }
            PrincipleSpec::StdDev { beta } => {
                if beta.is_negative() {
                    return bad(format!("standard-deviation loading {} < 0", beta));
                }
                Ok(())
            }
            PrincipleSpec::SemiDeviation { lambda, q } => {
                if lambda.is_negative() {
                    return bad(format!("semi-deviation loading {} < 0", lambda));
                }
                if q < &BigRational::one() {
                    return bad(format!("semi-deviation exponent {} < 1", q));
                }
                Ok(())
            }
            PrincipleSpec::AVaR { delta, level } => {
                if delta.is_negative() {
                    return bad(format!("tail loading {} < 0", delta));
                }
                if !level.is_positive() || level > &BigRational::one() {
                    return Err(EvalError::InvalidLevel(level.to_string()));
                }
                Ok(())
            }
            PrincipleSpec::Exponential { gamma } => {
                if !gamma.is_positive() {
                    return bad(format!("exponential risk tolerance {} <= 0", gamma));
                }
                Ok(())
            }
        }
    }

    /// Whether every output value of this principle is an exact rational.
    pub fn is_exact(&self) -> bool {
        match self {
            PrincipleSpec::Expectation
            | PrincipleSpec::MeanVariance { .. }
            | PrincipleSpec::AVaR { .. } => true,
            PrincipleSpec::SemiDeviation { q, .. } => q.is_one(),
            PrincipleSpec::StdDev { .. } | PrincipleSpec::Exponential { .. } => false,
        }
    }

    /// Positively homogeneous principles admit a coherent dual set.
    pub fn is_positively_homogeneous(&self) -> bool {
        matches!(
            self,
            PrincipleSpec::Expectation
                | PrincipleSpec::StdDev { .. }
                | PrincipleSpec::SemiDeviation { .. }
                | PrincipleSpec::AVaR { .. }
        )
    }

    pub fn label(&self) -> String {
        match self {
            PrincipleSpec::Expectation => "expectation".into(),
            PrincipleSpec::MeanVariance { alpha } => format!("mean-variance(alpha={})", alpha),
            PrincipleSpec::StdDev { beta } => format!("std-dev(beta={})", beta),
            PrincipleSpec::SemiDeviation { lambda, q } => {
                format!("semi-deviation(lambda={},q={})", lambda, q)
            }
            PrincipleSpec::AVaR { delta, level } => {
                format!("avar(delta={},level={})", delta, level)
            }
            PrincipleSpec::Exponential { gamma } => format!("exponential(gamma={})", gamma),
        }
    }
}

/// Physical conditional weights of a block, as exact rationals summing to 1.
fn block_weights(tree: &ScenarioTree, block: &[usize]) -> Vec<BigRational> {
    let mass = tree.mass(block);
    block.iter().map(|&l| tree.leaf_prob(l) / &mass).collect()
}

fn block_mean(weights: &[BigRational], values: &[Scalar]) -> Scalar {
    let mut acc = Scalar::zero();
    for (w, v) in weights.iter().zip(values) {
        acc = acc + Scalar::from_rational(w.clone()) * v.clone();
    }
    acc
}

fn block_variance(weights: &[BigRational], values: &[Scalar], mean: &Scalar) -> Scalar {
    let mut acc = Scalar::zero();
    for (w, v) in weights.iter().zip(values) {
        let d = v - mean;
        acc = acc + Scalar::from_rational(w.clone()) * &d * &d;
    }
    acc
}

/// Average value at risk of a finite loss distribution at the given level,
/// via the quantile-minimization form `min_s { s + E[(H-s)_+] / level }`.
/// The minimum over the support points is the global minimum, so the result
/// is exact for rational inputs.
fn block_avar(weights: &[BigRational], values: &[Scalar], level: &BigRational) -> Scalar {
    let level_s = Scalar::from_rational(level.clone());
    let mut best: Option<Scalar> = None;
    for s in values {
        let mut tail = Scalar::zero();
        for (w, v) in weights.iter().zip(values) {
            tail = tail + Scalar::from_rational(w.clone()) * (v - s).positive_part();
        }
        let candidate = s.clone() + tail / level_s.clone();
        best = Some(match best {
            None => candidate,
            Some(b) => b.min(candidate),
        });
    }
    best.expect("non-empty block")
}

fn block_value(
    spec: &PrincipleSpec,
    weights: &[BigRational],
    values: &[Scalar],
    scale: Option<&Scalar>,
) -> Scalar {
    match spec {
        PrincipleSpec::Expectation => block_mean(weights, values),
        PrincipleSpec::MeanVariance { alpha } => {
            let mean = block_mean(weights, values);
            let var = block_variance(weights, values, &mean);
            // Under a stock numeraire the loading rescales blockwise.
            let mut load = Scalar::from_rational(alpha / BigRational::from_integer(2.into()));
            if let Some(s) = scale {
                load = load * s.clone();
            }
            mean + load * var
        }
        PrincipleSpec::StdDev { beta } => {
            let mean = block_mean(weights, values);
            let var = block_variance(weights, values, &mean);
            mean + Scalar::from_rational(beta.clone()) * var.sqrt()
        }
        PrincipleSpec::SemiDeviation { lambda, q } => {
            let mean = block_mean(weights, values);
            let mut acc = Scalar::zero();
            for (w, v) in weights.iter().zip(values) {
                let d = (v - &mean).positive_part();
                acc = acc + Scalar::from_rational(w.clone()) * d.pow_rational(q);
            }
            let dev = if q.is_one() {
                acc
            } else {
                acc.pow_rational(&q.recip())
            };
            mean + Scalar::from_rational(lambda.clone()) * dev
        }
        PrincipleSpec::AVaR { delta, level } => {
            let mean = block_mean(weights, values);
            let centered: Vec<Scalar> = values.iter().map(|v| v - &mean).collect();
            let tail = block_avar(weights, &centered, level);
            mean + Scalar::from_rational(delta.clone()) * tail
        }
        PrincipleSpec::Exponential { gamma } => {
            // Under a stock numeraire the risk tolerance rescales blockwise.
            let gamma_s = match scale {
                Some(s) => Scalar::from_rational(gamma.clone()) / s.clone(),
                None => Scalar::from_rational(gamma.clone()),
            };
            let mut acc = Scalar::zero();
            for (w, v) in weights.iter().zip(values) {
                acc = acc + Scalar::from_rational(w.clone()) * (v / &gamma_s).exp();
            }
            gamma_s * acc.ln()
        }
    }
}

/// Evaluates `spec` blockwise on `part` under the physical conditional
/// measure.
pub fn evaluate(
    tree: &ScenarioTree,
    spec: &PrincipleSpec,
    payoff: &Payoff,
    part: &Arc<Partition>,
) -> Result<ConditionalValue> {
    evaluate_scaled(tree, spec, payoff, part, None)
}

/// Evaluation with an optional per-block penalty rescale, used by the
/// numeraire change (mean-variance and exponential carry their loading in
/// the penalty; coherent principles are unaffected).
pub fn evaluate_scaled(
    tree: &ScenarioTree,
    spec: &PrincipleSpec,
    payoff: &Payoff,
    part: &Arc<Partition>,
    scale: Option<&[Scalar]>,
) -> Result<ConditionalValue> {
    spec.validate()?;
    if payoff.len() != tree.n_leaves() || part.n_leaves() != tree.n_leaves() {
        return Err(EvalError::PartitionMismatch(
            "payoff or partition does not match the tree".into(),
        ));
    }
    let mut out = Vec::with_capacity(part.n_blocks());
    for (b, block) in part.blocks().iter().enumerate() {
        let weights = block_weights(tree, block);
        let values: Vec<Scalar> = block.iter().map(|&l| payoff.values[l].clone()).collect();
        let s = scale.map(|sc| &sc[b]);
        out.push(block_value(spec, &weights, &values, s));
    }
    Ok(ConditionalValue::new(part.clone(), out))
}

/// Conditional average value at risk of the raw loss (no mean-centering).
pub fn avar(
    tree: &ScenarioTree,
    payoff: &Payoff,
    part: &Arc<Partition>,
    level: &BigRational,
) -> Result<ConditionalValue> {
    if !level.is_positive() || level > &BigRational::one() {
        return Err(EvalError::InvalidLevel(level.to_string()));
    }
    let mut out = Vec::with_capacity(part.n_blocks());
    for block in part.blocks() {
        let weights = block_weights(tree, block);
        let values: Vec<Scalar> = block.iter().map(|&l| payoff.values[l].clone()).collect();
        out.push(block_avar(&weights, &values, level));
    }
    Ok(ConditionalValue::new(part.clone(), out))
}

/// Blockwise selection `I_A PI(H_1) + I_{A^c} PI(H_2) + ...` from a family of
/// values indexed by sets that must be measurable and partition the leaves.
pub fn local_glue(parts: &[(Vec<bool>, ConditionalValue)]) -> Result<ConditionalValue> {
    let first = parts.first().ok_or(EvalError::EmptyFamily)?;
    let partition = first.1.partition.clone();
    let n = partition.n_leaves();
    let mut covered = vec![false; n];
    for (mask, value) in parts {
        if value.partition.blocks() != partition.blocks() {
            return Err(EvalError::PartitionMismatch(
                "glued values live on different partitions".into(),
            ));
        }
        if !partition.is_block_union(mask) {
            return Err(EvalError::NotMeasurable(
                "indicator set splits a partition block".into(),
            ));
        }
        for (l, &m) in mask.iter().enumerate() {
            if m {
                if covered[l] {
                    return Err(EvalError::NotMeasurable(
                        "indicator sets overlap".into(),
                    ));
                }
                covered[l] = true;
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(EvalError::NotMeasurable(
            "indicator sets do not cover every leaf".into(),
        ));
    }
    let mut values = vec![Scalar::zero(); partition.n_blocks()];
    for (mask, value) in parts {
        for (b, block) in partition.blocks().iter().enumerate() {
            if mask[block[0]] {
                values[b] = value.values[b].clone();
            }
        }
    }
    Ok(ConditionalValue::new(partition, values))
}

/// Lower conditional quantile of the loss distribution, exposed for report
/// diagnostics.  The averaged tail itself is convention-independent.
pub fn lower_quantile(weights: &[BigRational], values: &[Scalar], level: &BigRational) -> Scalar {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| compare(&values[a], &values[b]));
    // Smallest value whose lower tail mass reaches 1 - level.
    let threshold = BigRational::one() - level;
    let mut acc = BigRational::zero();
    for &i in &order {
        acc += &weights[i];
        if acc >= threshold {
            return values[i].clone();
        }
    }
    values[*order.last().expect("non-empty block")].clone()
}

/// Convenience wrapper: evaluate on the trivial partition and return the
/// single value.
pub fn evaluate_unconditional(
    tree: &ScenarioTree,
    spec: &PrincipleSpec,
    payoff: &Payoff,
) -> Result<Scalar> {
    let part = Arc::new(Partition::trivial(tree.n_leaves()));
    Ok(evaluate(tree, spec, payoff, &part)?.values[0].clone())
}

#[allow(dead_code)]
fn unused_f64_guard(x: &BigRational) -> f64 {
    rational_to_f64(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rat, rat_int, scalar_eq};
    use crate::tree::TreeBuilder;

    fn uniform_tree(n: usize) -> ScenarioTree {
        let mut b = TreeBuilder::new(1);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for i in 0..n {
            let l = b.child(r, vec![rat_int(1) + rat(i as i64 + 1, 100)], rat_int(0));
            b.prob(l, rat(1, n as i64));
        }
        b.build().unwrap()
    }

    fn weighted_tree(probs: &[(i64, i64)]) -> ScenarioTree {
        let mut b = TreeBuilder::new(1);
        let r = b.root(vec![rat_int(1)], rat_int(0));
        for (i, (n, d)) in probs.iter().enumerate() {
            let l = b.child(r, vec![rat_int(1) + rat(i as i64 + 1, 100)], rat_int(0));
            b.prob(l, rat(*n, *d));
        }
        b.build().unwrap()
    }

    #[test]
    fn mean_variance_symmetric_coin() {
        let t = uniform_tree(2);
        let h = Payoff::from_ints(&[1, -1]);
        let spec = PrincipleSpec::MeanVariance { alpha: rat_int(2) };
        let v = evaluate_unconditional(&t, &spec, &h).unwrap();
        assert_eq!(v, Scalar::from_int(1));
    }

    #[test]
    fn constants_are_fixed_points_of_every_principle() {
        let t = uniform_tree(3);
        let c = Payoff::constant(3, Scalar::from_ratio(7, 3));
        let specs = [
            PrincipleSpec::Expectation,
            PrincipleSpec::MeanVariance { alpha: rat_int(2) },
            PrincipleSpec::StdDev { beta: rat(1, 2) },
            PrincipleSpec::SemiDeviation { lambda: rat(1, 2), q: rat_int(2) },
            PrincipleSpec::AVaR { delta: rat(1, 2), level: rat(1, 2) },
            PrincipleSpec::Exponential { gamma: rat_int(1) },
        ];
        for spec in specs {
            let v = evaluate_unconditional(&t, &spec, &c).unwrap();
            assert!(scalar_eq(&v, &Scalar::from_ratio(7, 3)), "{}", spec.label());
        }
    }

    #[test]
    fn exponential_two_point() {
        let t = uniform_tree(2);
        let h = Payoff::new(vec![Scalar::zero(), Scalar::Approx(4f64.ln())]);
        let spec = PrincipleSpec::Exponential { gamma: rat_int(1) };
        let v = evaluate_unconditional(&t, &spec, &h).unwrap();
        assert!((v.to_f64() - 2.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn avar_tail_examples() {
        let t = uniform_tree(4);
        let h = Payoff::from_ints(&[1, 2, 3, 4]);
        let part = Arc::new(Partition::trivial(4));
        let v = avar(&t, &h, &part, &rat(1, 2)).unwrap();
        assert_eq!(v.values[0], Scalar::from_ratio(7, 2));

        let v = avar(&t, &h, &part, &rat_int(1)).unwrap();
        assert_eq!(v.values[0], Scalar::from_ratio(5, 2));

        let t2 = weighted_tree(&[(9, 10), (1, 10)]);
        let h2 = Payoff::from_ints(&[0, 10]);
        let part2 = Arc::new(Partition::trivial(2));
        let v = avar(&t2, &h2, &part2, &rat(1, 20)).unwrap();
        assert_eq!(v.values[0], Scalar::from_int(10));
    }

    #[test]
    fn invalid_level_rejected() {
        let t = uniform_tree(2);
        let h = Payoff::from_ints(&[0, 1]);
        let part = Arc::new(Partition::trivial(2));
        assert!(matches!(
            avar(&t, &h, &part, &rat_int(0)),
            Err(EvalError::InvalidLevel(_))
        ));
    }

    #[test]
    fn glue_whole_space_is_identity() {
        let part = Arc::new(Partition::from_keys(vec![0, 0, 1, 1]));
        let v = ConditionalValue::new(part.clone(), vec![Scalar::from_int(1), Scalar::from_int(2)]);
        let glued = local_glue(&[(vec![true; 4], v.clone())]).unwrap();
        assert!(glued.matches(&v));
    }

    #[test]
    fn glue_complementary_halves() {
        let part = Arc::new(Partition::from_keys(vec![0, 0, 1, 1]));
        let v1 = ConditionalValue::new(part.clone(), vec![Scalar::from_int(1), Scalar::from_int(2)]);
        let v2 = ConditionalValue::new(part.clone(), vec![Scalar::from_int(3), Scalar::from_int(4)]);
        let a = vec![true, true, false, false];
        let ac = vec![false, false, true, true];
        let glued = local_glue(&[(a, v1), (ac, v2)]).unwrap();
        assert_eq!(glued.values[0], Scalar::from_int(1));
        assert_eq!(glued.values[1], Scalar::from_int(4));
    }

    #[test]
    fn glue_rejects_non_measurable_sets() {
        let part = Arc::new(Partition::from_keys(vec![0, 0, 1, 1]));
        let v = ConditionalValue::new(part.clone(), vec![Scalar::zero(), Scalar::zero()]);
        let a = vec![true, false, false, false];
        let ac = vec![false, true, true, true];
        let err = local_glue(&[(a, v.clone()), (ac, v)]).unwrap_err();
        assert!(matches!(err, EvalError::NotMeasurable(_)));
    }

    #[test]
    fn semi_deviation_q1_stays_exact() {
        let t = uniform_tree(4);
        let h = Payoff::from_ints(&[-1, 0, 1, 4]);
        let spec = PrincipleSpec::SemiDeviation { lambda: rat(1, 2), q: rat_int(1) };
        let v = evaluate_unconditional(&t, &spec, &h).unwrap();
        assert!(v.is_exact());
        // mean 1, upside deviations (0,0,0,3)/4 -> 3/4, value 1 + 3/8.
        assert_eq!(v, Scalar::from_ratio(11, 8));
    }
}
