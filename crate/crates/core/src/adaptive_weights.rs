//! Loss weights from the traces of the per-term NTK blocks.
//!
//! For a term built from per-sample quantities `r_k(Θ)`, `tr(J Jᵀ)` is the sum
//! over samples of `|∂r_k/∂Θ|²`. The weights are `λ_j = N_j R / tr_j` with
//! `R = Σ_j tr_j / N_j`, which equalizes `λ_j tr_j / N_j` across terms.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_engine::Tape;
use crate::losses::{LossData, LossWeights, TermId};
use crate::mlp::TrainableState;

/// Traces below this value are treated as degenerate.
pub const TRACE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermTrace {
    pub term: TermId,
    pub trace: f64,
    pub count: usize,
    pub lambda: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    /// Iteration at which the weights were computed.
    pub iteration: usize,
    pub r: f64,
    pub terms: Vec<TermTrace>,
}

impl TraceReport {
    /// Largest relative deviation of `λ_j tr_j / N_j` from `R` over
    /// unclamped terms.
    pub fn identity_error(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| !t.clamped)
            .map(|t| ((t.lambda * t.trace / t.count as f64) - self.r).abs() / self.r)
            .fold(0.0, f64::max)
    }
}

/// `tr(J Jᵀ)` of one term: the summed squared gradient norms of its
/// per-sample quantities with respect to every trainable entry.
pub fn trace_jjt(state: &TrainableState, data: &LossData, term: TermId) -> Result<f64> {
    let tape = Tape::new(state);
    let cols = data.record_columns(&tape, &[term])?;
    let (_, col) = cols.into_iter().next().ok_or_else(|| Error::Config(format!("no samples for term {term}")))?;
    if col.scalar().is_some() {
        return Err(Error::Config(format!("term {term} has no per-sample column")));
    }
    let norms = tape.per_point_sq_norms(col)?;
    Ok(norms.chunks(1024).map(|c| c.iter().sum::<f64>()).sum())
}

/// Weights from `(term, trace, sample count)` triples.
pub fn compute_weights(traces: &[(TermId, f64, usize)], iteration: usize) -> Result<(LossWeights, TraceReport)> {
    if traces.is_empty() {
        return Err(Error::Config("no loss terms to weight".into()));
    }
    for &(t, tr, n) in traces {
        if n == 0 {
            return Err(Error::Config(format!("term {t} has no samples")));
        }
        if !tr.is_finite() || tr < 0.0 {
            return Err(Error::NonFinite(format!("trace of term {t} is {tr}")));
        }
    }
    let r: f64 = traces.iter().filter(|(_, tr, _)| *tr > TRACE_FLOOR).map(|(_, tr, n)| tr / *n as f64).sum();
    let mut weights = LossWeights(Default::default());
    let mut terms = Vec::with_capacity(traces.len());
    for &(term, trace, count) in traces {
        let clamped = trace <= TRACE_FLOOR;
        let lambda = if clamped {
            warn!("trace of term {term} is {trace:e}, below the floor; using weight 1");
            1.0
        } else {
            count as f64 * r / trace
        };
        weights.0.insert(term, lambda);
        terms.push(TermTrace { term, trace, count, lambda, clamped });
    }
    Ok((weights, TraceReport { iteration, r, terms }))
}

/// Traces of every term of the problem and the resulting weights.
pub fn adaptive_weights(state: &TrainableState, data: &LossData, iteration: usize) -> Result<(LossWeights, TraceReport)> {
    let traces = data
        .problem()
        .term_ids()
        .into_iter()
        .map(|t| trace_jjt(state, data, t).map(|tr| (t, tr, data.count(t))))
        .collect::<Result<Vec<_>>>()?;
    compute_weights(&traces, iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{InverseParams, NetworkParams};
    use crate::pde_suite::{Problem, ProblemId};
    use crate::sampling::{build_bundle, Counts, GridSpec, Population};
    use proptest::prelude::*;

    #[test]
    fn equal_traces_give_k() {
        let t = [(TermId::R, 2.0, 5), (TermId::I, 2.0, 5), (TermId::D, 2.0, 5)];
        let (w, rep) = compute_weights(&t, 0).unwrap();
        assert!(w.0.values().all(|&l| (l - 3.0).abs() < 1e-15));
        assert!(rep.identity_error() < 1e-15);
    }

    #[test]
    fn two_term_example() {
        let (w, rep) = compute_weights(&[(TermId::R, 1.0, 1), (TermId::D, 3.0, 1)], 0).unwrap();
        assert_eq!(rep.r, 4.0);
        assert_eq!(w.get(TermId::R), Some(4.0));
        assert!((w.get(TermId::D).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_trace_is_clamped() {
        let (w, rep) = compute_weights(&[(TermId::R, 0.0, 10), (TermId::D, 3.0, 2)], 0).unwrap();
        assert_eq!(w.get(TermId::R), Some(1.0));
        assert!(rep.terms[0].clamped && !rep.terms[1].clamped);
        assert!(rep.identity_error() < 1e-15);
    }

    #[test]
    fn bias_only_network_data_trace_is_n() {
        let p = Problem::new(ProblemId::Heat);
        let grid = GridSpec::with_counts(&p, &[9, 9]).unwrap();
        let pop = Population::from_grid(&p, &grid).unwrap();
        let b = build_bundle(&p, &pop, Counts { residual: 5, initial: 3, boundary: 4, data: 13 }, 0).unwrap();
        let data = LossData::new(&p, &b).unwrap();
        let mut net = NetworkParams::zeros(&[2, 3, 1]).unwrap();
        net.bias_mut(1)[0] = 0.4;
        let s = TrainableState::new(net, InverseParams::new(p.unknown_names(), vec![0.2]).unwrap());
        assert_eq!(trace_jjt(&s, &data, TermId::D).unwrap(), 13.0);
        // constant network: BC operator on x-boundary sees only the output bias
        assert_eq!(trace_jjt(&s, &data, TermId::B).unwrap(), 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weights_invariant_under_uniform_scaling(
            traces in proptest::collection::vec(1e-6f64..1e6, 1..6),
            counts in proptest::collection::vec(1usize..5000, 6),
            scale in 1e-3f64..1e3,
        ) {
            let ids = [TermId::R, TermId::I1, TermId::I2, TermId::B1, TermId::B2, TermId::D];
            let a: Vec<_> = traces.iter().enumerate().map(|(i, &t)| (ids[i], t, counts[i])).collect();
            let b: Vec<_> = a.iter().map(|&(id, t, n)| (id, t * scale, n)).collect();
            let (wa, ra) = compute_weights(&a, 0).unwrap();
            let (wb, rb) = compute_weights(&b, 0).unwrap();
            prop_assert!(ra.identity_error() < 1e-12);
            prop_assert!(rb.identity_error() < 1e-12);
            for (x, y) in wa.0.values().zip(wb.0.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs());
            }
        }
    }
}
