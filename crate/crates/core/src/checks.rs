//! Seeded property suites run by the `check` command: operator gradient
//! checks, batched-versus-naive attention equivalence, and router invariants.
//! Case `i` draws from its own sub-stream, so any failure is reproducible
//! from `(seed, case)` alone.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::attention::{channel_moe, naive_oracle, Aggregation, AttentionParams};
use crate::error::Result;
use crate::gradcheck;
use crate::params::ParamStore;
use crate::rng::{normal_tensor, substream, Rng, STREAM_CHECK};
use crate::router::RoutingTable;
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;

pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;

/// First failing case of a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub case: usize,
    pub config: String,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seed: u64,
    pub run: usize,
    pub failed: usize,
    /// Largest deviation observed across all cases.
    pub max_deviation: f64,
    pub first_failure: Option<Counterexample>,
}

impl SuiteResult {
    fn new(name: &'static str, seed: u64) -> Self {
        Self {
            name,
            seed,
            run: 0,
            failed: 0,
            max_deviation: 0.0,
            first_failure: None,
        }
    }

    fn record(&mut self, case: usize, config: String, deviation: f64, ok: bool) {
        self.run += 1;
        if deviation.is_nan() || deviation > self.max_deviation {
            self.max_deviation = deviation;
        }
        if !ok {
            self.failed += 1;
            self.first_failure.get_or_insert(Counterexample {
                case,
                config,
                deviation,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

fn case_rng(seed: u64, suite: u64, case: usize) -> Rng {
    substream(seed, STREAM_CHECK, (suite << 24) | case as u64)
}

/// Finite-difference check of a random composite of matmul, GELU, layer
/// norm, softmax attention, cross-entropy and CV².
pub fn gradient_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut out = SuiteResult::new("gradients", seed);
    for case in 0..cases {
        let mut rng = case_rng(seed, 1, case);
        let (m, n, p, q) = (
            rng.gen_range(1..5),
            rng.gen_range(2..5),
            rng.gen_range(3..6),
            rng.gen_range(2..4),
        );
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..q)).collect();
        let params = vec![
            ("x".to_string(), normal_tensor(&mut rng, &[m, n], 1.0)),
            ("w".to_string(), normal_tensor(&mut rng, &[n, p], 1.0)),
            ("v".to_string(), normal_tensor(&mut rng, &[p, q], 1.0)),
        ];
        let report = gradcheck::check(&params, 1e-5, |g, vars| {
            let h = g.matmul(vars[0], vars[1])?;
            let h = g.layer_norm(h, 1e-5)?;
            let h = g.gelu(h);
            let ht = g.transpose(h)?;
            let s = g.matmul(h, ht)?;
            let s = g.scale(s, 1.0 / (p as f64).sqrt());
            let a = g.softmax_rows(s)?;
            let o = g.matmul(a, h)?;
            let logits = g.matmul(o, vars[2])?;
            let ce = g.cross_entropy(logits, &labels)?;
            let imp = g.sum_rows(a)?;
            let cv = g.cv_squared(imp);
            g.add(ce, cv)
        })?;
        let dev = report.max_rel_err();
        out.record(case, format!("m={m} n={n} p={p} classes={q}"), dev, dev < GRAD_TOL);
    }
    Ok(out)
}

fn random_probs(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / z));
    }
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// Batched channel-MoE attention against the per-token loop oracle.
pub fn oracle_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let modes = [Aggregation::GateWeighted, Aggregation::Uniform, Aggregation::Renormalized];
    let mut out = SuiteResult::new("oracle", seed);
    for case in 0..cases {
        let mut rng = case_rng(seed, 2, case);
        let n = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=c);
        let heads = *[1, 2, 4].choose(&mut rng).expect("nonempty");
        let d = heads * rng.gen_range(1..=4);
        let mode = modes[case % modes.len()];
        let with_cls = rng.gen_bool(0.5);

        let mut store = ParamStore::new();
        let params = AttentionParams::init(&mut store, &mut rng, "attn", d, c, heads)?;
        let tokens = normal_tensor(&mut rng, &[n * c, d], 1.0);
        let cls = with_cls.then(|| normal_tensor(&mut rng, &[1, d], 1.0));
        let grid = TokenGrid::new(n, (0..c).collect(), tokens, cls)?;
        let routing = RoutingTable::from_probs(random_probs(&mut rng, n * c, c), k)?;

        let (bt, bc) = channel_moe(&store, &params, &grid, &routing, mode)?;
        let (ot, oc) = naive_oracle(&store, &params, &grid, &routing, mode)?;
        let mut dev = bt.max_abs_diff(&ot);
        if let (Some(bc), Some(oc)) = (bc, oc) {
            dev = dev.max(bc.max_abs_diff(&oc));
        }
        let config = format!("N={n} C={c} D={d} heads={heads} k={k} mode={mode} cls={with_cls}");
        out.record(case, config, dev, dev < ORACLE_TOL);
    }
    Ok(out)
}

/// Top-K support against a rank-count oracle, sparsity and source-row accounting.
pub fn router_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut out = SuiteResult::new("router", seed);
    for case in 0..cases {
        let mut rng = case_rng(seed, 3, case);
        let t = rng.gen_range(1..=40);
        let e = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=e);
        let mut probs = random_probs(&mut rng, t, e);
        if rng.gen_bool(0.3) {
            // coarse values force ties through the tie rule
            let coarse: Vec<Vec<f64>> = (0..t)
                .map(|r| probs.row(r).iter().map(|v| (v * 4.0).round() + 1.0).collect())
                .collect();
            let rows: Vec<Vec<f64>> = coarse
                .iter()
                .map(|row| {
                    let z: f64 = row.iter().sum();
                    row.iter().map(|v| v / z).collect()
                })
                .collect();
            probs = Tensor::from_rows(&rows)?;
        }
        let table = RoutingTable::from_probs(probs.clone(), k)?;
        let mut violations = 0usize;
        for r in 0..t {
            // an expert is selected iff fewer than k experts outrank it
            let row = probs.row(r);
            let want: Vec<usize> = (0..e)
                .filter(|&x| (0..e).filter(|&y| row[y] > row[x] || (row[y] == row[x] && y < x)).count() < k)
                .collect();
            let nonzero = table.gates.row(r).iter().filter(|&&g| g != 0.0).count();
            if table.expert_sets[r] != want || nonzero != k {
                violations += 1;
            }
        }
        let routed: usize = table.counts().iter().sum();
        if routed != k * t || table.validate().is_err() {
            violations += 1;
        }
        out.record(case, format!("tokens={t} experts={e} k={k}"), violations as f64, violations == 0);
    }
    Ok(out)
}

pub fn run_all(seed: u64, cases: usize) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        gradient_suite(seed, cases)?,
        oracle_suite(seed, cases)?,
        router_suite(seed, cases)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{inject_fault, Fault};

    #[test]
    fn suites_pass_and_are_deterministic() {
        let a = run_all(3, 12).unwrap();
        assert!(a.iter().all(SuiteResult::passed), "{a:?}");
        assert_eq!(a, run_all(3, 12).unwrap());
        assert!(a.iter().all(|s| s.run == 12));
    }

    #[test]
    fn sign_flipped_matmul_backward_is_caught() {
        inject_fault(Some(Fault::FlipMatmulBackward));
        let r = gradient_suite(0, 3);
        inject_fault(None);
        let r = r.unwrap();
        assert_eq!(r.failed, 3);
        assert_eq!(r.first_failure.unwrap().case, 0);
    }

    #[test]
    fn zero_cases_run_nothing() {
        for s in run_all(0, 0).unwrap() {
            assert_eq!(s.run, 0);
            assert!(s.passed());
        }
    }
}
