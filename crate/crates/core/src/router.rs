//! Channel router: affine gate, softmax, Top-K sparsification and the
//! importance/load balancing penalty.
//!
//! Gate values that survive Top-K keep their softmax value (no
//! renormalization). Expert ids in a [`RoutingTable`] are slots into the
//! active-channel list of the routed grid, not original channel ids.

use crate::error::{config, contract, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::TokenGrid;

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub num_experts: usize,
}

impl RouterParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        num_experts: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{prefix}.weight"),
                normal_tensor(rng, &[dim, num_experts], 0.02),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[num_experts])),
            num_experts,
        }
    }
}

/// Indices of the `k` largest values; equal values favour the lower index.
/// Returned in ascending index order.
pub fn tie_break(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Result of routing one token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTable {
    pub k: usize,
    /// Softmax router output before Top-K, `[T × E]`.
    pub probs: Tensor,
    /// Top-K gates, zero off the support, `[T × E]`.
    pub gates: Tensor,
    /// Selected experts per token, ascending.
    pub expert_sets: Vec<Vec<usize>>,
    /// Per expert, the token ids routed to it in ascending order; row `r` of
    /// the expert's source matrix is token `sources[e][r]`.
    pub sources: Vec<Vec<usize>>,
    /// Per token, parallel to `expert_sets`: the row the token occupies in
    /// each selected expert's source matrix.
    pub slots: Vec<Vec<usize>>,
}

impl RoutingTable {
    /// Applies Top-K to each row of router probabilities.
    pub fn from_probs(probs: Tensor, k: usize) -> Result<Self> {
        let e = probs.cols();
        if k == 0 || k > e {
            return config(format!("top-k {k} out of range 1..={e}"));
        }
        let sets: Vec<Vec<usize>> = (0..probs.rows())
            .map(|t| tie_break(probs.row(t), k))
            .collect();
        let mut gates = Tensor::zeros(probs.shape());
        for (t, set) in sets.iter().enumerate() {
            for &x in set {
                gates.data_mut()[t * e + x] = probs.at(t, x);
            }
        }
        Ok(Self::assemble(k, probs, gates, sets))
    }

    /// Fixed routing with gate value `1/k` on every selected expert. Used to
    /// pin routing for cost instrumentation and tests.
    pub fn from_assignments(num_experts: usize, sets: Vec<Vec<usize>>) -> Result<Self> {
        let k = sets.first().map_or(0, Vec::len);
        if k == 0 || k > num_experts {
            return config(format!("top-k {k} out of range 1..={num_experts}"));
        }
        let mut norm = Vec::with_capacity(sets.len());
        for set in sets {
            let mut set = set;
            set.sort_unstable();
            set.dedup();
            if set.len() != k || set.iter().any(|&x| x >= num_experts) {
                return contract(format!(
                    "forced routing needs {k} distinct experts below {num_experts}, got {set:?}"
                ));
            }
            norm.push(set);
        }
        let mut gates = Tensor::zeros(&[norm.len(), num_experts]);
        for (t, set) in norm.iter().enumerate() {
            for &x in set {
                gates.data_mut()[t * num_experts + x] = 1.0 / k as f64;
            }
        }
        Ok(Self::assemble(k, gates.clone(), gates, norm))
    }

    fn assemble(k: usize, probs: Tensor, gates: Tensor, expert_sets: Vec<Vec<usize>>) -> Self {
        let e = probs.cols();
        let mut sources = vec![Vec::new(); e];
        let mut slots = Vec::with_capacity(expert_sets.len());
        for (t, set) in expert_sets.iter().enumerate() {
            slots.push(
                set.iter()
                    .map(|&x| {
                        sources[x].push(t);
                        sources[x].len() - 1
                    })
                    .collect(),
            );
        }
        Self {
            k,
            probs,
            gates,
            expert_sets,
            sources,
            slots,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.expert_sets.len()
    }

    pub fn num_experts(&self) -> usize {
        self.sources.len()
    }

    /// `N_e` for every expert.
    pub fn counts(&self) -> Vec<usize> {
        self.sources.iter().map(Vec::len).collect()
    }

    /// Column sums of the pre-Top-K probabilities.
    pub fn importance(&self) -> Vec<f64> {
        importance(&self.probs)
    }

    /// Top-K inclusion counts per expert.
    pub fn load(&self) -> Vec<f64> {
        self.counts().into_iter().map(|c| c as f64).collect()
    }

    /// Checks the structural invariants of the table.
    pub fn validate(&self) -> Result<()> {
        let e = self.num_experts();
        let expect_nz = self.k.min(e);
        for (t, set) in self.expert_sets.iter().enumerate() {
            let row = self.gates.row(t);
            let nz: Vec<usize> = (0..e).filter(|&x| row[x] != 0.0).collect();
            if nz.len() != expect_nz || &nz != set {
                return contract(format!("token {t}: gate support {nz:?} vs expert set {set:?}"));
            }
            if nz.iter().any(|&x| !(row[x] > 0.0 && row[x] <= 1.0)) {
                return contract(format!("token {t}: gate value outside (0, 1]"));
            }
            for (&x, &slot) in set.iter().zip(&self.slots[t]) {
                if self.sources[x].get(slot) != Some(&t) {
                    return contract(format!("token {t}: slot {slot} of expert {x} is stale"));
                }
            }
        }
        let total: usize = self.counts().iter().sum();
        if total != self.k * self.num_tokens() {
            return contract(format!(
                "sum of N_k is {total}, expected {}",
                self.k * self.num_tokens()
            ));
        }
        Ok(())
    }
}

/// Router forward on a session: logits for rows of `x`, restricted to the
/// `active` columns, softmax. Returns the probabilities node.
pub fn router_probs(
    s: &mut Session,
    params: &RouterParams,
    x: Var,
    active: &[usize],
) -> Result<Var> {
    if let Some(&bad) = active.iter().find(|&&c| c >= params.num_experts) {
        return config(format!(
            "channel {bad} has no router column ({} experts)",
            params.num_experts
        ));
    }
    let w = s.p(params.weight);
    let b = s.p(params.bias);
    let logits = s.g.matmul(x, w)?;
    let logits = s.g.add(logits, b)?;
    let full = active.len() == params.num_experts && active.iter().enumerate().all(|(i, &c)| i == c);
    let logits = if full {
        logits
    } else {
        s.g.select_cols(logits, active)?
    };
    s.g.softmax_rows(logits)
}

/// Routes a token grid with top-`k` selection.
pub fn route(
    store: &ParamStore,
    params: &RouterParams,
    tokens: &TokenGrid,
    k: usize,
) -> Result<RoutingTable> {
    let c = tokens.channels();
    if k == 0 || k > c {
        return config(format!("top-k {k} out of range 1..={c}"));
    }
    let mut s = Session::eval(store);
    let x = s.constant(tokens.tokens.clone());
    let probs = router_probs(&mut s, params, x, &tokens.active_channels)?;
    RoutingTable::from_probs(s.value(probs).clone(), k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceWeights {
    pub importance: f64,
    pub load: f64,
}

impl Default for BalanceWeights {
    fn default() -> Self {
        Self {
            importance: 0.01,
            load: 0.01,
        }
    }
}

pub fn importance(probs: &Tensor) -> Vec<f64> {
    let e = probs.cols();
    let mut out = vec![0.0; e];
    for row in probs.data().chunks_exact(e) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// Hard Top-K inclusion counts per expert for rows of `probs`.
pub fn load(probs: &Tensor, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.cols()];
    for t in 0..probs.rows() {
        for x in tie_break(probs.row(t), k) {
            out[x] += 1.0;
        }
    }
    out
}

pub use crate::tensor::cv_squared;

/// `w_imp·CV²(importance) + w_load·CV²(load)` for pre-Top-K probabilities.
pub fn balance_loss(probs: &Tensor, k: usize, w: BalanceWeights) -> f64 {
    w.importance * cv_squared(&importance(probs)) + w.load * cv_squared(&load(probs, k))
}

/// Differentiable balance loss. Only the importance term carries gradient;
/// the load term enters as a constant computed from the hard counts.
pub fn balance_loss_graph(
    s: &mut Session,
    probs: Var,
    load: &[f64],
    w: BalanceWeights,
) -> Result<Var> {
    let e = s.value(probs).cols();
    if load.len() != e {
        return Err(Error::Shape {
            op: "balance_loss",
            lhs: vec![e],
            rhs: vec![load.len()],
        });
    }
    let imp = s.g.sum_rows(probs)?;
    let cv = s.g.cv_squared(imp);
    let imp_term = s.g.scale(cv, w.importance);
    let load_term = s.constant(Tensor::scalar(w.load * cv_squared(load)));
    s.g.add(imp_term, load_term)
}
