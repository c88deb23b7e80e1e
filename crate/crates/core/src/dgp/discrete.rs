//! Finite-support structural models with exact answers.
//!
//! Every variable except the outcome is categorical with values
//! `0..support`. The outcome is its conditional mean table plus Gaussian
//! noise. Small supports make both the interventional quantities and the
//! identification sums computable by enumeration.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnarDataset, Role};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream, Rng, Stream};

/// Causal structure of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyGraph {
    /// `U → X → A`, `(A, X, U) → Y`.
    #[serde(rename = "backdoor")]
    Backdoor,
    /// `U → A → M`, `(M, U) → Y`.
    #[serde(rename = "frontdoor")]
    Frontdoor,
    /// `O → X`, `U → X`, `(O, X) → A`, `(A, O, X, U) → Y`.
    #[serde(rename = "backdoor-obs")]
    BackdoorObserved,
    /// `(O, U) → A`, `(O, A) → M`, `(O, M, U) → Y`.
    #[serde(rename = "frontdoor-obs")]
    FrontdoorObserved,
}

impl ToyGraph {
    /// `(variable, parents)` in topological order, outcome excluded.
    fn structure(self) -> Vec<(Var, Vec<Var>)> {
        use Var::*;
        match self {
            ToyGraph::Backdoor => vec![(Hidden, vec![]), (BackDoor, vec![Hidden]), (Treatment, vec![BackDoor])],
            ToyGraph::Frontdoor => vec![(Hidden, vec![]), (Treatment, vec![Hidden]), (FrontDoor, vec![Treatment])],
            ToyGraph::BackdoorObserved => vec![
                (Confounder, vec![]),
                (Hidden, vec![]),
                (BackDoor, vec![Confounder, Hidden]),
                (Treatment, vec![Confounder, BackDoor]),
            ],
            ToyGraph::FrontdoorObserved => vec![
                (Confounder, vec![]),
                (Hidden, vec![]),
                (Treatment, vec![Confounder, Hidden]),
                (FrontDoor, vec![Confounder, Treatment]),
            ],
        }
    }

    fn outcome_parents(self) -> Vec<Var> {
        use Var::*;
        match self {
            ToyGraph::Backdoor => vec![Treatment, BackDoor, Hidden],
            ToyGraph::Frontdoor => vec![FrontDoor, Hidden],
            ToyGraph::BackdoorObserved => vec![Treatment, Confounder, BackDoor, Hidden],
            ToyGraph::FrontdoorObserved => vec![Confounder, FrontDoor, Hidden],
        }
    }

    /// Observed roles in stage-one factor order.
    pub fn factor_roles(self) -> Vec<Role> {
        match self {
            ToyGraph::Backdoor => vec![Role::Treatment, Role::BackDoor],
            ToyGraph::Frontdoor => vec![Role::Treatment, Role::FrontDoor],
            ToyGraph::BackdoorObserved => vec![Role::Treatment, Role::ObservedConfounder, Role::BackDoor],
            ToyGraph::FrontdoorObserved => vec![Role::Treatment, Role::ObservedConfounder, Role::FrontDoor],
        }
    }

    pub fn has_confounder(self) -> bool {
        matches!(self, ToyGraph::BackdoorObserved | ToyGraph::FrontdoorObserved)
    }

    pub fn is_frontdoor(self) -> bool {
        matches!(self, ToyGraph::Frontdoor | ToyGraph::FrontdoorObserved)
    }
}

/// Non-outcome variables of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Var {
    Confounder,
    Hidden,
    BackDoor,
    Treatment,
    FrontDoor,
}

impl Var {
    pub fn role(self) -> Option<Role> {
        match self {
            Var::Confounder => Some(Role::ObservedConfounder),
            Var::Hidden => None,
            Var::BackDoor => Some(Role::BackDoor),
            Var::Treatment => Some(Role::Treatment),
            Var::FrontDoor => Some(Role::FrontDoor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variable {
    pub var: Var,
    pub support: usize,
    pub parents: Vec<Var>,
    /// One probability row per parent configuration (first parent most
    /// significant).
    pub table: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub parents: Vec<Var>,
    /// Conditional mean per parent configuration.
    pub means: Vec<f64>,
    pub noise_std: f64,
}

/// A finite structural model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteScm {
    pub graph: ToyGraph,
    pub variables: Vec<Variable>,
    pub outcome: Outcome,
}

/// Full assignment of the non-outcome variables.
pub type Assignment = BTreeMap<Var, usize>;

fn config_index(parents: &[Var], supports: &BTreeMap<Var, usize>, values: &Assignment) -> usize {
    parents
        .iter()
        .fold(0, |idx, p| idx * supports[p] + values[p])
}

impl DiscreteScm {
    /// Random binary model: probabilities in `[0.15, 0.85]`, outcome means
    /// uniform in `[-2, 2]`.
    pub fn random(graph: ToyGraph, noise_std: f64, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Tables);
        let variables = graph
            .structure()
            .into_iter()
            .map(|(var, parents)| {
                let rows = 1usize << parents.len();
                let table = (0..rows)
                    .map(|_| {
                        let p = 0.15 + 0.7 * rng.random::<f64>();
                        vec![1.0 - p, p]
                    })
                    .collect();
                Variable {
                    var,
                    support: 2,
                    parents,
                    table,
                }
            })
            .collect();
        let parents = graph.outcome_parents();
        let means = (0..1usize << parents.len())
            .map(|_| 4.0 * rng.random::<f64>() - 2.0)
            .collect();
        DiscreteScm {
            graph,
            variables,
            outcome: Outcome {
                parents,
                means,
                noise_std,
            },
        }
    }

    /// Checks the structure against the graph and every table row.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDistribution(m));
        let expected = self.graph.structure();
        if self.variables.len() != expected.len()
            || self
                .variables
                .iter()
                .zip(&expected)
                .any(|(v, (var, parents))| v.var != *var || &v.parents != parents)
        {
            return bad(format!("variables do not follow the {:?} structure {expected:?}", self.graph));
        }
        if self.outcome.parents != self.graph.outcome_parents() {
            return bad(format!("outcome parents must be {:?}", self.graph.outcome_parents()));
        }
        let supports = self.supports();
        for v in &self.variables {
            if v.support == 0 {
                return bad(format!("{:?} has empty support", v.var));
            }
            let rows: usize = v.parents.iter().map(|p| supports[p]).product();
            if v.table.len() != rows {
                return bad(format!("{:?} needs {rows} table rows, got {}", v.var, v.table.len()));
            }
            for (r, row) in v.table.iter().enumerate() {
                if row.len() != v.support || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad(format!("{:?} row {r} is not a probability vector", v.var));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("{:?} row {r} sums to {total}", v.var));
                }
            }
        }
        let rows: usize = self.outcome.parents.iter().map(|p| supports[p]).product();
        if self.outcome.means.len() != rows || self.outcome.means.iter().any(|m| !m.is_finite()) {
            return bad(format!("outcome needs {rows} finite means"));
        }
        if !(self.outcome.noise_std >= 0.0) {
            return bad("outcome noise_std must be >= 0".into());
        }
        Ok(())
    }

    pub fn supports(&self) -> BTreeMap<Var, usize> {
        self.variables.iter().map(|v| (v.var, v.support)).collect()
    }

    fn variable(&self, var: Var) -> &Variable {
        self.variables.iter().find(|v| v.var == var).expect("graph variable")
    }

    /// `P(var = value | parents as in s)`.
    fn cpt(&self, var: Var, s: &Assignment) -> f64 {
        let v = self.variable(var);
        v.table[config_index(&v.parents, &self.supports(), s)][s[&var]]
    }

    /// `E[Y | parents as in s]`.
    pub fn outcome_mean(&self, s: &Assignment) -> f64 {
        self.outcome.means[config_index(&self.outcome.parents, &self.supports(), s)]
    }

    /// Every assignment of the non-outcome variables.
    pub fn assignments(&self) -> Vec<Assignment> {
        let mut out = vec![Assignment::new()];
        for v in &self.variables {
            out = out
                .into_iter()
                .flat_map(|s| {
                    (0..v.support).map(move |k| {
                        let mut t = s.clone();
                        t.insert(v.var, k);
                        t
                    })
                })
                .collect();
        }
        out
    }

    /// Joint probability of a full assignment.
    pub fn probability(&self, s: &Assignment) -> f64 {
        self.variables.iter().map(|v| self.cpt(v.var, s)).product()
    }

    /// Exact joint table over all non-outcome variables.
    pub fn joint(&self) -> Vec<(Assignment, f64)> {
        self.assignments()
            .into_iter()
            .map(|s| {
                let p = self.probability(&s);
                (s, p)
            })
            .collect()
    }

    /// Exact law of the observed variables.
    pub fn observed_law(&self) -> ObservedLaw {
        let mut law = ObservedLaw::default();
        for (s, p) in self.joint() {
            let key: Assignment = s.into_iter().filter(|(v, _)| *v != Var::Hidden).collect();
            *law.cells.entry(key).or_insert(0.0) += p;
        }
        law
    }

    fn descendants_of_treatment(&self) -> Vec<Var> {
        let mut desc = vec![Var::Treatment];
        for v in &self.variables {
            if v.parents.iter().any(|p| desc.contains(p)) {
                desc.push(v.var);
            }
        }
        desc.retain(|v| *v != Var::Treatment);
        desc
    }

    /// `E[Y^(a)]` by enumeration of the intervened model.
    pub fn structural_ate(&self, a: usize) -> f64 {
        self.assignments()
            .into_iter()
            .filter(|s| s[&Var::Treatment] == a)
            .map(|s| {
                let p: f64 = self
                    .variables
                    .iter()
                    .filter(|v| v.var != Var::Treatment)
                    .map(|v| self.cpt(v.var, &s))
                    .product();
                p * self.outcome_mean(&s)
            })
            .sum()
    }

    /// `E[Y^(a) | A = a′]`: non-descendants of the treatment follow their
    /// law given `A = a′`, descendants are regenerated under `A = a`.
    pub fn structural_att(&self, a: usize, a_prime: usize) -> f64 {
        let desc = self.descendants_of_treatment();
        let (mut num, mut den) = (0.0, 0.0);
        for s in self.assignments().into_iter().filter(|s| s[&Var::Treatment] == a_prime) {
            let nd: f64 = self
                .variables
                .iter()
                .filter(|v| !desc.contains(&v.var))
                .map(|v| self.cpt(v.var, &s))
                .product();
            let mut t = s.clone();
            t.insert(Var::Treatment, a);
            let d: f64 = desc.iter().map(|&v| self.cpt(v, &t)).product();
            den += nd * d;
            num += nd * d * self.outcome_mean(&t);
        }
        num / den
    }

    /// `E[Y^(a) | O = o]`.
    pub fn structural_cate(&self, a: usize, o: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for s in self
            .assignments()
            .into_iter()
            .filter(|s| s[&Var::Treatment] == a && s[&Var::Confounder] == o)
        {
            let p: f64 = self
                .variables
                .iter()
                .filter(|v| v.var != Var::Treatment)
                .map(|v| self.cpt(v.var, &s))
                .product();
            den += p;
            num += p * self.outcome_mean(&s);
        }
        num / den
    }

    /// `E[Y | observed parents]`, marginalizing the hidden variable.
    pub fn regression(&self, observed: &Assignment) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for s in self.assignments() {
            if observed.iter().any(|(v, k)| s[v] != *k) {
                continue;
            }
            let p = self.probability(&s);
            num += p * self.outcome_mean(&s);
            den += p;
        }
        num / den
    }
}

/// A probability table over observed assignments, exact or empirical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservedLaw {
    pub cells: BTreeMap<Assignment, f64>,
}

impl ObservedLaw {
    /// Frequencies of the rows of `data` (values rounded to categories).
    pub fn empirical(data: &ColumnarDataset, vars: &[Var]) -> Result<Self> {
        let mut law = ObservedLaw::default();
        if data.is_empty() {
            return Err(Error::EmptyInput("empirical law"));
        }
        let blocks = vars
            .iter()
            .map(|v| data.block(v.role().expect("observed variable")))
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / data.len() as f64;
        for i in 0..data.len() {
            let key = vars
                .iter()
                .zip(&blocks)
                .map(|(&v, b)| (v, b.get(i, 0).round().max(0.0) as usize))
                .collect();
            *law.cells.entry(key).or_insert(0.0) += w;
        }
        Ok(law)
    }

    /// Probability of the event fixing every `(var, value)` in `event`.
    pub fn prob(&self, event: &[(Var, usize)]) -> f64 {
        self.cells
            .iter()
            .filter(|(s, _)| event.iter().all(|(v, k)| s.get(v) == Some(k)))
            .map(|(_, p)| p)
            .sum()
    }

    pub fn cond(&self, event: &[(Var, usize)], given: &[(Var, usize)]) -> f64 {
        let joint: Vec<(Var, usize)> = event.iter().chain(given).copied().collect();
        let den = self.prob(given);
        if den == 0.0 {
            0.0
        } else {
            self.prob(&joint) / den
        }
    }

    /// Observed categories of `var`.
    pub fn values(&self, var: Var) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.keys().filter_map(|s| s.get(&var).copied()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Identification sums over a discrete law, evaluated with any outcome
/// regression. `g` takes `(a, o, v)` where `v` is the back-door or
/// front-door value and `o` is ignored by two-factor models.
pub mod identification {
    use super::{ObservedLaw, Var};

    type G<'a> = &'a dyn Fn(usize, usize, usize) -> f64;

    /// `Σ_x g(a, x) P(x)`
    pub fn backdoor_ate(law: &ObservedLaw, g: G, a: usize) -> f64 {
        law.values(Var::BackDoor)
            .into_iter()
            .map(|x| g(a, 0, x) * law.prob(&[(Var::BackDoor, x)]))
            .sum()
    }

    /// `Σ_x g(a, x) P(x | a′)`
    pub fn backdoor_att(law: &ObservedLaw, g: G, a: usize, a_prime: usize) -> f64 {
        law.values(Var::BackDoor)
            .into_iter()
            .map(|x| g(a, 0, x) * law.cond(&[(Var::BackDoor, x)], &[(Var::Treatment, a_prime)]))
            .sum()
    }

    /// `Σ_{a″} P(a″) Σ_m P(m | a) g(a″, m)`
    pub fn frontdoor_ate(law: &ObservedLaw, g: G, a: usize) -> f64 {
        let mut total = 0.0;
        for ap in law.values(Var::Treatment) {
            for m in law.values(Var::FrontDoor) {
                total += law.prob(&[(Var::Treatment, ap)])
                    * law.cond(&[(Var::FrontDoor, m)], &[(Var::Treatment, a)])
                    * g(ap, 0, m);
            }
        }
        total
    }

    /// `Σ_m P(m | a) g(a′, m)`
    pub fn frontdoor_att(law: &ObservedLaw, g: G, a: usize, a_prime: usize) -> f64 {
        law.values(Var::FrontDoor)
            .into_iter()
            .map(|m| law.cond(&[(Var::FrontDoor, m)], &[(Var::Treatment, a)]) * g(a_prime, 0, m))
            .sum()
    }

    /// `Σ_{o,x} g(a, o, x) P(o, x)`
    pub fn backdoor_obs_ate(law: &ObservedLaw, g: G, a: usize) -> f64 {
        let mut total = 0.0;
        for o in law.values(Var::Confounder) {
            for x in law.values(Var::BackDoor) {
                total += g(a, o, x) * law.prob(&[(Var::Confounder, o), (Var::BackDoor, x)]);
            }
        }
        total
    }

    /// `Σ_{o,x} g(a, o, x) P(o, x | a′)`
    pub fn backdoor_obs_att(law: &ObservedLaw, g: G, a: usize, a_prime: usize) -> f64 {
        let mut total = 0.0;
        for o in law.values(Var::Confounder) {
            for x in law.values(Var::BackDoor) {
                total += g(a, o, x)
                    * law.cond(&[(Var::Confounder, o), (Var::BackDoor, x)], &[(Var::Treatment, a_prime)]);
            }
        }
        total
    }

    /// `Σ_x g(a, o, x) P(x | o)`
    pub fn backdoor_obs_cate(law: &ObservedLaw, g: G, a: usize, o: usize) -> f64 {
        law.values(Var::BackDoor)
            .into_iter()
            .map(|x| g(a, o, x) * law.cond(&[(Var::BackDoor, x)], &[(Var::Confounder, o)]))
            .sum()
    }

    /// `Σ_o P(o) Σ_m P(m | o, a) h(o, m)`
    fn mediator_average(law: &ObservedLaw, a: usize, h: impl Fn(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for o in law.values(Var::Confounder) {
            for m in law.values(Var::FrontDoor) {
                total += law.prob(&[(Var::Confounder, o)])
                    * law.cond(&[(Var::FrontDoor, m)], &[(Var::Confounder, o), (Var::Treatment, a)])
                    * h(o, m);
            }
        }
        total
    }

    /// `Σ_{a″} P(a″) Σ_o P(o) Σ_m P(m | o, a) g(a″, o, m)`
    pub fn frontdoor_obs_ate(law: &ObservedLaw, g: G, a: usize) -> f64 {
        let treat = law.values(Var::Treatment);
        mediator_average(law, a, |o, m| {
            treat
                .iter()
                .map(|&ap| law.prob(&[(Var::Treatment, ap)]) * g(ap, o, m))
                .sum()
        })
    }

    /// `Σ_o P(o) Σ_m P(m | o, a) g(a′, o, m)`
    pub fn frontdoor_obs_att(law: &ObservedLaw, g: G, a: usize, a_prime: usize) -> f64 {
        mediator_average(law, a, |o, m| g(a_prime, o, m))
    }

    /// `Σ_{a″} P(a″) Σ_m P(m | o, a) g(a″, o, m)`
    pub fn frontdoor_obs_cate(law: &ObservedLaw, g: G, a: usize, o: usize) -> f64 {
        let mut total = 0.0;
        for ap in law.values(Var::Treatment) {
            for m in law.values(Var::FrontDoor) {
                total += law.prob(&[(Var::Treatment, ap)])
                    * law.cond(&[(Var::FrontDoor, m)], &[(Var::Confounder, o), (Var::Treatment, a)])
                    * g(ap, o, m);
            }
        }
        total
    }
}

/// Exact regression `E[Y | observed factor values]` of a toy model, in the
/// `(a, o, v)` convention of [`identification`].
pub fn exact_regression(scm: &DiscreteScm) -> impl Fn(usize, usize, usize) -> f64 + '_ {
    let second = if scm.graph.is_frontdoor() { Var::FrontDoor } else { Var::BackDoor };
    let with_o = scm.graph.has_confounder();
    move |a, o, v| {
        let mut obs = Assignment::new();
        obs.insert(Var::Treatment, a);
        obs.insert(second, v);
        if with_o {
            obs.insert(Var::Confounder, o);
        }
        scm.regression(&obs)
    }
}

fn draw(rng: &mut Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    row.len() - 1
}

/// `n` i.i.d. samples; the hidden variable is not emitted. Per sample the
/// variables are drawn in topological order, then the outcome noise.
pub fn gen_discrete_toy(scm: &DiscreteScm, n: usize, seed: u64) -> Result<ColumnarDataset> {
    scm.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("discrete data generator"));
    }
    let mut rng = stream(seed, Stream::Data);
    let supports = scm.supports();
    let observed: Vec<Var> = scm
        .variables
        .iter()
        .map(|v| v.var)
        .filter(|v| v.role().is_some())
        .collect();
    let mut cols: BTreeMap<Var, Vec<f64>> = observed.iter().map(|&v| (v, Vec::with_capacity(n))).collect();
    let mut y = Vec::with_capacity(n);
    let mut s = Assignment::new();
    for _ in 0..n {
        for v in &scm.variables {
            let row = &v.table[config_index(&v.parents, &supports, &s)];
            let k = draw(&mut rng, row);
            s.insert(v.var, k);
        }
        let z: f64 = rng.sample(StandardNormal);
        y.push(scm.outcome_mean(&s) + scm.outcome.noise_std * z);
        for (v, col) in cols.iter_mut() {
            col.push(s[v] as f64);
        }
    }
    let mut data = ColumnarDataset::new(n);
    data.insert(Role::Outcome, None, Matrix::from_row_major(n, 1, y)?)?;
    for (v, col) in cols {
        let role = v.role().expect("observed variable");
        data.insert(role, None, Matrix::from_row_major(n, 1, col)?)?;
    }
    data.provenance = Some(format!("discrete-toy {:?} seed={seed} n={n}", scm.graph));
    Ok(data)
}
