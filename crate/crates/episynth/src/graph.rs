//! Directed acyclic model graphs.
//!
//! A graph has three node kinds: basic parameters with priors, functional
//! parameters defined as deterministic maps of other nodes, and data nodes
//! binding an observation stream to one functional parent. The joint log
//! likelihood is the sum of the data nodes' contributions given the functional
//! values, which are evaluated lazily and cached once per parameter vector.
//!
//! Functional nodes declare their dependencies explicitly. That makes cycle
//! detection, reachability checks, graph exports, and the sub-graph
//! construction used by conflict diagnostics possible without inspecting the
//! evaluation closures.

use crate::error::{Error, Result};
use crate::kernels::{binomial_logpmf, negbin_logpmf, normal_logpdf, poisson_logpmf};
use crate::prior::{PriorSpec, Support};
use crate::stream::DataStream;
use rand::Rng;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Param(usize),
    Functional(usize),
}

/// How a data node's observations relate to its functional parent.
///
/// Parents feed one value per observation, except for the paired variants
/// which feed two (interleaved), letting the model drive both the binomial
/// size and its probability, or a mean together with its dispersion.
#[derive(Debug, Clone)]
pub enum ObsModel {
    /// y ~ Binomial(n, psi) with n from the observation's denominator column.
    BinomialProb,
    /// y ~ Binomial(floor(size), p) with (size, p) pairs from the parent.
    BinomialSizeProb,
    /// y ~ NegBin(mean = psi, size = eta).
    NegBin { eta: EtaRef },
    /// y ~ NegBin(mean, size) with (mean, size) pairs from the parent.
    NegBinMeanSizePairs,
    /// y ~ Poisson(psi).
    Poisson,
    /// y ~ Normal(psi, sd) with sd from the denominator column.
    Normal,
    /// y ~ Normal(ln(psi), sigma) with sigma from the denominator column;
    /// psi <= 0 makes the observation impossible.
    NormalLogPoint,
}

/// Source of a negative binomial size parameter.
#[derive(Debug, Clone, Copy)]
pub enum EtaRef {
    Fixed(f64),
    Param(usize),
}

pub struct ParamNode {
    pub name: String,
    pub prior: PriorSpec,
    pub plate: Option<String>,
    /// Index in the graph this one was built or restricted from.
    pub original: usize,
}

type FunctionalFn = Arc<dyn Fn(&mut EvalCtx) -> Result<Vec<f64>> + Send + Sync>;

pub struct FunctionalNode {
    pub name: String,
    pub deps: Vec<NodeRef>,
    pub plate: Option<String>,
    /// Marked constant by the builder: the node intentionally depends on no
    /// parameter (every input was pinned by configuration).
    pub constant: bool,
    eval: FunctionalFn,
}

pub struct DataNode {
    pub name: String,
    pub parent: usize,
    pub obs_model: ObsModel,
    pub stream: DataStream,
    pub plate: Option<String>,
}

/// Inclusive-on-the-right day window used to slice observations in time.
#[derive(Debug, Clone, Copy)]
pub struct ObsWindow {
    pub lo: f64,
    pub hi: f64,
}

impl ObsWindow {
    pub fn all() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn upto(hi: f64) -> Self {
        Self { lo: f64::NEG_INFINITY, hi }
    }

    pub fn contains(&self, day: f64) -> bool {
        day > self.lo && day <= self.hi
    }
}

pub struct ModelGraph {
    params: Vec<ParamNode>,
    functionals: Vec<FunctionalNode>,
    data: Vec<DataNode>,
    /// Original param index -> position in `params`, None when dropped by a
    /// restriction. Closures capture original indices.
    param_slot: Vec<Option<usize>>,
    /// Functional index -> param slot substituting it (conflict cuts).
    overrides: HashMap<usize, usize>,
    /// Functional nodes reachable from the retained data nodes.
    live: Vec<bool>,
    names: HashMap<String, NodeRef>,
}

pub struct GraphBuilder {
    params: Vec<ParamNode>,
    functionals: Vec<Option<FunctionalNode>>,
    declared: Vec<String>,
    data: Vec<DataNode>,
    names: HashMap<String, NodeRef>,
    data_names: HashSet<String>,
    plate: Option<String>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            functionals: Vec::new(),
            declared: Vec::new(),
            data: Vec::new(),
            names: HashMap::new(),
            data_names: HashSet::new(),
            plate: None,
        }
    }

    /// Plate label attached to subsequently added nodes (age bands, waves).
    pub fn set_plate<S: Into<String>>(&mut self, plate: Option<S>) {
        self.plate = plate.map(Into::into);
    }

    fn claim_name(&mut self, name: &str, r: NodeRef) -> Result<()> {
        if self.names.contains_key(name) || self.data_names.contains(name) {
            return Err(Error::Config(format!("duplicate node name '{name}'")));
        }
        self.names.insert(name.to_string(), r);
        Ok(())
    }

    pub fn param<S: Into<String>>(&mut self, name: S, prior: PriorSpec) -> Result<NodeRef> {
        let name = name.into();
        prior.validate()?;
        if let Some(c) = prior.center() {
            if c >= self.params.len() {
                return Err(Error::Config(format!(
                    "prior of '{name}' centers on a parameter that does not exist yet"
                )));
            }
        }
        let r = NodeRef::Param(self.params.len());
        self.claim_name(&name, r)?;
        self.params.push(ParamNode {
            name,
            prior,
            plate: self.plate.clone(),
            original: self.params.len(),
        });
        Ok(r)
    }

    /// Forward-declare a functional node so mutually referencing definitions
    /// can be expressed (and cycles detected at build time).
    pub fn declare_functional<S: Into<String>>(&mut self, name: S) -> Result<NodeRef> {
        let name = name.into();
        let r = NodeRef::Functional(self.functionals.len());
        self.claim_name(&name, r)?;
        self.functionals.push(None);
        self.declared.push(name);
        Ok(r)
    }

    pub fn define_functional<F>(&mut self, r: NodeRef, deps: Vec<NodeRef>, eval: F) -> Result<()>
    where
        F: Fn(&mut EvalCtx) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        let NodeRef::Functional(idx) = r else {
            return Err(Error::Config("define_functional needs a functional reference".into()));
        };
        if self.functionals[idx].is_some() {
            return Err(Error::Config(format!("functional '{}' defined twice", self.declared[idx])));
        }
        self.functionals[idx] = Some(FunctionalNode {
            name: self.declared[idx].clone(),
            deps,
            plate: self.plate.clone(),
            constant: false,
            eval: Arc::new(eval),
        });
        Ok(())
    }

    pub fn functional<S, F>(&mut self, name: S, deps: Vec<NodeRef>, eval: F) -> Result<NodeRef>
    where
        S: Into<String>,
        F: Fn(&mut EvalCtx) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        let r = self.declare_functional(name)?;
        self.define_functional(r, deps, eval)?;
        Ok(r)
    }

    /// A functional with no parameter dependencies, for nodes whose every
    /// input was pinned by configuration. Exempt from the groundedness check.
    pub fn constant_functional<S, F>(&mut self, name: S, eval: F) -> Result<NodeRef>
    where
        S: Into<String>,
        F: Fn(&mut EvalCtx) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        let r = self.declare_functional(name)?;
        let NodeRef::Functional(idx) = r else { unreachable!() };
        self.functionals[idx] = Some(FunctionalNode {
            name: self.declared[idx].clone(),
            deps: Vec::new(),
            plate: self.plate.clone(),
            constant: true,
            eval: Arc::new(eval),
        });
        Ok(r)
    }

    pub fn data<S: Into<String>>(
        &mut self,
        name: S,
        parent: NodeRef,
        obs_model: ObsModel,
        stream: DataStream,
    ) -> Result<()> {
        let name = name.into();
        let NodeRef::Functional(parent) = parent else {
            return Err(Error::Config(format!(
                "data node '{name}' must have a functional parent"
            )));
        };
        if self.names.contains_key(&name) || !self.data_names.insert(name.clone()) {
            return Err(Error::Config(format!("duplicate node name '{name}'")));
        }
        match &obs_model {
            ObsModel::BinomialProb => {
                if stream.obs.iter().any(|o| o.denominator.is_none()) {
                    return Err(Error::Config(format!(
                        "data node '{name}' needs a denominator on every observation"
                    )));
                }
            }
            ObsModel::Normal | ObsModel::NormalLogPoint => {
                if stream.obs.iter().any(|o| !matches!(o.denominator, Some(s) if s > 0.0)) {
                    return Err(Error::Config(format!(
                        "data node '{name}' needs a positive scale in the denominator column"
                    )));
                }
            }
            ObsModel::NegBin { eta: EtaRef::Fixed(s) } => {
                if !(*s > 0.0) {
                    return Err(Error::Config(format!(
                        "data node '{name}' has non-positive fixed dispersion {s}"
                    )));
                }
            }
            ObsModel::NegBin { eta: EtaRef::Param(p) } => {
                if *p >= self.params.len() {
                    return Err(Error::Config(format!(
                        "data node '{name}' references a dispersion parameter that does not exist"
                    )));
                }
            }
            _ => {}
        }
        self.data.push(DataNode {
            name,
            parent,
            obs_model,
            stream,
            plate: self.plate.clone(),
        });
        Ok(())
    }

    pub fn build(self) -> Result<ModelGraph> {
        let mut functionals = Vec::with_capacity(self.functionals.len());
        for (i, f) in self.functionals.into_iter().enumerate() {
            match f {
                Some(f) => functionals.push(f),
                None => {
                    return Err(Error::Config(format!(
                        "functional '{}' declared but never defined",
                        self.declared[i]
                    )))
                }
            }
        }
        for f in &functionals {
            for d in &f.deps {
                let exists = match *d {
                    NodeRef::Param(p) => p < self.params.len(),
                    NodeRef::Functional(g) => g < functionals.len(),
                };
                if !exists {
                    return Err(Error::Config(format!(
                        "functional '{}' depends on a node that does not exist",
                        f.name
                    )));
                }
            }
        }
        for d in &self.data {
            if d.parent >= functionals.len() {
                return Err(Error::Config(format!(
                    "data node '{}' is bound to a missing functional parent",
                    d.name
                )));
            }
        }

        // cycle detection over functional -> functional dependency edges
        let mut state = vec![0u8; functionals.len()]; // 0 unseen, 1 active, 2 done
        fn visit(i: usize, fs: &[FunctionalNode], state: &mut [u8]) -> Result<()> {
            match state[i] {
                1 => return Err(Error::Cycle(fs[i].name.clone())),
                2 => return Ok(()),
                _ => {}
            }
            state[i] = 1;
            for d in &fs[i].deps {
                if let NodeRef::Functional(j) = *d {
                    visit(j, fs, state)?;
                }
            }
            state[i] = 2;
            Ok(())
        }
        for i in 0..functionals.len() {
            visit(i, &functionals, &mut state)?;
        }

        // every functional must be grounded in at least one basic parameter,
        // unless it was declared constant on purpose
        let mut grounded: Vec<bool> = functionals.iter().map(|f| f.constant).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for (i, f) in functionals.iter().enumerate() {
                if grounded[i] {
                    continue;
                }
                let g = f.deps.iter().any(|d| match *d {
                    NodeRef::Param(_) => true,
                    NodeRef::Functional(j) => grounded[j],
                });
                if g {
                    grounded[i] = true;
                    changed = true;
                }
            }
        }
        if let Some(i) = grounded.iter().position(|g| !g) {
            return Err(Error::Config(format!(
                "functional '{}' is not reachable from any basic parameter",
                functionals[i].name
            )));
        }

        let n = self.params.len();
        let live = vec![true; functionals.len()];
        Ok(ModelGraph {
            params: self.params,
            functionals,
            data: self.data,
            param_slot: (0..n).map(Some).collect(),
            overrides: HashMap::new(),
            live,
            names: self.names,
        })
    }
}

impl ModelGraph {
    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn params(&self) -> &[ParamNode] {
        &self.params
    }

    pub fn data_nodes(&self) -> &[DataNode] {
        &self.data
    }

    pub fn functional_nodes(&self) -> impl Iterator<Item = &FunctionalNode> {
        self.functionals.iter().enumerate().filter(|(i, _)| self.live[*i]).map(|(_, f)| f)
    }

    pub fn supports(&self) -> Vec<Support> {
        self.params.iter().map(|p| p.prior.support()).collect()
    }

    pub fn find(&self, name: &str) -> Option<NodeRef> {
        self.names.get(name).copied()
    }

    /// Dependencies of a live functional with conflict cuts applied.
    pub fn effective_deps(&self, f: usize) -> Vec<NodeRef> {
        self.functionals[f]
            .deps
            .iter()
            .map(|d| match *d {
                NodeRef::Functional(g) => match self.overrides.get(&g) {
                    Some(&slot) => NodeRef::Param(self.params[slot].original),
                    None => *d,
                },
                p => p,
            })
            .collect()
    }

    pub fn is_live(&self, f: usize) -> bool {
        self.live[f]
    }

    /// Live functionals with their graph indices, in declaration order.
    pub fn functionals_indexed(&self) -> impl Iterator<Item = (usize, &FunctionalNode)> {
        self.functionals.iter().enumerate().filter(|(i, _)| self.live[*i])
    }

    /// Parameter slot a severed functional was replaced by, if any.
    pub fn override_of(&self, f: usize) -> Option<usize> {
        self.overrides.get(&f).copied()
    }

    pub fn ctx<'g>(&'g self, theta: &'g [f64]) -> EvalCtx<'g> {
        assert_eq!(theta.len(), self.params.len(), "theta length mismatch");
        EvalCtx {
            graph: self,
            theta,
            cache: vec![None; self.functionals.len()],
            in_progress: vec![false; self.functionals.len()],
        }
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.params.len());
        let mut total = 0.0;
        for (i, p) in self.params.iter().enumerate() {
            let d = p.prior.log_density(theta[i], theta);
            if d == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            total += d;
        }
        total
    }

    /// Draw from the joint prior. Centered priors always reference earlier
    /// parameters, so a single forward pass suffices.
    pub fn sample_prior<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let v = p.prior.sample(&theta, rng);
            theta.push(v);
        }
        theta
    }

    fn node_loglik(&self, node: &DataNode, ctx: &mut EvalCtx, window: &ObsWindow) -> Result<f64> {
        // A parameter vector can push the dynamics outside their valid regime
        // (Reed-Frost bracket <= 0, a compartment going negative). That is a
        // property of theta, not of the model, so the likelihood treats it as
        // an impossible state rather than a hard failure.
        let psi = match ctx.values(NodeRef::Functional(node.parent)) {
            Ok(v) => v,
            Err(Error::ParameterRegime(_)) | Err(Error::StepSize { .. }) => {
                return Ok(f64::NEG_INFINITY)
            }
            Err(e) => return Err(e),
        };
        let per_obs = match node.obs_model {
            ObsModel::BinomialSizeProb | ObsModel::NegBinMeanSizePairs => 2,
            _ => 1,
        };
        if psi.len() != per_obs * node.stream.obs.len() {
            return Err(Error::Config(format!(
                "functional parent of '{}' produced {} values for {} observations",
                node.name,
                psi.len(),
                node.stream.obs.len()
            )));
        }
        let mut total = 0.0;
        for (i, obs) in node.stream.obs.iter().enumerate() {
            if !window.contains(obs.day) {
                continue;
            }
            let term = match &node.obs_model {
                ObsModel::BinomialProb => {
                    let p = psi[i];
                    let n = obs.denominator.expect("validated") as u64;
                    if !(0.0..=1.0).contains(&p) {
                        f64::NEG_INFINITY
                    } else {
                        binomial_logpmf(obs.value as u64, n, p)?
                    }
                }
                ObsModel::BinomialSizeProb => {
                    let size = psi[2 * i];
                    let p = psi[2 * i + 1];
                    if !size.is_finite() || !(0.0..=1.0).contains(&p) {
                        f64::NEG_INFINITY
                    } else {
                        let n = size.floor();
                        let y = obs.value as u64;
                        if n < y as f64 {
                            f64::NEG_INFINITY
                        } else {
                            binomial_logpmf(y, n as u64, p)?
                        }
                    }
                }
                ObsModel::NegBin { eta } => {
                    let mean = psi[i];
                    let size = self.resolve_eta(*eta, ctx.theta)?;
                    if !mean.is_finite() || mean < 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        negbin_logpmf(obs.value as u64, mean, size)?
                    }
                }
                ObsModel::NegBinMeanSizePairs => {
                    let mean = psi[2 * i];
                    let size = psi[2 * i + 1];
                    if !mean.is_finite() || mean < 0.0 || !size.is_finite() || size <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        negbin_logpmf(obs.value as u64, mean, size)?
                    }
                }
                ObsModel::Poisson => {
                    let rate = psi[i];
                    if !rate.is_finite() || rate < 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        poisson_logpmf(obs.value as u64, rate)?
                    }
                }
                ObsModel::Normal => {
                    let sd = obs.denominator.expect("validated");
                    if !psi[i].is_finite() {
                        f64::NEG_INFINITY
                    } else {
                        normal_logpdf(obs.value, psi[i], sd)?
                    }
                }
                ObsModel::NormalLogPoint => {
                    let sigma = obs.denominator.expect("validated");
                    let m = psi[i];
                    if !m.is_finite() || m <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        normal_logpdf(obs.value, m.ln(), sigma)?
                    }
                }
            };
            if term == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            total += term;
        }
        Ok(total)
    }

    /// Value of a dispersion reference at `theta`.
    pub fn resolve_eta(&self, eta: EtaRef, theta: &[f64]) -> Result<f64> {
        match eta {
            EtaRef::Fixed(s) => Ok(s),
            EtaRef::Param(slot) => Ok(theta[slot]),
        }
    }

    /// Per-data-node log likelihood contributions; the factorization the whole
    /// synthesis rests on. One evaluation context is shared so functional
    /// values are computed once.
    pub fn log_likelihood_by_node(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.log_likelihood_by_node_windowed(theta, &ObsWindow::all())
    }

    pub fn log_likelihood_by_node_windowed(
        &self,
        theta: &[f64],
        window: &ObsWindow,
    ) -> Result<Vec<f64>> {
        let mut ctx = self.ctx(theta);
        self.data
            .iter()
            .map(|node| self.node_loglik(node, &mut ctx, window))
            .collect()
    }

    pub fn log_likelihood_product(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood_by_node(theta)?.iter().sum())
    }

    pub fn log_likelihood_windowed(&self, theta: &[f64], window: &ObsWindow) -> Result<f64> {
        Ok(self.log_likelihood_by_node_windowed(theta, window)?.iter().sum())
    }

    /// Likelihood over several windows sharing one evaluation context.
    pub fn log_likelihood_windows(&self, theta: &[f64], windows: &[ObsWindow]) -> Result<Vec<f64>> {
        let mut ctx = self.ctx(theta);
        windows
            .iter()
            .map(|w| {
                let mut total = 0.0;
                for node in &self.data {
                    let v = self.node_loglik(node, &mut ctx, w)?;
                    if v == f64::NEG_INFINITY {
                        return Ok(f64::NEG_INFINITY);
                    }
                    total += v;
                }
                Ok(total)
            })
            .collect()
    }

    /// Likelihood restricted to the named data nodes.
    pub fn log_likelihood_nodes(&self, theta: &[f64], nodes: &[&str]) -> Result<f64> {
        let mut ctx = self.ctx(theta);
        let mut total = 0.0;
        for name in nodes {
            let node = self
                .data
                .iter()
                .find(|d| d.name == *name)
                .ok_or_else(|| Error::Config(format!("no data node named '{name}'")))?;
            total += self.node_loglik(node, &mut ctx, &ObsWindow::all())?;
        }
        Ok(total)
    }

    pub fn log_posterior(&self, theta: &[f64]) -> Result<f64> {
        let lp = self.log_prior(theta);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(lp + self.log_likelihood_product(theta)?)
    }

    /// Best attainable log likelihood of a data node, used to standardize
    /// deviances. Independent of theta so DIC differences are meaningful.
    fn saturated_loglik(&self, node: &DataNode) -> f64 {
        node.stream
            .obs
            .iter()
            .map(|obs| match &node.obs_model {
                ObsModel::BinomialProb => {
                    let n = obs.denominator.expect("validated") as u64;
                    let y = obs.value as u64;
                    let p = if n == 0 { 0.0 } else { obs.value / n as f64 };
                    binomial_logpmf(y, n, p).expect("saturated binomial")
                }
                // the size is model-driven; the pmf is bounded by 1
                ObsModel::BinomialSizeProb => 0.0,
                ObsModel::NegBin { eta } => {
                    let size = match eta {
                        EtaRef::Fixed(s) => *s,
                        // dispersion is shared across thetas; bound by the Poisson-like 1
                        EtaRef::Param(_) => return 0.0,
                    };
                    negbin_logpmf(obs.value as u64, obs.value, size).expect("saturated negbin")
                }
                ObsModel::NegBinMeanSizePairs => 0.0,
                ObsModel::Poisson => poisson_logpmf(obs.value as u64, obs.value).expect("saturated poisson"),
                ObsModel::Normal | ObsModel::NormalLogPoint => {
                    let sd = obs.denominator.expect("validated");
                    normal_logpdf(0.0, 0.0, sd).expect("saturated normal")
                }
            })
            .sum()
    }

    /// Saturated deviance contribution of every data node at `theta`:
    /// `D_i = -2 (loglik_i - saturated_i)`.
    pub fn deviance_by_node(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let ll = self.log_likelihood_by_node(theta)?;
        Ok(ll
            .iter()
            .zip(&self.data)
            .map(|(l, node)| -2.0 * (l - self.saturated_loglik(node)))
            .collect())
    }

    /// Parent functional values of every data node at `theta`, in node order,
    /// sharing one evaluation context. Hard errors propagate here, including
    /// parameter-regime failures: callers want the trajectory itself, not a
    /// likelihood.
    pub fn psi_by_node(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut ctx = self.ctx(theta);
        self.data
            .iter()
            .map(|n| Ok(ctx.values(NodeRef::Functional(n.parent))?.as_ref().clone()))
            .collect()
    }

    /// Evaluate a functional node by name.
    pub fn functional_values(&self, theta: &[f64], name: &str) -> Result<Vec<f64>> {
        match self.find(name) {
            Some(NodeRef::Functional(f)) => {
                let mut ctx = self.ctx(theta);
                Ok(ctx.values(NodeRef::Functional(f))?.as_ref().clone())
            }
            Some(NodeRef::Param(p)) => {
                let slot = self.param_slot[p]
                    .ok_or_else(|| Error::Config(format!("parameter '{name}' was dropped by a restriction")))?;
                Ok(vec![theta[slot]])
            }
            None => Err(Error::Config(format!("no node named '{name}'"))),
        }
    }

    /// Scalar-valued convenience wrapper around [`Self::functional_values`].
    pub fn node_scalar(&self, theta: &[f64], name: &str) -> Result<f64> {
        let v = self.functional_values(theta, name)?;
        if v.len() != 1 {
            return Err(Error::Config(format!(
                "node '{name}' has {} values, expected a scalar",
                v.len()
            )));
        }
        Ok(v[0])
    }

    /// Sub-graph containing only the named data nodes and everything they
    /// depend on. When `cut` names a node, that node is replaced by a fresh
    /// basic parameter with the given reference prior, severing its upstream
    /// evidence (the node-splitting construction of conflict diagnostics).
    pub fn restricted(&self, keep_data: &[String], cut: Option<CutSpec>) -> Result<ModelGraph> {
        if keep_data.is_empty() {
            return Err(Error::SplitDesign("a partition needs at least one data node".into()));
        }
        let mut kept_data = Vec::new();
        for name in keep_data {
            let node = self
                .data
                .iter()
                .find(|d| &d.name == name)
                .ok_or_else(|| Error::SplitDesign(format!("no data node named '{name}'")))?;
            kept_data.push(node);
        }

        let cut_ref = match &cut {
            Some(c) => {
                if c.prior.center().is_some() {
                    return Err(Error::SplitDesign(
                        "reference priors for cut separators cannot be hierarchical".into(),
                    ));
                }
                c.prior.validate()?;
                Some(self.find(&c.node).ok_or_else(|| {
                    Error::SplitDesign(format!("no node named '{}' to cut at", c.node))
                })?)
            }
            None => None,
        };

        // walk dependencies from the retained data nodes, stopping at the cut
        let mut need_f = vec![false; self.functionals.len()];
        let mut need_p = vec![false; self.params.len()]; // active slots
        let mut work: Vec<NodeRef> = kept_data.iter().map(|d| NodeRef::Functional(d.parent)).collect();
        while let Some(r) = work.pop() {
            match r {
                NodeRef::Param(orig) => {
                    let slot = self.param_slot[orig].ok_or_else(|| {
                        Error::SplitDesign(format!(
                            "partition depends on parameter index {orig} dropped earlier"
                        ))
                    })?;
                    if !need_p[slot] {
                        need_p[slot] = true;
                        if let Some(c) = self.params[slot].prior.center() {
                            if !need_p[c] {
                                work.push(NodeRef::Param(self.params[c].original));
                            }
                        }
                    }
                }
                NodeRef::Functional(f) => {
                    if cut_ref == Some(NodeRef::Functional(f)) {
                        continue; // replaced by the cut parameter
                    }
                    if let Some(&slot) = self.overrides.get(&f) {
                        work.push(NodeRef::Param(self.params[slot].original));
                        continue;
                    }
                    if !need_f[f] {
                        need_f[f] = true;
                        work.extend(self.functionals[f].deps.iter().copied());
                    }
                }
            }
        }
        for d in &kept_data {
            if let ObsModel::NegBin { eta: EtaRef::Param(slot) } = d.obs_model {
                need_p[slot] = true;
            }
        }
        if let Some(NodeRef::Param(orig)) = cut_ref {
            // cutting at a basic parameter replaces its prior; it stays needed
            let slot = self.param_slot[orig].expect("cut target present");
            need_p[slot] = true;
        }

        // rebuild the active parameter list, preserving order
        let mut new_slot_of_old = vec![None; self.params.len()];
        let mut params = Vec::new();
        let mut param_slot = vec![None; self.param_slot.len()];
        for (slot, p) in self.params.iter().enumerate() {
            if !need_p[slot] {
                continue;
            }
            let mut prior = p.prior.clone();
            new_slot_of_old[slot] = Some(params.len());
            if let Some(c) = prior.center() {
                let nc = new_slot_of_old[c].ok_or_else(|| {
                    Error::SplitDesign(format!(
                        "prior of '{}' centers on a parameter outside the partition",
                        p.name
                    ))
                })?;
                prior = match prior {
                    PriorSpec::LogitNormalCentered { sd, .. } => {
                        PriorSpec::LogitNormalCentered { center: nc, sd }
                    }
                    PriorSpec::LogNormalCentered { sd, .. } => {
                        PriorSpec::LogNormalCentered { center: nc, sd }
                    }
                    other => other,
                };
            }
            if let (Some(c), Some(NodeRef::Param(orig))) = (&cut, cut_ref) {
                if p.original == orig {
                    prior = c.prior.clone();
                }
            }
            param_slot[p.original] = Some(params.len());
            params.push(ParamNode {
                name: p.name.clone(),
                prior,
                plate: p.plate.clone(),
                original: p.original,
            });
        }

        let mut names: HashMap<String, NodeRef> = HashMap::new();
        for p in &params {
            names.insert(p.name.clone(), NodeRef::Param(p.original));
        }

        // carry forward overrides that are still referenced
        let mut overrides = HashMap::new();
        for (&f, &slot) in &self.overrides {
            if need_f.iter().enumerate().any(|(g, &n)| {
                n && self.functionals[g].deps.contains(&NodeRef::Functional(f))
            }) {
                let ns = new_slot_of_old[slot].ok_or_else(|| {
                    Error::SplitDesign("existing cut parameter dropped by restriction".into())
                })?;
                overrides.insert(f, ns);
            }
        }

        // append the new cut parameter if the separator is a functional
        if let (Some(c), Some(NodeRef::Functional(f))) = (&cut, cut_ref) {
            param_slot.push(Some(params.len()));
            overrides.insert(f, params.len());
            names.insert(c.name.clone(), NodeRef::Param(param_slot.len() - 1));
            params.push(ParamNode {
                name: c.name.clone(),
                prior: c.prior.clone(),
                plate: None,
                original: param_slot.len() - 1,
            });
        }

        let functionals: Vec<FunctionalNode> = self
            .functionals
            .iter()
            .map(|f| FunctionalNode {
                name: f.name.clone(),
                deps: f.deps.clone(),
                plate: f.plate.clone(),
                constant: f.constant,
                eval: f.eval.clone(),
            })
            .collect();
        for (i, f) in functionals.iter().enumerate() {
            if need_f[i] {
                names.insert(f.name.clone(), NodeRef::Functional(i));
            }
        }

        let data: Vec<DataNode> = kept_data
            .iter()
            .map(|d| {
                let obs_model = match &d.obs_model {
                    ObsModel::NegBin { eta: EtaRef::Param(slot) } => ObsModel::NegBin {
                        eta: EtaRef::Param(new_slot_of_old[*slot].expect("retained above")),
                    },
                    other => other.clone(),
                };
                DataNode {
                    name: d.name.clone(),
                    parent: d.parent,
                    obs_model,
                    stream: d.stream.clone(),
                    plate: d.plate.clone(),
                }
            })
            .collect();

        Ok(ModelGraph {
            params,
            functionals,
            data,
            param_slot,
            overrides,
            live: need_f,
            names,
        })
    }
}

/// What to replace a separator node with when restricting a graph.
#[derive(Debug, Clone)]
pub struct CutSpec {
    /// Name of the node to sever (a functional or a basic parameter).
    pub node: String,
    /// Reference prior for the severed copy.
    pub prior: PriorSpec,
    /// Name of the replacement parameter (ignored when cutting a parameter).
    pub name: String,
}

/// Evaluation context for one parameter vector: resolves node references,
/// translates parameter indices across restrictions, and caches functional
/// values so each is computed at most once per likelihood call.
pub struct EvalCtx<'g> {
    graph: &'g ModelGraph,
    pub theta: &'g [f64],
    cache: Vec<Option<Arc<Vec<f64>>>>,
    in_progress: Vec<bool>,
}

impl<'g> EvalCtx<'g> {
    pub fn param(&self, r: NodeRef) -> Result<f64> {
        match r {
            NodeRef::Param(orig) => {
                let slot = self.graph.param_slot.get(orig).copied().flatten().ok_or_else(|| {
                    Error::Config(format!("parameter index {orig} is not part of this graph"))
                })?;
                Ok(self.theta[slot])
            }
            NodeRef::Functional(_) => Err(Error::Config(
                "expected a parameter reference, got a functional".into(),
            )),
        }
    }

    pub fn values(&mut self, r: NodeRef) -> Result<Arc<Vec<f64>>> {
        match r {
            NodeRef::Param(_) => Ok(Arc::new(vec![self.param(r)?])),
            NodeRef::Functional(f) => {
                if let Some(&slot) = self.graph.overrides.get(&f) {
                    return Ok(Arc::new(vec![self.theta[slot]]));
                }
                if let Some(v) = &self.cache[f] {
                    return Ok(Arc::clone(v));
                }
                if self.in_progress[f] {
                    return Err(Error::Cycle(self.graph.functionals[f].name.clone()));
                }
                self.in_progress[f] = true;
                let eval = Arc::clone(&self.graph.functionals[f].eval);
                let out = eval(self)?;
                self.in_progress[f] = false;
                if out.iter().any(|x| x.is_nan()) {
                    return Err(Error::Evaluation {
                        node: self.graph.functionals[f].name.clone(),
                    });
                }
                let arc = Arc::new(out);
                self.cache[f] = Some(Arc::clone(&arc));
                Ok(arc)
            }
        }
    }

    pub fn scalar(&mut self, r: NodeRef) -> Result<f64> {
        let v = self.values(r)?;
        if v.len() != 1 {
            return Err(Error::Config(format!(
                "expected a scalar node, got {} values",
                v.len()
            )));
        }
        Ok(v[0])
    }
}
