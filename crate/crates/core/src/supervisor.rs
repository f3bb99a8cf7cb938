//! Top layer: gain synthesis per coalition and topology selection.
//!
//! Every `T_Λ` steps the supervisor scores the incumbent topology and its
//! single-link neighbours by the predicted infinite-horizon cost
//! `Σ ζᵀPζ` of the induced coalitions plus the network cost of the links, and
//! keeps the cheapest.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::canal_model::{CanalModel, CoalitionModel};
use crate::coalition_ctrl::compute_setpoint;
use crate::error::{Error, Result};
use crate::numerics::{
    block_diag, inf_norm, lqr_gain, lyapunov_residual, riccati_residual, solve_dare, Matrix, Vector,
};
use crate::topology::{candidate_set, network_cost_total, partition_of, Partition, Topology};

/// LQR gain and cost matrix of one coalition.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionGain {
    pub members: Vec<usize>,
    pub k: Matrix,
    pub p: Matrix,
    /// `‖DARE(P)‖_∞ / (1 + ‖P‖_∞)`.
    pub riccati_residual: f64,
    /// Largest eigenvalue of `AclᵀPAcl − P + Q + KᵀRK`.
    pub certificate: f64,
}

/// Solves the coalition DARE with `Q` on the level errors and `R·I` on the
/// inputs.
pub fn synthesize_coalition(canal: &CanalModel, members: &[usize], q: f64, r: f64) -> Result<CoalitionGain> {
    let model = CoalitionModel::build(canal, members);
    let qm = model.level_weight(q);
    let rm = Matrix::identity(model.m(), model.m()) * r;
    let wrap = |source| Error::Synthesis {
        members: model.members.clone(),
        source,
    };
    let p = solve_dare(&model.xi, &model.upsilon, &qm, &rm).map_err(wrap)?;
    let k = lqr_gain(&model.xi, &model.upsilon, &rm, &p).map_err(wrap)?;
    let residual = riccati_residual(&model.xi, &model.upsilon, &qm, &rm, &p).map_err(wrap)?;
    let acl = &model.xi + &model.upsilon * &k;
    let certificate = lyapunov_residual(&acl, &p, &qm, &rm, &k).map_err(wrap)?;
    let riccati_residual = residual / (1.0 + inf_norm(&p));
    Ok(CoalitionGain {
        members: model.members,
        k,
        p,
        riccati_residual,
        certificate,
    })
}

/// Gains for every coalition of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub partition: Partition,
    pub blocks: Vec<Arc<CoalitionGain>>,
}

impl GainSet {
    pub fn block(&self, members: &[usize]) -> Option<&Arc<CoalitionGain>> {
        self.blocks.iter().find(|g| g.members == members)
    }

    /// Block-diagonal gain in coalition order.
    pub fn assembled_k(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.blocks.iter().map(|g| &g.k).collect();
        block_diag(&parts)
    }

    pub fn assembled_p(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.blocks.iter().map(|g| &g.p).collect();
        block_diag(&parts)
    }

    pub fn max_certificate(&self) -> f64 {
        self.blocks
            .iter()
            .map(|g| g.certificate)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Memoizes coalition gains. With caching off every request re-solves.
#[derive(Debug)]
pub struct SynthesisCache {
    enabled: bool,
    level_weight: f64,
    input_weight: f64,
    coalitions: Mutex<HashMap<Vec<usize>, Arc<CoalitionGain>>>,
    partitions: Mutex<HashMap<Partition, Arc<GainSet>>>,
    solves: Mutex<usize>,
}

impl SynthesisCache {
    pub fn new(level_weight: f64, input_weight: f64, enabled: bool) -> Self {
        Self {
            enabled,
            level_weight,
            input_weight,
            coalitions: Mutex::default(),
            partitions: Mutex::default(),
            solves: Mutex::new(0),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Number of DARE solves performed so far.
    pub fn solves(&self) -> usize {
        *self.solves.lock().expect("cache lock")
    }

    pub fn coalition(&self, canal: &CanalModel, members: &[usize]) -> Result<Arc<CoalitionGain>> {
        if self.enabled {
            if let Some(g) = self.coalitions.lock().expect("cache lock").get(members) {
                return Ok(Arc::clone(g));
            }
        }
        let gain = Arc::new(synthesize_coalition(
            canal,
            members,
            self.level_weight,
            self.input_weight,
        )?);
        *self.solves.lock().expect("cache lock") += 1;
        if self.enabled {
            self.coalitions
                .lock()
                .expect("cache lock")
                .insert(members.to_vec(), Arc::clone(&gain));
        }
        Ok(gain)
    }

    pub fn partition(&self, canal: &CanalModel, partition: &Partition) -> Result<Arc<GainSet>> {
        if self.enabled {
            if let Some(g) = self.partitions.lock().expect("cache lock").get(partition) {
                return Ok(Arc::clone(g));
            }
        }
        let blocks = partition
            .blocks()
            .iter()
            .map(|b| self.coalition(canal, b))
            .collect::<Result<Vec<_>>>()?;
        let set = Arc::new(GainSet {
            partition: partition.clone(),
            blocks,
        });
        if self.enabled {
            self.partitions
                .lock()
                .expect("cache lock")
                .insert(partition.clone(), Arc::clone(&set));
        }
        Ok(set)
    }
}

/// Gains for every coalition of `partition`, solved from scratch.
pub fn synthesize(canal: &CanalModel, partition: &Partition, q: f64, r: f64) -> Result<GainSet> {
    let blocks = partition
        .blocks()
        .iter()
        .map(|b| synthesize_coalition(canal, b, q, r).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(GainSet {
        partition: partition.clone(),
        blocks,
    })
}

/// Last published steady state of each subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedSetpoints {
    pub states: Vec<Vector>,
    pub inputs: Vec<f64>,
}

impl PublishedSetpoints {
    /// Bootstrap: each subsystem at rest with its currently measured inflow.
    pub fn at_rest(canal: &CanalModel, inflows: &[f64]) -> Self {
        Self {
            states: canal
                .subsystems
                .iter()
                .zip(inflows)
                .map(|(s, &q)| s.steady_state(q))
                .collect(),
            inputs: vec![0.0; canal.len()],
        }
    }

    /// Records a coalition's setpoint, split per member.
    pub fn publish(&mut self, model: &CoalitionModel, state: &Vector, input: &Vector) {
        for (a, &s) in model.members.iter().enumerate() {
            let n = model.delays[a] + 1;
            self.states[s] = state.rows(model.offsets[a], n).into_owned();
            self.inputs[s] = input[a];
        }
    }
}

/// Boundary outflows implied by the neighbours' published setpoints.
pub fn estimate_cross_effects(model: &CoalitionModel, published: &PublishedSetpoints) -> Vector {
    Vector::from_iterator(
        model.channel_count(),
        model.channels.iter().map(|c| {
            let x = &published.states[c.neighbor];
            (&c.state * x)[0] + c.input[(0, 0)] * published.inputs[c.neighbor]
        }),
    )
}

/// Predicted cost of running under `candidate` from the global estimate
/// `xi_hat`: `Σ_coalitions ζᵀ P ζ + c_ℓ |Λ| T_Λ`.
#[allow(clippy::too_many_arguments)]
pub fn topology_value(
    canal: &CanalModel,
    xi_hat: &Vector,
    candidate: &Topology,
    gains: &GainSet,
    published: &PublishedSetpoints,
    offtakes: &[f64],
    link_cost: f64,
    interval: usize,
) -> Result<f64> {
    let mut value = 0.0;
    for gain in &gains.blocks {
        let model = CoalitionModel::build(canal, &gain.members);
        let omega = estimate_cross_effects(&model, published);
        let rho = Vector::from_iterator(model.m(), model.members.iter().map(|&s| offtakes[s]));
        let (xbar, _) = compute_setpoint(&model, &rho, &omega)?;
        let zeta = model.gather(canal, xi_hat) - xbar;
        value += zeta.dot(&(&gain.p * &zeta));
    }
    Ok(value + network_cost_total(candidate, link_cost, interval))
}

/// Scored candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub topology: Topology,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub topology: Topology,
    pub gains: Arc<GainSet>,
    pub candidates: Vec<Candidate>,
}

/// Inputs to one supervisor decision.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub canal: &'a CanalModel,
    pub xi_hat: &'a Vector,
    pub published: &'a PublishedSetpoints,
    pub offtakes: &'a [f64],
    pub link_cost: f64,
    /// Steps the chosen topology is held, T_Λ.
    pub interval: usize,
}

/// Cheapest topology among `incumbent` and its single-link toggles.
///
/// Ties go to fewer enabled links, then to the lexicographically smallest
/// bit-string.
pub fn select_topology(ctx: &SelectionContext<'_>, incumbent: &Topology, cache: &SynthesisCache) -> Result<Selection> {
    let candidates = candidate_set(incumbent);
    let gains = candidates
        .iter()
        .map(|t| cache.partition(ctx.canal, &partition_of(t, ctx.canal.len())))
        .collect::<Result<Vec<_>>>()?;
    let values = candidates
        .par_iter()
        .zip(gains.par_iter())
        .map(|(t, g)| {
            topology_value(
                ctx.canal,
                ctx.xi_hat,
                t,
                g,
                ctx.published,
                ctx.offtakes,
                ctx.link_cost,
                ctx.interval,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for i in 1..candidates.len() {
        if better(&candidates[i], values[i], &candidates[best], values[best]) {
            best = i;
        }
    }
    Ok(Selection {
        topology: candidates[best].clone(),
        gains: Arc::clone(&gains[best]),
        candidates: candidates
            .into_iter()
            .zip(values)
            .map(|(topology, value)| Candidate { topology, value })
            .collect(),
    })
}

fn better(a: &Topology, va: f64, b: &Topology, vb: f64) -> bool {
    let tol = 1e-12 * (1.0 + va.abs().max(vb.abs()));
    if (va - vb).abs() > tol {
        return va < vb;
    }
    match a.enabled_count().cmp(&b.enabled_count()) {
        std::cmp::Ordering::Equal => a.to_bits() < b.to_bits(),
        o => o.is_lt(),
    }
}
