//! Integrator-delay models of the canal reaches and their coalition assemblies.
//!
//! Subsystem `i` pairs gate `i` with the reach below it. Its state is
//! `[q_i(k-1), …, q_i(k-d_i), e_i(k)]`: the inflow delay line newest-first,
//! then the level error in the backwater section. The input is the inflow
//! increment `Δq_i(k)`. Level dynamics:
//!
//! ```text
//! e_i(k+1) = e_i(k) + T_c/A_s,i · [q_i(k-d_i) - q_{i+1}(k-1) - Δq_{i+1}(k) - p_i(k)]
//! ```
//!
//! The last reach has no controllable downstream gate, so its outflow is the
//! offtake alone. Subsystem indices are 0-based throughout the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::topology::Partition;

/// Head gate discharge capacity (m³/s).
pub const HEAD_CAPACITY: f64 = 157.0;

/// Identified parameters of one reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachParams {
    /// 1-based position along the canal.
    pub index: usize,
    /// Backwater surface area A_s (m²).
    pub backwater_surface: f64,
    /// Transport delay in sample periods.
    pub delay_steps: usize,
    /// Reach length (m); informational.
    #[serde(default)]
    pub length: f64,
    /// Bottom width (m); informational.
    #[serde(default)]
    pub bottom_width: f64,
}

/// The 13 upstream reaches of the Dez west main canal, identified at 80% of
/// the maximum discharge.
pub fn dez_reaches() -> Vec<ReachParams> {
    const TABLE: [(f64, f64, f64, usize); 13] = [
        (6219.0, 12.0, 0.9318, 3),
        (1933.0, 12.0, 1.0952, 1),
        (3718.0, 10.0, 0.8554, 2),
        (3906.0, 10.0, 3.7060, 2),
        (2934.0, 5.0, 1.7095, 2),
        (4670.0, 5.0, 0.7786, 3),
        (3110.0, 5.0, 0.6661, 2),
        (2240.0, 5.0, 0.8904, 1),
        (3405.0, 5.0, 0.8671, 2),
        (3820.0, 5.0, 0.4897, 2),
        (2520.0, 4.0, 0.4032, 2),
        (2874.0, 4.0, 0.3820, 2),
        (2468.0, 5.0, 0.3884, 2),
    ];
    TABLE
        .iter()
        .enumerate()
        .map(|(i, &(length, width, surface, delay))| ReachParams {
            index: i + 1,
            backwater_surface: surface * 1e5,
            delay_steps: delay,
            length,
            bottom_width: width,
        })
        .collect()
}

/// Effect of the downstream neighbour on a subsystem, `w_i = C x_{i+1} + D u_{i+1}`.
///
/// `w_i` is the flow leaving through the downstream gate, `q_{i+1}(k-1) + Δq_{i+1}(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub neighbor: usize,
    /// 1 × n_{i+1} selector of the neighbour's newest inflow.
    pub state: Matrix,
    /// 1 × 1 pass-through of the neighbour's increment.
    pub input: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemModel {
    pub index: usize,
    pub delay: usize,
    /// T_c / A_s (s/m²).
    pub gain: f64,
    pub a: Matrix,
    pub b: Matrix,
    /// Offtake channel.
    pub e: Matrix,
    /// Neighbour-influence channel.
    pub g: Matrix,
    pub downstream: Option<Coupling>,
}

impl SubsystemModel {
    pub fn n(&self) -> usize {
        self.delay + 1
    }

    /// Row/column of the level error inside the subsystem state.
    pub fn level_index(&self) -> usize {
        self.delay
    }

    /// Full-state coupling block `A_{i,i+1} = G_i C` (n_i × n_{i+1}).
    pub fn a_down(&self) -> Option<Matrix> {
        self.downstream.as_ref().map(|c| &self.g * &c.state)
    }

    /// Input coupling block `B_{i,i+1} = G_i D` (n_i × 1).
    pub fn b_down(&self) -> Option<Matrix> {
        self.downstream.as_ref().map(|c| &self.g * &c.input)
    }

    /// Steady state carrying inflow `flow` with zero level error.
    pub fn steady_state(&self, flow: f64) -> Vector {
        let mut x = Vector::from_element(self.n(), flow);
        x[self.delay] = 0.0;
        x
    }
}

/// Builds the subsystem model of one reach.
///
/// `next_delay` is the delay of the downstream reach, or `None` for the last
/// reach of the chain (whose outflow cannot be manipulated).
pub fn build_subsystem(params: &ReachParams, t_c: f64, next_delay: Option<usize>) -> Result<SubsystemModel> {
    let index = params.index.checked_sub(1).ok_or_else(|| Error::InvalidReach {
        index: params.index,
        reason: "reach indices start at 1".into(),
    })?;
    if params.delay_steps < 1 {
        return Err(Error::InvalidReach {
            index: params.index,
            reason: format!("delay must be at least one step, got {}", params.delay_steps),
        });
    }
    if !(params.backwater_surface > 0.0 && params.backwater_surface.is_finite()) {
        return Err(Error::InvalidReach {
            index: params.index,
            reason: format!("backwater surface must be positive, got {}", params.backwater_surface),
        });
    }
    if !(t_c > 0.0) {
        return Err(Error::Config(format!("sample time must be positive, got {t_c}")));
    }
    let d = params.delay_steps;
    let n = d + 1;
    let gain = t_c / params.backwater_surface;

    let mut a = Matrix::zeros(n, n);
    a[(0, 0)] = 1.0;
    for j in 1..d {
        a[(j, j - 1)] = 1.0;
    }
    a[(d, d)] = 1.0;
    a[(d, d - 1)] = gain;

    let mut b = Matrix::zeros(n, 1);
    b[(0, 0)] = 1.0;

    let mut e = Matrix::zeros(n, 1);
    e[(d, 0)] = -gain;
    let g = e.clone();

    let downstream = next_delay.map(|nd| {
        let mut state = Matrix::zeros(1, nd + 1);
        state[(0, 0)] = 1.0;
        Coupling {
            neighbor: index + 1,
            state,
            input: Matrix::from_element(1, 1, 1.0),
        }
    });

    Ok(SubsystemModel {
        index,
        delay: d,
        gain,
        a,
        b,
        e,
        g,
        downstream,
    })
}

/// Subsystems whose state or input enters the dynamics of subsystem `i`.
///
/// Under distant downstream control only the next gate downstream couples
/// back into a reach.
pub fn neighborhood(i: usize, n: usize) -> Vec<usize> {
    if i + 1 < n {
        vec![i + 1]
    } else {
        Vec::new()
    }
}

/// The whole chain of subsystem models.
#[derive(Debug, Clone, PartialEq)]
pub struct CanalModel {
    pub t_c: f64,
    pub subsystems: Vec<SubsystemModel>,
}

impl CanalModel {
    pub fn new(reaches: &[ReachParams], t_c: f64) -> Result<Self> {
        if reaches.is_empty() {
            return Err(Error::Config("canal has no reaches".into()));
        }
        for (pos, r) in reaches.iter().enumerate() {
            if r.index != pos + 1 {
                return Err(Error::InvalidReach {
                    index: r.index,
                    reason: format!("expected contiguous index {}", pos + 1),
                });
            }
        }
        let subsystems = reaches
            .iter()
            .enumerate()
            .map(|(pos, r)| build_subsystem(r, t_c, reaches.get(pos + 1).map(|next| next.delay_steps)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { t_c, subsystems })
    }

    pub fn dez(t_c: f64) -> Self {
        Self::new(&dez_reaches(), t_c).expect("bundled parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    /// Total state dimension.
    pub fn n(&self) -> usize {
        self.subsystems.iter().map(|s| s.n()).sum()
    }

    /// Offsets of each subsystem block inside the global state.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.subsystems
            .iter()
            .map(|s| {
                let o = off;
                off += s.n();
                o
            })
            .collect()
    }

    /// Inflows carried at steady state: `q_i = Σ_{j≥i} p_j`.
    pub fn steady_flows(&self, offtakes: &[f64]) -> Vec<f64> {
        let mut flows = vec![0.0; offtakes.len()];
        let mut acc = 0.0;
        for i in (0..offtakes.len()).rev() {
            acc += offtakes[i];
            flows[i] = acc;
        }
        flows
    }

    /// Global steady state with zero level errors under `offtakes`.
    pub fn steady_state(&self, offtakes: &[f64]) -> Vector {
        let flows = self.steady_flows(offtakes);
        let parts: Vec<Vector> = self
            .subsystems
            .iter()
            .zip(&flows)
            .map(|(s, &q)| s.steady_state(q))
            .collect();
        stack(&parts)
    }

    /// The single coalition containing every subsystem.
    pub fn global(&self) -> CoalitionModel {
        CoalitionModel::build(self, &(0..self.len()).collect::<Vec<_>>())
    }

    /// Splits a global state into per-subsystem blocks.
    pub fn split(&self, x: &Vector) -> Vec<Vector> {
        self.offsets()
            .iter()
            .zip(&self.subsystems)
            .map(|(&o, s)| x.rows(o, s.n()).into_owned())
            .collect()
    }
}

pub(crate) fn stack(parts: &[Vector]) -> Vector {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = Vector::zeros(n);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

/// One external coupling channel of a coalition (one column of Ψ).
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    /// Member whose outflow crosses the coalition boundary.
    pub member: usize,
    /// External subsystem on the other side.
    pub neighbor: usize,
    /// Ξ_ij row acting on the neighbour's state.
    pub state: Matrix,
    /// Υ_ij row acting on the neighbour's input.
    pub input: Matrix,
}

/// Stacked model of a group of subsystems controlled jointly:
/// `ξ⁺ = Ξ ξ + Υ υ + Φ ρ + Ψ ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionModel {
    /// Member subsystems, ascending.
    pub members: Vec<usize>,
    /// Start of each member's block in ξ.
    pub offsets: Vec<usize>,
    pub delays: Vec<usize>,
    pub gains: Vec<f64>,
    pub xi: Matrix,
    pub upsilon: Matrix,
    pub phi: Matrix,
    pub psi: Matrix,
    /// Level-error selector, one row per member.
    pub gamma: Matrix,
    pub channels: Vec<Channel>,
}

impl CoalitionModel {
    /// Assembles the coalition of `members` (sorted internally).
    pub fn build(canal: &CanalModel, members: &[usize]) -> Self {
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        let subs: Vec<&SubsystemModel> = members.iter().map(|&i| &canal.subsystems[i]).collect();
        let mut offsets = Vec::with_capacity(subs.len());
        let mut n = 0;
        for s in &subs {
            offsets.push(n);
            n += s.n();
        }
        let m = members.len();
        let mut xi = Matrix::zeros(n, n);
        let mut upsilon = Matrix::zeros(n, m);
        let mut phi = Matrix::zeros(n, m);
        let mut gamma = Matrix::zeros(m, n);
        let mut channels = Vec::new();
        let mut psi_cols: Vec<Vector> = Vec::new();

        for (a, s) in subs.iter().enumerate() {
            let o = offsets[a];
            let ni = s.n();
            xi.view_mut((o, o), (ni, ni)).copy_from(&s.a);
            upsilon.view_mut((o, a), (ni, 1)).copy_from(&s.b);
            phi.view_mut((o, a), (ni, 1)).copy_from(&s.e);
            gamma[(a, o + s.level_index())] = 1.0;
            if let Some(c) = &s.downstream {
                match members.binary_search(&c.neighbor) {
                    Ok(b) => {
                        let ob = offsets[b];
                        let nb = subs[b].n();
                        let ad = s.a_down().expect("coupled");
                        let bd = s.b_down().expect("coupled");
                        let mut blk = xi.view_mut((o, ob), (ni, nb));
                        blk += &ad;
                        let mut ublk = upsilon.view_mut((o, b), (ni, 1));
                        ublk += &bd;
                    }
                    Err(_) => {
                        let mut col = Vector::zeros(n);
                        col.rows_mut(o, ni).copy_from(&s.g.column(0));
                        psi_cols.push(col);
                        channels.push(Channel {
                            member: s.index,
                            neighbor: c.neighbor,
                            state: c.state.clone(),
                            input: c.input.clone(),
                        });
                    }
                }
            }
        }
        let mut psi = Matrix::zeros(n, psi_cols.len());
        for (c, col) in psi_cols.iter().enumerate() {
            psi.set_column(c, col);
        }
        Self {
            delays: subs.iter().map(|s| s.delay).collect(),
            gains: subs.iter().map(|s| s.gain).collect(),
            members,
            offsets,
            xi,
            upsilon,
            phi,
            psi,
            gamma,
            channels,
        }
    }

    pub fn n(&self) -> usize {
        self.xi.nrows()
    }

    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Positions of the level errors in ξ, one per member.
    pub fn level_rows(&self) -> Vec<usize> {
        self.offsets.iter().zip(&self.delays).map(|(o, d)| o + d).collect()
    }

    /// Positions of every flow component in ξ.
    pub fn flow_rows(&self) -> Vec<usize> {
        self.offsets
            .iter()
            .zip(&self.delays)
            .flat_map(|(&o, &d)| o..o + d)
            .collect()
    }

    /// Positions of each member's newest inflow `q_s(k-1)`.
    pub fn newest_flow_rows(&self) -> Vec<usize> {
        self.offsets.clone()
    }

    /// Position of `member` in the coalition, if present.
    pub fn local(&self, member: usize) -> Option<usize> {
        self.members.binary_search(&member).ok()
    }

    /// Extracts this coalition's ξ from a global state.
    pub fn gather(&self, canal: &CanalModel, global: &Vector) -> Vector {
        let off = canal.offsets();
        let parts: Vec<Vector> = self
            .members
            .iter()
            .map(|&s| global.rows(off[s], canal.subsystems[s].n()).into_owned())
            .collect();
        stack(&parts)
    }

    /// Writes this coalition's ξ into a global state.
    pub fn scatter(&self, canal: &CanalModel, local: &Vector, global: &mut Vector) {
        let off = canal.offsets();
        for (a, &s) in self.members.iter().enumerate() {
            let n = canal.subsystems[s].n();
            global.rows_mut(off[s], n).copy_from(&local.rows(self.offsets[a], n));
        }
    }

    /// Quadratic weight on level errors only.
    pub fn level_weight(&self, weight: f64) -> Matrix {
        let mut q = Matrix::zeros(self.n(), self.n());
        for r in self.level_rows() {
            q[(r, r)] = weight;
        }
        q
    }
}

/// Builds the model of `members`, which must be a block of `partition`.
pub fn build_coalition_model(canal: &CanalModel, members: &[usize], partition: &Partition) -> Result<CoalitionModel> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    if !partition.blocks().contains(&sorted) {
        return Err(Error::NotInPartition { members: sorted });
    }
    Ok(CoalitionModel::build(canal, &sorted))
}
