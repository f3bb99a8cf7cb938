//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use cmpc_core::coalition_ctrl::Sample;
use cmpc_core::numerics::{Matrix, Vector};
use cmpc_core::simulator::Plant;
use cmpc_core::CanalModel;

/// Stabilizing DARE solution by the structure-preserving doubling algorithm.
pub fn sda_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Matrix {
    let n = a.nrows();
    let eye = Matrix::identity(n, n);
    let rinv = r.clone().try_inverse().expect("R invertible");
    let mut ak = a.clone();
    let mut gk = b * rinv * b.transpose();
    let mut hk = q.clone();
    for _ in 0..200 {
        let w = (&eye + &gk * &hk).try_inverse().expect("I + GH invertible");
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let step = (&h_next - &hk).amax();
        let scale = h_next.amax();
        ak = a_next;
        gk = (&g_next + g_next.transpose()) * 0.5;
        hk = (&h_next + h_next.transpose()) * 0.5;
        if step <= 1e-15 * scale {
            break;
        }
    }
    hk
}

/// `K = −(R + BᵀPB)⁻¹BᵀPA` by explicit inversion.
pub fn lqr_from(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Matrix {
    let s = r + b.transpose() * p * b;
    -(s.try_inverse().expect("invertible") * b.transpose() * p * a)
}

/// Result of brute-force enumeration.
pub struct BruteQp {
    pub x: Vector,
    pub objective: f64,
}

/// Minimizes `½xᵀHx + fᵀx` s.t. `Ax ≤ b` by trying every active set.
pub fn brute_force_qp(h: &Matrix, f: &Vector, a: &Matrix, b: &Vector) -> Option<BruteQp> {
    let n = f.len();
    let m = b.len();
    let mut best: Option<BruteQp> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = Matrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = Vector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (j, &i) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = a[(i, c)];
                kkt[(c, n + j)] = a[(i, c)];
            }
            rhs[n + j] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| (a.row(i) * &x)[0] <= b[i] + 1e-9);
        let dual_ok = (0..k).all(|j| sol[n + j] >= -1e-9);
        if feasible && dual_ok {
            let objective = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
            if best.as_ref().is_none_or(|bq| objective < bq.objective) {
                best = Some(BruteQp { x, objective });
            }
        }
    }
    best
}

/// Connected components of the chain over `agents` by union-find.
pub fn union_find_blocks(links: &[bool], agents: usize) -> Vec<Vec<usize>> {
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let mut parent: Vec<usize> = (0..agents).collect();
    for (i, &on) in links.iter().enumerate() {
        if on {
            let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for v in 0..agents {
        let r = find(&mut parent, v);
        blocks.entry(r).or_default().push(v);
    }
    blocks.into_values().collect()
}

/// What every agent measures on `plant` at the current step.
pub fn sample_of(plant: &Plant, canal: &CanalModel, offtakes: &[f64], inputs: &[f64]) -> Sample {
    Sample {
        levels: plant.levels().to_vec(),
        flow_lines: canal
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| plant.flow_line(i, s.delay))
            .collect(),
        offtakes: offtakes.to_vec(),
        inputs: inputs.to_vec(),
    }
}
