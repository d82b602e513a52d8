//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use casa_core::imd::ImdInstance;

pub const GRID_STEP: f64 = 0.01;

/// Budget rows `Σ_{i∈k, p_i>0} (p_i/p_k) f_i ≤ ε_k`, one per class with
/// source mass, as (members with weights, budget).
fn budgets(inst: &ImdInstance) -> Vec<(Vec<(usize, f64)>, f64)> {
    let k = inst.epsilons.len();
    let mut mass = vec![0.0; k];
    for (i, &c) in inst.class_of.iter().enumerate() {
        mass[c] += inst.p[i];
    }
    (0..k)
        .filter(|&c| mass[c] > 0.0)
        .map(|c| {
            let members = (0..inst.p.len())
                .filter(|&i| inst.class_of[i] == c && inst.p[i] > 0.0)
                .map(|i| (i, inst.p[i] / mass[c]))
                .collect();
            (members, inst.epsilons[c])
        })
        .collect()
}

struct Search<'a> {
    inst: &'a ImdInstance,
    c: Vec<f64>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    cap: Vec<f64>,
    f: Vec<f64>,
    best: f64,
}

impl Search<'_> {
    fn d(&self, i: usize, j: usize) -> f64 {
        self.inst.metric[i][j]
    }

    fn budget_ok(&self, assigned: &[bool]) -> bool {
        self.rows.iter().all(|(members, eps)| {
            members
                .iter()
                .filter(|(i, _)| assigned[*i])
                .map(|(i, w)| w * self.f[*i])
                .sum::<f64>()
                <= eps + 1e-12
        })
    }

    /// Interval for point `i` given the assigned points.
    fn interval(&self, i: usize, assigned: &[bool]) -> (f64, f64) {
        let mut lo: f64 = 0.0;
        let mut hi = self.cap[i];
        for j in 0..self.f.len() {
            if assigned[j] && self.d(i, j).is_finite() {
                lo = lo.max(self.f[j] - self.d(i, j));
                hi = hi.min(self.f[j] + self.d(i, j));
            }
        }
        (lo, hi)
    }

    fn leaf(&mut self, assigned: &mut [bool]) {
        // points with c ≤ 0 sit at their lower envelope, the least feasible value
        for &i in &self.neg {
            let mut lo: f64 = 0.0;
            for &j in &self.pos {
                if self.d(i, j).is_finite() {
                    lo = lo.max(self.f[j] - self.d(i, j));
                }
            }
            self.f[i] = lo;
            assigned[i] = true;
        }
        let ok = self.budget_ok(assigned);
        for &i in &self.neg {
            assigned[i] = false;
        }
        if ok {
            let v: f64 = self.c.iter().zip(&self.f).map(|(c, f)| c * f).sum();
            if v > self.best {
                self.best = v;
            }
        }
    }

    fn recurse(&mut self, depth: usize, assigned: &mut [bool], value: f64) {
        if depth == self.pos.len() {
            self.leaf(assigned);
            return;
        }
        let bound: f64 = value
            + self.pos[depth..]
                .iter()
                .map(|&i| self.c[i] * self.interval(i, assigned).1.max(0.0))
                .sum::<f64>();
        if bound <= self.best {
            return;
        }
        let i = self.pos[depth];
        let (lo, hi) = self.interval(i, assigned);
        if lo > hi + 1e-12 {
            return;
        }
        let first = (lo / GRID_STEP - 1e-9).ceil() as i64;
        let last = (hi / GRID_STEP + 1e-9).floor() as i64;
        // largest values first so good incumbents appear early
        for s in (first.max(0)..=last).rev() {
            let v = s as f64 * GRID_STEP;
            self.f[i] = v;
            assigned[i] = true;
            if self.budget_ok(assigned) {
                self.recurse(depth + 1, assigned, value + self.c[i] * v);
            }
            assigned[i] = false;
        }
    }
}

/// Best objective `Σ (q_i − p_i) f_i` over feasible `f` whose coordinates
/// with positive objective weight lie on the 0.01 grid. The remaining
/// coordinates are set exactly to their smallest feasible value, which is
/// optimal for them. Requires a finite upper bound on every coordinate.
pub fn grid_search_imd(inst: &ImdInstance) -> f64 {
    let m = inst.p.len();
    let c: Vec<f64> = inst.q.iter().zip(&inst.p).map(|(q, p)| q - p).collect();
    let rows = budgets(inst);
    // f_i ≤ f_j + d_ij ≤ budget cap at j + d_ij for any source-supported j
    let mut own = vec![f64::INFINITY; m];
    for (members, eps) in &rows {
        for (i, w) in members {
            own[*i] = own[*i].min(eps / w);
        }
    }
    let cap: Vec<f64> = (0..m)
        .map(|i| (0..m).filter(|&j| inst.p[j] > 0.0).map(|j| own[j] + inst.metric[i][j]).fold(f64::INFINITY, f64::min))
        .collect();
    assert!(cap.iter().all(|v| v.is_finite()), "grid oracle needs bounded coordinates");
    let mut pos: Vec<usize> = (0..m).filter(|&i| c[i] > 0.0).collect();
    pos.sort_by(|&a, &b| c[b].total_cmp(&c[a]));
    let neg = (0..m).filter(|&i| c[i] <= 0.0).collect();
    let mut s = Search {
        inst,
        c,
        pos,
        neg,
        rows,
        cap,
        f: vec![0.0; m],
        best: f64::NEG_INFINITY,
    };
    let mut assigned = vec![false; m];
    s.recurse(0, &mut assigned, 0.0);
    s.best
}

/// `E_q d(z, supp p)` restricted to the class of each target point when
/// `by_class`, straight from the instance arrays.
pub fn target_support_distance(inst: &ImdInstance, by_class: bool) -> f64 {
    let m = inst.p.len();
    (0..m)
        .filter(|&i| inst.q[i] > 0.0)
        .map(|i| {
            let d = (0..m)
                .filter(|&j| inst.p[j] > 0.0 && (!by_class || inst.class_of[j] == inst.class_of[i]))
                .map(|j| inst.metric[i][j])
                .fold(f64::INFINITY, f64::min);
            inst.q[i] * d
        })
        .sum()
}
