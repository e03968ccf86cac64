//! Reference solvers for the min-max link utilization problem.

use minilp::{ComparisonOp, OptimizationDirection, Problem};

use super::Topology;
use crate::error::{Error, Result};
use crate::par;

/// Grids beyond this many joint points are refused.
pub const MAX_GRID_POINTS: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub max_utilization: f64,
    pub splits: Vec<Vec<f64>>,
}

/// All points of the `k`-simplex whose coordinates are multiples of `1 / steps`,
/// in lexicographic order of the integer compositions.
pub fn simplex_grid(k: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in (0..=left).rev() {
            cur.push(v);
            rec(k - 1, left - v, cur, out);
            cur.pop();
        }
    }
    let mut ints = Vec::new();
    rec(k, steps, &mut Vec::with_capacity(k), &mut ints);
    ints.into_iter()
        .map(|c| c.into_iter().map(|v| v as f64 / steps as f64).collect())
        .collect()
}

fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exhaustive search over every pair's split simplex at `resolution`.
///
/// Returns the smallest achievable maximum utilization on the grid together
/// with one split achieving it (the first in enumeration order).
pub fn min_max_oracle(topo: &Topology, demands: &[f64], resolution: f64) -> Result<OracleResult> {
    if demands.len() != topo.n_pairs() {
        return Err(Error::Shape("one demand per pair required".into()));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Config(format!("grid resolution must lie in (0, 1], got {resolution}")));
    }
    let steps = (1.0 / resolution).round() as usize;
    if ((steps as f64) * resolution - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("1 / resolution must be an integer, got {resolution}")));
    }
    let points: f64 = topo
        .pairs
        .iter()
        .map(|p| binomial(steps + p.k() - 1, p.k() - 1))
        .product();
    if points > MAX_GRID_POINTS {
        return Err(Error::Contract(format!(
            "grid search would visit {points:.3e} points (limit {MAX_GRID_POINTS:.0e})"
        )));
    }

    let grids: Vec<Vec<Vec<f64>>> = topo.pairs.iter().map(|p| simplex_grid(p.k(), steps)).collect();
    // Sparse utilization contribution of each candidate split.
    let contrib: Vec<Vec<Vec<(usize, f64)>>> = topo
        .pairs
        .iter()
        .zip(&grids)
        .zip(demands)
        .map(|((pair, grid), &f)| {
            grid.iter()
                .map(|y| {
                    let mut c: Vec<(usize, f64)> = Vec::new();
                    for (path, &share) in pair.paths.iter().zip(y) {
                        for &l in path {
                            let u = share * f / topo.links[l].capacity;
                            match c.iter_mut().find(|(id, _)| *id == l) {
                                Some(e) => e.1 += u,
                                None => c.push((l, u)),
                            }
                        }
                    }
                    c
                })
                .collect()
        })
        .collect();

    let n_links = topo.links.len();
    let first = &contrib[0];
    let partial = par::map_indices(first.len(), |j| {
        let mut load = vec![0.0; n_links];
        let mut cur_max: f64 = 0.0;
        for &(l, u) in &first[j] {
            load[l] += u;
            cur_max = cur_max.max(load[l]);
        }
        let mut choice = vec![j];
        let mut best = (f64::INFINITY, Vec::new());
        search(&contrib, 1, &mut load, cur_max, &mut choice, &mut best);
        best
    });
    let (max_utilization, choice) = partial
        .into_iter()
        .fold((f64::INFINITY, Vec::new()), |acc, cand| if cand.0 < acc.0 { cand } else { acc });
    let splits = choice.iter().enumerate().map(|(i, &j)| grids[i][j].clone()).collect();
    Ok(OracleResult {
        max_utilization,
        splits,
    })
}

fn search(
    contrib: &[Vec<Vec<(usize, f64)>>],
    depth: usize,
    load: &mut [f64],
    cur_max: f64,
    choice: &mut Vec<usize>,
    best: &mut (f64, Vec<usize>),
) {
    if cur_max >= best.0 {
        return;
    }
    if depth == contrib.len() {
        *best = (cur_max, choice.clone());
        return;
    }
    for (j, c) in contrib[depth].iter().enumerate() {
        let mut m = cur_max;
        for &(l, u) in c {
            load[l] += u;
            m = m.max(load[l]);
        }
        choice.push(j);
        search(contrib, depth + 1, load, m, choice, best);
        choice.pop();
        for &(l, u) in c {
            load[l] -= u;
        }
    }
}

/// Exact continuous optimum via linear programming:
/// minimize `t` subject to `sum_k y_ik = 1`, `y >= 0`, `load_l(y) <= t * C_l`.
pub fn min_max_lp(topo: &Topology, demands: &[f64]) -> Result<OracleResult> {
    if demands.len() != topo.n_pairs() {
        return Err(Error::Shape("one demand per pair required".into()));
    }
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let t = pb.add_var(1.0, (0.0, f64::INFINITY));
    let vars: Vec<Vec<minilp::Variable>> = topo
        .pairs
        .iter()
        .map(|p| (0..p.k()).map(|_| pb.add_var(0.0, (0.0, 1.0))).collect())
        .collect();
    for v in &vars {
        let terms: Vec<(minilp::Variable, f64)> = v.iter().map(|&x| (x, 1.0)).collect();
        pb.add_constraint(terms.as_slice(), ComparisonOp::Eq, 1.0);
    }
    for (l, link) in topo.links.iter().enumerate() {
        let mut terms: Vec<(minilp::Variable, f64)> = vec![(t, -link.capacity)];
        for ((pair, v), &f) in topo.pairs.iter().zip(&vars).zip(demands) {
            for (path, &x) in pair.paths.iter().zip(v) {
                let hits = path.iter().filter(|&&id| id == l).count();
                if hits > 0 && f > 0.0 {
                    terms.push((x, f * hits as f64));
                }
            }
        }
        if terms.len() > 1 {
            pb.add_constraint(terms.as_slice(), ComparisonOp::Le, 0.0);
        }
    }
    let sol = pb.solve().map_err(|e| Error::Contract(format!("linear program failed: {e}")))?;
    let splits = vars
        .iter()
        .map(|v| {
            let raw: Vec<f64> = v.iter().map(|&x| sol[x].max(0.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|r| r / s).collect()
        })
        .collect();
    Ok(OracleResult {
        max_utilization: sol.objective(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::compute_link_utilization;

    #[test]
    fn grid_has_expected_size() {
        assert_eq!(simplex_grid(2, 100).len(), 101);
        assert_eq!(simplex_grid(3, 10).len(), 66);
        assert!(simplex_grid(3, 4).iter().all(|y| (y.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_ie_grid_optimum_matches_balance_argument() {
        let t = Topology::builtin("twoIE").unwrap();
        let r = min_max_oracle(&t, &[8.0, 8.0], 0.01).unwrap();
        // total 16 units over three links of capacity 10
        let balanced = 16.0 / 30.0;
        assert!(r.max_utilization >= balanced - 1e-12);
        assert!(r.max_utilization - balanced < 0.01 * 0.8 + 1e-12, "{}", r.max_utilization);
        // best grid point: a = 0.67, b = 0.33 -> L1 = L3 = 0.536
        assert!((r.max_utilization - 0.536).abs() < 1e-9);
        let u = compute_link_utilization(&t, &[8.0, 8.0], &r.splits).unwrap();
        assert!((u.iter().copied().fold(0.0, f64::max) - r.max_utilization).abs() < 1e-12);

        let lp = min_max_lp(&t, &[8.0, 8.0]).unwrap();
        assert!((lp.max_utilization - balanced).abs() < 1e-9);
    }

    #[test]
    fn zero_demand_gives_zero() {
        let t = Topology::builtin("twoIE").unwrap();
        assert_eq!(min_max_oracle(&t, &[0.0, 0.0], 0.01).unwrap().max_utilization, 0.0);
        assert!(min_max_lp(&t, &[0.0, 0.0]).unwrap().max_utilization.abs() < 1e-12);
    }

    #[test]
    fn single_forced_path_gives_demand_over_capacity() {
        let src = r#"
name = "one"
bottlenecks = ["A"]
demand_range = [1.0, 2.0]
[[links]]
id = "A"
capacity = 4.0
[[links]]
id = "B"
capacity = 4.0
[[pairs]]
id = "P"
paths = [["A"], ["A", "B"]]
"#;
        let t = Topology::parse(src).unwrap();
        let r = min_max_oracle(&t, &[3.0], 0.01).unwrap();
        assert!((r.max_utilization - 0.75).abs() < 1e-12);
        assert!((min_max_lp(&t, &[3.0]).unwrap().max_utilization - 0.75).abs() < 1e-9);
    }

    #[test]
    fn huge_grid_is_refused() {
        let t = Topology::builtin("fiveIE").unwrap();
        let r = min_max_oracle(&t, &[5.0; 5], 0.01);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(min_max_oracle(&t, &[5.0; 5], 0.2).is_ok());
    }

    #[test]
    fn lp_lower_bounds_grid_on_random_demands() {
        use rand::{Rng, SeedableRng};
        let mut rng = crate::SimRng::seed_from_u64(5);
        for name in ["twoIE", "threeIE"] {
            let t = Topology::builtin(name).unwrap();
            for _ in 0..20 {
                let d: Vec<f64> = (0..t.n_pairs()).map(|_| rng.random_range(4.0..9.0)).collect();
                let g = min_max_oracle(&t, &d, 0.01).unwrap().max_utilization;
                let lp = min_max_lp(&t, &d).unwrap().max_utilization;
                assert!(lp <= g + 1e-9);
                assert!(g - lp < 0.01, "{name}: grid {g} lp {lp}");
            }
        }
    }
}
