//! Exhaustive min-max KV pressure placement.

use crate::OracleError;
use gpushare::global_sched::{kvpr, tp_decompose, PlacementInput};
use serde::Serialize;
use std::collections::BTreeMap;

pub const MAX_PLACEMENT_ASSIGNMENTS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalPlacement {
    pub max_kvpr: f64,
    pub assignment: BTreeMap<String, Vec<usize>>,
}

/// Try every assignment of parts to GPUs (sibling parts on distinct GPUs,
/// weights strictly below capacity) and return one minimizing the largest
/// per-GPU pressure. `None` when nothing is feasible.
pub fn brute_force_placement(models: &[PlacementInput], capacities: &[u64]) -> Result<Option<OptimalPlacement>, OracleError> {
    let parts: Vec<_> = models.iter().flat_map(tp_decompose).collect();
    let n = capacities.len() as u64;
    let total = (0..parts.len()).try_fold(1u64, |acc, _| acc.checked_mul(n).filter(|&v| v <= MAX_PLACEMENT_ASSIGNMENTS));
    if total.is_none() {
        return Err(OracleError::TooLarge(format!("{n}^{} assignments > {MAX_PLACEMENT_ASSIGNMENTS}", parts.len())));
    }
    if n == 0 {
        return Ok(None);
    }
    let total = total.expect("checked");
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut choice = vec![0usize; parts.len()];
    for code in 0..total {
        let mut c = code;
        for slot in choice.iter_mut() {
            *slot = (c % n) as usize;
            c /= n;
        }
        let mut shared: Vec<i128> = capacities.iter().map(|&c| i128::from(c)).collect();
        let mut weighted = vec![0.0f64; capacities.len()];
        let mut ok = true;
        for (i, p) in parts.iter().enumerate() {
            let g = choice[i];
            if parts[..i].iter().zip(&choice).any(|(q, &h)| q.model == p.model && h == g) {
                ok = false;
                break;
            }
            shared[g] -= i128::from(p.weight_bytes);
            weighted[g] += p.priority();
        }
        if !ok || shared.iter().any(|&s| s <= 0) {
            continue;
        }
        let worst = shared
            .iter()
            .zip(&weighted)
            .map(|(&s, &w)| kvpr(w, s).expect("positive shared memory"))
            .fold(0.0, f64::max);
        if best.as_ref().map_or(true, |(b, _)| worst < *b) {
            best = Some((worst, choice.clone()));
        }
    }
    Ok(best.map(|(max_kvpr, choice)| {
        let mut assignment: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (p, g) in parts.iter().zip(choice) {
            assignment.entry(p.model.clone()).or_default().push(g);
        }
        OptimalPlacement { max_kvpr, assignment }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1_000_000_000;

    #[test]
    fn single_model_single_gpu() {
        let m = [PlacementInput::new("a", 2.0, 1.0, 10 * GB)];
        let opt = brute_force_placement(&m, &[40 * GB]).unwrap().unwrap();
        assert_eq!(opt.assignment["a"], vec![0]);
        assert!((opt.max_kvpr - 2.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn four_models_two_gpus_matches_or_beats_greedy() {
        let m: Vec<_> = [("a", 8.0), ("b", 4.0), ("c", 2.0), ("d", 1.0)]
            .iter()
            .map(|&(id, r)| PlacementInput::new(id, r, 1.0, 10 * GB))
            .collect();
        let opt = brute_force_placement(&m, &[40 * GB, 40 * GB]).unwrap().unwrap();
        assert!(opt.max_kvpr <= 0.45 + 1e-12);
        assert!((opt.max_kvpr - 0.45).abs() < 1e-12);
    }

    #[test]
    fn zero_rates_give_zero_pressure() {
        let m = [PlacementInput::new("a", 0.0, 1.0, GB), PlacementInput::new("b", 0.0, 1.0, GB)];
        assert_eq!(brute_force_placement(&m, &[4 * GB, 4 * GB]).unwrap().unwrap().max_kvpr, 0.0);
    }

    #[test]
    fn guard_and_infeasible() {
        let many: Vec<_> = (0..21).map(|i| PlacementInput::new(format!("m{i}"), 1.0, 1.0, GB)).collect();
        assert!(brute_force_placement(&many, &[100 * GB; 2]).is_err());
        let big = [PlacementInput::new("a", 1.0, 1.0, 50 * GB)];
        assert_eq!(brute_force_placement(&big, &[40 * GB]).unwrap(), None);
    }

    #[test]
    fn tp_parts_use_distinct_gpus() {
        let m = [PlacementInput::new("a", 1.0, 1.0, 20 * GB).with_tp(2)];
        let opt = brute_force_placement(&m, &[40 * GB, 40 * GB]).unwrap().unwrap();
        let mut g = opt.assignment["a"].clone();
        g.sort_unstable();
        assert_eq!(g, vec![0, 1]);
    }
}
