//! Exhaustive maximum on-time count for a single prefill queue.

use crate::OracleError;
use gpushare::local_sched::QueuedRequest;

pub const MAX_DEADLINE_REQUESTS: usize = 12;
pub const MAX_PERMUTATION_REQUESTS: usize = 8;

fn on_time_in_order(queue: &[QueuedRequest], order: &[usize], now: f64) -> usize {
    let mut t = now;
    let mut count = 0;
    for &i in order {
        t += queue[i].exec_s;
        if t <= queue[i].deadline() {
            count += 1;
        }
    }
    count
}

/// Largest subset whose members all finish by their deadlines when run in
/// earliest-deadline order starting at `now`.
pub fn brute_force_deadline_schedule(queue: &[QueuedRequest], now: f64) -> Result<usize, OracleError> {
    let n = queue.len();
    if n > MAX_DEADLINE_REQUESTS {
        return Err(OracleError::TooLarge(format!("{n} requests > {MAX_DEADLINE_REQUESTS}")));
    }
    let mut by_deadline: Vec<usize> = (0..n).collect();
    by_deadline.sort_by(|&a, &b| queue[a].deadline().total_cmp(&queue[b].deadline()));
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let subset: Vec<usize> = by_deadline.iter().copied().filter(|&i| mask & (1 << i) != 0).collect();
        if on_time_in_order(queue, &subset, now) == size {
            best = size;
        }
    }
    Ok(best)
}

/// Maximum on-time count over every execution order of all requests. A late
/// request still occupies the machine, so this checks the subset oracle
/// from a different angle: late jobs can always be pushed to the end.
pub fn brute_force_permutations(queue: &[QueuedRequest], now: f64) -> Result<usize, OracleError> {
    let n = queue.len();
    if n > MAX_PERMUTATION_REQUESTS {
        return Err(OracleError::TooLarge(format!("{n} requests > {MAX_PERMUTATION_REQUESTS}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = on_time_in_order(queue, &order, now);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            best = best.max(on_time_in_order(queue, &order, now));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, e: f64, d: f64) -> QueuedRequest {
        QueuedRequest { id, model: "m".into(), arrival: 0.0, prompt: 1, output: 1, slo_s: d, exec_s: e }
    }

    #[test]
    fn empty_queue_is_zero() {
        assert_eq!(brute_force_deadline_schedule(&[], 0.0).unwrap(), 0);
        assert_eq!(brute_force_permutations(&[], 0.0).unwrap(), 0);
    }

    #[test]
    fn small_instances() {
        let a = [req(1, 2.0, 3.0), req(2, 2.0, 4.0), req(3, 3.0, 5.0)];
        assert_eq!(brute_force_deadline_schedule(&a, 0.0).unwrap(), 2);
        let b = [req(1, 6.0, 6.0), req(2, 2.0, 7.0), req(3, 2.0, 8.0)];
        assert_eq!(brute_force_deadline_schedule(&b, 0.0).unwrap(), 2);
        assert_eq!(brute_force_permutations(&b, 0.0).unwrap(), 2);
    }

    #[test]
    fn guard_rejects_large_queues() {
        let q: Vec<_> = (0..13).map(|i| req(i, 1.0, 100.0)).collect();
        assert!(matches!(brute_force_deadline_schedule(&q, 0.0), Err(OracleError::TooLarge(_))));
        assert!(brute_force_deadline_schedule(&q[..12], 0.0).is_ok());
    }
}
