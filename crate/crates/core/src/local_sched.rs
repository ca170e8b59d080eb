//! Per-GPU request admission: pick the largest set of queued prefills that
//! can all meet their TTFT deadlines (Moore-Hodgson), then hand requests to
//! engines only when they can start right away.

use serde::Serialize;

/// A request waiting in a GPU's shared queue.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueuedRequest {
    pub id: u64,
    pub model: String,
    /// Arrival time, seconds.
    pub arrival: f64,
    pub prompt: u32,
    pub output: u32,
    /// TTFT SLO, seconds.
    pub slo_s: f64,
    /// Estimated prefill time `p / c`, seconds.
    pub exec_s: f64,
}

impl QueuedRequest {
    pub fn deadline(&self) -> f64 {
        self.arrival + self.slo_s
    }
}

/// Indices into the scheduled queue: the on-time set in deadline order and
/// the deferred remainder in arrival order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScheduleDecision {
    pub start: f64,
    pub admit: Vec<usize>,
    pub deferred: Vec<usize>,
}

impl ScheduleDecision {
    pub fn on_time(&self) -> usize {
        self.admit.len()
    }
    /// Admitted first, then deferred.
    pub fn dispatch_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.admit.iter().chain(&self.deferred).copied()
    }
}

fn by_deadline(a: &QueuedRequest, b: &QueuedRequest) -> std::cmp::Ordering {
    a.deadline()
        .total_cmp(&b.deadline())
        .then(a.arrival.total_cmp(&b.arrival))
        .then(a.id.cmp(&b.id))
}

/// Maximize the number of requests whose prefill finishes by its deadline
/// when prefills run back to back from `start`. Requests are taken in
/// deadline order; whenever the newest one would finish late, the admitted
/// request with the longest prefill (later deadline, then larger id on
/// ties) is moved to the deferred list.
pub fn moore_hodgson(queue: &[QueuedRequest], start: f64) -> ScheduleDecision {
    let mut order: Vec<usize> = (0..queue.len()).collect();
    order.sort_by(|&a, &b| by_deadline(&queue[a], &queue[b]));
    let mut admit: Vec<usize> = Vec::with_capacity(queue.len());
    let mut deferred = Vec::new();
    let mut current = start;
    for i in order {
        admit.push(i);
        current += queue[i].exec_s;
        if current > queue[i].deadline() {
            let (pos, &victim) = admit
                .iter()
                .enumerate()
                .max_by(|(_, &a), (_, &b)| {
                    let (ra, rb) = (&queue[a], &queue[b]);
                    ra.exec_s
                        .total_cmp(&rb.exec_s)
                        .then(ra.deadline().total_cmp(&rb.deadline()))
                        .then(ra.id.cmp(&rb.id))
                })
                .expect("just pushed");
            admit.remove(pos);
            current -= queue[victim].exec_s;
            deferred.push(victim);
        }
    }
    deferred.sort_by(|&a, &b| {
        queue[a].arrival.total_cmp(&queue[b].arrival).then(queue[a].id.cmp(&queue[b].id))
    });
    ScheduleDecision { start, admit, deferred }
}

/// Arrival order, for schedulers without deadline awareness.
pub fn fifo_order(queue: &[QueuedRequest], start: f64) -> ScheduleDecision {
    let mut admit: Vec<usize> = (0..queue.len()).collect();
    admit.sort_by(|&a, &b| queue[a].arrival.total_cmp(&queue[b].arrival).then(queue[a].id.cmp(&queue[b].id)));
    ScheduleDecision { start, admit, deferred: Vec::new() }
}

/// Finish times of the admitted requests when run back to back.
pub fn simulated_finish_times(queue: &[QueuedRequest], decision: &ScheduleDecision) -> Vec<f64> {
    let mut t = decision.start;
    decision
        .admit
        .iter()
        .map(|&i| {
            t += queue[i].exec_s;
            t
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchOutcome {
    Dispatched,
    /// The engine cannot start this request now; skip its later requests.
    Blocked,
    /// The model is not serving (evicted or loading); keep the request.
    Held,
}

/// Walk the decision in dispatch order, offering each request to `offer`.
/// Once a model's engine reports `Blocked` or `Held`, its remaining
/// requests are not offered in this round. Returns dispatched indices in
/// the order they were handed out.
pub fn dispatch<F>(queue: &[QueuedRequest], decision: &ScheduleDecision, mut offer: F) -> Vec<usize>
where
    F: FnMut(&QueuedRequest) -> DispatchOutcome,
{
    let mut stopped: Vec<&str> = Vec::new();
    let mut sent = Vec::new();
    for i in decision.dispatch_order() {
        let r = &queue[i];
        if stopped.contains(&r.model.as_str()) {
            continue;
        }
        match offer(r) {
            DispatchOutcome::Dispatched => sent.push(i),
            DispatchOutcome::Blocked | DispatchOutcome::Held => stopped.push(&r.model),
        }
    }
    sent
}

/// Drop dispatched entries from the queue, keeping everything else (the
/// deferred requests included) for the next invocation in arrival order.
pub fn requeue_deferred(queue: &mut Vec<QueuedRequest>, dispatched: &[usize]) {
    let mut gone = dispatched.to_vec();
    gone.sort_unstable();
    let mut idx = 0;
    queue.retain(|_| {
        let keep = gone.binary_search(&idx).is_err();
        idx += 1;
        keep
    });
    queue.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn req(id: u64, arrival: f64, exec_s: f64, deadline: f64) -> QueuedRequest {
        QueuedRequest {
            id,
            model: "m".into(),
            arrival,
            prompt: 100,
            output: 1,
            slo_s: deadline - arrival,
            exec_s,
        }
    }

    fn ids(q: &[QueuedRequest], idx: &[usize]) -> Vec<u64> {
        idx.iter().map(|&i| q[i].id).collect()
    }

    #[test]
    fn slack_admits_everything_in_deadline_order() {
        let q = vec![req(1, 0.0, 1.0, 10.0), req(2, 0.0, 1.0, 5.0), req(3, 0.0, 1.0, 7.0)];
        let d = moore_hodgson(&q, 0.0);
        assert_eq!(ids(&q, &d.admit), vec![2, 3, 1]);
        assert!(d.deferred.is_empty());
    }

    #[test]
    fn three_request_example_defers_the_last() {
        let q = vec![req(1, 0.0, 2.0, 3.0), req(2, 0.0, 2.0, 4.0), req(3, 0.0, 3.0, 5.0)];
        let d = moore_hodgson(&q, 0.0);
        assert_eq!(ids(&q, &d.admit), vec![1, 2]);
        assert_eq!(ids(&q, &d.deferred), vec![3]);
    }

    #[test]
    fn long_job_is_the_removal_victim() {
        let q = vec![req(1, 0.0, 6.0, 6.0), req(2, 0.0, 2.0, 7.0), req(3, 0.0, 2.0, 8.0)];
        let d = moore_hodgson(&q, 0.0);
        assert_eq!(ids(&q, &d.admit), vec![2, 3]);
        assert_eq!(ids(&q, &d.deferred), vec![1]);
        // plain deadline order finishes only the first job on time
        let edf = fifo_order(&q, 0.0);
        let finish = simulated_finish_times(&q, &edf);
        let on_time = edf.admit.iter().zip(&finish).filter(|(&i, &f)| f <= q[i].deadline()).count();
        assert_eq!(on_time, 1);
    }

    #[test]
    fn admitted_requests_meet_deadlines() {
        let q = vec![req(1, 0.0, 2.0, 3.0), req(2, 0.5, 1.0, 2.5), req(3, 1.0, 4.0, 9.0), req(4, 1.0, 3.0, 4.0)];
        let d = moore_hodgson(&q, 0.5);
        for (&i, &f) in d.admit.iter().zip(&simulated_finish_times(&q, &d)) {
            assert!(f <= q[i].deadline() + 1e-12);
        }
        assert_eq!(d.admit.len() + d.deferred.len(), q.len());
    }

    #[test]
    fn dispatch_stops_per_model_and_keeps_order() {
        let mut q = vec![req(1, 0.0, 1.0, 2.0), req(2, 0.0, 1.0, 3.0), req(3, 0.0, 1.0, 4.0), req(4, 0.0, 1.0, 5.0)];
        q[1].model = "b".into();
        q[3].model = "b".into();
        let d = moore_hodgson(&q, 0.0);
        // model "m" takes one request, "b" takes everything
        let mut m_taken = 0;
        let sent = dispatch(&q, &d, |r| {
            if r.model == "m" {
                m_taken += 1;
                if m_taken > 1 {
                    return DispatchOutcome::Blocked;
                }
            }
            DispatchOutcome::Dispatched
        });
        assert_eq!(ids(&q, &sent), vec![1, 2, 4]);
        requeue_deferred(&mut q, &sent);
        assert_eq!(q.iter().map(|r| r.id).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn zero_headroom_dispatches_nothing() {
        let q = vec![req(1, 0.0, 1.0, 2.0), req(2, 0.0, 1.0, 3.0)];
        let d = moore_hodgson(&q, 0.0);
        assert!(dispatch(&q, &d, |_| DispatchOutcome::Blocked).is_empty());
    }

    #[test]
    fn expired_requests_stay_queued() {
        let mut q = vec![req(1, 0.0, 1.0, 0.5), req(2, 0.0, 1.0, 3.0)];
        let d = moore_hodgson(&q, 1.0);
        assert_eq!(ids(&q, &d.admit), vec![2]);
        assert_eq!(ids(&q, &d.deferred), vec![1]);
        requeue_deferred(&mut q, &[]);
        assert_eq!(q.len(), 2);
        // eventually dispatched after the admitted set
        let sent = dispatch(&q, &moore_hodgson(&q, 1.0), |_| DispatchOutcome::Dispatched);
        assert_eq!(ids(&q, &sent), vec![2, 1]);
    }
}
