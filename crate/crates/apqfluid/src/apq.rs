//! Discrete-event simulator of the two-class accumulating priority queue.
//!
//! Customers of class i arrive as a Poisson stream with rate `lambda_i` and
//! accumulate priority linearly at rate `b_i` from their arrival instant.
//! At each departure the waiting customer with the highest accumulated
//! priority (any class) is served next; the server never idles while work
//! is waiting.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stochastics::{exp_sample, ph_mean, ph_sample, PhaseType, RandomStream};

#[derive(Debug, Error)]
pub enum ApqError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unstable parameters: rho = {rho} >= 1 (pass allow_unstable to override)")]
    Unstable { rho: f64 },
    #[error("arrival script exhausted after {served} departures (requested {requested})")]
    ScriptExhausted { served: usize, requested: usize },
}

/// Parameters of the accumulating priority queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApqParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub b1: f64,
    pub b2: f64,
    pub service: PhaseType,
}

impl ApqParams {
    pub fn validate(&self) -> Result<(), ApqError> {
        if !(self.lambda1 > 0.0) || !(self.lambda2 > 0.0) {
            return Err(ApqError::InvalidParams(format!(
                "arrival rates must be positive (lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.b1 > self.b2 && self.b2 > 0.0) {
            return Err(ApqError::InvalidParams(format!(
                "accumulation rates must satisfy b1 > b2 > 0 (b1={}, b2={})",
                self.b1, self.b2
            )));
        }
        Ok(())
    }

    /// Offered load `(lambda1 + lambda2) * E[service]`.
    pub fn rho(&self) -> f64 {
        (self.lambda1 + self.lambda2) * ph_mean(&self.service)
    }

    fn b_of(&self, cls: u8) -> f64 {
        if cls == 1 {
            self.b1
        } else {
            self.b2
        }
    }
}

/// Per-customer record; `start`/`depart` stay `None` for customers that
/// were still waiting when the simulation stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomerRecord {
    /// 1-based arrival index.
    pub n: usize,
    /// Arrival time.
    pub gamma: f64,
    /// Customer class, 1 or 2.
    pub cls: u8,
    pub service_time: f64,
    pub start: Option<f64>,
    pub depart: Option<f64>,
}

/// Complete trace of one simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventLog {
    /// All arrivals in arrival order; `customers[n-1].n == n`.
    pub customers: Vec<CustomerRecord>,
    /// `service_order[m-1]` is the arrival index of the m-th served customer.
    pub service_order: Vec<usize>,
    /// Times at which an idle server admitted an arriving customer.
    pub busy_period_starts: Vec<f64>,
}

impl EventLog {
    pub fn customer(&self, n: usize) -> &CustomerRecord {
        &self.customers[n - 1]
    }

    pub fn n_served(&self) -> usize {
        self.service_order.len()
    }
}

/// Accumulated priority of `rec` at time `t`: `b_cls * max(0, t - gamma)`.
pub fn priority_of(rec: &CustomerRecord, params: &ApqParams, t: f64) -> f64 {
    params.b_of(rec.cls) * (t - rec.gamma).max(0.0)
}

/// The arrival index served next at time `t`: among arrived, unserved
/// customers the one with the highest accumulated priority, ties broken by
/// the smallest arrival index. Within each class priorities are ordered by
/// arrival time, so only the FIFO head of each class needs comparing.
pub fn next_customer(log: &EventLog, served: &[bool], params: &ApqParams, t: f64) -> Option<usize> {
    let head = |cls: u8| {
        log.customers
            .iter()
            .find(|c| c.cls == cls && c.gamma <= t && !served[c.n - 1])
            .map(|c| c.n)
    };
    match (head(1), head(2)) {
        (None, None) => None,
        (Some(n), None) | (None, Some(n)) => Some(n),
        (Some(n1), Some(n2)) => {
            let v1 = priority_of(log.customer(n1), params, t);
            let v2 = priority_of(log.customer(n2), params, t);
            if v1 > v2 || (v1 == v2 && n1 < n2) {
                Some(n1)
            } else {
                Some(n2)
            }
        }
    }
}

/// A deterministic arrival for golden tests: `(time, class, service_time)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedArrival {
    pub time: f64,
    pub cls: u8,
    pub service_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Run even when rho >= 1 (exploratory use).
    pub allow_unstable: bool,
    /// Replace the Poisson streams with a fixed arrival list.
    pub script: Option<Vec<ScriptedArrival>>,
}

/// Simulates until `n_departures` customers have been served.
pub fn simulate_apq(
    params: &ApqParams,
    n_departures: usize,
    stream: &mut RandomStream,
) -> Result<EventLog, ApqError> {
    simulate_apq_with(params, n_departures, stream, &SimulateOptions::default())
}

pub fn simulate_apq_with(
    params: &ApqParams,
    n_departures: usize,
    stream: &mut RandomStream,
    opts: &SimulateOptions,
) -> Result<EventLog, ApqError> {
    params.validate()?;
    if n_departures == 0 {
        return Err(ApqError::InvalidParams("n_departures must be >= 1".into()));
    }
    let rho = params.rho();
    if rho >= 1.0 && !opts.allow_unstable {
        return Err(ApqError::Unstable { rho });
    }

    let mut arrivals = ArrivalSource::new(params, stream, opts.script.clone());
    let mut customers: Vec<CustomerRecord> = Vec::new();
    let mut service_order: Vec<usize> = Vec::with_capacity(n_departures);
    let mut busy_period_starts: Vec<f64> = Vec::new();
    // Waiting arrival indices per class, in arrival (= priority) order.
    let mut queue: [VecDeque<usize>; 2] = [VecDeque::new(), VecDeque::new()];
    // Currently served customer and its departure time.
    let mut in_service: Option<(usize, f64)> = None;

    while service_order.len() < n_departures {
        match in_service {
            None => {
                debug_assert!(queue[0].is_empty() && queue[1].is_empty());
                let rec = arrivals.next(customers.len() + 1).ok_or(ApqError::ScriptExhausted {
                    served: service_order.len(),
                    requested: n_departures,
                })?;
                let n = rec.n;
                let gamma = rec.gamma;
                let service_time = rec.service_time;
                customers.push(rec);
                busy_period_starts.push(gamma);
                start_service(&mut customers, &mut service_order, n, gamma, service_time);
                in_service = Some((n, gamma + service_time));
            }
            Some((_, depart)) => {
                // Admit every arrival up to the departure epoch.
                loop {
                    match arrivals.peek_time() {
                        Some(t) if t <= depart => {
                            let rec = arrivals.next(customers.len() + 1).unwrap();
                            queue[(rec.cls - 1) as usize].push_back(rec.n);
                            customers.push(rec);
                        }
                        _ => break,
                    }
                }
                // Departure: serve the highest-priority head, if any.
                let pick = pick_head(&queue, &customers, params, depart);
                match pick {
                    Some((cls_idx, n)) => {
                        queue[cls_idx].pop_front();
                        let service_time = customers[n - 1].service_time;
                        start_service(&mut customers, &mut service_order, n, depart, service_time);
                        in_service = Some((n, depart + service_time));
                    }
                    None => in_service = None,
                }
            }
        }
    }

    // Drop the unconsumed lookahead arrival, if any, that lies beyond the
    // final departure; everything else stays in the log.
    Ok(EventLog {
        customers,
        service_order,
        busy_period_starts,
    })
}

fn start_service(
    customers: &mut [CustomerRecord],
    service_order: &mut Vec<usize>,
    n: usize,
    at: f64,
    service_time: f64,
) {
    let rec = &mut customers[n - 1];
    rec.start = Some(at);
    rec.depart = Some(at + service_time);
    service_order.push(n);
}

fn pick_head(
    queue: &[VecDeque<usize>; 2],
    customers: &[CustomerRecord],
    params: &ApqParams,
    t: f64,
) -> Option<(usize, usize)> {
    let h1 = queue[0].front().copied();
    let h2 = queue[1].front().copied();
    match (h1, h2) {
        (None, None) => None,
        (Some(n), None) => Some((0, n)),
        (None, Some(n)) => Some((1, n)),
        (Some(n1), Some(n2)) => {
            let v1 = priority_of(&customers[n1 - 1], params, t);
            let v2 = priority_of(&customers[n2 - 1], params, t);
            // Ties (probability 0 in exact arithmetic) go to the smaller
            // arrival index.
            if v1 > v2 || (v1 == v2 && n1 < n2) {
                Some((0, n1))
            } else {
                Some((1, n2))
            }
        }
    }
}

/// Number of customers left behind by each departure, in departure order.
pub fn numbers_in_system_at_departures(log: &EventLog) -> Vec<usize> {
    let mut departures: Vec<(f64, usize)> = log
        .service_order
        .iter()
        .map(|&n| (log.customer(n).depart.unwrap(), n))
        .collect();
    departures.sort_by(|a, b| a.0.total_cmp(&b.0));
    departures
        .iter()
        .map(|&(t, n)| {
            log.customers
                .iter()
                .filter(|c| c.n != n && c.gamma <= t && c.depart.map_or(true, |d| d > t))
                .count()
        })
        .collect()
}

/// Fraction of departures that leave the system empty.
pub fn fraction_empty_at_departures(log: &EventLog) -> f64 {
    let counts = numbers_in_system_at_departures(log);
    counts.iter().filter(|&&k| k == 0).count() as f64 / counts.len() as f64
}

/// Merged Poisson arrival stream or a scripted replay.
struct ArrivalSource<'a> {
    script: Option<std::vec::IntoIter<ScriptedArrival>>,
    pending: Option<ScriptedArrival>,
    params: &'a ApqParams,
    stream: &'a mut RandomStream,
    clock: f64,
}

impl<'a> ArrivalSource<'a> {
    fn new(
        params: &'a ApqParams,
        stream: &'a mut RandomStream,
        script: Option<Vec<ScriptedArrival>>,
    ) -> Self {
        let mut src = Self {
            script: script.map(|s| s.into_iter()),
            pending: None,
            params,
            stream,
            clock: 0.0,
        };
        src.advance();
        src
    }

    fn advance(&mut self) {
        self.pending = match &mut self.script {
            Some(iter) => iter.next(),
            None => {
                let total = self.params.lambda1 + self.params.lambda2;
                self.clock += exp_sample(total, self.stream);
                let cls = if self.stream.random::<f64>() * total < self.params.lambda1 {
                    1
                } else {
                    2
                };
                let service_time = ph_sample(&self.params.service, self.stream);
                Some(ScriptedArrival {
                    time: self.clock,
                    cls,
                    service_time,
                })
            }
        };
    }

    fn peek_time(&self) -> Option<f64> {
        self.pending.as_ref().map(|a| a.time)
    }

    fn next(&mut self, n: usize) -> Option<CustomerRecord> {
        let a = self.pending.take()?;
        self.advance();
        Some(CustomerRecord {
            n,
            gamma: a.time,
            cls: a.cls,
            service_time: a.service_time,
            start: None,
            depart: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::exp_ph;

    fn params(lambda1: f64, lambda2: f64, b1: f64, b2: f64, mu: f64) -> ApqParams {
        ApqParams {
            lambda1,
            lambda2,
            b1,
            b2,
            service: exp_ph(mu).unwrap(),
        }
    }

    fn rec(n: usize, gamma: f64, cls: u8) -> CustomerRecord {
        CustomerRecord {
            n,
            gamma,
            cls,
            service_time: 1.0,
            start: None,
            depart: None,
        }
    }

    #[test]
    fn priority_substitution() {
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        assert_eq!(priority_of(&rec(1, 1.0, 1), &p, 3.0), 4.0);
        assert_eq!(priority_of(&rec(1, 5.0, 1), &p, 3.0), 0.0);
        assert!((priority_of(&rec(1, 0.0, 2), &p, 1.9) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn next_customer_prefers_higher_priority() {
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let log = EventLog {
            customers: vec![rec(1, 0.0, 2), rec(2, 1.0, 1)],
            service_order: vec![],
            busy_period_starts: vec![],
        };
        // At t=2: class-1 priority 2*(2-1) = 2.0 beats class-2 priority
        // 1*(2-0.1) = 1.9.
        let log2 = EventLog {
            customers: vec![rec(1, 0.1, 2), rec(2, 1.0, 1)],
            service_order: vec![],
            busy_period_starts: vec![],
        };
        assert_eq!(next_customer(&log2, &[false, false], &p, 2.0), Some(2));
        // Single waiting customer.
        assert_eq!(next_customer(&log, &[true, false], &p, 2.0), Some(2));
        // Empty queue.
        assert_eq!(next_customer(&log, &[true, true], &p, 2.0), None);
        // Nobody has arrived yet.
        assert_eq!(next_customer(&log, &[false, false], &p, -1.0), None);
    }

    #[test]
    fn scripted_single_customer() {
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let opts = SimulateOptions {
            allow_unstable: false,
            script: Some(vec![ScriptedArrival {
                time: 1.0,
                cls: 1,
                service_time: 2.0,
            }]),
        };
        let mut rng = RandomStream::new(0, 0);
        let log = simulate_apq_with(&p, 1, &mut rng, &opts).unwrap();
        assert_eq!(log.service_order, vec![1]);
        let c = log.customer(1);
        assert_eq!(c.start, Some(1.0));
        assert_eq!(c.depart, Some(3.0));
        assert_eq!(log.busy_period_starts, vec![1.0]);
    }

    #[test]
    fn scripted_priority_overtaking() {
        // Class-2 at 0 (service 2), class-2 at 0.1, class-1 at 1.0.
        // At D=2 the class-1 customer has priority 2*(2-1)=2.0, beating the
        // waiting class-2's 1*(2-0.1)=1.9, so service order is [1, 3, 2].
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let opts = SimulateOptions {
            allow_unstable: false,
            script: Some(vec![
                ScriptedArrival { time: 0.0, cls: 2, service_time: 2.0 },
                ScriptedArrival { time: 0.1, cls: 2, service_time: 1.0 },
                ScriptedArrival { time: 1.0, cls: 1, service_time: 1.0 },
            ]),
        };
        let mut rng = RandomStream::new(0, 0);
        let log = simulate_apq_with(&p, 3, &mut rng, &opts).unwrap();
        assert_eq!(log.service_order, vec![1, 3, 2]);
    }

    #[test]
    fn unstable_params_refused() {
        let p = params(1.0, 1.0, 2.0, 1.0, 1.0);
        let mut rng = RandomStream::new(0, 0);
        assert!(matches!(
            simulate_apq(&p, 10, &mut rng),
            Err(ApqError::Unstable { .. })
        ));
        let opts = SimulateOptions {
            allow_unstable: true,
            script: None,
        };
        assert!(simulate_apq_with(&p, 10, &mut rng, &opts).is_ok());
    }

    #[test]
    fn bad_rates_refused() {
        assert!(params(0.0, 0.2, 2.0, 1.0, 1.0).validate().is_err());
        assert!(params(0.3, 0.2, 1.0, 1.0, 1.0).validate().is_err());
        assert!(params(0.3, 0.2, 1.0, 2.0, 1.0).validate().is_err());
    }

    fn check_log_invariants(log: &EventLog, p: &ApqParams) {
        // Arrival times strictly increasing, depart = start + service.
        for w in log.customers.windows(2) {
            assert!(w[0].gamma < w[1].gamma);
        }
        for c in &log.customers {
            if let (Some(s), Some(d)) = (c.start, c.depart) {
                assert!(c.gamma <= s);
                assert_eq!(d, s + c.service_time);
            }
        }
        // service_order is a permutation prefix with all served complete.
        let mut seen = vec![false; log.customers.len()];
        for &n in &log.service_order {
            assert!(!seen[n - 1], "index {n} served twice");
            seen[n - 1] = true;
            assert!(log.customer(n).depart.is_some());
        }
        // Non-idling starts and disjoint service intervals.
        for m in 1..log.service_order.len() {
            let prev = log.customer(log.service_order[m - 1]);
            let cur = log.customer(log.service_order[m]);
            let expected = prev.depart.unwrap().max(cur.gamma);
            assert!((cur.start.unwrap() - expected).abs() < 1e-9);
            assert!(cur.start.unwrap() >= prev.depart.unwrap());
        }
        // Selection optimality: the served customer maximizes priority among
        // arrived, unserved customers at its start epoch (brute force).
        let mut served = vec![false; log.customers.len()];
        for &n in &log.service_order {
            let t = log.customer(n).start.unwrap();
            let vn = priority_of(log.customer(n), p, t);
            for c in &log.customers {
                if !served[c.n - 1] && c.gamma <= t {
                    assert!(
                        priority_of(c, p, t) <= vn + 1e-9,
                        "customer {} beats served {n} at t={t}",
                        c.n
                    );
                }
            }
            served[n - 1] = true;
        }
    }

    #[test]
    fn simulated_log_satisfies_invariants() {
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let mut rng = RandomStream::new(5, 1);
        let log = simulate_apq(&p, 3000, &mut rng).unwrap();
        assert_eq!(log.n_served(), 3000);
        check_log_invariants(&log, &p);
    }

    #[test]
    fn head_selection_matches_generic_next_customer() {
        let p = params(0.4, 0.3, 3.0, 1.0, 1.0);
        let mut rng = RandomStream::new(9, 0);
        let log = simulate_apq(&p, 500, &mut rng).unwrap();
        let mut served = vec![false; log.customers.len()];
        for &n in &log.service_order {
            let t = log.customer(n).start.unwrap();
            // At a busy-period start the arrival itself is the pick.
            let pick = next_customer(&log, &served, &p, t);
            assert_eq!(pick, Some(n));
            served[n - 1] = true;
        }
    }

    #[test]
    fn departure_sees_empty_fraction_matches_mm1() {
        // Total-count process is M/M/1 with rho=0.5: the fraction of
        // departures leaving the system empty is 1 - rho = 0.5.
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let mut rng = RandomStream::new(17, 0);
        let n = 100_000;
        let log = simulate_apq(&p, n, &mut rng).unwrap();
        let frac = fraction_empty_at_departures(&log);
        assert!((frac - 0.5).abs() < 0.02, "empty fraction {frac}");
    }

    #[test]
    fn number_in_system_matches_mm1_distribution() {
        // Chi-square on the first 10 states vs the geometric M/M/1 law at
        // departures, non-rejection at 0.01.
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let rho: f64 = 0.5;
        let mut rng = RandomStream::new(23, 0);
        let log = simulate_apq(&p, 50_000, &mut rng).unwrap();
        let counts = numbers_in_system_at_departures(&log);
        let probs: Vec<f64> = (0..10).map(|k| (1.0 - rho) * rho.powi(k)).collect();
        // Samples at departure epochs are autocorrelated; thin by 10 to get
        // a near-iid subsample before the chi-square.
        let thin: Vec<usize> = counts.iter().copied().step_by(10).collect();
        let mut observed = vec![0u64; 10];
        for &k in &thin {
            if k < 10 {
                observed[k] += 1;
            }
        }
        let (_, p_value, _) =
            crate::stats::chi2_gof(&observed, &probs, thin.len() as u64).unwrap();
        assert!(p_value > 0.01, "p = {p_value}");
    }

    #[test]
    fn same_seed_reproduces_log() {
        let p = params(0.3, 0.2, 2.0, 1.0, 1.0);
        let mut a = RandomStream::new(99, 7);
        let mut b = RandomStream::new(99, 7);
        let la = simulate_apq(&p, 200, &mut a).unwrap();
        let lb = simulate_apq(&p, 200, &mut b).unwrap();
        assert_eq!(la.service_order, lb.service_order);
        let ta: Vec<f64> = la.customers.iter().map(|c| c.gamma).collect();
        let tb: Vec<f64> = lb.customers.iter().map(|c| c.gamma).collect();
        assert_eq!(ta, tb);
    }
}
