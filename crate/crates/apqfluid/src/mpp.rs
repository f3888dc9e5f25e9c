//! Maximum priority process: the pair `(M1(t), M2(t))` of least upper
//! bounds on the accumulated priority of any class-1 / class-2 customer
//! possibly present, reconstructed from an [`EventLog`].
//!
//! During a service both components grow linearly at rates `(b1, b2)`; at
//! each departure `M1` jumps down and `M2` may follow. Jumps come in three
//! kinds: only `M1` drops (the next customer is accredited), both drop to a
//! common positive value, or both drop to zero when the system empties.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apq::{priority_of, ApqParams, EventLog};

/// Default tolerance for priority equality and region-boundary slack.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MppError {
    #[error("inconsistent event log: {0}")]
    InconsistentLog(String),
    #[error("unclassifiable jump: pre=({0}, {1}), post=({2}, {3})")]
    Unclassifiable(f64, f64, f64, f64),
    #[error("insufficient data: path has {available} jumps, burn-in is {burn_in}")]
    InsufficientData { available: usize, burn_in: usize },
    #[error("point ({0}, {1}) has m1 < m2")]
    BelowDiagonal(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JumpType {
    Type1,
    Type2,
    Type3,
}

impl std::fmt::Display for JumpType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JumpType::Type1 => write!(f, "type1"),
            JumpType::Type2 => write!(f, "type2"),
            JumpType::Type3 => write!(f, "type3"),
        }
    }
}

/// State right before and right after one departure epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpRecord {
    /// Departure time.
    pub t: f64,
    /// `(M1, M2)` just before the jump.
    pub pre: (f64, f64),
    /// `(M1, M2)` just after the jump.
    pub post: (f64, f64),
    pub jump_type: JumpType,
    /// Class of the customer taken into service at this epoch, if any.
    pub next_class: Option<u8>,
}

/// One linear piece of the path. During service the slopes are `(b1, b2)`;
/// during idle periods both components sit at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MppSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub m1_start: f64,
    pub m2_start: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MppPath {
    pub b1: f64,
    pub b2: f64,
    pub segments: Vec<MppSegment>,
    pub jumps: Vec<JumpRecord>,
}

/// Post-jump states, raw and in `(m1 - m2, m2)` coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddedSampleSet {
    /// `(m1, m2)` post-jump points.
    pub points: Vec<(f64, f64)>,
    /// The same points as `(m1 - m2, m2)`.
    pub points_tilde: Vec<(f64, f64)>,
}

impl EmbeddedSampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every `stride`-th sample. Successive post-jump states are Markov
    /// dependent; tests that assume independent draws should run on a
    /// thinned subsequence.
    pub fn thinned(&self, stride: usize) -> EmbeddedSampleSet {
        let stride = stride.max(1);
        EmbeddedSampleSet {
            points: self.points.iter().copied().step_by(stride).collect(),
            points_tilde: self.points_tilde.iter().copied().step_by(stride).collect(),
        }
    }
}

/// Region of the post-jump state space: the open wedge `F`, the diagonal
/// semi-line `G`, the origin, or outside all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    F,
    G,
    Origin,
    Invalid,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::F => write!(f, "F"),
            Region::G => write!(f, "G"),
            Region::Origin => write!(f, "origin"),
            Region::Invalid => write!(f, "invalid"),
        }
    }
}

/// `(m1, m2) -> (m1 - m2, m2)`.
pub fn transform_tilde(p: (f64, f64)) -> Result<(f64, f64), MppError> {
    if p.0 < p.1 {
        return Err(MppError::BelowDiagonal(p.0, p.1));
    }
    Ok((p.0 - p.1, p.1))
}

/// Classifies a pre/post pair at a departure. Boundary ties resolve toward
/// `G` (the closed condition `m1 = m2`).
pub fn classify_jump(pre: (f64, f64), post: (f64, f64), tol: f64) -> Result<JumpType, MppError> {
    let (post_m1, post_m2) = post;
    if post_m1.abs() <= tol && post_m2.abs() <= tol {
        return Ok(JumpType::Type3);
    }
    if (post_m1 - post_m2).abs() <= tol && post_m1 > tol {
        return Ok(JumpType::Type2);
    }
    if (post_m2 - pre.1).abs() <= tol && post_m1 > post_m2 {
        return Ok(JumpType::Type1);
    }
    Err(MppError::Unclassifiable(pre.0, pre.1, post_m1, post_m2))
}

/// Membership of a point in `F`, `G` or the origin, with slack `tol`.
pub fn region_of(p: (f64, f64), params: &ApqParams, tol: f64) -> Region {
    let (m1, m2) = p;
    if m1.abs() <= tol && m2.abs() <= tol {
        return Region::Origin;
    }
    if (m1 - m2).abs() <= tol && m2 > tol {
        return Region::G;
    }
    let ratio = params.b1 / params.b2;
    if m2 > tol && m1 > m2 && m1 < m2 * ratio + tol {
        return Region::F;
    }
    Region::Invalid
}

/// Builds the full MPP path from an event log.
///
/// At each departure `M1` jumps to the highest accumulated priority among
/// arrived, unserved customers (zero if none) and `M2` to the minimum of
/// that and its own pre-jump value.
pub fn build_mpp(log: &EventLog, params: &ApqParams) -> Result<MppPath, MppError> {
    let mut segments = Vec::with_capacity(2 * log.n_served());
    let mut jumps = Vec::with_capacity(log.n_served());

    // Waiting customers per class in arrival order, replayed from the log.
    let mut waiting: [VecDeque<usize>; 2] = [VecDeque::new(), VecDeque::new()];
    let mut next_arrival = 0usize; // index into log.customers
    let mut m = (0.0_f64, 0.0_f64);
    let mut prev_depart: Option<f64> = None;

    for (k, &n) in log.service_order.iter().enumerate() {
        let rec = log.customer(n);
        let start = rec
            .start
            .ok_or_else(|| MppError::InconsistentLog(format!("customer {n} has no start time")))?;
        let depart = rec.depart.unwrap();
        if let Some(pd) = prev_depart {
            if start < pd {
                return Err(MppError::InconsistentLog(format!(
                    "service of {n} starts at {start} before previous departure {pd}"
                )));
            }
            if start > pd {
                // Idle gap: the process sits at the origin.
                segments.push(MppSegment {
                    t_start: pd,
                    t_end: start,
                    m1_start: 0.0,
                    m2_start: 0.0,
                    in_service: false,
                });
                m = (0.0, 0.0);
            }
        }

        // Admit arrivals up to the start epoch and remove the served one
        // (necessarily its class head: within a class service is FIFO).
        while next_arrival < log.customers.len() && log.customers[next_arrival].gamma <= start {
            let c = &log.customers[next_arrival];
            waiting[(c.cls - 1) as usize].push_back(c.n);
            next_arrival += 1;
        }
        let q = &mut waiting[(rec.cls - 1) as usize];
        match q.front() {
            Some(&head) if head == n => {
                q.pop_front();
            }
            _ => {
                return Err(MppError::InconsistentLog(format!(
                    "customer {n} served out of FIFO order within class {}",
                    rec.cls
                )));
            }
        }

        segments.push(MppSegment {
            t_start: start,
            t_end: depart,
            m1_start: m.0,
            m2_start: m.1,
            in_service: true,
        });
        let pre = (
            m.0 + params.b1 * rec.service_time,
            m.1 + params.b2 * rec.service_time,
        );

        // Arrivals during this service join the queue before the jump.
        while next_arrival < log.customers.len() && log.customers[next_arrival].gamma <= depart {
            let c = &log.customers[next_arrival];
            waiting[(c.cls - 1) as usize].push_back(c.n);
            next_arrival += 1;
        }

        // M1 after the jump: highest waiting priority, i.e. the larger of
        // the two class heads (earlier arrivals within a class dominate).
        let head_priority = |q: &VecDeque<usize>| {
            q.front()
                .map(|&h| priority_of(log.customer(h), params, depart))
                .unwrap_or(0.0)
        };
        let post_m1 = head_priority(&waiting[0]).max(head_priority(&waiting[1]));
        let post_m2 = post_m1.min(pre.1);
        let post = (post_m1, post_m2);
        let jump_type = classify_jump(pre, post, DEFAULT_TOL)?;
        let next_class = log
            .service_order
            .get(k + 1)
            .filter(|&&nn| log.customer(nn).start == Some(depart))
            .map(|&nn| log.customer(nn).cls);
        jumps.push(JumpRecord {
            t: depart,
            pre,
            post,
            jump_type,
            next_class,
        });
        m = post;
        prev_depart = Some(depart);
    }

    Ok(MppPath {
        b1: params.b1,
        b2: params.b2,
        segments,
        jumps,
    })
}

impl MppPath {
    /// `(M1, M2)` at time `t`, a total function over the covered horizon.
    pub fn at(&self, t: f64) -> Option<(f64, f64)> {
        let seg = self
            .segments
            .iter()
            .find(|s| s.t_start <= t && t < s.t_end)?;
        if seg.in_service {
            let dt = t - seg.t_start;
            Some((seg.m1_start + self.b1 * dt, seg.m2_start + self.b2 * dt))
        } else {
            Some((0.0, 0.0))
        }
    }
}

/// Post-jump points after discarding the first `burn_in` jumps.
pub fn embedded_samples(path: &MppPath, burn_in: usize) -> Result<EmbeddedSampleSet, MppError> {
    if burn_in >= path.jumps.len() {
        return Err(MppError::InsufficientData {
            available: path.jumps.len(),
            burn_in,
        });
    }
    let points: Vec<(f64, f64)> = path.jumps[burn_in..].iter().map(|j| j.post).collect();
    let points_tilde = points.iter().map(|&p| (p.0 - p.1, p.1)).collect();
    Ok(EmbeddedSampleSet {
        points,
        points_tilde,
    })
}

/// Default burn-in: 1% of the jump count, at least 1000 (capped so that at
/// least one jump survives).
pub fn default_burn_in(n_jumps: usize) -> usize {
    (n_jumps / 100).max(1000).min(n_jumps.saturating_sub(1))
}
