//! Exact event-driven simulator of the tandem fluid queue
//! `{(phi(t), X(t), Y(t))}`.
//!
//! A background Markov chain drives two buffers. `X` grows in the up
//! phases and drains in the single down phase, reflecting at zero. `Y`
//! grows (or holds) while `X > 0` and drains only while `X = 0`, also
//! reflecting at zero. All trajectories are piecewise linear, so phase
//! sojourns and boundary-hitting times are computed analytically; there is
//! no time-stepping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpp::EmbeddedSampleSet;
use crate::stochastics::{exp_sample, sample_categorical, RandomStream};

/// Hitting times landing this close to a sojourn end count as exact hits,
/// and levels this close to zero are clamped to zero.
const CLAMP_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("insufficient data: path has {available} down cycles, burn-in is {burn_in}")]
    InsufficientData { available: usize, burn_in: usize },
}

/// Tandem fluid queue parameters with up phases `0..n_up` and the single
/// down phase at index `n_up` in `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TandemParams {
    /// Number of up phases.
    pub n_up: usize,
    /// Generator over up phases followed by the down phase.
    pub gen: Vec<Vec<f64>>,
    /// X-rate per up phase, all positive.
    pub r_up: Vec<f64>,
    /// X-rate in the down phase, negative.
    pub r_down: f64,
    /// Y-rate per up phase, nonnegative.
    pub c_hat_up: Vec<f64>,
    /// Y-rate in the down phase while X > 0, nonnegative.
    pub c_hat_down: f64,
    /// Y-rate in the down phase while X = 0 and Y > 0, negative.
    pub c_check_down: f64,
}

impl TandemParams {
    pub fn down_phase(&self) -> usize {
        self.n_up
    }

    pub fn validate(&self) -> Result<(), FluidError> {
        let k = self.n_up + 1;
        if self.n_up == 0 {
            return Err(FluidError::InvalidParams("need at least one up phase".into()));
        }
        if self.gen.len() != k || self.gen.iter().any(|r| r.len() != k) {
            return Err(FluidError::InvalidParams(format!(
                "generator must be {k}x{k}"
            )));
        }
        for (i, row) in self.gen.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if sum.abs() > 1e-9 {
                return Err(FluidError::InvalidParams(format!(
                    "generator row {i} sums to {sum}"
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if i != j && v < 0.0 {
                    return Err(FluidError::InvalidParams(format!(
                        "negative off-diagonal gen[{i}][{j}] = {v}"
                    )));
                }
            }
            if row[i] >= 0.0 {
                return Err(FluidError::InvalidParams(format!(
                    "gen[{i}][{i}] = {} must be negative (irreducibility)",
                    row[i]
                )));
            }
        }
        if self.r_up.len() != self.n_up || self.c_hat_up.len() != self.n_up {
            return Err(FluidError::InvalidParams("rate vector length mismatch".into()));
        }
        if self.r_up.iter().any(|&r| !(r > 0.0)) {
            return Err(FluidError::InvalidParams("r_up entries must be positive".into()));
        }
        if !(self.r_down < 0.0) {
            return Err(FluidError::InvalidParams("r_down must be negative".into()));
        }
        if self.c_hat_up.iter().any(|&c| c < 0.0) || self.c_hat_down < 0.0 {
            return Err(FluidError::InvalidParams("c_hat rates must be nonnegative".into()));
        }
        if !(self.c_check_down < 0.0) {
            return Err(FluidError::InvalidParams("c_check_down must be negative".into()));
        }
        Ok(())
    }
}

/// One linear piece of the trajectory. End levels are stored rather than
/// derived from the slopes: recomputing them from absolute times loses
/// roughly `t * eps` of precision, which outgrows the clamp tolerance on
/// long runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidPiece {
    pub t_start: f64,
    pub t_end: f64,
    pub phase: usize,
    pub x_start: f64,
    pub y_start: f64,
    pub x_end: f64,
    pub y_end: f64,
    pub x_slope: f64,
    pub y_slope: f64,
}

/// Summary of one sojourn in the down phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownCycle {
    /// Sojourn duration (exponential with the down phase's exit rate).
    pub duration: f64,
    /// Total decrease of X over the sojourn, `X(start) - X(end)`.
    pub dx: f64,
    /// Total decrease of Y over the sojourn.
    pub dy: f64,
    pub x_hit_zero: bool,
    pub y_hit_zero: bool,
    /// State at the down-to-up transition ending the sojourn.
    pub end_x: f64,
    pub end_y: f64,
    /// Time into the sojourn at which X reached zero, if it did.
    pub x_drain_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidPath {
    pub down_phase: usize,
    pub pieces: Vec<FluidPiece>,
    pub down_cycles: Vec<DownCycle>,
}

impl FluidPath {
    /// Total `(dX, dY)` over each maximal run of up phases that ends by
    /// entering the down phase.
    pub fn up_excursions(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut acc: Option<(f64, f64, f64, f64)> = None; // (x0, y0, x1, y1)
        let down = self.down_phase;
        for p in &self.pieces {
            if p.phase == down {
                if let Some((x0, y0, x1, y1)) = acc.take() {
                    out.push((x1 - x0, y1 - y0));
                }
            } else {
                let (x0, y0) = match acc {
                    Some((x0, y0, _, _)) => (x0, y0),
                    None => (p.x_start, p.y_start),
                };
                acc = Some((x0, y0, p.x_end, p.y_end));
            }
        }
        out
    }
}

/// Simulates until `n_down_cycles` sojourns in the down phase complete.
/// Starts at the regenerative state: origin, phase drawn from the down
/// phase's transition row, unless `initial` is given.
pub fn simulate_tandem(
    params: &TandemParams,
    n_down_cycles: usize,
    stream: &mut RandomStream,
) -> Result<FluidPath, FluidError> {
    simulate_tandem_from(params, n_down_cycles, stream, None)
}

pub fn simulate_tandem_from(
    params: &TandemParams,
    n_down_cycles: usize,
    stream: &mut RandomStream,
    initial: Option<(usize, f64, f64)>,
) -> Result<FluidPath, FluidError> {
    params.validate()?;
    if n_down_cycles == 0 {
        return Err(FluidError::InvalidParams("n_down_cycles must be >= 1".into()));
    }
    let down = params.down_phase();

    let (mut phase, mut x, mut y) = match initial {
        Some(s) => s,
        None => (draw_next_phase(params, down, stream), 0.0, 0.0),
    };
    let mut t = 0.0;
    let mut pieces = Vec::new();
    let mut down_cycles = Vec::with_capacity(n_down_cycles);

    while down_cycles.len() < n_down_cycles {
        let s = exp_sample(-params.gen[phase][phase], stream);
        if phase != down {
            let i = phase;
            let (nx, ny) = (x + params.r_up[i] * s, y + params.c_hat_up[i] * s);
            pieces.push(FluidPiece {
                t_start: t,
                t_end: t + s,
                phase,
                x_start: x,
                y_start: y,
                x_end: nx,
                y_end: ny,
                x_slope: params.r_up[i],
                y_slope: params.c_hat_up[i],
            });
            x = nx;
            y = ny;
        } else {
            let (x0, y0) = (x, y);
            let rate_x = -params.r_down;
            let rate_y = -params.c_check_down;
            // Time for X to drain (0 if already empty).
            let t_x = x / rate_x;
            let mut x_hit_zero = false;
            let mut y_hit_zero = false;
            let mut x_drain_time = None;
            if t_x > s + CLAMP_TOL {
                // X stays positive throughout; Y moves at c_hat_down.
                let (nx, ny) = (x - rate_x * s, y + params.c_hat_down * s);
                pieces.push(FluidPiece {
                    t_start: t,
                    t_end: t + s,
                    phase,
                    x_start: x,
                    y_start: y,
                    x_end: nx,
                    y_end: ny,
                    x_slope: params.r_down,
                    y_slope: params.c_hat_down,
                });
                x = nx;
                y = ny;
            } else {
                // X drains at t + t_x (clamped to the sojourn if within
                // rounding of its end), then Y drains while X sits at zero.
                let t_x = t_x.min(s);
                x_hit_zero = true;
                x_drain_time = Some(t_x);
                if t_x > 0.0 {
                    let ny = y + params.c_hat_down * t_x;
                    pieces.push(FluidPiece {
                        t_start: t,
                        t_end: t + t_x,
                        phase,
                        x_start: x,
                        y_start: y,
                        x_end: 0.0,
                        y_end: ny,
                        x_slope: params.r_down,
                        y_slope: params.c_hat_down,
                    });
                    y = ny;
                }
                x = 0.0;
                let rest = s - t_x;
                let t_y = y / rate_y;
                if t_y > rest + CLAMP_TOL {
                    if rest > 0.0 {
                        let ny = y - rate_y * rest;
                        pieces.push(FluidPiece {
                            t_start: t + t_x,
                            t_end: t + s,
                            phase,
                            x_start: 0.0,
                            y_start: y,
                            x_end: 0.0,
                            y_end: ny,
                            x_slope: 0.0,
                            y_slope: params.c_check_down,
                        });
                        y = ny;
                    }
                } else {
                    let t_y = t_y.min(rest);
                    y_hit_zero = true;
                    if t_y > 0.0 {
                        pieces.push(FluidPiece {
                            t_start: t + t_x,
                            t_end: t + t_x + t_y,
                            phase,
                            x_start: 0.0,
                            y_start: y,
                            x_end: 0.0,
                            y_end: 0.0,
                            x_slope: 0.0,
                            y_slope: params.c_check_down,
                        });
                    }
                    y = 0.0;
                    if rest - t_y > 0.0 {
                        pieces.push(FluidPiece {
                            t_start: t + t_x + t_y,
                            t_end: t + s,
                            phase,
                            x_start: 0.0,
                            y_start: 0.0,
                            x_end: 0.0,
                            y_end: 0.0,
                            x_slope: 0.0,
                            y_slope: 0.0,
                        });
                    }
                }
            }
            down_cycles.push(DownCycle {
                duration: s,
                dx: x0 - x,
                dy: y0 - y,
                x_hit_zero,
                y_hit_zero,
                end_x: x,
                end_y: y,
                x_drain_time,
            });
        }
        t += s;
        phase = draw_next_phase(params, phase, stream);
    }

    Ok(FluidPath {
        down_phase: down,
        pieces,
        down_cycles,
    })
}

fn draw_next_phase(params: &TandemParams, from: usize, rng: &mut RandomStream) -> usize {
    let row = &params.gen[from];
    let weights: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == from { 0.0 } else { v })
        .collect();
    sample_categorical(&weights, rng)
}

/// Per-sojourn decrements `(dx, dy)` with boundary flags.
pub fn down_phase_decrements(path: &FluidPath) -> &[DownCycle] {
    &path.down_cycles
}

/// `(X, Y)` at each down-to-up transition after `burn_in` cycles, reusing
/// [`EmbeddedSampleSet`] with the tilde coordinates set to `(X, Y)` and the
/// raw coordinates to `(X + Y, Y)`.
pub fn embedded_at_down_to_up(
    path: &FluidPath,
    burn_in: usize,
) -> Result<EmbeddedSampleSet, FluidError> {
    if burn_in >= path.down_cycles.len() {
        return Err(FluidError::InsufficientData {
            available: path.down_cycles.len(),
            burn_in,
        });
    }
    let cycles = &path.down_cycles[burn_in..];
    let points_tilde: Vec<(f64, f64)> = cycles.iter().map(|c| (c.end_x, c.end_y)).collect();
    let points = points_tilde.iter().map(|&(x, y)| (x + y, y)).collect();
    Ok(EmbeddedSampleSet {
        points,
        points_tilde,
    })
}
