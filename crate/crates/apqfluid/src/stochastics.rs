//! Phase-type distributions and reproducible random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for "alpha sums to 1" and generator row-sum checks.
const VALIDATE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PhError {
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("alpha and subgen dimensions disagree: alpha has {alpha} entries, subgen is {rows}x{cols}")]
    DimensionMismatch { alpha: usize, rows: usize, cols: usize },
    #[error("alpha is not a probability distribution: {0}")]
    InvalidAlpha(String),
    #[error("sub-generator invalid: {0}")]
    InvalidSubgen(String),
    #[error("sub-generator is singular (some phase is not transient)")]
    SingularSubgen,
}

/// A phase-type service-time distribution: absorption time of a transient
/// Markov chain with initial distribution `alpha` and sub-generator `subgen`.
/// `exit = -subgen * 1` holds exactly after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseType {
    alpha: Vec<f64>,
    subgen: Vec<Vec<f64>>,
    exit: Vec<f64>,
}

impl PhaseType {
    /// Number of service phases.
    pub fn n_phases(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn subgen(&self) -> &[Vec<f64>] {
        &self.subgen
    }

    pub fn exit(&self) -> &[f64] {
        &self.exit
    }

    /// True if this is the 1-phase exponential special case.
    pub fn is_exponential(&self) -> bool {
        self.n_phases() == 1
    }
}

/// Exponential service with rate `mu` as a 1-phase [`PhaseType`].
pub fn exp_ph(mu: f64) -> Result<PhaseType, PhError> {
    if !(mu > 0.0) {
        return Err(PhError::NonPositiveRate(mu));
    }
    Ok(PhaseType {
        alpha: vec![1.0],
        subgen: vec![vec![-mu]],
        exit: vec![mu],
    })
}

/// Validates `(alpha, subgen)` and builds the [`PhaseType`] with the exit
/// vector computed as `-subgen * 1`.
pub fn ph_validate(alpha: Vec<f64>, subgen: Vec<Vec<f64>>) -> Result<PhaseType, PhError> {
    let k = alpha.len();
    if subgen.len() != k || subgen.iter().any(|row| row.len() != k) {
        return Err(PhError::DimensionMismatch {
            alpha: k,
            rows: subgen.len(),
            cols: subgen.first().map_or(0, |r| r.len()),
        });
    }
    if k == 0 {
        return Err(PhError::InvalidAlpha("empty distribution".into()));
    }
    if alpha.iter().any(|&a| a < 0.0) {
        return Err(PhError::InvalidAlpha("negative entry".into()));
    }
    let s: f64 = alpha.iter().sum();
    if (s - 1.0).abs() > VALIDATE_TOL {
        return Err(PhError::InvalidAlpha(format!("entries sum to {s}, expected 1")));
    }

    let mut any_negative_row_sum = false;
    for (i, row) in subgen.iter().enumerate() {
        if row[i] >= 0.0 {
            return Err(PhError::InvalidSubgen(format!(
                "diagonal entry [{i}][{i}] = {} is not negative",
                row[i]
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            if j != i && v < 0.0 {
                return Err(PhError::InvalidSubgen(format!(
                    "off-diagonal entry [{i}][{j}] = {v} is negative"
                )));
            }
        }
        let row_sum: f64 = row.iter().sum();
        if row_sum > VALIDATE_TOL {
            return Err(PhError::InvalidSubgen(format!(
                "row {i} sums to {row_sum} > 0"
            )));
        }
        if row_sum < -VALIDATE_TOL {
            any_negative_row_sum = true;
        }
    }
    if !any_negative_row_sum {
        return Err(PhError::InvalidSubgen(
            "no row has a strictly negative sum (no absorption possible)".into(),
        ));
    }

    // Invertibility of -subgen doubles as the all-phases-transient check.
    solve_neg(&subgen, &vec![1.0; k]).ok_or(PhError::SingularSubgen)?;

    // exit = -subgen * 1, clamping float dust so row balance is exact.
    let exit: Vec<f64> = subgen
        .iter()
        .map(|row| (-row.iter().sum::<f64>()).max(0.0))
        .collect();

    Ok(PhaseType { alpha, subgen, exit })
}

/// Mean absorption time `alpha * (-subgen)^{-1} * 1`.
pub fn ph_mean(ph: &PhaseType) -> f64 {
    let m = solve_neg(&ph.subgen, &vec![1.0; ph.n_phases()])
        .expect("validated PhaseType has invertible sub-generator");
    ph.alpha.iter().zip(&m).map(|(a, x)| a * x).sum()
}

/// Solves `(-t) x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when the matrix is singular to working precision.
fn solve_neg(t: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let k = b.len();
    let mut a: Vec<Vec<f64>> = t.iter().map(|row| row.iter().map(|&v| -v).collect()).collect();
    let mut x = b.to_vec();
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        x.swap(col, pivot);
        for row in col + 1..k {
            let factor = a[row][col] / a[col][col];
            for j in col..k {
                a[row][j] -= factor * a[col][j];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..k).rev() {
        x[col] /= a[col][col];
        for row in 0..col {
            x[row] -= a[row][col] * x[col];
        }
    }
    Some(x)
}

/// Samples one service duration by simulating the absorbing jump chain:
/// pick the initial phase from `alpha`, hold an exponential time in each
/// phase, and move to the next phase or absorb proportionally to the rates.
pub fn ph_sample<R: Rng + ?Sized>(ph: &PhaseType, rng: &mut R) -> f64 {
    let mut phase = sample_categorical(&ph.alpha, rng);
    let mut total = 0.0;
    loop {
        let out_rate = -ph.subgen[phase][phase];
        total += exp_sample(out_rate, rng);
        // Absorb or jump, proportional to exit vs off-diagonal rates.
        let mut u = rng.random::<f64>() * out_rate;
        u -= ph.exit[phase];
        if u < 0.0 {
            return total;
        }
        let mut next = phase;
        for (j, &rate) in ph.subgen[phase].iter().enumerate() {
            if j == phase {
                continue;
            }
            u -= rate;
            if u < 0.0 {
                next = j;
                break;
            }
        }
        // u >= 0 after the loop only through rounding; absorb then.
        if next == phase {
            return total;
        }
        phase = next;
    }
}

/// Exponential variate with the given rate; strictly positive.
pub fn exp_sample<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let d = rand_distr::Exp::new(rate).expect("rate > 0");
    loop {
        let x: f64 = rng.sample(d);
        if x > 0.0 {
            return x;
        }
    }
}

/// Index drawn from a (proper) discrete distribution.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Counter-based reproducible random stream: the same `(seed, stream_id)`
/// yields the identical draw sequence on every run and platform. Distinct
/// `stream_id`s give independent streams off one seed.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn erlang2(rate: f64) -> PhaseType {
        ph_validate(vec![1.0, 0.0], vec![vec![-rate, rate], vec![0.0, -rate]]).unwrap()
    }

    #[test]
    fn exp_ph_direct_construction() {
        let ph = exp_ph(2.0).unwrap();
        assert_eq!(ph.alpha(), &[1.0]);
        assert_eq!(ph.subgen(), &[vec![-2.0]]);
        assert_eq!(ph.exit(), &[2.0]);
    }

    #[test]
    fn exp_ph_rejects_nonpositive_rate() {
        assert!(exp_ph(0.0).is_err());
        assert!(exp_ph(-1.0).is_err());
    }

    #[test]
    fn validate_accepts_exponential() {
        let ph = ph_validate(vec![1.0], vec![vec![-3.0]]).unwrap();
        assert_eq!(ph.exit(), &[3.0]);
    }

    #[test]
    fn validate_two_phase_exit() {
        let ph = ph_validate(vec![0.5, 0.5], vec![vec![-2.0, 1.0], vec![0.0, -1.0]]).unwrap();
        assert_eq!(ph.exit(), &[1.0, 1.0]);
    }

    #[test]
    fn validate_rejects_bad_alpha() {
        let err = ph_validate(vec![0.5, 0.6], vec![vec![-2.0, 1.0], vec![0.0, -1.0]]);
        assert!(matches!(err, Err(PhError::InvalidAlpha(_))));
    }

    #[test]
    fn validate_rejects_positive_row_sum() {
        let err = ph_validate(vec![0.5, 0.5], vec![vec![-1.0, 2.0], vec![0.0, -1.0]]);
        assert!(matches!(err, Err(PhError::InvalidSubgen(_))));
    }

    #[test]
    fn validate_rejects_conservative_generator() {
        // Rows sum to 0: no absorption, so not a valid sub-generator.
        let err = ph_validate(vec![0.5, 0.5], vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn exit_balances_rows_exactly() {
        let ph = ph_validate(
            vec![0.3, 0.7],
            vec![vec![-2.5, 1.25], vec![0.5, -1.75]],
        )
        .unwrap();
        for i in 0..2 {
            let total: f64 = ph.subgen()[i].iter().sum::<f64>() + ph.exit()[i];
            assert_eq!(total, 0.0);
        }
    }

    #[test]
    fn mean_of_exponential() {
        let ph = exp_ph(2.0).unwrap();
        assert!((ph_mean(&ph) - 0.5).abs() < 1e-12 * 0.5);
        for mu in [0.1, 1.0, 7.5] {
            let ph = exp_ph(mu).unwrap();
            assert!((ph_mean(&ph) - 1.0 / mu).abs() <= 1e-12 / mu);
        }
    }

    #[test]
    fn mean_of_erlang2() {
        assert!((ph_mean(&erlang2(1.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_of_mixed_two_phase() {
        // Hand solve of (-T)m = 1 for alpha=(0.5,0.5), T=[[-2,1],[0,-1]]:
        // m2 = 1, 2*m1 - m2 = 1 => m1 = 1, mean = 0.5 + 0.5 = 1.0.
        // Cross-checked against the Monte Carlo oracle below.
        let ph = ph_validate(vec![0.5, 0.5], vec![vec![-2.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let analytic = ph_mean(&ph);
        assert!((analytic - 1.0).abs() < 1e-12);
        // Monte Carlo oracle.
        let mut rng = RandomStream::new(7, 0);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| ph_sample(&ph, &mut rng)).sum::<f64>() / n as f64;
        let se = 1.5 / (n as f64).sqrt();
        assert!(
            (mean - analytic).abs() < 4.0 * se,
            "MC mean {mean} vs analytic {analytic}"
        );
    }

    #[test]
    fn samples_positive_and_reproducible() {
        let ph = exp_ph(1.0).unwrap();
        let mut a = RandomStream::new(42, 3);
        let mut b = RandomStream::new(42, 3);
        for _ in 0..100 {
            let xa = ph_sample(&ph, &mut a);
            let xb = ph_sample(&ph, &mut b);
            assert!(xa > 0.0);
            assert_eq!(xa, xb);
        }
        let mut c = RandomStream::new(42, 4);
        assert_ne!(ph_sample(&ph, &mut a), ph_sample(&ph, &mut c));
    }

    #[test]
    fn exp_sample_mean_matches() {
        let ph = exp_ph(2.0).unwrap();
        let mut rng = RandomStream::new(11, 0);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| ph_sample(&ph, &mut rng)).sum::<f64>() / n as f64;
        // sd of Exp(2) is 0.5
        let se = 0.5 / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn erlang2_sample_variance_matches() {
        let ph = erlang2(1.0);
        let mut rng = RandomStream::new(13, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| ph_sample(&ph, &mut rng)).collect();
        let mean: f64 = xs.iter().sum::<f64>() / n as f64;
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        // Var = 2; SE of the sample variance of a gamma(2,1) is about
        // sqrt((m4 - var^2)/n) with m4 = 3*var^2 + skew terms; 0.05 covers it.
        assert!((var - 2.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn exponential_samples_pass_ks() {
        // One-sample KS vs the Exp(mu) CDF over 20 fixed seeds; at
        // significance 0.01 at most one rejection is allowed.
        let mu = 1.7;
        let ph = exp_ph(mu).unwrap();
        let mut rejections = 0;
        for seed in 0..20u64 {
            let mut rng = RandomStream::new(1000 + seed, 0);
            let xs: Vec<f64> = (0..10_000).map(|_| ph_sample(&ph, &mut rng)).collect();
            let (_, p) = crate::stats::ks_one_sample(&xs, |x| 1.0 - (-mu * x).exp());
            if p < 0.01 {
                rejections += 1;
            }
        }
        assert!(rejections <= 1, "{rejections} rejections of 20");
    }
}
