//! Closed-form speedup model and its Monte Carlo validator.
//!
//! A cycle proposes `gamma` tokens, each independently accepted with
//! probability `alpha`; the first rejection truncates the run and the
//! verifier always contributes one more token (bonus or correction). The
//! expected emitted tokens per cycle follow a truncated geometric sum, and
//! walltime speedup divides by the relative drafting overhead `1 + gamma·c`.

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Point in the speedup model's parameter space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupParams {
    /// Per-token acceptance probability, in [0, 1].
    pub alpha: f64,
    /// Draft length per cycle, ≥ 1.
    pub gamma: u32,
    /// Draft/target cost ratio, ≥ 0.
    pub cost_ratio: f64,
}

impl SpeedupParams {
    pub fn new(alpha: f64, gamma: u32, cost_ratio: f64) -> Result<SpeedupParams> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParams(format!("alpha {alpha} outside [0, 1]")));
        }
        if gamma == 0 {
            return Err(Error::InvalidParams("gamma must be ≥ 1".into()));
        }
        if cost_ratio < 0.0 || !cost_ratio.is_finite() {
            return Err(Error::InvalidParams(format!("cost ratio {cost_ratio} < 0")));
        }
        Ok(SpeedupParams {
            alpha,
            gamma,
            cost_ratio,
        })
    }
}

/// Expected tokens emitted per cycle: `(1 − α^{γ+1}) / (1 − α)`, with the
/// α→1 limit `γ+1` taken explicitly.
pub fn expected_tokens(p: &SpeedupParams) -> f64 {
    let g1 = f64::from(p.gamma) + 1.0;
    if (1.0 - p.alpha).abs() < 1e-12 {
        return g1;
    }
    (1.0 - p.alpha.powf(g1)) / (1.0 - p.alpha)
}

/// Walltime speedup: `E[tokens] / (1 + γ·c)`.
pub fn speedup(p: &SpeedupParams) -> f64 {
    expected_tokens(p) / (1.0 + f64::from(p.gamma) * p.cost_ratio)
}

/// Monte Carlo estimate of `E[tokens]`: per cycle, sequential Bernoulli
/// acceptances up to γ plus the always-emitted bonus token.
pub fn simulate_cycles(p: &SpeedupParams, n_cycles: u64, seed: u64) -> f64 {
    let mut rng = SeedRng::new(seed);
    let mut total: u64 = 0;
    for _ in 0..n_cycles {
        let mut emitted = 1u64; // bonus or correction
        for _ in 0..p.gamma {
            if rng.uniform() < p.alpha {
                emitted += 1;
            } else {
                break;
            }
        }
        total += emitted;
    }
    total as f64 / n_cycles as f64
}

/// One evaluated grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub gamma: u32,
    pub cost_ratio: f64,
    pub expected_tokens: f64,
    pub speedup: f64,
    /// True when this γ maximizes speedup among the swept γ values for the
    /// same (α, c).
    pub optimal_gamma: bool,
}

/// Evaluate the full (α, γ, c) grid and flag the speedup-optimal γ per
/// (α, c) pair.
pub fn sweep(alphas: &[f64], gammas: &[u32], costs: &[f64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || gammas.is_empty() || costs.is_empty() {
        return Err(Error::InvalidParams("sweep grid has an empty axis".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len() * gammas.len() * costs.len());
    for &alpha in alphas {
        for &cost in costs {
            let mut best_gamma = gammas[0];
            let mut best_speedup = f64::NEG_INFINITY;
            for &gamma in gammas {
                let p = SpeedupParams::new(alpha, gamma, cost)?;
                let s = speedup(&p);
                if s > best_speedup {
                    best_speedup = s;
                    best_gamma = gamma;
                }
            }
            for &gamma in gammas {
                let p = SpeedupParams::new(alpha, gamma, cost)?;
                rows.push(SweepRow {
                    alpha,
                    gamma,
                    cost_ratio: cost,
                    expected_tokens: expected_tokens(&p),
                    speedup: speedup(&p),
                    optimal_gamma: gamma == best_gamma,
                });
            }
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "alpha,gamma,c,expected_tokens,speedup,optimal_gamma_flag";

/// CSV rows matching [`SWEEP_CSV_HEADER`].
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.alpha,
            r.gamma,
            r.cost_ratio,
            r.expected_tokens,
            r.speedup,
            u8::from(r.optimal_gamma)
        ));
    }
    out
}
