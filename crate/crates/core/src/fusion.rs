//! Personalized fusion: scalar coefficients over a set of adapters chosen by
//! derivative-free minimization of `CE(query) + ψ·Σ|cᵢ|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{fuse, DenseDelta, LowRankAdapter, Role};
use crate::seed;
use crate::tinylm::{perplexity_from_log_probs, AdapterRef, TinyLM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub psi: f64,
    pub query_set_size: usize,
    /// Maximum objective evaluations across all restarts.
    pub budget: usize,
    pub coeff_bounds: [f64; 2],
    /// Random restarts after the run from the uniform start point.
    pub restarts: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            psi: 0.01,
            query_set_size: 16,
            budget: 200,
            coeff_bounds: [-1.5, 1.5],
            restarts: 3,
        }
    }
}

/// Every coordinate starts here.
pub const START_COEFF: f64 = 0.5;

impl FusionConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if !(self.psi >= 0.0 && self.psi.is_finite()) {
            errors.push(format!(
                "{prefix}.psi must be non-negative, got {}",
                self.psi
            ));
        }
        if self.query_set_size == 0 {
            errors.push(format!("{prefix}.query_set_size must be positive"));
        }
        if self.budget < 10 {
            errors.push(format!(
                "{prefix}.budget must be at least 10, got {}",
                self.budget
            ));
        }
        let [lo, hi] = self.coeff_bounds;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) || !(lo..=hi).contains(&START_COEFF) {
            errors.push(format!("{prefix}.coeff_bounds must be an interval containing {START_COEFF}, got [{lo}, {hi}]"));
        }
    }

    fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate("fusion", &mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(errors.join("; ")))
        }
    }
}

/// The objective split into its two terms; `total = ce + penalty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionLoss {
    /// Token-weighted mean next-token cross-entropy on the query set.
    pub ce: f64,
    /// `ψ·Σ|cᵢ|`.
    pub penalty: f64,
    pub total: f64,
    /// Inference FLOPs plus the `B·A` products of the merge.
    pub flops: u64,
}

/// Scores `fuse(adapters, coeffs)` on `query`.
pub fn fusion_loss(
    coeffs: &[f64],
    adapters: &[&LowRankAdapter],
    model: &TinyLM,
    query: &[Vec<u32>],
    psi: f64,
) -> Result<FusionLoss> {
    if query.is_empty() {
        return Err(Error::invalid("fusion query set is empty"));
    }
    let delta = fuse(adapters, coeffs, Role::FusedSecure)?;
    let prepared = model.prepare(AdapterRef::Dense(&delta))?;
    let lps: Vec<f64> = prepared
        .docs_log_probs(query)?
        .into_iter()
        .flatten()
        .collect();
    if lps.is_empty() {
        return Err(Error::invalid("fusion query set has no scored tokens"));
    }
    let ce = -lps.iter().sum::<f64>() / lps.len() as f64;
    let penalty = psi * coeffs.iter().map(|c| c.abs()).sum::<f64>();
    Ok(FusionLoss {
        ce,
        penalty,
        total: ce + penalty,
        flops: prepared.flops() + adapters.iter().map(|a| a.merge_flops()).sum::<u64>(),
    })
}

/// Outcome of a bounded Nelder–Mead search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub start_value: f64,
    /// Objective value of every evaluation, in order.
    pub trace: Vec<f64>,
    /// False when nothing beat the start point; `best` is then the start.
    pub improved: bool,
}

struct Search<'f, F> {
    f: &'f mut F,
    lo: f64,
    hi: f64,
    budget: usize,
    trace: Vec<f64>,
    best: Vec<f64>,
    best_value: f64,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Search<'_, F> {
    fn exhausted(&self) -> bool {
        self.trace.len() >= self.budget
    }

    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x)?;
        self.trace.push(v);
        if v < self.best_value {
            self.best_value = v;
            self.best = x.to_vec();
        }
        Ok(v)
    }

    fn clamp(&self, x: Vec<f64>) -> Vec<f64> {
        x.into_iter().map(|v| v.clamp(self.lo, self.hi)).collect()
    }

    /// One simplex run from `x0` with at most `evals` evaluations.
    fn run(&mut self, x0: &[f64], x0_value: Option<f64>, evals: usize) -> Result<()> {
        let n = x0.len();
        let stop_at = (self.trace.len() + evals).min(self.budget);
        let step = 0.1 * (self.hi - self.lo);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let v0 = match x0_value {
            Some(v) => v,
            None => self.eval(x0)?,
        };
        simplex.push((x0.to_vec(), v0));
        for i in 0..n {
            if self.trace.len() >= stop_at {
                return Ok(());
            }
            let mut x = x0.to_vec();
            x[i] = if x[i] + step <= self.hi {
                x[i] + step
            } else {
                x[i] - step
            };
            let v = self.eval(&x)?;
            simplex.push((x, v));
        }
        while self.trace.len() < stop_at {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[n].1 - simplex[0].1;
            let size = simplex[1..]
                .iter()
                .map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if spread.abs() < 1e-10 && size < 1e-7 {
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
                .collect();
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&worst.0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };
            let xr = self.clamp(along(-1.0));
            let fr = self.eval(&xr)?;
            if fr < simplex[0].1 {
                if self.trace.len() >= stop_at {
                    simplex[n] = (xr, fr);
                    break;
                }
                let xe = self.clamp(along(-2.0));
                let fe = self.eval(&xe)?;
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                if self.trace.len() >= stop_at {
                    break;
                }
                let t = if fr < worst.1 { -0.5 } else { 0.5 };
                let xc = self.clamp(along(t));
                let fc = self.eval(&xc)?;
                if fc < worst.1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    // Shrink toward the best vertex.
                    let best = simplex[0].0.clone();
                    for vertex in simplex.iter_mut().skip(1) {
                        if self.trace.len() >= stop_at {
                            return Ok(());
                        }
                        let x: Vec<f64> = best
                            .iter()
                            .zip(&vertex.0)
                            .map(|(b, v)| b + 0.5 * (v - b))
                            .collect();
                        let v = self.eval(&x)?;
                        *vertex = (x, v);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Minimizes `f` over the box `bounds^dim`: one Nelder–Mead run from the
/// all-[`START_COEFF`] point, then `restarts` runs from seeded uniform points,
/// sharing `budget` evaluations evenly. Never returns a point worse than the
/// start.
pub fn nelder_mead<F: FnMut(&[f64]) -> Result<f64>>(
    mut f: F,
    dim: usize,
    bounds: [f64; 2],
    budget: usize,
    restarts: usize,
    seed: u64,
) -> Result<SearchResult> {
    if dim == 0 || budget == 0 {
        return Err(Error::invalid(
            "search needs a positive dimension and budget",
        ));
    }
    let x0 = vec![START_COEFF; dim];
    let mut s = Search {
        f: &mut f,
        lo: bounds[0],
        hi: bounds[1],
        budget,
        trace: Vec::new(),
        best: x0.clone(),
        best_value: f64::INFINITY,
    };
    let start_value = s.eval(&x0)?;
    let share = budget / (restarts + 1);
    s.run(&x0, Some(start_value), share.max(dim + 1))?;
    let mut rng = seed::rng(seed);
    for r in 0..restarts {
        if s.exhausted() {
            break;
        }
        let x: Vec<f64> = (0..dim)
            .map(|_| rng.gen_range(bounds[0]..=bounds[1]))
            .collect();
        let evals = if r + 1 == restarts {
            budget - s.trace.len()
        } else {
            share
        };
        s.run(&x, None, evals)?;
    }
    let improved = s.best_value < start_value;
    let best = if improved { s.best.clone() } else { x0 };
    Ok(SearchResult {
        best,
        best_value: s.best_value.min(start_value),
        start_value,
        trace: s.trace,
        improved,
    })
}

/// Fusion coefficients and the evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub role: Role,
    pub adapter_ids: Vec<String>,
    pub coeffs: Vec<f64>,
    pub search: SearchResult,
    pub evaluations: usize,
    /// Query-set perplexity of each adapter alone (coefficient 1).
    pub ppl_components: Vec<f64>,
    pub ppl_start: f64,
    pub ppl_fused: f64,
    /// Inference FLOPs of the objective evaluations.
    pub flops: u64,
}

/// Optimizes coefficients for `adapters` on `query` and returns the fused
/// delta (with coefficients in its provenance) and the report.
pub fn optimize_coeffs(
    adapters: &[&LowRankAdapter],
    model: &TinyLM,
    query: &[Vec<u32>],
    cfg: &FusionConfig,
    role: Role,
    seed: u64,
) -> Result<(DenseDelta, FusionReport)> {
    cfg.check()?;
    if adapters.len() < 2 {
        return Err(Error::invalid(format!(
            "fusion needs at least 2 adapters, got {}",
            adapters.len()
        )));
    }
    if query.is_empty() {
        return Err(Error::invalid("fusion query set is empty"));
    }
    let mut flops = 0;
    let search = nelder_mead(
        |c| {
            let l = fusion_loss(c, adapters, model, query, cfg.psi)?;
            flops += l.flops;
            Ok(l.total)
        },
        adapters.len(),
        cfg.coeff_bounds,
        cfg.budget,
        cfg.restarts,
        seed,
    )?;
    let delta = fuse(adapters, &search.best, role)?;
    let ppl = |c: &[f64]| -> Result<f64> {
        let d = fuse(adapters, c, role)?;
        let lps: Vec<f64> = model
            .prepare(AdapterRef::Dense(&d))?
            .docs_log_probs(query)?
            .into_iter()
            .flatten()
            .collect();
        perplexity_from_log_probs(&lps)
    };
    let ppl_components = (0..adapters.len())
        .map(|i| {
            let mut c = vec![0.0; adapters.len()];
            c[i] = 1.0;
            ppl(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = FusionReport {
        role,
        adapter_ids: adapters.iter().map(|a| a.id().to_string()).collect(),
        coeffs: search.best.clone(),
        evaluations: search.trace.len(),
        ppl_components,
        ppl_start: ppl(&vec![START_COEFF; adapters.len()])?,
        ppl_fused: ppl(&search.best)?,
        search,
        flops,
    };
    Ok((delta, report))
}

/// `α₁·global + α₂·local_secure`, fitted on a masked-view query set.
pub fn build_secure_personalized(
    global: &LowRankAdapter,
    local_secure: &LowRankAdapter,
    model: &TinyLM,
    masked_query: &[Vec<u32>],
    cfg: &FusionConfig,
    seed: u64,
) -> Result<(DenseDelta, FusionReport)> {
    if masked_query.is_empty() {
        return Err(Error::invalid("masked view query set is empty"));
    }
    optimize_coeffs(
        &[global, local_secure],
        model,
        masked_query,
        cfg,
        Role::FusedSecure,
        seed,
    )
}

/// `β₁·global + β₂·local_revealing (+ …)`, fitted on a raw-view query set.
/// The result is local-only: its role refuses network serialization.
pub fn build_revealing_personalized(
    global: &LowRankAdapter,
    local_revealing: &[&LowRankAdapter],
    model: &TinyLM,
    raw_query: &[Vec<u32>],
    cfg: &FusionConfig,
    seed: u64,
) -> Result<(DenseDelta, FusionReport)> {
    if raw_query.is_empty() {
        return Err(Error::invalid("raw view query set is empty"));
    }
    if local_revealing.is_empty() {
        return Err(Error::invalid("no revealing adapter to fuse"));
    }
    let mut all = vec![global];
    all.extend_from_slice(local_revealing);
    optimize_coeffs(&all, model, raw_query, cfg, Role::FusedRevealing, seed)
}
