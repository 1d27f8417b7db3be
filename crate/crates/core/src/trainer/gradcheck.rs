//! Central-difference check of the full training loss against reverse-mode gradients.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample_gradients;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Cft, LossSetup};
use crate::synth::PairedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates to probe; raised to the parameter count so every tensor is covered.
    pub coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so two near-zero values compare absolutely.
    pub floor: f64,
    /// Failure threshold on the largest relative error.
    pub max_tol: f64,
    /// Per-coordinate threshold behind [`GradCheckReport::frac_within`].
    pub coord_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            coords: 256,
            seed: 0,
            floor: 1e-6,
            max_tol: 1e-3,
            coord_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub n_coords: usize,
    pub n_params: usize,
    pub params_covered: usize,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
    /// Fraction of coordinates with relative error below `coord_tol`.
    pub frac_within: f64,
    pub coord_tol: f64,
    pub worst: GradCheckEntry,
    pub seconds: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Fails with the worst coordinate when it exceeds `max_tol`.
    pub fn check(&self, max_tol: f64) -> Result<()> {
        if self.max_rel_err > max_tol || !self.max_rel_err.is_finite() {
            let w = &self.worst;
            return Err(Error::GradCheck {
                param: w.param.clone(),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
                rel_err: w.rel_err,
            });
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(floor)
}

fn total_loss(model: &Cft<f64>, sample: &PairedSample, setup: &LossSetup) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.cfp.cast(), &sample.ifp.cast())?;
    let b = model.losses(&mut g, &out, sample.label, setup)?;
    Ok(g.value(b.total).data()[0])
}

/// Probes at least one coordinate of every parameter tensor, then fills up to
/// `cfg.coords` with distinct coordinates drawn uniformly over all scalars.
pub fn grad_check(
    model: &Cft<f64>,
    sample: &PairedSample,
    setup: &LossSetup,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return Err(Error::config("gradcheck.h", "must be finite and positive"));
    }
    let started = Instant::now();
    let (_, grads) = sample_gradients(model, sample, setup)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sizes: Vec<usize> = model.params.iter().map(|(_, p)| p.value.len()).collect();
    let starts: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &n| {
            let s = *acc;
            *acc += n;
            Some(s)
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let mut picked = BTreeSet::new();
    for (s, &n) in starts.iter().zip(&sizes) {
        picked.insert(s + rng.gen_range(0..n));
    }
    let want = cfg.coords.max(picked.len()).min(total);
    if picked.len() < want {
        for flat in index::sample(&mut rng, total, total) {
            picked.insert(flat);
            if picked.len() == want {
                break;
            }
        }
    }

    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(picked.len());
    let mut covered = BTreeSet::new();
    for flat in picked {
        let pi = starts.partition_point(|&s| s <= flat) - 1;
        let idx = flat - starts[pi];
        let (id, name) = {
            let (id, p) = probe.params.iter().nth(pi).expect("index within store");
            (id, p.name.clone())
        };
        let orig = probe.params.value(id).data()[idx];
        probe.params.get_mut(id).value.data_mut()[idx] = orig + cfg.h;
        let up = total_loss(&probe, sample, setup)?;
        probe.params.get_mut(id).value.data_mut()[idx] = orig - cfg.h;
        let down = total_loss(&probe, sample, setup)?;
        probe.params.get_mut(id).value.data_mut()[idx] = orig;

        let numeric = (up - down) / (2.0 * cfg.h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
        covered.insert(pi);
        entries.push(GradCheckEntry {
            param: name,
            index: idx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, cfg.floor),
        });
    }

    let mut errs: Vec<f64> = entries.iter().map(|e| e.rel_err).collect();
    errs.sort_by(f64::total_cmp);
    let median = if errs.len() % 2 == 1 {
        errs[errs.len() / 2]
    } else {
        0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
    };
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .cloned()
        .ok_or(Error::Empty("gradient check coordinates"))?;
    let within = entries.iter().filter(|e| e.rel_err < cfg.coord_tol).count();
    Ok(GradCheckReport {
        h: cfg.h,
        n_coords: entries.len(),
        n_params: sizes.len(),
        params_covered: covered.len(),
        max_rel_err: worst.rel_err,
        median_rel_err: median,
        frac_within: within as f64 / entries.len() as f64,
        coord_tol: cfg.coord_tol,
        worst,
        seconds: started.elapsed().as_secs_f64(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_rules() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert_eq!(relative_error(1.0, 1.0, 1e-8), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0, 1e-8) - 1e-4).abs() < 1e-15);
    }
}
