//! Closed-form GPU-hour estimate for end-to-end recovery of a single
//! private image under each defense.
//!
//! Undefended (or gradient-pruned) pipelines cost one batch inversion.
//! Against InstaHide the attacker must recover the whole dataset first:
//! invert `T` epochs of gradients, train a similarity network, and run the
//! quadratic clustering step, giving
//! `(N·T/b)·t + (n/b)·t + 10 + (1/6)·(N·T/5000)²` hours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostDefense {
    None,
    GradPrune,
    InstaHide,
}

impl CostDefense {
    pub fn label(&self) -> &'static str {
        match self {
            CostDefense::None => "no defense",
            CostDefense::GradPrune => "gradprune",
            CostDefense::InstaHide => "instahide",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostInputs {
    /// Client dataset size N, in images.
    pub dataset_size: f64,
    /// Eavesdropped epochs T.
    pub epochs: f64,
    /// Training batch size b.
    pub batch_size: f64,
    /// GPU hours per single-batch inversion, t.
    pub hours_per_batch: f64,
    /// Encodings needed to train the similarity network, n.
    pub sim_net_images: f64,
    pub defense: CostDefense,
}

impl CostInputs {
    /// Reference operating point: T = 50, b = 128, t = 0.25, n = 10,000.
    pub fn reference(dataset_size: f64, defense: CostDefense) -> Self {
        CostInputs {
            dataset_size,
            epochs: 50.0,
            batch_size: 128.0,
            hours_per_batch: 0.25,
            sim_net_images: 10_000.0,
            defense,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dataset_size", self.dataset_size),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hours_per_batch", self.hours_per_batch),
            ("sim_net_images", self.sim_net_images),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Infeasible(format!("{} must be positive, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Exact GPU-hour estimate; rounding happens only at the reporting
/// boundary.
pub fn estimate_hours(c: &CostInputs) -> Result<f64> {
    c.validate()?;
    Ok(match c.defense {
        CostDefense::None | CostDefense::GradPrune => c.hours_per_batch,
        CostDefense::InstaHide => {
            let nt = c.dataset_size * c.epochs;
            let invert_epochs = nt / c.batch_size * c.hours_per_batch;
            let sim_collect = c.sim_net_images / c.batch_size * c.hours_per_batch;
            let sim_train = 10.0;
            let clustering = (nt / 5_000.0).powi(2) / 6.0;
            invert_epochs + sim_collect + sim_train + clustering
        }
    })
}

/// The clustering term's share of the total (dominates for large N).
pub fn clustering_fraction(c: &CostInputs) -> Result<f64> {
    c.validate()?;
    match c.defense {
        CostDefense::InstaHide => {
            let total = estimate_hours(c)?;
            let clustering = (c.dataset_size * c.epochs / 5_000.0).powi(2) / 6.0;
            Ok(clustering / total)
        }
        _ => Ok(0.0),
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub dataset_size: f64,
    pub no_defense: f64,
    pub gradprune: f64,
    pub instahide: f64,
}

/// Rows of the recovery-cost table for a list of dataset sizes, rounded
/// for display.
pub fn cost_table(sizes: &[f64]) -> Result<Vec<CostRow>> {
    sizes
        .iter()
        .map(|&n| {
            Ok(CostRow {
                dataset_size: n,
                no_defense: round2(estimate_hours(&CostInputs::reference(n, CostDefense::None))?),
                gradprune: round2(estimate_hours(&CostInputs::reference(
                    n,
                    CostDefense::GradPrune,
                ))?),
                instahide: round2(estimate_hours(&CostInputs::reference(
                    n,
                    CostDefense::InstaHide,
                ))?),
            })
        })
        .collect()
}

pub fn render_table(rows: &[CostRow]) -> String {
    let mut out = String::new();
    out.push_str("dataset_size | no defense | gradprune | instahide (GPU hours)\n");
    for r in rows {
        out.push_str(&format!(
            "{:>12} | {:>10.2} | {:>9.2} | {:.2}\n",
            r.dataset_size, r.no_defense, r.gradprune, r.instahide
        ));
    }
    out
}
