//! Subject-fold cross-validation over a `(px, qy)` sparsity grid.
//!
//! For every cell and fold the first component is fitted on the training
//! subjects (standardized with training statistics only). Held-out score:
//! project the test rows with the frozen weights, refit the `Y`-side latent
//! model on the test subjects, predict it on the test `X` grid and correlate
//! with the test `X` latent series.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, subject_folds, FoldAssignment, PairedStudy};
use crate::error::{Error, Result};
use crate::lme::LmeProblem;
use crate::mm::{fit_component_mm, MmConfig};
use crate::scca::{canonical_correlation, DeflationState};

/// Stage of a fold at which a set of subjects touched the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldStage {
    /// Subjects whose rows fed the standardization statistics.
    Standardization,
    /// Subjects whose rows fed the weight updates.
    WeightFit,
}

/// Passed to a [`CvHook`] once per stage of every cell/fold task.
#[derive(Debug)]
pub struct FoldEvent<'a> {
    pub px: usize,
    pub qy: usize,
    pub fold: usize,
    pub stage: FoldStage,
    pub subjects: &'a BTreeSet<String>,
    pub test_subjects: &'a BTreeSet<String>,
}

pub type CvHook<'a> = &'a (dyn Fn(&FoldEvent) + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub px: usize,
    pub qy: usize,
    pub fold: usize,
    /// `None` when the fold failed.
    pub rho: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub px: usize,
    pub qy: usize,
    /// Mean held-out correlation over successful folds; `-inf` if none succeeded.
    #[serde(with = "float_or_string")]
    pub mean_rho: f64,
    pub sd_rho: f64,
    pub folds_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<(usize, usize)>,
    pub k_folds: usize,
    pub seed: u64,
    pub folds: Vec<FoldScore>,
    pub cells: Vec<CellSummary>,
    pub selected: (usize, usize),
}

mod float_or_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            v.to_string().serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Default grid: the cross product of `{5, 10, 20, 40, 80}` with itself,
/// clipped to the view dimensions.
pub fn default_grid(p: usize, q: usize) -> Vec<(usize, usize)> {
    let levels = [5usize, 10, 20, 40, 80];
    let clip = |v: &[usize], d: usize| -> Vec<usize> {
        let mut out: Vec<usize> = v.iter().map(|&k| k.min(d)).collect();
        out.dedup();
        out
    };
    let (xs, ys) = (clip(&levels, p), clip(&levels, q));
    xs.iter().flat_map(|&a| ys.iter().map(move |&b| (a, b))).collect()
}

/// Held-out correlation for one cell on one fold.
fn score_fold(
    study: &PairedStudy,
    folds: &FoldAssignment,
    fold: usize,
    cfg: &MmConfig,
    hook: Option<CvHook>,
) -> Result<f64> {
    let train_ids = folds.train_subjects(fold);
    let test_ids = folds.test_subjects(fold);
    let notify = |stage, subjects: &BTreeSet<String>| {
        if let Some(h) = hook {
            h(&FoldEvent {
                px: cfg.px,
                qy: cfg.qy,
                fold,
                stage,
                subjects,
                test_subjects: &test_ids,
            });
        }
    };

    let train_raw = study.subset_subjects(&train_ids)?;
    let test_raw = study.subset_subjects(&test_ids)?;
    let (tx, sx) = standardize(&train_raw.x)?;
    let (ty, sy) = standardize(&train_raw.y)?;
    let seen: BTreeSet<String> = tx
        .blocks()
        .iter()
        .chain(ty.blocks())
        .map(|b| b.id.clone())
        .collect();
    notify(FoldStage::Standardization, &seen);
    let train = PairedStudy::new(tx, ty);
    let test = PairedStudy::new(sx.apply(&test_raw.x)?, sy.apply(&test_raw.y)?);

    let cfg = MmConfig { k: 1, ..cfg.clone() };
    let state = DeflationState::new(train.x.values().to_owned(), train.y.values().to_owned());
    notify(FoldStage::WeightFit, &seen);
    let comp = fit_component_mm(&train, &cfg, &state, 1)?;
    if comp.null {
        return Err(Error::ZeroVariance);
    }

    let eta = test.x.values().dot(&comp.weights.w_x);
    let gamma = test.y.values().dot(&comp.weights.w_y);
    let lme_y = LmeProblem::from_view(cfg.basis_y, &test.y)?;
    let fit_y = lme_y.fit(gamma.as_slice().expect("contiguous"), cfg.lambda)?;
    let gamma_tilde = fit_y.predict(test.x.subject_ids(), test.x.times());
    canonical_correlation(eta.view(), gamma_tilde.view())
}

/// Index of the best cell: highest mean, ties to the smaller `px + qy`,
/// then the smaller `px`. `None` if every cell is `-inf`.
pub fn select_cell(cells: &[CellSummary]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if c.mean_rho == f64::NEG_INFINITY {
            continue;
        }
        let take = match best {
            None => true,
            Some(b) => {
                let cur = &cells[b];
                if c.mean_rho != cur.mean_rho {
                    c.mean_rho > cur.mean_rho
                } else {
                    (c.px + c.qy, c.px) < (cur.px + cur.qy, cur.px)
                }
            }
        };
        if take {
            best = Some(i);
        }
    }
    best
}

fn summarize(px: usize, qy: usize, scores: &[FoldScore]) -> CellSummary {
    let ok: Vec<f64> = scores.iter().filter_map(|s| s.rho).collect();
    let n = ok.len();
    let (mean_rho, sd_rho) = if n == 0 {
        (f64::NEG_INFINITY, f64::NAN)
    } else {
        let m = ok.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        (m, sd)
    };
    CellSummary {
        px,
        qy,
        mean_rho,
        sd_rho,
        folds_ok: n,
    }
}

/// Cross-validates the first component over `grid` on the raw (unstandardized)
/// study. `template` supplies everything but `px`, `qy` and `k`.
pub fn cv_select(
    study: &PairedStudy,
    grid: &[(usize, usize)],
    k_folds: usize,
    template: &MmConfig,
    seed: u64,
) -> Result<CvReport> {
    cv_select_with_hook(study, grid, k_folds, template, seed, None)
}

pub fn cv_select_with_hook(
    study: &PairedStudy,
    grid: &[(usize, usize)],
    k_folds: usize,
    template: &MmConfig,
    seed: u64,
    hook: Option<CvHook>,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty sparsity grid".into()));
    }
    let folds = subject_folds(study, k_folds, seed)?;
    let tasks: Vec<(usize, usize, usize)> = grid
        .iter()
        .flat_map(|&(px, qy)| (0..k_folds).map(move |f| (px, qy, f)))
        .collect();
    let scores: Vec<FoldScore> = tasks
        .par_iter()
        .map(|&(px, qy, fold)| {
            let cfg = MmConfig {
                px,
                qy,
                ..template.clone()
            };
            match score_fold(study, &folds, fold, &cfg, hook) {
                Ok(rho) => FoldScore {
                    px,
                    qy,
                    fold,
                    rho: Some(rho),
                    error: None,
                },
                Err(e) => {
                    warn!("cell ({px}, {qy}) fold {fold} failed: {e}");
                    FoldScore {
                        px,
                        qy,
                        fold,
                        rho: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let cells: Vec<CellSummary> = scores
        .chunks(k_folds)
        .zip(grid)
        .map(|(s, &(px, qy))| summarize(px, qy, s))
        .collect();
    let best = select_cell(&cells).ok_or(Error::NoValidCell)?;
    Ok(CvReport {
        grid: grid.to_vec(),
        k_folds,
        seed,
        folds: scores,
        selected: (cells[best].px, cells[best].qy),
        cells,
    })
}

impl CvReport {
    /// One row per cell and fold.
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["px", "qy", "fold", "rho", "error"])?;
        for s in &self.folds {
            out.write_record([
                s.px.to_string(),
                s.qy.to_string(),
                s.fold.to_string(),
                s.rho.map(|r| r.to_string()).unwrap_or_default(),
                s.error.clone().unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let csv_path = dir.join("cv_folds.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv_to(f)?;
        let json_path = dir.join("cv_summary.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
