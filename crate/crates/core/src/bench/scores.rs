use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// Games by methods, one mean and std per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub games: Vec<String>,
    pub methods: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub normalized: bool,
}

impl ScoreTable {
    pub fn new(methods: Vec<String>) -> ScoreTable {
        ScoreTable { games: Vec::new(), methods, mean: Vec::new(), std: Vec::new(), normalized: false }
    }

    pub fn push_row(&mut self, game: impl Into<String>, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.methods.len() || std.len() != self.methods.len() {
            return Err(contract_err!("row has {} cells for {} methods", mean.len(), self.methods.len()));
        }
        if std.iter().any(|s| *s < 0.0 || s.is_nan()) {
            return Err(contract_err!("std cells must be nonnegative"));
        }
        self.games.push(game.into());
        self.mean.push(mean);
        self.std.push(std);
        Ok(())
    }

    /// Appends the columns of `other`, which must list the same games in order.
    pub fn join(&mut self, other: &ScoreTable) -> Result<()> {
        if self.methods.is_empty() && self.games.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.games != other.games || self.normalized != other.normalized {
            return Err(contract_err!("cannot join score tables over different games"));
        }
        self.methods.extend(other.methods.iter().cloned());
        for (i, row) in self.mean.iter_mut().enumerate() {
            row.extend_from_slice(&other.mean[i]);
        }
        for (i, row) in self.std.iter_mut().enumerate() {
            row.extend_from_slice(&other.std[i]);
        }
        Ok(())
    }

    pub fn column(&self, method: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == method)
    }

    /// Column means of the mean and std cells (the "O" row).
    pub fn overall(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.games.len().max(1) as f64;
        let col = |cells: &Vec<Vec<f64>>, j: usize| cells.iter().map(|r| r[j]).sum::<f64>() / n;
        (
            (0..self.methods.len()).map(|j| col(&self.mean, j)).collect(),
            (0..self.methods.len()).map(|j| col(&self.std, j)).collect(),
        )
    }
}

/// Row factors: `(max positive mean, |most negative mean|)`, zero when absent.
fn row_factors(means: &[f64]) -> (f64, f64) {
    let pos = means.iter().copied().filter(|v| *v > 0.0).fold(0.0, f64::max);
    let neg = means.iter().copied().filter(|v| *v < 0.0).fold(0.0, f64::min).abs();
    (pos, neg)
}

/// Normalises one row of means and stds across methods.
pub fn normalize_row(means: &[f64], stds: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (pos, neg) = row_factors(means);
    let factor = |m: f64| {
        if m > 0.0 {
            pos
        } else if m < 0.0 {
            neg
        } else if pos > 0.0 {
            pos
        } else {
            neg
        }
    };
    let div = |v: f64, f: f64| if f > 0.0 { v / f } else { 0.0 };
    let nm = means.iter().map(|&m| div(m, factor(m))).collect();
    let ns = means.iter().zip(stds).map(|(&m, &s)| div(s, factor(m))).collect();
    (nm, ns)
}

/// Per game, positive means divide by the largest positive mean and negative
/// means by the magnitude of the most negative one; stds follow their mean.
pub fn normalize_scores(raw: &ScoreTable) -> ScoreTable {
    let mut out = raw.clone();
    for (i, (m, s)) in raw.mean.iter().zip(&raw.std).enumerate() {
        let (nm, ns) = normalize_row(m, s);
        out.mean[i] = nm;
        out.std[i] = ns;
    }
    out.normalized = true;
    out
}

/// One split of a report: raw scores plus their normalised view.
#[derive(Clone, Debug)]
pub struct ReportSection {
    pub split: String,
    pub raw: ScoreTable,
    pub norm: ScoreTable,
}

impl ReportSection {
    pub fn new(split: impl Into<String>, raw: ScoreTable) -> ReportSection {
        let norm = normalize_scores(&raw);
        ReportSection { split: split.into(), raw, norm }
    }
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

/// `split,game_id,method,raw_mean,raw_std,norm_mean,norm_std`, with one "O"
/// row per method closing each split.
pub fn report_csv(sections: &[ReportSection]) -> String {
    let mut out = String::from("split,game_id,method,raw_mean,raw_std,norm_mean,norm_std\n");
    for sec in sections {
        for (i, game) in sec.raw.games.iter().enumerate() {
            for (j, method) in sec.raw.methods.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{game},{method},{},{},{},{}",
                    sec.split,
                    num(sec.raw.mean[i][j]),
                    num(sec.raw.std[i][j]),
                    num(sec.norm.mean[i][j]),
                    num(sec.norm.std[i][j])
                );
            }
        }
        let (om, os) = sec.norm.overall();
        for (j, method) in sec.norm.methods.iter().enumerate() {
            let _ = writeln!(out, "{},O,{method},,,{},{}", sec.split, num(om[j]), num(os[j]));
        }
    }
    out
}

/// Plain-text comparison of O rows.
pub fn summary_text(sections: &[ReportSection]) -> String {
    let mut out = String::new();
    for sec in sections {
        let (om, os) = sec.norm.overall();
        let _ = writeln!(out, "{} ({} games)", sec.split, sec.norm.games.len());
        for (j, method) in sec.norm.methods.iter().enumerate() {
            let _ = writeln!(out, "  {method:<7} O = {:>6.3} +- {:.3}", om[j], os[j]);
        }
    }
    out
}
