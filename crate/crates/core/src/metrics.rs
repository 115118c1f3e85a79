//! `metrics.csv`: one row per logged step, probe or evaluation.
//!
//! Columns: `step, epoch, split, head, loss, accuracy_or_bpc,
//! sigma_group_1..sigma_group_{N-1}, loss_gap_1..loss_gap_{N-1},
//! grad_norm_sq, wall_ms`. Empty cells mean "not measured in this row".
//!
//! Splits: `train` (running training batch), `train_epoch` (epoch means of
//! the training batches; its gap columns hold the epoch mean of the
//! per-step `|L_i - L_N|`), `probe` and `epoch_probe` (diagnostics on the
//! fixed probe batch), and `test` or `valid` (held-out evaluation).

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub head: String,
    pub loss: Option<f64>,
    pub metric: Option<f64>,
    pub sigma: Vec<Option<f64>>,
    pub loss_gaps: Vec<Option<f64>>,
    pub grad_norm_sq: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: u64, epoch: usize, split: &str, head: &str, n_critics: usize) -> Self {
        MetricsRow {
            step,
            epoch,
            split: split.to_string(),
            head: head.to_string(),
            loss: None,
            metric: None,
            sigma: vec![None; n_critics],
            loss_gaps: vec![None; n_critics],
            grad_norm_sq: None,
            wall_ms: None,
        }
    }
}

pub fn header(n_critics: usize) -> String {
    let mut h = String::from("step,epoch,split,head,loss,accuracy_or_bpc");
    for i in 1..=n_critics {
        write!(h, ",sigma_group_{i}").unwrap();
    }
    for i in 1..=n_critics {
        write!(h, ",loss_gap_{i}").unwrap();
    }
    h.push_str(",grad_norm_sq,wall_ms");
    h
}

fn cell(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        write!(out, "{v}").unwrap();
    }
}

pub fn format_row(row: &MetricsRow) -> String {
    let mut s = format!("{},{},{},{}", row.step, row.epoch, row.split, row.head);
    cell(&mut s, row.loss);
    cell(&mut s, row.metric);
    for v in row.sigma.iter().chain(&row.loss_gaps) {
        cell(&mut s, *v);
    }
    cell(&mut s, row.grad_norm_sq);
    cell(&mut s, row.wall_ms);
    s
}

/// Parses one cell back; empty cells are `None`.
pub fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::format("metrics.csv", format!("`{s}` is not a number")))
}

/// Collects rows in memory and optionally streams them to a file.
pub struct MetricsLog {
    n_critics: usize,
    rows: Vec<MetricsRow>,
    file: Option<(std::path::PathBuf, std::io::BufWriter<std::fs::File>)>,
}

impl MetricsLog {
    pub fn new(n_critics: usize, path: Option<&std::path::Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                let mut w = std::io::BufWriter::new(f);
                writeln!(w, "{}", header(n_critics)).map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), w))
            }
            None => None,
        };
        Ok(MetricsLog {
            n_critics,
            rows: Vec::new(),
            file,
        })
    }

    pub fn n_critics(&self) -> usize {
        self.n_critics
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some((p, w)) = &mut self.file {
            writeln!(w, "{}", format_row(&row)).map_err(|e| Error::io(p.clone(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((p, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(p.clone(), e))?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(mut self) -> Result<Vec<MetricsRow>> {
        self.flush()?;
        Ok(std::mem::take(&mut self.rows))
    }

    /// The whole log as CSV text.
    pub fn to_csv(&self) -> String {
        let mut s = header(self.n_critics);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format_row(r));
            s.push('\n');
        }
        s
    }
}
