use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::Streams;

/// Label-skewed assignment of samples to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPartition {
    pub alpha: f64,
    /// `assignment[sample] = client`.
    pub assignment: Vec<usize>,
    /// `counts[client][class]`.
    pub counts: Vec<Vec<usize>>,
}

impl DirichletPartition {
    pub fn num_clients(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn client_size(&self, client: usize) -> usize {
        self.counts[client].iter().sum()
    }

    /// Sample indices held by `client`, ascending.
    pub fn client_samples(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == client)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-client label proportions. Rows of empty clients are all zero.
    pub fn proportions(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn global_proportions(&self) -> Vec<f64> {
        let total = self.assignment.len() as f64;
        (0..self.num_classes())
            .map(|k| self.counts.iter().map(|row| row[k]).sum::<usize>() as f64 / total)
            .collect()
    }

    /// Largest `|client share − global share|` over nonempty clients and classes.
    pub fn max_label_deviation(&self) -> f64 {
        let global = self.global_proportions();
        self.proportions()
            .iter()
            .zip(&self.counts)
            .filter(|(_, row)| row.iter().sum::<usize>() > 0)
            .flat_map(|(p, _)| p.iter().zip(&global).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Mean over nonempty clients of their largest label share.
    pub fn dominant_label_share(&self) -> f64 {
        let shares: Vec<f64> = self
            .proportions()
            .iter()
            .zip(&self.counts)
            .filter(|(_, row)| row.iter().sum::<usize>() > 0)
            .map(|(p, _)| p.iter().copied().fold(0.0, f64::max))
            .collect();
        shares.iter().sum::<f64>() / shares.len() as f64
    }

    /// `client_id,class_id,count,proportion` rows, one per (client, class).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,class_id,count,proportion\n");
        for (client, (row, props)) in self.counts.iter().zip(self.proportions()).enumerate() {
            for (class, (count, p)) in row.iter().zip(props).enumerate() {
                let _ = writeln!(out, "{client},{class},{count},{p}");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Splits each class across clients by proportions drawn from a symmetric
/// `Dirichlet(alpha)` (normalized Gamma draws).
///
/// Labels must be dense class ids `0..C` with every class present.
pub fn dirichlet_partition(labels: &[usize], n_clients: usize, alpha: f64, seed: u64) -> Result<DirichletPartition> {
    if labels.is_empty() {
        return Err(Error::invalid("empty label set"));
    }
    if n_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("class {k} has no samples")));
    }

    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let streams = Streams::new(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut counts = vec![vec![0usize; num_classes]; n_clients];
    for (class, members) in by_class.iter_mut().enumerate() {
        let mut rng = streams.named("partition", class as u64);
        members.shuffle(&mut rng);
        let weights = loop {
            let w: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = w.iter().sum();
            // Tiny alpha can underflow every draw to zero; redraw.
            if total > 0.0 {
                break w.into_iter().map(|v| v / total).collect::<Vec<_>>();
            }
        };
        let size = members.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (client, p) in weights.iter().enumerate() {
            cum += p;
            let end = if client + 1 == n_clients {
                size
            } else {
                ((cum * size as f64).floor() as usize).clamp(start, size)
            };
            for &sample in &members[start..end] {
                assignment[sample] = client;
            }
            counts[client][class] = end - start;
            start = end;
        }
    }
    Ok(DirichletPartition {
        alpha,
        assignment,
        counts,
    })
}
