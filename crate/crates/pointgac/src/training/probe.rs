//! Linear probe: nearest-class-centroid classification on frozen encoder
//! features.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::diffcore::transformer::stack_forward;
use crate::diffcore::Graph;
use crate::embedding::embed;
use crate::error::{Error, Result};

use super::model::StudentParams;
use super::{Dataset, PreparedCloud};

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Per-cloud feature: mean of the encoded tokens under the frozen student
/// embedding + encoder.
pub fn encode_cloud(student: &StudentParams, heads: usize, item: &PreparedCloud) -> Vec<f64> {
    let mut g = Graph::new();
    let (vars, _) = student.bind(&mut g, false);
    let tokens = embed(&mut g, &item.patches, &item.cloud, &vars.embed);
    let out = stack_forward(&mut g, tokens.f, &vars.encoder, heads);
    let t = g.value(out);
    let (l, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0f64; d];
    for i in 0..l {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / l as f64;
        }
    }
    mean
}

/// Nearest-class-centroid accuracy: centroids from the train features,
/// evaluation on the held-out features. Ties resolve to the lowest class.
pub fn nearest_centroid_accuracy(
    train: &[(Vec<f64>, u32)],
    held_out: &[(Vec<f64>, u32)],
    num_classes: usize,
) -> f64 {
    assert!(!train.is_empty() && !held_out.is_empty());
    let d = train[0].0.len();
    let mut centroids = vec![vec![0.0f64; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, c) in train {
        counts[*c as usize] += 1;
        for (acc, v) in centroids[*c as usize].iter_mut().zip(f) {
            *acc += v;
        }
    }
    for (c, count) in centroids.iter_mut().zip(&counts) {
        if *count > 0 {
            c.iter_mut().for_each(|v| *v /= *count as f64);
        }
    }
    let mut correct = 0usize;
    for (f, label) in held_out {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let d: f64 = f.iter().zip(centroid).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best as u32 == *label {
            correct += 1;
        }
    }
    correct as f64 / held_out.len() as f64
}

/// Probe the frozen student encoder on the dataset's held-out split.
pub fn linear_probe(
    student: &StudentParams,
    config: &RunConfig,
    dataset: &Dataset,
) -> Result<ProbeResult> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::invalid("probe needs non-empty train and val splits"));
    }
    let features = |indices: &[usize]| -> Vec<(Vec<f64>, u32)> {
        indices
            .par_iter()
            .map(|&i| {
                let item = &dataset.items[i];
                (encode_cloud(student, config.heads, item), item.class)
            })
            .collect()
    };
    let train = features(&dataset.train);
    let val = features(&dataset.val);
    let accuracy = nearest_centroid_accuracy(&train, &val, config.classes);
    Ok(ProbeResult {
        accuracy,
        correct: (accuracy * val.len() as f64).round() as usize,
        total: val.len(),
    })
}
