use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data_synth::DomainDataset;
use crate::nets::BaseNetwork;
use crate::par::{self, Exec};
use crate::tensor::{Real, Tape, Tensor};
use crate::{Error, Result};

const INFER_CHUNK: usize = 256;

/// Copies rows `idx` of an image tensor into a new `[idx.len(), ...]` batch.
pub(crate) fn gather<T: Real>(images: &Tensor<f32>, idx: &[usize]) -> Tensor<T> {
    let mut shape = images.shape().to_vec();
    let row = images.numel() / shape[0];
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend(images.row(i).iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(shape, data).expect("gathered rows match shape")
}

/// Features and logits of every image, computed in chunks.
pub(crate) fn infer_all<T: Real>(net: &BaseNetwork<T>, images: &Tensor<f32>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = images.shape()[0];
    let chunks = n.div_ceil(INFER_CHUNK);
    let parts = par::map_range(Exec::for_work(n * 100_000), chunks, |c| {
        let idx: Vec<usize> = (c * INFER_CHUNK..((c + 1) * INFER_CHUNK).min(n)).collect();
        net.infer(gather(images, &idx)).map(|(f, l, _)| (f, l))
    });
    let (d, k) = (net.config.feature_dim, net.config.num_classes);
    let mut feats = Vec::with_capacity(n * d);
    let mut logits = Vec::with_capacity(n * k);
    for p in parts {
        let (f, l) = p?;
        feats.extend_from_slice(f.data());
        logits.extend_from_slice(l.data());
    }
    Ok((Tensor::new([n, d], feats)?, Tensor::new([n, k], logits)?))
}

/// Softmax class probabilities of every image.
pub(crate) fn predict_probs<T: Real>(net: &BaseNetwork<T>, images: &Tensor<f32>) -> Result<Tensor<T>> {
    let (_, logits) = infer_all(net, images)?;
    let tape = Tape::new();
    Ok(tape.constant(logits).softmax(1)?.value().as_ref().clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores argmax predictions against predicted `labels`.
pub(crate) fn score(predictions: &[usize], labels: &[usize], k: usize) -> Evaluation {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Evaluation {
        accuracy: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        },
        per_class_accuracy,
        confusion,
    }
}

/// Accuracy, per-class accuracy and confusion matrix of `net` on `ds`,
/// reading labels through the evaluation accessor.
pub fn evaluate<T: Real>(net: &BaseNetwork<T>, ds: &DomainDataset) -> Result<Evaluation> {
    let labels = ds
        .eval_labels()
        .ok_or_else(|| Error::invalid("evaluate", "dataset carries no labels"))?;
    let (_, logits) = infer_all(net, ds.images())?;
    let predictions = crate::pseudo::assign_pseudo_labels(&logits);
    Ok(score(&predictions, labels, ds.num_classes))
}

/// Rows of 2-D principal-component coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Option<Vec<usize>>,
    /// Variance along each component.
    pub variance: [f64; 2],
}

/// Projects feature rows `[n, d]` onto their top two principal components.
///
/// Each component's sign is fixed so that its largest-magnitude loading is
/// positive.
pub fn feature_projection<T: Real>(features: &Tensor<T>) -> Result<Projection> {
    let (n, d) = match features.shape() {
        &[n, d] if n > 0 && d >= 2 => (n, d),
        s => {
            return Err(Error::invalid(
                "feature_projection",
                format!("need [n>0, d>=2] features, got {s:?}"),
            ))
        }
    };
    let x = DMatrix::from_row_iterator(n, d, features.data().iter().map(|v| v.f64()));
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for &j in &order[..2] {
        let mut v = eig.eigenvectors.column(j).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let r = centred.row(i);
            [r.dot(&axes[0].transpose()), r.dot(&axes[1].transpose())]
        })
        .collect();
    let var = |k: usize| coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / n as f64;
    Ok(Projection {
        variance: [var(0), var(1)],
        coords,
        labels: None,
    })
}

/// Writes `pc1,pc2,label` rows for every sample of `ds` to `path`.
pub fn export_feature_projection<T: Real>(net: &BaseNetwork<T>, ds: &DomainDataset, path: &Path) -> Result<Projection> {
    let (features, _) = infer_all(net, ds.images())?;
    let mut proj = feature_projection(&features)?;
    proj.labels = ds.eval_labels().map(<[usize]>::to_vec);
    let mut out = String::from("pc1,pc2,label\n");
    for (i, c) in proj.coords.iter().enumerate() {
        let label = proj.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", c[0], c[1], label));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(proj)
}
