//! Synthetic labeled-source / unlabeled-target domain pairs.
//!
//! Each class is one procedural glyph rendered with per-sample jitter. The
//! target domain runs the same renderer and then applies a [`ShiftConfig`]
//! (rotation, blur, contrast loss, noise). Target labels are kept for
//! evaluation only: training code gets an [`UnlabeledView`], and every read
//! of hidden labels is counted.

mod glyphs;
mod io;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use glyphs::{blur, render, rotate, Glyph};
pub use io::{DATASET_MAGIC, DATASET_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

/// Strength of the source-to-target shift. All zeros means no shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Fixed rotation of every target image, degrees.
    pub rotation_deg: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Dimming: `x -> x * (1 - s/4)`.
    pub intensity_scale: f64,
}

impl ShiftConfig {
    /// The default benchmark shift.
    pub fn benchmark() -> Self {
        ShiftConfig {
            rotation_deg: 25.0,
            blur_sigma: 0.8,
            noise_sigma: 0.1,
            intensity_scale: 0.85,
        }
    }

    /// No shift: the target domain is drawn from the source distribution.
    pub fn none() -> Self {
        ShiftConfig {
            rotation_deg: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            intensity_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [
            self.rotation_deg,
            self.blur_sigma,
            self.noise_sigma,
            self.intensity_scale,
        ];
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!(
                "shift parameters must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }

    fn apply(&self, img: &[f32], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut out = rotate(img, h, w, self.rotation_deg);
        out = blur(&out, h, w, self.blur_sigma);
        if self.intensity_scale > 0.0 {
            let s = self.intensity_scale as f32;
            for v in &mut out {
                *v *= 1.0 - s / 4.0;
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            for v in &mut out {
                *v += normal.sample(rng) as f32;
            }
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Everything that determines a generated dataset pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub height: usize,
    pub width: usize,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Four classes, 2000 images per domain, benchmark shift.
    pub fn benchmark(seed: u64) -> Self {
        GeneratorConfig {
            num_classes: 4,
            n_source: 2000,
            n_target: 2000,
            height: 16,
            width: 16,
            shift: ShiftConfig::benchmark(),
            seed,
        }
    }
}

/// Images `[n, 1, h, w]` in `[0, 1]` with class labels.
#[derive(Debug)]
pub struct DomainDataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    labels_hidden: bool,
    pub domain: DomainTag,
    pub num_classes: usize,
    /// Generator configuration as JSON, carried through save/load verbatim.
    pub provenance: String,
    label_reads: AtomicUsize,
}

impl Clone for DomainDataset {
    fn clone(&self) -> Self {
        DomainDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            labels_hidden: self.labels_hidden,
            domain: self.domain,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.labels == other.labels
            && self.labels_hidden == other.labels_hidden
            && self.domain == other.domain
            && self.num_classes == other.num_classes
            && self.provenance == other.provenance
    }
}

/// Image-only access to a dataset.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    images: &'a Tensor<f32>,
    pub num_classes: usize,
}

impl<'a> UnlabeledView<'a> {
    pub fn images(&self) -> &'a Tensor<f32> {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DomainDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Option<Vec<usize>>,
        domain: DomainTag,
        num_classes: usize,
        provenance: String,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::invalid(
                "dataset",
                format!("images must be [n,c,h,w], got {:?}", images.shape()),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::shape("dataset", images.shape(), &[l.len()]));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::invalid(
                    "dataset",
                    format!("label {bad} out of range for {num_classes} classes"),
                ));
            }
        }
        Ok(DomainDataset {
            images,
            labels,
            labels_hidden: domain == DomainTag::Target,
            domain,
            num_classes,
            provenance,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels_hidden(&self) -> bool {
        self.labels_hidden
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            images: &self.images,
            num_classes: self.num_classes,
        }
    }

    /// Labels for supervised training. Fails on hidden (target) labels;
    /// the attempt is still counted.
    pub fn training_labels(&self) -> Result<&[usize]> {
        if self.labels_hidden {
            self.label_reads.fetch_add(1, Ordering::Relaxed);
            return Err(Error::LabelsHidden);
        }
        self.labels.as_deref().ok_or(Error::LabelsHidden)
    }

    /// Ground truth for evaluation; reads of hidden labels are counted.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        if self.labels_hidden && self.labels.is_some() {
            self.label_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.labels.as_deref()
    }

    /// Number of accesses to hidden labels so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Copies the listed samples into a new dataset of the same domain.
    pub fn subset(&self, indices: &[usize]) -> Result<DomainDataset> {
        let s = self.images.shape();
        let data = indices
            .iter()
            .flat_map(|&i| self.images.row(i).iter().copied())
            .collect();
        let images = Tensor::new([indices.len(), s[1], s[2], s[3]], data)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        let mut out = DomainDataset::new(images, labels, self.domain, self.num_classes, self.provenance.clone())?;
        out.labels_hidden = self.labels_hidden;
        Ok(out)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let mut c = vec![0; self.num_classes];
        for &y in labels {
            c[y] += 1;
        }
        Some(c)
    }
}

fn stream_id(domain: DomainTag, index: usize) -> u64 {
    let tag = match domain {
        DomainTag::Source => 1u64,
        DomainTag::Target => 2u64,
    };
    (tag << 40) | index as u64
}

fn render_domain(cfg: &GeneratorConfig, domain: DomainTag, n: usize, exec: Option<Exec>) -> Result<DomainDataset> {
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.num_classes;
    let shift = match domain {
        DomainTag::Source => ShiftConfig::default(),
        DomainTag::Target => cfg.shift,
    };
    let exec = exec.unwrap_or_else(|| Exec::for_work(n * h * w * 64));
    let pixels: Vec<Vec<f32>> = par::map_range(exec, n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream_id(domain, i));
        let img = render(Glyph::ALL[i % k], h, w, &mut rng);
        if shift == ShiftConfig::default() {
            img
        } else {
            shift.apply(&img, h, w, &mut rng)
        }
    });
    let images = Tensor::new([n, 1, h, w], pixels.concat())?;
    let labels = (0..n).map(|i| i % k).collect();
    let provenance = serde_json::to_string(&serde_json::json!({
        "generator": cfg,
        "domain": domain,
    }))?;
    DomainDataset::new(images, Some(labels), domain, k, provenance)
}

/// Generates `(source, target)`; `(config, seed)` fixes every pixel.
pub fn generate_domain_pair(cfg: &GeneratorConfig) -> Result<(DomainDataset, DomainDataset)> {
    generate(cfg, None)
}

/// [`generate_domain_pair`] with a forced execution mode. The output does
/// not depend on it.
pub fn generate_domain_pair_with(cfg: &GeneratorConfig, exec: Exec) -> Result<(DomainDataset, DomainDataset)> {
    generate(cfg, Some(exec))
}

fn generate(cfg: &GeneratorConfig, exec: Option<Exec>) -> Result<(DomainDataset, DomainDataset)> {
    cfg.shift.validate()?;
    let k = cfg.num_classes;
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if k > Glyph::ALL.len() {
        return Err(Error::Config(format!(
            "{k} classes requested but the glyph library has {}",
            Glyph::ALL.len()
        )));
    }
    if cfg.n_source < 2 * k || cfg.n_target < 2 * k {
        return Err(Error::Config(format!(
            "need at least two samples per class, got {} source / {} target for {k} classes",
            cfg.n_source, cfg.n_target
        )));
    }
    if cfg.height < 4 || cfg.width < 4 {
        return Err(Error::Config("canvas must be at least 4x4".into()));
    }
    Ok((
        render_domain(cfg, DomainTag::Source, cfg.n_source, exec)?,
        render_domain(cfg, DomainTag::Target, cfg.n_target, exec)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: ShiftConfig, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: 4,
            n_source: 400,
            n_target: 400,
            height: 16,
            width: 16,
            shift,
            seed,
        }
    }

    fn mean(t: &Tensor<f32>) -> f64 {
        t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
    }

    #[test]
    fn zero_shift_matches_marginals() {
        let (s, t) = generate_domain_pair(&small(ShiftConfig::default(), 3)).unwrap();
        assert!((mean(s.images()) - mean(t.images())).abs() < 0.01);
        assert_ne!(s.images(), t.images());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(ShiftConfig::benchmark(), 5);
        let (a, b) = generate_domain_pair(&cfg).unwrap();
        let (c, d) = generate_domain_pair(&cfg).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert!(b.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn class_balance() {
        let mut cfg = GeneratorConfig::benchmark(0);
        cfg.n_source = 2000;
        cfg.n_target = 8;
        let (s, _) = generate_domain_pair(&cfg).unwrap();
        for c in s.class_counts().unwrap() {
            assert!((499..=501).contains(&c));
        }
    }

    #[test]
    fn too_many_classes_rejected() {
        let mut cfg = small(ShiftConfig::default(), 0);
        cfg.num_classes = Glyph::ALL.len() + 1;
        assert!(generate_domain_pair(&cfg).is_err());
        cfg.num_classes = 1;
        assert!(generate_domain_pair(&cfg).is_err());
    }

    #[test]
    fn target_labels_are_gated_and_audited() {
        let (s, t) = generate_domain_pair(&small(ShiftConfig::benchmark(), 1)).unwrap();
        assert!(s.training_labels().is_ok());
        assert!(matches!(t.training_labels(), Err(Error::LabelsHidden)));
        assert_eq!(t.label_reads(), 1);
        assert!(t.eval_labels().is_some());
        assert_eq!(t.label_reads(), 2);
        let _ = s.eval_labels();
        assert_eq!(s.label_reads(), 0);
        assert_eq!(t.unlabeled().len(), 400);
    }

    #[test]
    fn subset_keeps_gating() {
        let (_, t) = generate_domain_pair(&small(ShiftConfig::default(), 1)).unwrap();
        let sub = t.subset(&[0, 5, 9]).unwrap();
        assert_eq!(sub.len(), 3);
        assert!(sub.labels_hidden());
        assert_eq!(sub.images().row(1), t.images().row(5));
    }
}
