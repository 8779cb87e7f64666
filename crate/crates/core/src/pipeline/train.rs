use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use super::eval::{evaluate, gather, predict_probs};
use super::report::{EpochLosses, RunReport, StageReport, FORMAT_VERSION};
use super::{streams, AdaptationConfig, Variant};
use crate::data_synth::{DomainDataset, UnlabeledView};
use crate::losses::{
    ac_loss, cmc_loss, examiner_bce_loss, im_loss, ordering_targets, source_ce_loss, total_loss, LossWeights,
};
use crate::nets::{cosine_lr, BaseNetwork, ExaminerNetwork, NetConfig, Sgd, HEAD_NAMES};
use crate::pseudo::{
    assign_pseudo_labels, augment_batch, base_correlation, confidence_records, construct_triplets, curriculum_select,
    examiner_correlation, Triplet,
};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Network configuration matching a dataset's image shape and class count.
pub(crate) fn net_config(ds: &DomainDataset) -> Result<NetConfig> {
    let s = ds.images().shape();
    let cfg = NetConfig {
        in_channels: s[1],
        height: s[2],
        width: s[3],
        ..NetConfig::desk(ds.num_classes)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn check_finite(value: f64, epoch: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("{what} is {value}"),
        })
    }
}

/// Supervised training on the labeled source domain.
///
/// A `holdout_fraction` share of the samples is kept out of training and
/// used for the returned source accuracy (the training set is used when the
/// holdout is empty).
pub fn pretrain_source<T: Real>(
    mut net: BaseNetwork<T>,
    source: &DomainDataset,
    cfg: &AdaptationConfig,
) -> Result<(BaseNetwork<T>, f64)> {
    cfg.validate()?;
    let labels = source.training_labels()?;
    let n = source.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut cfg.rng(streams::SOURCE_SPLIT));
    let n_test = (n as f64 * cfg.holdout_fraction).round() as usize;
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();

    net.frozen_head = false;
    let mut rng = cfg.rng(streams::SOURCE_BATCHES);
    let mut opt = Sgd::new(cfg.source_lr, cfg.momentum);
    let steps = train.len().div_ceil(cfg.batch_size);
    let total = steps * cfg.source_epochs;
    for epoch in 0..cfg.source_epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, batch) in train.chunks(cfg.batch_size).enumerate() {
            opt.lr = cosine_lr(cfg.source_lr, epoch * steps + b, total);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let vars = net.bind(&tape);
            let out = vars.forward(&tape.constant(gather(source.images(), batch)))?;
            let loss = source_ce_loss(&out.logits, &y)?;
            let v = loss.item()?.f64();
            check_finite(v, epoch, "source cross-entropy")?;
            sum += v;
            tape.backward(loss)?;
            net.apply_grads(&vars, &mut opt);
        }
        info!("source epoch {epoch}: cross-entropy {:.4}", sum / steps.max(1) as f64);
    }

    let held_out = if test.is_empty() { train } else { test.to_vec() };
    let accuracy = evaluate(&net, &source.subset(&held_out)?)?.accuracy;
    Ok((net, accuracy))
}

/// Trains the examiner on `triplets` of `images` in mini-batches of
/// `batch` triplets and returns the mean loss.
fn fit_triplets<T: Real>(
    examiner: &mut ExaminerNetwork<T>,
    images: &Tensor<f32>,
    triplets: &[Triplet],
    batch: usize,
    opt: &mut Sgd<T>,
    epoch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in triplets.chunks(batch) {
        let pick = |f: fn(&Triplet) -> usize| -> Vec<usize> { chunk.iter().map(f).collect() };
        let tape = Tape::new();
        let vars = examiner.bind(&tape, true);
        let inputs = [
            tape.constant(gather(images, &pick(|t| t.anchor))),
            tape.constant(gather(images, &pick(|t| t.first))),
            tape.constant(gather(images, &pick(|t| t.second))),
        ];
        let out = vars.forward(&inputs)?;
        let labels: Vec<u8> = chunk.iter().map(|t| t.label).collect();
        let loss = examiner_bce_loss(&out.logits, &ordering_targets(&labels))?;
        let v = loss.item()?.f64();
        check_finite(v, epoch, "examiner ordering loss")?;
        sum += v;
        count += 1;
        tape.backward(loss)?;
        examiner.apply_grads(&vars, opt);
    }
    Ok(sum / count.max(1) as f64)
}

/// Fraction of `triplets` whose ordering the examiner predicts correctly.
pub fn examiner_triplet_accuracy<T: Real>(
    examiner: &ExaminerNetwork<T>,
    images: &Tensor<f32>,
    triplets: &[Triplet],
) -> Result<f64> {
    let mut correct = 0;
    for chunk in triplets.chunks(256) {
        let pick = |f: fn(&Triplet) -> usize| -> Vec<usize> { chunk.iter().map(f).collect() };
        let tape = Tape::new();
        let vars = examiner.bind(&tape, false);
        let inputs = [
            tape.constant(gather(images, &pick(|t| t.anchor))),
            tape.constant(gather(images, &pick(|t| t.first))),
            tape.constant(gather(images, &pick(|t| t.second))),
        ];
        let logits = vars.forward(&inputs)?.logits.value();
        let predicted = assign_pseudo_labels(&logits);
        correct += chunk
            .iter()
            .zip(predicted)
            .filter(|(t, p)| t.label as usize == *p)
            .count();
    }
    Ok(correct as f64 / triplets.len().max(1) as f64)
}

/// Trains a fresh examiner on triplets built from true source labels.
pub fn pretrain_examiner_source<T: Real>(
    mut examiner: ExaminerNetwork<T>,
    source: &DomainDataset,
    cfg: &AdaptationConfig,
) -> Result<ExaminerNetwork<T>> {
    let labels = source.training_labels()?;
    let all: Vec<usize> = (0..source.len()).collect();
    let mut rng = cfg.rng(streams::EXAMINER_SOURCE);
    let mut opt = Sgd::new(cfg.examiner_lr, cfg.momentum);
    let t = cfg.triplets();
    let count = source.len().div_ceil(cfg.batch_size) * t;
    for epoch in 0..cfg.examiner_pretrain_epochs {
        let set = construct_triplets(&all, labels, count, cfg.triplet_rule(), &mut rng)?;
        let loss = fit_triplets(&mut examiner, source.images(), &set.triplets, t, &mut opt, epoch)?;
        info!("examiner source epoch {epoch}: ordering loss {loss:.4}");
    }
    Ok(examiner)
}

/// Outcome of one examiner stage.
#[derive(Clone, Debug)]
pub struct ExaminerStage {
    pub stage: usize,
    /// Samples chosen by the curriculum.
    pub selected: Vec<usize>,
    /// Pseudo label of every target sample at the time of the stage.
    pub pseudo_labels: Vec<usize>,
    pub triplets: usize,
    pub mean_loss: Option<f64>,
    /// Set when the pseudo labels were too uniform to build triplets.
    pub skipped: bool,
}

/// One curriculum stage: score the target with the base network, select the
/// most confident share, build pseudo-labeled triplets and fit the examiner
/// to them. Infeasible triplet construction skips the stage with a warning.
pub fn train_examiner<T: Real, R: Rng>(
    examiner: &mut ExaminerNetwork<T>,
    base: &BaseNetwork<T>,
    target: UnlabeledView<'_>,
    cfg: &AdaptationConfig,
    stage: usize,
    rng: &mut R,
    opt: &mut Sgd<T>,
) -> Result<ExaminerStage> {
    let probs = predict_probs(base, target.images())?;
    let records = confidence_records(&probs)?;
    let selected = curriculum_select(&records, stage, cfg.stages())?;
    let pseudo_labels = assign_pseudo_labels(&probs);
    let t = cfg.triplets();
    let count = selected.len().div_ceil(cfg.batch_size).max(1) * t * cfg.examiner_passes.max(1);
    let mut out = ExaminerStage {
        stage,
        selected,
        pseudo_labels,
        triplets: 0,
        mean_loss: None,
        skipped: false,
    };
    match construct_triplets(&out.selected, &out.pseudo_labels, count, cfg.triplet_rule(), rng) {
        Ok(set) => {
            opt.lr = cfg.examiner_lr;
            out.mean_loss = Some(fit_triplets(examiner, target.images(), &set.triplets, t, opt, stage)?);
            out.triplets = set.len();
        }
        Err(Error::TripletInfeasible { histogram }) => {
            warn!("stage {stage}: skipped, pseudo labels too uniform to build triplets {histogram:?}");
            out.skipped = true;
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// Everything recorded while adapting, before any label is looked at.
#[derive(Clone, Debug, Default)]
pub struct AdaptTrace<T> {
    pub epochs: Vec<EpochLosses>,
    /// Base network after each epoch.
    pub snapshots: Vec<BaseNetwork<T>>,
    pub stages: Vec<ExaminerStage>,
}

/// Adds the enabled consistency terms to `im`. With none enabled this is
/// `im` itself, so the graph matches plain SHOT exactly.
fn combine<'t, T: Real>(
    im: Var<'t, T>,
    cmc: Option<Var<'t, T>>,
    ac: Option<Var<'t, T>>,
    w: LossWeights,
) -> Result<Var<'t, T>> {
    if let (Some(c), Some(a)) = (cmc, ac) {
        return total_loss(&im, &c, &a, w);
    }
    let mut total = im;
    for (component, term, lambda) in [("im", Some(im), 1.0), ("cmc", cmc, w.lambda1), ("ac", ac, w.lambda2)] {
        let Some(term) = term else { continue };
        let value = term.item()?.f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { component, value });
        }
        if component != "im" {
            total = total.add(&term.scale(T::of(lambda)))?;
        }
    }
    Ok(total)
}

#[derive(Default)]
struct Running {
    im: f64,
    cmc: f64,
    ac: f64,
    total: f64,
    steps: usize,
}

fn adapt<T: Real>(
    mut base: BaseNetwork<T>,
    mut examiner: Option<ExaminerNetwork<T>>,
    target: UnlabeledView<'_>,
    cfg: &AdaptationConfig,
) -> Result<(BaseNetwork<T>, Option<ExaminerNetwork<T>>, AdaptTrace<T>)> {
    cfg.validate()?;
    let m = cfg.batch_size;
    let n = target.len();
    if n < m {
        return Err(Error::Config(format!(
            "target has {n} samples, fewer than one batch of {m}"
        )));
    }
    base.frozen_head = true;
    let head = base.head_snapshot();
    let consistency = examiner.is_some() && (cfg.enable_cmc || cfg.enable_ac);
    let update_examiner = consistency && !cfg.stop_grad_examiner;

    let mut batch_rng = cfg.rng(streams::TARGET_BATCHES);
    let mut examiner_rng = cfg.rng(streams::EXAMINER_TARGET);
    let mut base_opt = Sgd::new(cfg.adapt_lr, cfg.momentum);
    let mut ordering_opt = Sgd::new(cfg.examiner_lr, cfg.momentum);
    let mut consistency_opt = Sgd::new(cfg.adapt_lr, cfg.momentum);
    let steps = n / m;
    let total_steps = steps * cfg.adapt_epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = AdaptTrace {
        epochs: Vec::new(),
        snapshots: Vec::new(),
        stages: Vec::new(),
    };

    for epoch in 0..cfg.adapt_epochs {
        let mut en = None;
        if let Some(ex) = examiner.as_mut() {
            let stage = epoch.min(cfg.stages() - 1);
            let st = train_examiner(ex, &base, target, cfg, stage, &mut examiner_rng, &mut ordering_opt)?;
            en = st.mean_loss;
            trace.stages.push(st);
        }

        order.shuffle(&mut batch_rng);
        let mut run = Running::default();
        for (b, batch) in order.chunks_exact(m).enumerate() {
            let lr = cosine_lr(cfg.adapt_lr, epoch * steps + b, total_steps);
            base_opt.lr = lr;
            consistency_opt.lr = lr;
            let x = gather::<T>(target.images(), batch);
            let tape = Tape::new();
            let bv = base.bind(&tape);
            let xv = tape.constant(x.clone());
            let out = bv.forward(&xv)?;
            let im = im_loss(&out.logits)?;
            let (mut cmc, mut ac, mut ev) = (None, None, None);
            if consistency {
                let ex = examiner.as_ref().expect("consistency needs an examiner");
                let vars = ex.bind(&tape, update_examiner);
                let mut a_gamma = None;
                if cfg.enable_cmc {
                    let aug = augment_batch(&x, &cfg.augment, &mut examiner_rng)?;
                    // Unless configured otherwise the examiner is a fixed target for this term.
                    let shared = cfg.cmc_updates_examiner || !update_examiner;
                    let cv = if shared { vars } else { ex.bind(&tape, false) };
                    let (c_gamma, att) =
                        examiner_correlation(&cv, &xv, &tape.constant(aug), cfg.symmetrize_examiner_corr)?;
                    let c_phi = base_correlation(&out.features, cfg.rescale_cosine)?;
                    cmc = Some(cmc_loss(&c_gamma, &c_phi)?);
                    if shared {
                        a_gamma = Some(att);
                    }
                }
                if cfg.enable_ac {
                    let a_gamma = match a_gamma {
                        Some(a) => a,
                        None => vars.encoder.forward(&xv)?.attention,
                    };
                    ac = Some(ac_loss(&a_gamma, &out.attention)?);
                }
                ev = Some(vars);
            }
            let loss = combine(im, cmc, ac, cfg.weights()).map_err(|e| match e {
                Error::NonFiniteLoss { component, value } => Error::Diverged {
                    epoch,
                    detail: format!("loss component `{component}` is {value}"),
                },
                e => e,
            })?;
            run.im += im.item()?.f64();
            run.cmc += cmc.map_or(Ok(T::zero()), |v| v.item())?.f64();
            run.ac += ac.map_or(Ok(T::zero()), |v| v.item())?.f64();
            run.total += loss.item()?.f64();
            run.steps += 1;
            tape.backward(loss)?;
            base.apply_grads(&bv, &mut base_opt);
            if let (true, Some(vars), Some(ex)) = (update_examiner, ev, examiner.as_mut()) {
                ex.apply_grads(&vars, &mut consistency_opt);
            }
        }

        let (w, b) = base.head_snapshot();
        for (name, before, after) in [(HEAD_NAMES[0], &head.0, &w), (HEAD_NAMES[1], &head.1, &b)] {
            if before != after {
                return Err(Error::FrozenHeadViolation(name.to_string()));
            }
        }
        let s = run.steps.max(1) as f64;
        let losses = EpochLosses {
            epoch,
            im: run.im / s,
            en,
            cmc: (consistency && cfg.enable_cmc).then_some(run.cmc / s),
            ac: (consistency && cfg.enable_ac).then_some(run.ac / s),
            total: run.total / s,
        };
        info!(
            "adapt epoch {epoch}: im {:.4} en {:?} cmc {:?} ac {:?} total {:.4}",
            losses.im, losses.en, losses.cmc, losses.ac, losses.total
        );
        trace.epochs.push(losses);
        trace.snapshots.push(base.clone());
    }
    Ok((base, examiner, trace))
}

/// Information-maximisation adaptation of the feature extractor with the
/// classifier head frozen.
pub fn adapt_shot<T: Real>(
    net: BaseNetwork<T>,
    target: UnlabeledView<'_>,
    cfg: &AdaptationConfig,
) -> Result<(BaseNetwork<T>, AdaptTrace<T>)> {
    let (base, _, trace) = adapt(net, None, target, cfg)?;
    Ok((base, trace))
}

/// Collaborative adaptation: each epoch runs one examiner stage on fresh
/// pseudo labels, then base updates on the combined objective. The
/// attention term also trains the examiner unless `stop_grad_examiner` is
/// set; the correlation term does so only with `cmc_updates_examiner`.
pub fn adapt_cin<T: Real>(
    base: BaseNetwork<T>,
    examiner: ExaminerNetwork<T>,
    target: UnlabeledView<'_>,
    cfg: &AdaptationConfig,
) -> Result<(BaseNetwork<T>, ExaminerNetwork<T>, AdaptTrace<T>)> {
    let (base, examiner, trace) = adapt(base, Some(examiner), target, cfg)?;
    Ok((base, examiner.expect("examiner is returned"), trace))
}

/// A source-trained base network, plus a source-trained examiner when the
/// run needs one.
#[derive(Clone, Debug)]
pub struct Pretrained<T> {
    pub base: BaseNetwork<T>,
    pub source_accuracy: Option<f64>,
    pub examiner: Option<ExaminerNetwork<T>>,
}

impl<T: Real> Pretrained<T> {
    /// Initialises and pre-trains the base network; also the examiner when
    /// `cfg.variant` is `cin_pretrained`.
    pub fn train(source: &DomainDataset, cfg: &AdaptationConfig) -> Result<Self> {
        let net_cfg = net_config(source)?;
        let base = BaseNetwork::new(net_cfg, &mut cfg.rng(streams::BASE_INIT))?;
        let (base, acc) = pretrain_source(base, source, cfg)?;
        info!("source accuracy {acc:.4}");
        let mut out = Pretrained {
            base,
            source_accuracy: Some(acc),
            examiner: None,
        };
        if cfg.variant == Variant::CinPretrained {
            out.pretrain_examiner(source, cfg)?;
        }
        Ok(out)
    }

    /// Adds a source-trained examiner.
    pub fn pretrain_examiner(&mut self, source: &DomainDataset, cfg: &AdaptationConfig) -> Result<()> {
        let mut fresh = ExaminerNetwork::new(self.base.config.clone(), &mut cfg.rng(streams::EXAMINER_INIT))?;
        if cfg.examiner_init_from_base {
            fresh.encoder = self.base.encoder.clone();
        }
        self.examiner = Some(pretrain_examiner_source(fresh, source, cfg)?);
        Ok(())
    }
}

/// Adapted networks together with the report of the run.
#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub report: RunReport,
    pub base: BaseNetwork<T>,
    pub examiner: Option<ExaminerNetwork<T>>,
}

/// Runs `cfg.variant` from an already pre-trained model and evaluates it.
///
/// Target labels are only read once adaptation has returned: the accuracy
/// trajectory and pseudo-label purity are computed from per-epoch snapshots.
pub fn run_from_pretrained<T: Real>(
    pre: &Pretrained<T>,
    target: &DomainDataset,
    cfg: &AdaptationConfig,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let reads_before = target.label_reads();
    let (base, examiner, trace) = match cfg.variant {
        Variant::SourceOnly => (pre.base.clone(), None, AdaptTrace::default()),
        Variant::Shot => {
            let (b, t) = adapt_shot(pre.base.clone(), target.unlabeled(), cfg)?;
            (b, None, t)
        }
        Variant::Cin | Variant::CinPretrained => {
            let ex = match (&pre.examiner, cfg.variant) {
                (Some(ex), Variant::CinPretrained) => ex.clone(),
                (None, Variant::CinPretrained) => {
                    return Err(Error::Config("cin_pretrained needs a source-trained examiner".into()))
                }
                _ => ExaminerNetwork::new(pre.base.config.clone(), &mut cfg.rng(streams::EXAMINER_INIT))?,
            };
            let (b, e, t) = adapt_cin(pre.base.clone(), ex, target.unlabeled(), cfg)?;
            (b, Some(e), t)
        }
    };
    let label_reads_during_adaptation = target.label_reads() - reads_before;
    debug!("adaptation finished after {:.1}s", start.elapsed().as_secs_f64());

    let initial = evaluate(&pre.base, target)?;
    let final_eval = evaluate(&base, target)?;
    let accuracy_trajectory = trace
        .snapshots
        .iter()
        .map(|s| evaluate(s, target).map(|e| e.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let truth = target
        .eval_labels()
        .ok_or_else(|| Error::invalid("run", "target carries no evaluation labels"))?;
    let stages = trace
        .stages
        .iter()
        .map(|st| StageReport {
            stage: st.stage,
            selected: st.selected.len(),
            triplets: st.triplets,
            pseudo_label_purity: (!st.selected.is_empty()).then(|| {
                let hits = st.selected.iter().filter(|&&i| st.pseudo_labels[i] == truth[i]).count();
                hits as f64 / st.selected.len() as f64
            }),
            skipped: st.skipped,
        })
        .collect();
    let head_unchanged = base.head_snapshot() == pre.base.head_snapshot();
    let report = RunReport {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        source_accuracy: pre.source_accuracy,
        initial_accuracy: initial.accuracy,
        accuracy_trajectory,
        final_accuracy: final_eval.accuracy,
        per_class_accuracy: final_eval.per_class_accuracy,
        confusion: final_eval.confusion,
        epochs: trace.epochs,
        stages,
        label_reads_during_adaptation,
        head_unchanged,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { report, base, examiner })
}

/// Pre-trains on `source`, adapts to `target` and evaluates.
pub fn run_experiment<T: Real>(
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &AdaptationConfig,
) -> Result<RunOutput<T>> {
    let start = Instant::now();
    let pre = Pretrained::train(source, cfg)?;
    let mut out = run_from_pretrained(&pre, target, cfg)?;
    out.report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(out)
}
