//! Two-phase training: a gradient-free memory fill at the start of every
//! epoch, then mini-batch updates that only read the memory.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse::combined_loss_var;
use crate::grid::MemoryBank;
use crate::metrics::{aggregate, slide_dice, DiceReport};
use crate::ndiff::{Array, Graph, ParamStore, SgdMomentum};
use crate::segnet::{Model, ModelConfig};
use crate::synth::{patch_record, sample_patches, PatchRecord, SynthSlide};

/// Patches encoded per graph during memory fill and inference.
const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Per-epoch learning-rate decay factor.
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Helper-loss weight.
    pub lambda: f64,
    /// Patches drawn per slide and predominant class each epoch.
    pub cap_per_class: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            decay: 0.95,
            batch_size: 16,
            max_epochs: 40,
            patience: 10,
            lambda: 0.2,
            cap_per_class: 100,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            lr0: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            cap_per_class: 100,
            ..TrainConfig::desk()
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.cap_per_class == 0 || self.max_epochs == 0 {
            return Err(Error::invalid(
                "batch size, patch cap and max epochs must be positive",
            ));
        }
        if !(self.lr0 > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("need lr0 > 0 and decay in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "loss weight {} not in [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Outcome of one early-stopping update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Stops once more than `patience` consecutive epochs fail to improve on the
/// best validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, val_loss: f64) -> Progress {
        if val_loss < self.best {
            self.best = val_loss;
            self.stalled = 0;
            Progress::Improved
        } else {
            self.stalled += 1;
            if self.stalled > self.patience {
                Progress::Stop
            } else {
                Progress::Stalled
            }
        }
    }
}

/// Empty bank sized for the slides and the model's `k` and `D`.
pub fn new_bank(model: &Model<f32>, slides: &[&SynthSlide]) -> Result<MemoryBank> {
    let grids: Vec<_> = slides.iter().map(|s| s.grid.clone()).collect();
    MemoryBank::new(&grids, model.k(), model.embed_dim())
}

fn patch_batch(slides: &[&SynthSlide], at: &[(usize, usize, usize)]) -> Result<Array<f32>> {
    let s = slides[at[0].0].grid.patch_px;
    let mut data = Vec::with_capacity(at.len() * 3 * s * s);
    for &(n, i, j) in at {
        slides[n].patch_chw_into(i, j, &mut data);
    }
    Array::from_vec(&[at.len(), 3, s, s], data)
}

/// Encodes every patch with recording off and writes its embedding. Slides
/// are filled in parallel, each by a single writer.
pub fn epoch_memory_fill(
    model: &Model<f32>,
    slides: &[&SynthSlide],
    bank: &mut MemoryBank,
) -> Result<()> {
    if model.maf.is_none() {
        return Ok(());
    }
    if bank.num_slides() != slides.len() {
        return Err(Error::invalid(format!(
            "bank holds {} slides, got {}",
            bank.num_slides(),
            slides.len()
        )));
    }
    bank.writers()
        .into_par_iter()
        .zip(slides.par_iter())
        .try_for_each(|(mut writer, slide)| {
            let positions: Vec<(usize, usize)> = slide.grid.positions().collect();
            for chunk in positions.chunks(INFER_CHUNK) {
                let at: Vec<_> = chunk.iter().map(|&(i, j)| (0, i, j)).collect();
                let mut g = Graph::no_grad(&model.store);
                let x = g.input(patch_batch(&[*slide], &at)?);
                let e = model.embed(&mut g, x)?;
                for (row, &(i, j)) in g.value(e).data().chunks(model.embed_dim()).zip(chunk) {
                    writer.insert(i, j, row)?;
                }
            }
            Ok(())
        })
}

struct Batch {
    patches: Array<f32>,
    targets: Vec<usize>,
    ratios: Array<f32>,
    context: Option<(Array<f32>, Vec<bool>)>,
}

fn make_batch(
    model: &Model<f32>,
    slides: &[&SynthSlide],
    bank: Option<&MemoryBank>,
    recs: &[&PatchRecord],
) -> Result<Batch> {
    let at: Vec<_> = recs.iter().map(|r| (r.slide, r.i, r.j)).collect();
    let patches = patch_batch(slides, &at)?;
    let targets = recs
        .iter()
        .flat_map(|r| slides[r.slide].patch_labels(r.i, r.j))
        .map(|l| l as usize)
        .collect();
    let classes = model.config.net.classes;
    let ratios = Array::from_vec(
        &[recs.len(), classes],
        recs.iter()
            .flat_map(|r| r.y_cls.iter().map(|&v| v as f32))
            .collect(),
    )?;
    let context = match (&model.maf, bank) {
        (Some(_), Some(bank)) => Some(bank.gather(&at)?),
        (Some(_), None) => return Err(Error::invalid("memory attention needs a filled bank")),
        (None, _) => None,
    };
    Ok(Batch {
        patches,
        targets,
        ratios,
        context,
    })
}

/// Builds `L+` for a batch. Without memory attention the loss is `L_seg`.
fn batch_loss(
    g: &mut Graph<'_, f32>,
    model: &Model<f32>,
    batch: &Batch,
    lambda: f64,
) -> Result<crate::ndiff::Var> {
    let x = g.input(batch.patches.clone());
    let ctx = batch.context.as_ref().map(|(m, k)| (m, k.as_slice()));
    let out = model.forward(g, x, ctx)?;
    let seg = g.cross_entropy_pixels(out.seg, &batch.targets)?;
    match out.cls {
        Some(cls) => {
            let cls = g.cross_entropy_dist(cls, &batch.ratios)?;
            combined_loss_var(g, seg, cls, lambda)
        }
        None => Ok(seg),
    }
}

/// One pass over shuffled mini-batches. The bank is only read.
pub fn train_epoch(
    model: &mut Model<f32>,
    opt: &mut SgdMomentum<f32>,
    slides: &[&SynthSlide],
    bank: Option<&MemoryBank>,
    samples: &[PatchRecord],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<&PatchRecord> = samples.iter().collect();
    order.shuffle(rng);
    let (mut total, mut count) = (0.0, 0usize);
    for (b, recs) in order.chunks(cfg.batch_size).enumerate() {
        let batch = make_batch(model, slides, bank, recs)?;
        let grads = {
            let mut g = Graph::new(&model.store);
            let loss = batch_loss(&mut g, model, &batch, cfg.lambda).map_err(|e| match e {
                Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("batch {b}: {msg}")),
                other => other,
            })?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!("batch {b}: loss {value}")));
            }
            total += value * recs.len() as f64;
            count += recs.len();
            g.backward(loss)?
        };
        opt.step(&mut model.store, &grads, lr)?;
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

/// Mean `L+` over `samples` without updates.
pub fn evaluate_loss(
    model: &Model<f32>,
    slides: &[&SynthSlide],
    bank: Option<&MemoryBank>,
    samples: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    let refs: Vec<&PatchRecord> = samples.iter().collect();
    for recs in refs.chunks(cfg.batch_size) {
        let batch = make_batch(model, slides, bank, recs)?;
        let mut g = Graph::no_grad(&model.store);
        let loss = batch_loss(&mut g, model, &batch, cfg.lambda)?;
        total += g.value(loss).item() as f64 * recs.len() as f64;
        count += recs.len();
    }
    if count == 0 {
        return Err(Error::invalid("no validation patches"));
    }
    Ok(total / count as f64)
}

pub struct FitResult {
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains with early stopping and returns the parameters of the epoch with
/// the lowest validation loss.
pub fn fit(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    train: &[&SynthSlide],
    val: &[&SynthSlide],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(model_cfg)?;
    let mut opt = SgdMomentum::new(cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(1);
    let val_samples = sample_patches(val, cfg.cap_per_class, &mut val_rng)?;
    let uses_memory = model.maf.is_some();
    let mut train_bank = if uses_memory {
        Some(new_bank(&model, train)?)
    } else {
        None
    };
    let mut val_bank = if uses_memory {
        Some(new_bank(&model, val)?)
    } else {
        None
    };

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(usize, ParamStore<f32>)> = None;
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr(epoch);
        if let Some(bank) = train_bank.as_mut() {
            epoch_memory_fill(&model, train, bank)?;
        }
        let samples = sample_patches(train, cfg.cap_per_class, &mut rng)?;
        let train_loss = train_epoch(
            &mut model,
            &mut opt,
            train,
            train_bank.as_ref(),
            &samples,
            cfg,
            lr,
            &mut rng,
        )?;
        if let Some(bank) = val_bank.as_mut() {
            epoch_memory_fill(&model, val, bank)?;
        }
        let val_loss = evaluate_loss(&model, val, val_bank.as_ref(), &val_samples, cfg)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record);
        history.push(record);
        match stopper.update(val_loss) {
            Progress::Improved => best = Some((epoch, model.store.clone())),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    let (best_epoch, store) =
        best.ok_or_else(|| Error::NonFiniteLoss("validation loss never improved".into()))?;
    model.store = store;
    Ok(FitResult {
        model,
        history,
        best_epoch,
    })
}

/// Something that labels every pixel of a set of slides.
pub trait SlidePredictor {
    fn predict(&self, slides: &[&SynthSlide]) -> Result<Vec<Vec<u8>>>;
}

/// Per-patch predictions plus attention weights for one slide.
pub struct SlidePrediction {
    /// Pixel labels, row-major over the whole slide.
    pub labels: Vec<u8>,
    /// `[h, n]` attention weights per patch in `grid.positions()` order,
    /// empty without memory attention.
    pub scores: Vec<Vec<f32>>,
}

/// Per-pixel argmax; ties go to the lowest class.
fn argmax_pixels(logits: &[f32], classes: usize, s: usize) -> Vec<u8> {
    let p = s * s;
    (0..p)
        .map(|px| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * p + px] > logits[best * p + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Two-phase inference over whole slides: fill a fresh bank for them with the
/// current weights, then predict every patch.
pub fn predict_slides(model: &Model<f32>, slides: &[&SynthSlide]) -> Result<Vec<SlidePrediction>> {
    let bank = if model.maf.is_some() {
        let mut bank = new_bank(model, slides)?;
        epoch_memory_fill(model, slides, &mut bank)?;
        Some(bank)
    } else {
        None
    };
    let classes = model.config.net.classes;
    (0..slides.len())
        .into_par_iter()
        .map(|n| {
            let slide = slides[n];
            let s = slide.grid.patch_px;
            let w = slide.width();
            let mut labels = vec![0u8; w * slide.height()];
            let mut scores = Vec::new();
            let positions: Vec<(usize, usize)> = slide.grid.positions().collect();
            for chunk in positions.chunks(INFER_CHUNK) {
                let at: Vec<_> = chunk.iter().map(|&(i, j)| (n, i, j)).collect();
                let mut g = Graph::no_grad(&model.store);
                let x = g.input(patch_batch(slides, &at)?);
                let context = bank.as_ref().map(|b| b.gather(&at)).transpose()?;
                let out =
                    model.forward(&mut g, x, context.as_ref().map(|(m, k)| (m, k.as_slice())))?;
                let logits = g.value(out.seg).data();
                for (b, &(i, j)) in chunk.iter().enumerate() {
                    let patch = argmax_pixels(
                        &logits[b * classes * s * s..(b + 1) * classes * s * s],
                        classes,
                        s,
                    );
                    for y in 0..s {
                        let row = (j * s + y) * w + i * s;
                        labels[row..row + s].copy_from_slice(&patch[y * s..(y + 1) * s]);
                    }
                }
                if let Some(sc) = &out.scores {
                    let per = sc.len() / chunk.len();
                    scores.extend(sc.data().chunks(per).map(|c| c.to_vec()));
                }
            }
            Ok(SlidePrediction { labels, scores })
        })
        .collect()
}

impl SlidePredictor for Model<f32> {
    fn predict(&self, slides: &[&SynthSlide]) -> Result<Vec<Vec<u8>>> {
        Ok(predict_slides(self, slides)?
            .into_iter()
            .map(|p| p.labels)
            .collect())
    }
}

/// Dice report of `predictor` over every pixel of every slide.
pub fn evaluate_full(
    predictor: &impl SlidePredictor,
    slides: &[&SynthSlide],
) -> Result<DiceReport> {
    let preds = predictor.predict(slides)?;
    dice_report(slides, &preds)
}

pub fn dice_report(slides: &[&SynthSlide], preds: &[Vec<u8>]) -> Result<DiceReport> {
    if preds.len() != slides.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} slides",
            preds.len(),
            slides.len()
        )));
    }
    let classes = slides
        .first()
        .map(|s| s.grid.classes)
        .ok_or(Error::EmptyEvaluation)?;
    let mut table = Vec::with_capacity(slides.len() * classes);
    for (slide, pred) in slides.iter().zip(preds) {
        table.extend(slide_dice(pred, &slide.labels, classes)?);
    }
    aggregate(
        slides.iter().map(|s| s.grid.slide_id.clone()).collect(),
        classes,
        table,
    )
}

/// Records for every patch of the given slides, in slide then grid order.
pub fn all_patches(slides: &[&SynthSlide]) -> Vec<PatchRecord> {
    slides
        .iter()
        .enumerate()
        .flat_map(|(n, s)| {
            s.grid
                .positions()
                .map(move |(i, j)| patch_record(slides, n, i, j))
        })
        .collect()
}
