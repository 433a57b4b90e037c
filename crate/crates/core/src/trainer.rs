//! Training loops for both models: Adam with the published schedule
//! (initial LR 0.001 decayed by 1/10 every 50 epochs, batch 16, up to 500
//! epochs), early stopping on the validation objective, per-epoch history,
//! checkpointing, and per-fold evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FlatConfig, RunConfig};
use crate::dataio::{Gender, Manifest};
use crate::error::{Error, Result};
use crate::fagnet::{gender_cross_entropy, FagNet, Head, Predictions};
use crate::fgcnet::{FgcNet, NoiseSource};
use crate::losses::{alf_loss, alf_loss_grad, ClfParams};
use crate::metrics::{
    age_metric_row, gender_metric_row, ConfusionCounts, EvalBatch, F1Variant, MetricTable,
};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Extra `epoch-<n>.ckpt` files every n epochs (0 = final epoch only).
    pub checkpoint_every: usize,
    pub folds: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            batch_size: 16,
            max_epochs: 500,
            early_stop_patience: 20,
            weight_decay: 1e-5,
            seed: 42,
            checkpoint_every: 0,
            folds: 5,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train.initial_lr", self.initial_lr),
            ("train.beta1", self.beta1),
            ("train.beta2", self.beta2),
            ("train.lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidConfig("train.lr_decay_every must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("data.folds must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("data.val_fraction must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: the initial rate decayed by the factor once
/// per completed `lr_decay_every` block, by iterated multiplication so the
/// published 0.001 -> 0.0001 -> 0.00001 sequence is reproduced exactly.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = epoch / config.lr_decay_every;
    let mut lr = config.initial_lr;
    for _ in 0..steps {
        lr *= config.lr_decay_factor;
    }
    lr
}

/// True when the monitored loss has gone `patience` consecutive epochs
/// without a strict improvement over the best value so far.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    if history.is_empty() {
        return false;
    }
    let mut best = history[0];
    let mut best_idx = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v < best {
            best = v;
            best_idx = i;
        }
    }
    let since = history.len() - 1 - best_idx;
    since >= patience.max(1)
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct RunResult {
    pub history: Vec<EpochStats>,
    pub best_checkpoint: PathBuf,
    pub best_val_loss: f64,
    pub wall_seconds: f64,
}

/// Preloaded image data for one fold.
struct FoldData {
    images: Tensor,
    ages: Vec<f64>,
    genders: Vec<Gender>,
    train: Vec<usize>,
    val: Vec<usize>,
    input_size: usize,
}

impl FoldData {
    fn batch(&self, indices: &[usize]) -> (Tensor, Vec<f64>, Vec<usize>) {
        let s = self.input_size;
        let plane = 3 * s * s;
        let mut batch = Tensor::zeros(&[indices.len(), 3, s, s]);
        let mut ages = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &idx) in indices.iter().enumerate() {
            batch.data_mut()[slot * plane..(slot + 1) * plane]
                .copy_from_slice(&self.images.data()[idx * plane..(idx + 1) * plane]);
            ages.push(self.ages[idx]);
            labels.push(match self.genders[idx] {
                Gender::Male => 0,
                Gender::Female => 1,
            });
        }
        (batch, ages, labels)
    }
}

/// Splits the manifest into train/val/test for `fold_id` and preloads every
/// image at `input_size`.
fn prepare_fold(
    manifest: &Manifest,
    config: &TrainConfig,
    fold_id: usize,
    input_size: usize,
) -> Result<FoldData> {
    if fold_id >= config.folds {
        return Err(Error::InvalidInput(format!(
            "fold {fold_id} out of range for {} folds",
            config.folds
        )));
    }
    let split = crate::dataio::kfold_split(manifest, config.folds, config.seed)?;
    let test = split.test_indices(fold_id);
    let pool = split.train_indices(fold_id);
    if pool.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("fold has an empty train or test split".into()));
    }

    // fold isolation: no test subject may appear in the training pool
    {
        let test_subjects: std::collections::HashSet<&str> = test
            .iter()
            .map(|&i| manifest.records()[i].subject_id.as_str())
            .collect();
        for &i in &pool {
            let subject = manifest.records()[i].subject_id.as_str();
            if test_subjects.contains(subject) {
                return Err(Error::InvalidState(format!(
                    "fold isolation violated: subject `{subject}` in both train and test"
                )));
            }
        }
    }

    // validation split: a seeded fraction of the pool's subjects
    let mut pool_subjects: Vec<&str> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for &i in &pool {
            let s = manifest.records()[i].subject_id.as_str();
            if seen.insert(s) {
                pool_subjects.push(s);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (fold_id as u64).wrapping_mul(0x9E37));
    pool_subjects.shuffle(&mut rng);
    let n_val_subjects = if config.val_fraction == 0.0 || pool_subjects.len() < 2 {
        0
    } else {
        ((pool_subjects.len() as f64 * config.val_fraction).ceil() as usize)
            .clamp(1, pool_subjects.len() - 1)
    };
    let val_subjects: std::collections::HashSet<&str> =
        pool_subjects[..n_val_subjects].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for &i in &pool {
        if val_subjects.contains(manifest.records()[i].subject_id.as_str()) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }

    let all: Vec<usize> = (0..manifest.len()).collect();
    let (images, ages, genders) = crate::dataio::load_batch(manifest, &all, input_size)?;
    Ok(FoldData {
        images,
        ages,
        genders,
        train,
        val,
        input_size,
    })
}

fn mix_seed(seed: u64, fold: usize, epoch: usize, batch: usize) -> u64 {
    seed ^ (fold as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((batch as u64).wrapping_mul(0x94D0_49BB_1331_11EB))
}

fn run_dir_files(run_dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        run_dir.join("config.snapshot"),
        run_dir.join("best.ckpt"),
        run_dir.join("history.csv"),
        run_dir.join("eval.csv"),
    )
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.val_loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains FAG-Net on one fold and writes the run directory layout
/// (`config.snapshot`, `epoch-<n>.ckpt`, `best.ckpt`, `history.csv`,
/// `eval.csv`).
pub fn train_fagnet(
    run: &RunConfig,
    manifest: &Manifest,
    fold_id: usize,
    run_dir: &Path,
) -> Result<RunResult> {
    let start = Instant::now();
    let config = &run.train;
    config.validate()?;
    let clf = &run.loss.clf;
    let data = prepare_fold(manifest, config, fold_id, run.fagnet.input_size)?;

    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut snapshot_cfg = run.to_flat();
    snapshot_cfg.set("model.kind", "fagnet");
    let snapshot = snapshot_cfg.to_text();
    let (snapshot_path, best_path, history_path, eval_path) = run_dir_files(run_dir);
    std::fs::write(&snapshot_path, &snapshot).map_err(|e| Error::io(&snapshot_path, e))?;

    let mut store = ParamStore::new();
    let net = FagNet::build(run.fagnet.clone(), &mut store, config.seed)?;
    let mut opt = Adam::new(&store, config.beta1, config.beta2, config.weight_decay);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut last_epoch = 0;

    for epoch in 0..config.max_epochs {
        last_epoch = epoch;
        let lr = lr_at_epoch(config, epoch);
        let mut order = data.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, fold_id, epoch, 0)));

        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (batch, ages, labels) = data.batch(chunk);
            store.zero_grads();
            let mut dropout_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(config.seed, fold_id, epoch, batch_idx + 1));
            let fwd = net.forward_train(&mut store, &batch, Some(&mut dropout_rng), true)?;
            let (loss, d_out) = match run.fagnet.head {
                Head::Age => {
                    let eval = EvalBatch::new(ages.clone(), fwd.outputs.data().to_vec())?;
                    let loss = alf_loss(&eval, clf)?;
                    let grad = alf_loss_grad(&eval, clf)?;
                    (loss, Tensor::from_vec(&[chunk.len(), 1], grad)?)
                }
                Head::Gender => {
                    let (loss, grad) = gender_cross_entropy(&fwd.outputs, &labels);
                    (loss, grad)
                }
            };
            net.backward(&mut store, &fwd, &d_out);
            opt.step(&mut store, lr);
            loss_sum += loss * chunk.len() as f64;
            sample_count += chunk.len();
        }
        let train_loss = loss_sum / sample_count as f64;

        let monitor_split = if data.val.is_empty() { &data.train } else { &data.val };
        let val_loss =
            eval_fagnet_loss(&net, &store, &data, monitor_split, clf, config.batch_size)?;
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        val_history.push(val_loss);

        if val_loss < best_val {
            best_val = val_loss;
            save_checkpoint(&best_path, &snapshot, &store)?;
        }
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            save_checkpoint(&run_dir.join(format!("epoch-{epoch}.ckpt")), &snapshot, &store)?;
        }
        if early_stop_check(&val_history, config.early_stop_patience) {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    save_checkpoint(&run_dir.join(format!("epoch-{last_epoch}.ckpt")), &snapshot, &store)?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &snapshot, &store)?;
    }
    write_history(&history_path, &history)?;

    let table = evaluate_fold(&best_path, manifest, fold_id)?;
    table.write_csv(&eval_path)?;

    Ok(RunResult {
        history,
        best_checkpoint: best_path,
        best_val_loss: best_val,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn eval_fagnet_loss(
    net: &FagNet,
    store: &ParamStore,
    data: &FoldData,
    indices: &[usize],
    clf: &ClfParams,
    batch_size: usize,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (batch, ages, labels) = data.batch(chunk);
        let preds = net.forward_eval(store, &batch)?;
        let loss = match &preds {
            Predictions::Ages(p) => {
                let eval = EvalBatch::new(ages.clone(), p.clone())?;
                alf_loss(&eval, clf)?
            }
            Predictions::GenderProbs(rows) => {
                let mut ce = 0.0;
                for (row, &label) in rows.iter().zip(&labels) {
                    ce -= row[label].max(1e-12).ln();
                }
                ce / rows.len() as f64
            }
        };
        loss_sum += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(loss_sum / count as f64)
}

/// Trains FGC-Net (generator and discriminator jointly on the total loss)
/// on one fold; both parameter sets live in one checkpoint.
pub fn train_fgcnet(
    run: &RunConfig,
    manifest: &Manifest,
    fold_id: usize,
    run_dir: &Path,
) -> Result<RunResult> {
    let start = Instant::now();
    let config = &run.train;
    config.validate()?;
    let data = prepare_fold(manifest, config, fold_id, run.fgcnet.input_size)?;

    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut snapshot_cfg = run.to_flat();
    snapshot_cfg.set("model.kind", "fgcnet");
    let snapshot = snapshot_cfg.to_text();
    let (snapshot_path, best_path, history_path, eval_path) = run_dir_files(run_dir);
    std::fs::write(&snapshot_path, &snapshot).map_err(|e| Error::io(&snapshot_path, e))?;

    let mut store = ParamStore::new();
    let net = FgcNet::build(run.fgcnet.clone(), &mut store, config.seed)?;
    let mut opt = Adam::new(&store, config.beta1, config.beta2, config.weight_decay);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut last_epoch = 0;

    for epoch in 0..config.max_epochs {
        last_epoch = epoch;
        let lr = lr_at_epoch(config, epoch);
        let mut order = data.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, fold_id, epoch, 0)));

        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (batch, ages, _) = data.batch(chunk);
            store.zero_grads();
            let step_seed = mix_seed(config.seed, fold_id, epoch, batch_idx + 1);
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(step_seed ^ 0xD0D0);
            let breakdown = net.train_step_gradients(
                &mut store,
                &batch,
                &ages,
                NoiseSource::Seeded(step_seed),
                Some(&mut dropout_rng),
                true,
            )?;
            opt.step(&mut store, lr);
            loss_sum += breakdown.total * chunk.len() as f64;
            sample_count += chunk.len();
        }
        let train_loss = loss_sum / sample_count as f64;

        let monitor_split = if data.val.is_empty() { &data.train } else { &data.val };
        let val_loss = eval_fgcnet_loss(&net, &store, &data, monitor_split, config, epoch)?;
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        val_history.push(val_loss);

        if val_loss < best_val {
            best_val = val_loss;
            save_checkpoint(&best_path, &snapshot, &store)?;
        }
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            save_checkpoint(&run_dir.join(format!("epoch-{epoch}.ckpt")), &snapshot, &store)?;
        }
        if early_stop_check(&val_history, config.early_stop_patience) {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    save_checkpoint(&run_dir.join(format!("epoch-{last_epoch}.ckpt")), &snapshot, &store)?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &snapshot, &store)?;
    }
    write_history(&history_path, &history)?;

    let table = evaluate_fold(&best_path, manifest, fold_id)?;
    table.write_csv(&eval_path)?;

    Ok(RunResult {
        history,
        best_checkpoint: best_path,
        best_val_loss: best_val,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Inference-mode total loss (running-statistics batch norm, no dropout)
/// with a deterministic per-epoch noise seed.
fn eval_fgcnet_loss(
    net: &FgcNet,
    store: &ParamStore,
    data: &FoldData,
    indices: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for (i, chunk) in indices.chunks(config.batch_size).enumerate() {
        let (batch, ages, _) = data.batch(chunk);
        let seed = mix_seed(config.seed.wrapping_add(0x5A5A), 0, epoch, i);
        let (generated, latent, _) = net.generate(store, &batch, &ages, seed)?;
        let mut recon = 0.0;
        for (g, x) in generated.data().iter().zip(batch.data()) {
            recon += (g - x).abs();
        }
        recon /= generated.numel() as f64;

        let pred_real = net.discriminate(store, &batch)?;
        let n = chunk.len() as f64;
        let mut disc_l2 = 0.0;
        {
            // age regression error on real and generated images, averaged
            let gen_flat = generated;
            let pred_fake = net.discriminate(store, &gen_flat)?;
            for ((pr, pf), age) in pred_real.iter().zip(&pred_fake).zip(&ages) {
                disc_l2 += 0.5 * ((pr - age) * (pr - age) + (pf - age) * (pf - age));
            }
            disc_l2 /= n;
        }
        let mut kl = 0.0;
        for row in 0..chunk.len() {
            kl += crate::losses::kl_divergence_raw(
                latent.fused_mu.row(row),
                latent.fused_sigma.row(row),
                net.config.kl_variant,
            );
        }
        kl /= n;
        let total = crate::losses::tlf_fgc_loss(recon, disc_l2, kl)?;
        loss_sum += total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(loss_sum / count as f64)
}

/// A model reconstructed from a checkpoint.
pub enum LoadedModel {
    Fag(FagNet, ParamStore),
    Fgc(FgcNet, ParamStore),
}

/// Rebuilds the architecture described by a checkpoint's config snapshot
/// and loads its weights.
pub fn load_model(checkpoint_path: &Path) -> Result<(LoadedModel, RunConfig)> {
    let ck = load_checkpoint(checkpoint_path)?;
    let flat = FlatConfig::from_str_checked(&ck.config_text, "checkpoint config")?;
    let kind = flat.get("model.kind").unwrap_or("fagnet").to_string();
    let run = RunConfig::from_flat(&flat)?;
    let mut store = ParamStore::new();
    let model = match kind.as_str() {
        "fagnet" => {
            let net = FagNet::build(run.fagnet.clone(), &mut store, 0)?;
            store.load_values(&ck.params)?;
            LoadedModel::Fag(net, store)
        }
        "fgcnet" => {
            let net = FgcNet::build(run.fgcnet.clone(), &mut store, 0)?;
            store.load_values(&ck.params)?;
            LoadedModel::Fgc(net, store)
        }
        other => {
            return Err(Error::Incompatible(format!("unknown model kind `{other}`")));
        }
    };
    Ok((model, run))
}

/// Inference over the fold's test split, scored with the metric suite.
///
/// Age models emit the MAE/MSE/CS/MCS/R2 column set; gender models emit
/// confusion counts and derived rates; FGC checkpoints are scored by
/// reconstruction error and discriminator age regression.
pub fn evaluate_fold(checkpoint_path: &Path, manifest: &Manifest, fold_id: usize) -> Result<MetricTable> {
    let (model, run) = load_model(checkpoint_path)?;
    let split = crate::dataio::kfold_split(manifest, run.train.folds, run.train.seed)?;
    let test = split.test_indices(fold_id);
    if test.is_empty() {
        return Err(Error::InvalidInput(format!("fold {fold_id} test split is empty")));
    }
    let label = format!("fold-{fold_id}");
    match model {
        LoadedModel::Fag(net, store) => {
            let (batch_t, ages, genders) =
                crate::dataio::load_batch(manifest, &test, run.fagnet.input_size)?;
            let mut predictions_age = Vec::new();
            let mut confusion = (0u64, 0u64, 0u64, 0u64);
            let plane = 3 * run.fagnet.input_size * run.fagnet.input_size;
            for (i, chunk) in test.chunks(run.train.batch_size).enumerate() {
                let offset = i * run.train.batch_size;
                let mut sub = Tensor::zeros(&[chunk.len(), 3, run.fagnet.input_size, run.fagnet.input_size]);
                sub.data_mut().copy_from_slice(
                    &batch_t.data()[offset * plane..(offset + chunk.len()) * plane],
                );
                match net.forward_eval(&store, &sub)? {
                    Predictions::Ages(p) => predictions_age.extend(p),
                    Predictions::GenderProbs(rows) => {
                        for (j, row) in rows.iter().enumerate() {
                            let actual_male = genders[offset + j] == Gender::Male;
                            let predicted_male = row[0] >= row[1];
                            match (actual_male, predicted_male) {
                                (true, true) => confusion.0 += 1,
                                (false, true) => confusion.1 += 1,
                                (false, false) => confusion.2 += 1,
                                (true, false) => confusion.3 += 1,
                            }
                        }
                    }
                }
            }
            match run.fagnet.head {
                Head::Age => {
                    let eval = EvalBatch::new(ages, predictions_age)?;
                    let (columns, values) = age_metric_row(&eval);
                    let mut table = MetricTable::new(&columns);
                    table.push_row(label, values)?;
                    Ok(table)
                }
                Head::Gender => {
                    let counts =
                        ConfusionCounts::new(confusion.0, confusion.1, confusion.2, confusion.3)?;
                    let (columns, values) = gender_metric_row(&counts, F1Variant::Paper)?;
                    let mut table = MetricTable::new(&columns);
                    table.push_row(label, values)?;
                    Ok(table)
                }
            }
        }
        LoadedModel::Fgc(net, store) => {
            let (batch_t, ages, _) =
                crate::dataio::load_batch(manifest, &test, run.fgcnet.input_size)?;
            let mut recon_sum = 0.0;
            let mut disc_preds = Vec::new();
            let plane = 3 * run.fgcnet.input_size * run.fgcnet.input_size;
            for (i, chunk) in test.chunks(run.train.batch_size).enumerate() {
                let offset = i * run.train.batch_size;
                let mut sub =
                    Tensor::zeros(&[chunk.len(), 3, run.fgcnet.input_size, run.fgcnet.input_size]);
                sub.data_mut().copy_from_slice(
                    &batch_t.data()[offset * plane..(offset + chunk.len()) * plane],
                );
                let sub_ages = &ages[offset..offset + chunk.len()];
                let (generated, _, _) = net.generate(&store, &sub, sub_ages, run.train.seed)?;
                for (g, x) in generated.data().iter().zip(sub.data()) {
                    recon_sum += (g - x).abs();
                }
                disc_preds.extend(net.discriminate(&store, &sub)?);
            }
            let recon_l1 = recon_sum / (test.len() * plane) as f64;
            let eval = EvalBatch::new(ages, disc_preds)?;
            let reg = crate::metrics::regression_metrics(&eval);
            let mut table = MetricTable::new(&["ReconL1", "DiscMAE", "DiscMSE"]);
            table.push_row(label, vec![recon_l1, reg.mae, reg.mse])?;
            Ok(table)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_exact() {
        let config = TrainConfig::default();
        assert_eq!(lr_at_epoch(&config, 0), 0.001);
        assert_eq!(lr_at_epoch(&config, 49), 0.001);
        assert_eq!(lr_at_epoch(&config, 50), 0.0001);
        assert_eq!(lr_at_epoch(&config, 99), 0.0001);
        assert_eq!(lr_at_epoch(&config, 100), 0.00001);
    }

    #[test]
    fn lr_nonincreasing_piecewise_constant() {
        let config = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..200 {
            let lr = lr_at_epoch(&config, epoch);
            assert!(lr <= prev);
            if epoch % 50 != 0 {
                assert_eq!(lr, prev, "breakpoint away from a multiple of 50 at {epoch}");
            }
            prev = lr;
        }
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop_check(&[3.0, 2.0, 1.0], 2));
        assert!(early_stop_check(&[1.0, 2.0, 2.0, 2.0], 3));
        assert!(!early_stop_check(&[1.0, 2.0, 2.0], 3));
        // degenerate patience trips on any non-improving epoch
        assert!(early_stop_check(&[1.0, 2.0], 0));
        assert!(!early_stop_check(&[3.0, 2.0], 0));
        assert!(!early_stop_check(&[], 1));
        // ties are not improvements
        assert!(early_stop_check(&[1.0, 1.0], 1));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.initial_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.val_fraction = 1.0;
        assert!(c.validate().is_err());
    }
}
