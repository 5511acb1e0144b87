//! Adam training loop with the staged learning-rate schedule, metrics CSV,
//! binary checkpoints (including optimizer state), and evaluation.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{batch_iter, crop, load_image, reflect_pad, Manifest, Split};
use crate::error::{Error, Result};
use crate::loss::{psnr, ssim, total_loss, LossWeights};
use crate::model::{init_params, sdnet_forward, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Reserved checkpoint-name prefix for optimizer state.
const OPTIM_PREFIX: &str = "__optim.";

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr0: f64,
    pub batch: usize,
    pub crop: usize,
    pub weights: LossWeights,
    /// Evaluate on the test split every this many iterations (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(total_iters: usize) -> Self {
        TrainConfig {
            total_iters,
            lr0: 5e-4,
            batch: 5,
            crop: 231,
            weights: LossWeights::default(),
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.total_iters == 0 || self.batch == 0 {
            return Err(Error::Config("total_iters and batch must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        self.weights.validate()?;
        model.block.validate_input(self.crop, self.crop)?;
        if self.crop < 11 {
            return Err(Error::Config("crop must be at least the SSIM window (11)".into()));
        }
        Ok(())
    }
}

/// Staged learning rate: lr0, then lr0/10 from ceil(3*total/5), then
/// lr0/100 from ceil(4*total/5).
pub fn lr_at(iter: usize, total: usize, lr0: f64) -> f64 {
    if iter < (3 * total).div_ceil(5) {
        lr0
    } else if iter < (4 * total).div_ceil(5) {
        lr0 / 10.0
    } else {
        lr0 / 100.0
    }
}

/// Adam first/second moment buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState<E: Element> {
    pub t: u64,
    pub m: HashMap<String, Vec<E>>,
    pub v: HashMap<String, Vec<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new() -> Self {
        AdamState { t: 0, m: HashMap::new(), v: HashMap::new() }
    }
}

/// One Adam update over every parameter; `grads` must hold a gradient for
/// each parameter name.
pub fn adam_step<E: Element>(
    params: &mut ParamStore<E>,
    grads: &HashMap<String, Vec<E>>,
    state: &mut AdamState<E>,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    for name in params.names() {
        match grads.get(name) {
            None => return Err(Error::Contract(format!("missing gradient for parameter {name}"))),
            Some(g) if g.len() != params.get(name).unwrap().data.len() => {
                return Err(Error::Contract(format!("gradient size mismatch for parameter {name}")))
            }
            Some(_) => {}
        }
    }
    let clip_scale = match clip {
        Some(c) => {
            let sq: f64 = grads
                .values()
                .flat_map(|g| g.iter())
                .map(|&v| Element::to_f64(v).powi(2))
                .sum();
            let norm = sq.sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let b1 = E::from_f64(ADAM_BETA1);
    let b2 = E::from_f64(ADAM_BETA2);
    let corr1 = E::from_f64(1.0 - ADAM_BETA1.powi(t));
    let corr2 = E::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = E::from_f64(ADAM_EPS);
    let lr = E::from_f64(lr);
    let cs = E::from_f64(clip_scale);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().data.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
        let g = &grads[&name];
        let theta = &mut params.get_mut(&name).unwrap().data;
        for i in 0..n {
            let gi = g[i] * cs;
            m[i] = b1 * m[i] + (E::one() - b1) * gi;
            v[i] = b2 * v[i] + (E::one() - b2) * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("name or rank too large for {name}")));
    }
    buf.extend((name.len() as u16).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend((d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend(v.to_le_bytes());
    }
    Ok(())
}

/// Binary checkpoint: magic "SDN1", u32 LE tensor count, then per tensor a
/// u16 LE name length, the UTF-8 name, u8 ndim, ndim u32 LE dims, and raw
/// f32 LE data. Optimizer state is appended under the `__optim.` prefix.
pub fn save_checkpoint(
    params: &ParamStore<f32>,
    optim: Option<&AdamState<f32>>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend(b"SDN1");
    let count = params.len() + optim.map_or(0, |_| 2 * params.len() + 1);
    buf.extend((count as u32).to_le_bytes());
    for (name, t) in params.iter() {
        write_tensor(&mut buf, name, &t.shape, &t.data)?;
    }
    if let Some(state) = optim {
        for (name, t) in params.iter() {
            let zeros = vec![0.0f32; t.data.len()];
            let m = state.m.get(name).map_or(&zeros[..], |v| &v[..]);
            write_tensor(&mut buf, &format!("{OPTIM_PREFIX}m.{name}"), &t.shape, m)?;
            let v = state.v.get(name).map_or(&zeros[..], |v| &v[..]);
            write_tensor(&mut buf, &format!("{OPTIM_PREFIX}v.{name}"), &t.shape, v)?;
        }
        write_tensor(&mut buf, &format!("{OPTIM_PREFIX}t"), &[1], &[state.t as f32])?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Inverse of [`save_checkpoint`]; bit-exact round trip.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, Option<AdamState<f32>>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != b"SDN1" {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let mut params = ParamStore::new();
    let mut state = AdamState::new();
    let mut has_optim = false;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        if let Some(rest) = name.strip_prefix(OPTIM_PREFIX) {
            has_optim = true;
            let dup = |map: &HashMap<String, Vec<f32>>, key: &str| {
                map.contains_key(key)
                    .then(|| Error::Checkpoint(format!("duplicate tensor name {name}")))
            };
            if let Some(key) = rest.strip_prefix("m.") {
                if let Some(e) = dup(&state.m, key) {
                    return Err(e);
                }
                state.m.insert(key.to_string(), data);
            } else if let Some(key) = rest.strip_prefix("v.") {
                if let Some(e) = dup(&state.v, key) {
                    return Err(e);
                }
                state.v.insert(key.to_string(), data);
            } else if rest == "t" {
                state.t = data.first().copied().unwrap_or(0.0) as u64;
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer entry {name}")));
            }
        } else {
            params
                .insert(name.clone(), data, shape)
                .map_err(|_| Error::Checkpoint(format!("duplicate tensor name {name}")))?;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((params, has_optim.then_some(state)))
}

/// Per-image evaluation scores, with the unprocessed rainy image as a
/// baseline.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rainy_psnr: f64,
    pub rainy_ssim: f64,
}

fn center_crop(t: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let padded = reflect_pad(t, size, size)?;
    let (h, w) = (padded.shape()[0], padded.shape()[1]);
    crop(&padded, (h - size) / 2, (w - size) / 2, size, size)
}

/// Run the model on every image of a split (center-cropped to `size`) and
/// score the clamped prediction against the clean image.
pub fn evaluate_split(
    params: &ParamStore<f32>,
    model_cfg: &ModelConfig,
    manifest: &Manifest,
    split: Split,
    size: usize,
) -> Result<Vec<EvalRow>> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.as_str())));
    }
    let bound = params.bind_const();
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let rainy = center_crop(&load_image(&manifest.abs_rainy(rec))?, size)?;
        let clean = center_crop(&load_image(&manifest.abs_clean(rec))?, size)?;
        let pred = sdnet_forward(&rainy, &bound, model_cfg)?.clamped(0.0, 1.0);
        rows.push(EvalRow {
            id: rec.id.clone(),
            psnr: psnr(&pred, &clean)?,
            ssim: ssim(&pred, &clean)?.item()? as f64,
            rainy_psnr: psnr(&rainy, &clean)?,
            rainy_ssim: ssim(&rainy, &clean)?.item()? as f64,
        });
    }
    Ok(rows)
}

pub fn mean_scores(rows: &[EvalRow]) -> (f64, f64) {
    let n = rows.len() as f64;
    (rows.iter().map(|r| r.psnr).sum::<f64>() / n, rows.iter().map(|r| r.ssim).sum::<f64>() / n)
}

/// Run the training loop. Writes `metrics.csv`, periodic `ckpt-<iter>.sdn`
/// checkpoints, and `ckpt-final.sdn` under `out_dir`; returns the final
/// checkpoint path. `resume` restarts from a saved checkpoint's optimizer
/// step counter and reproduces the unbroken run exactly.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    manifest: &Manifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut params, mut state, start_iter) = match resume {
        Some(path) => {
            let (params, state) = load_checkpoint(path)?;
            let state = state
                .ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state", path.display())))?;
            let start = state.t as usize;
            (params, state, start)
        }
        None => (init_params::<f32>(model_cfg, cfg.seed)?, AdamState::new(), 0),
    };
    if start_iter >= cfg.total_iters {
        return Err(Error::Config(format!(
            "resume step {start_iter} is past total_iters {}",
            cfg.total_iters
        )));
    }

    let probe = batch_iter(manifest, Split::Train, cfg.crop, cfg.batch, cfg.seed, 0)?;
    let batches_per_epoch = probe.num_batches();
    drop(probe);

    let csv_path = out_dir.join("metrics.csv");
    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if start_iter == 0 {
        writeln!(csv, "iter,lr,loss_total,loss_l1,loss_ssim,loss_ide,test_psnr,test_ssim")
            .map_err(|e| Error::io(&csv_path, e))?;
    }

    let mut epoch = start_iter / batches_per_epoch;
    let mut batches = batch_iter(manifest, Split::Train, cfg.crop, cfg.batch, cfg.seed, epoch as u64)?;
    batches.skip_batches(start_iter % batches_per_epoch);

    for iter in start_iter..cfg.total_iters {
        let wanted_epoch = iter / batches_per_epoch;
        if wanted_epoch != epoch {
            epoch = wanted_epoch;
            batches =
                batch_iter(manifest, Split::Train, cfg.crop, cfg.batch, cfg.seed, epoch as u64)?;
        }
        let batch = batches
            .next()
            .ok_or_else(|| Error::Data("batch iterator exhausted early".into()))?;
        let batch = batch?;

        let lr = lr_at(iter, cfg.total_iters, cfg.lr0);
        let step = (|| -> Result<(HashMap<String, Vec<f32>>, [f64; 4])> {
            let tape = Tape::new();
            let bound = params.bind(&tape)?;
            let mut total: Option<Tensor<f32>> = None;
            let mut sums = [0.0f64; 4];
            for pair in &batch.pairs {
                let pred = sdnet_forward(&pair.rainy, &bound, model_cfg)?;
                let clean_pred = sdnet_forward(&pair.clean, &bound, model_cfg)?;
                let terms = total_loss(&pred, &pair.clean, &clean_pred, &cfg.weights)?;
                sums[0] += terms.total.item()? as f64;
                sums[1] += terms.l1.item()? as f64;
                sums[2] += terms.ssim.item()? as f64;
                sums[3] += terms.identity.item()? as f64;
                total = Some(match total {
                    None => terms.total,
                    Some(acc) => acc.add(&terms.total)?,
                });
            }
            let n = batch.pairs.len();
            let mean = total.expect("non-empty batch").scale(1.0 / n as f32)?;
            mean.backward()?;
            for s in &mut sums {
                *s /= n as f64;
            }
            let mut grads = HashMap::with_capacity(params.len());
            for name in params.names() {
                let g = bound.grad(name)?.ok_or_else(|| {
                    Error::Contract(format!("missing gradient for parameter {name}"))
                })?;
                grads.insert(name.to_string(), g);
            }
            Ok((grads, sums))
        })();
        let (grads, sums) = step
            .map_err(|e| Error::Data(format!("training aborted at iter {iter} (lr {lr:.2e}): {e}")))?;

        adam_step(&mut params, &grads, &mut state, lr, cfg.grad_clip)?;

        let (mut test_psnr, mut test_ssim) = (String::new(), String::new());
        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            let rows = evaluate_split(&params, model_cfg, manifest, Split::Test, cfg.crop)?;
            let (p, s) = mean_scores(&rows);
            test_psnr = format!("{p}");
            test_ssim = format!("{s}");
        }
        writeln!(
            csv,
            "{iter},{lr},{},{},{},{},{test_psnr},{test_ssim}",
            sums[0], sums[1], sums[2], sums[3]
        )
        .map_err(|e| Error::io(&csv_path, e))?;

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&params, Some(&state), &out_dir.join(format!("ckpt-{}.sdn", iter + 1)))?;
        }
    }
    let final_path = out_dir.join("ckpt-final.sdn");
    save_checkpoint(&params, Some(&state), &final_path)?;
    Ok(final_path)
}

#[cfg(test)]
mod tests;
