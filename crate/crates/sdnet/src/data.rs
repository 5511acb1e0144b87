//! Synthetic-rain data pipeline: procedural streak layers, additive
//! composition (O = clamp(B + sum R, 0, 1)), PNG ingest/emit, dataset
//! synthesis with a TSV manifest, and shuffled training batches.
//!
//! All randomness is derived from explicit seeds; re-running synthesis from
//! the per-image seeds stored in the manifest reproduces every rainy image
//! byte for byte.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A (rainy, clean) pair in [0,1] RGB float, same shape.
#[derive(Debug, Clone)]
pub struct ImagePair<E: Element> {
    pub rainy: Tensor<E>,
    pub clean: Tensor<E>,
    pub id: String,
}

/// Sampled streak-layer parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreakParams {
    /// Streak direction in degrees from the horizontal axis (90 = vertical).
    pub angle_deg: f64,
    /// Streak length in pixels.
    pub length: f64,
    /// Bernoulli seed density per pixel.
    pub density: f64,
    /// Peak brightness of the layer.
    pub intensity: f64,
}

/// One additive rain layer, nonnegative and at most `intensity`.
#[derive(Debug, Clone)]
pub struct StreakLayer<E: Element> {
    pub r: Tensor<E>,
    /// Present for procedural layers, absent for externally loaded ones.
    pub params: Option<StreakParams>,
}

pub fn sample_streak_params(rng: &mut ChaCha8Rng) -> StreakParams {
    StreakParams {
        angle_deg: rng.gen_range(70.0..110.0),
        length: rng.gen_range(15.0..45.0),
        density: rng.gen_range(0.002..0.01),
        intensity: rng.gen_range(0.4..1.0),
    }
}

/// Render one streak layer: Bernoulli seed pixels, each splatted with a
/// peak-1 line kernel along the streak direction; overlapping streaks clamp
/// at 1, then the whole layer is scaled by `intensity`. Grayscale,
/// replicated to 3 channels.
pub fn synth_streaks_with<E: Element>(
    h: usize,
    w: usize,
    params: StreakParams,
    rng: &mut ChaCha8Rng,
) -> Result<StreakLayer<E>> {
    if h < 64 || w < 64 {
        return Err(Error::Data(format!("streak layer needs at least 64x64, got {h}x{w}")));
    }
    // line kernel, supersampled 4x along the direction and normalized so
    // its brightest cell is exactly 1
    let rad = params.angle_deg.to_radians();
    let (dx, dy) = (rad.cos(), rad.sin());
    let steps = (params.length * 4.0).ceil() as usize;
    let mut kernel: Vec<(isize, isize, f64)> = Vec::new();
    for s in 0..steps {
        let t = s as f64 * 0.25;
        let py = (t * dy).round() as isize;
        let px = (t * dx).round() as isize;
        match kernel.iter_mut().find(|(ky, kx, _)| *ky == py && *kx == px) {
            Some((_, _, m)) => *m += 1.0,
            None => kernel.push((py, px, 1.0)),
        }
    }
    let kmax = kernel.iter().map(|&(_, _, m)| m).fold(0.0f64, f64::max);
    for (_, _, m) in &mut kernel {
        *m /= kmax;
    }

    let mut plane = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            if rng.gen::<f64>() < params.density {
                for &(ky, kx, m) in &kernel {
                    let (y, x) = (r as isize + ky, c as isize + kx);
                    if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                        let cell = &mut plane[y as usize * w + x as usize];
                        *cell = (*cell + m).min(1.0);
                    }
                }
            }
        }
    }
    for v in &mut plane {
        *v *= params.intensity;
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for v in plane {
        let e = E::from_f64(v);
        data.extend([e, e, e]);
    }
    Ok(StreakLayer { r: Tensor::from_vec(data, &[h, w, 3])?, params: Some(params) })
}

/// Sample parameters from `rng`, then render.
pub fn synth_streaks<E: Element>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<StreakLayer<E>> {
    let params = sample_streak_params(rng);
    synth_streaks_with(h, w, params, rng)
}

/// O = clamp(B + sum of layers, 0, 1).
pub fn compose_rainy<E: Element>(
    clean: &Tensor<E>,
    layers: &[StreakLayer<E>],
    id: impl Into<String>,
) -> Result<ImagePair<E>> {
    if layers.is_empty() || layers.len() > 4 {
        return Err(Error::Contract(format!("compose_rainy needs 1..=4 layers, got {}", layers.len())));
    }
    let mut rainy: Vec<E> = clean.data().to_vec();
    for layer in layers {
        if layer.r.shape() != clean.shape() {
            return Err(Error::shape(
                "compose_rainy",
                format!("layer {:?} vs clean {:?}", layer.r.shape(), clean.shape()),
            ));
        }
        for (o, &r) in rainy.iter_mut().zip(layer.r.data().iter()) {
            if r < E::zero() {
                return Err(Error::Contract("streak layer has negative values".into()));
            }
            *o += r;
        }
    }
    for v in &mut rainy {
        *v = v.min(E::one()).max(E::zero());
    }
    Ok(ImagePair {
        rainy: Tensor::from_vec(rainy, clean.shape())?,
        clean: clean.clone(),
        id: id.into(),
    })
}

/// Load an 8-bit RGB PNG as [H, W, 3] with values v/255.
pub fn load_image<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<E> = img.as_raw().iter().map(|&b| E::from_f64(b as f64 / 255.0)).collect();
    Tensor::from_vec(data, &[h as usize, w as usize, 3])
}

/// Save [H, W, 3] as an 8-bit RGB PNG: clamp to [0,1], scale by 255, round
/// half away from zero.
pub fn save_image<E: Element>(t: &Tensor<E>, path: &Path) -> Result<()> {
    if t.ndim() != 3 || t.shape()[2] != 3 {
        return Err(Error::shape("save_image", format!("expected [H,W,3], got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (Element::to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized from shape");
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other}"))),
        }
    }
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub clean_path: PathBuf,
    pub rainy_path: PathBuf,
    pub split: Split,
    pub layer_seed: u64,
}

/// Line-delimited TSV: `id  clean_path  rainy_path  split  layer_seed`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.clean_path.display(),
                r.rainy_path.display(),
                r.split.as_str(),
                r.layer_seed
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 5 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            records.push(ManifestRecord {
                id: fields[0].to_string(),
                clean_path: PathBuf::from(fields[1]),
                rainy_path: PathBuf::from(fields[2]),
                split: Split::parse(fields[3])?,
                layer_seed: fields[4]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad layer_seed {}", fields[4])))?,
            });
        }
        Ok(Manifest { base_dir, records })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn abs_clean(&self, r: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&r.clean_path)
    }

    pub fn abs_rainy(&self, r: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&r.rainy_path)
    }
}

/// Collapse arbitrary (seed, label) pairs into one RNG seed.
fn mix_seed(master: u64, label: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Per-image synthesis seed, derived from the master seed and the image id.
pub fn derive_layer_seed(master: u64, id: &str) -> u64 {
    mix_seed(master, id.as_bytes())
}

/// Where streak layers come from.
#[derive(Debug, Clone, Copy, Default)]
pub enum StreakSource<'a> {
    /// Procedurally rendered layers.
    #[default]
    Procedural,
    /// PNGs from a directory (e.g. an external streak bank), tiled to the
    /// background size and composited additively.
    Dir(&'a Path),
}

/// Tile an image to exactly (h, w) by wrapping.
fn tile_to<E: Element>(t: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let (sh, sw, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let base = ((y % sh) * sw + x % sw) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::from_vec(out, &[h, w, c])
}

fn load_streak_layer<E: Element>(
    dir: &Path,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StreakLayer<E>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("streak dir {} is empty", dir.display())));
    }
    let pick = rng.gen_range(0..names.len());
    let img: Tensor<E> = load_image(&names[pick])?;
    Ok(StreakLayer { r: tile_to(&img, h, w)?, params: None })
}

/// Re-create the rainy image of one record from its clean image and seed:
/// layer count uniform in 1..=4, then that many layers from `source`.
pub fn synthesize_pair<E: Element>(
    clean: &Tensor<E>,
    id: &str,
    layer_seed: u64,
    source: StreakSource<'_>,
) -> Result<ImagePair<E>> {
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed);
    let count = rng.gen_range(1..=4usize);
    let layers: Vec<StreakLayer<E>> = (0..count)
        .map(|_| match source {
            StreakSource::Procedural => synth_streaks(h, w, &mut rng),
            StreakSource::Dir(dir) => load_streak_layer(dir, h, w, &mut rng),
        })
        .collect::<Result<_>>()?;
    compose_rainy(clean, &layers, id)
}

/// Synthesize a paired dataset under `out_dir` from backgrounds in
/// `background_dir`. Backgrounds are shuffled deterministically by `seed`;
/// undecodable or too-small files are skipped with a warning on stderr.
/// Layout: `{train,test}/{clean,rainy}/<id>.png` plus `manifest.tsv`.
pub fn build_dataset(
    background_dir: &Path,
    out_dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    source: StreakSource<'_>,
) -> Result<Manifest> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(background_dir)
        .map_err(|e| Error::io(background_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);

    for split in ["train", "test"] {
        for kind in ["clean", "rainy"] {
            let dir = out_dir.join(split).join(kind);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }

    let needed = n_train + n_test;
    let mut records = Vec::with_capacity(needed);
    for path in names {
        if records.len() == needed {
            break;
        }
        let clean: Tensor<f32> = match load_image(&path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        if clean.shape()[0] < 64 || clean.shape()[1] < 64 {
            eprintln!("warning: skipping {}: smaller than 64x64", path.display());
            continue;
        }
        let idx = records.len();
        let id = format!("{idx:05}");
        let split = if idx < n_train { Split::Train } else { Split::Test };
        let layer_seed = derive_layer_seed(seed, &id);
        let pair = synthesize_pair(&clean, &id, layer_seed, source)?;

        let rel_clean = PathBuf::from(split.as_str()).join("clean").join(format!("{id}.png"));
        let rel_rainy = PathBuf::from(split.as_str()).join("rainy").join(format!("{id}.png"));
        save_image(&pair.clean, &out_dir.join(&rel_clean))?;
        save_image(&pair.rainy, &out_dir.join(&rel_rainy))?;
        records.push(ManifestRecord {
            id,
            clean_path: rel_clean,
            rainy_path: rel_rainy,
            split,
            layer_seed,
        });
    }
    if records.len() < needed {
        return Err(Error::Data(format!(
            "background dir {} yielded {} usable images, need {needed}",
            background_dir.display(),
            records.len()
        )));
    }
    let manifest = Manifest { base_dir: out_dir.to_path_buf(), records };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Mirror index for reflect padding without edge duplication (period
/// 2(n-1)): ..., 2, 1, 0, 1, 2, ..., n-1, n-2, ...
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pad an [H, W, 3] image at the bottom/right edges up to at least
/// `(min_h, min_w)`; returns the input untouched when already large enough.
pub fn reflect_pad<E: Element>(t: &Tensor<E>, min_h: usize, min_w: usize) -> Result<Tensor<E>> {
    if t.ndim() != 3 {
        return Err(Error::shape("reflect_pad", format!("expected [H,W,C], got {:?}", t.shape())));
    }
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (nh, nw) = (h.max(min_h), w.max(min_w));
    if (nh, nw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = Vec::with_capacity(nh * nw * c);
    for y in 0..nh {
        let sy = reflect_index(y, h);
        for x in 0..nw {
            let sx = reflect_index(x, w);
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::from_vec(out, &[nh, nw, c])
}

/// Copy out an aligned window.
pub fn crop<E: Element>(t: &Tensor<E>, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<Tensor<E>> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if oy + ch > h || ox + cw > w {
        return Err(Error::shape("crop", format!("{ch}x{cw}+{oy},{ox} out of {h}x{w}")));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in 0..ch {
        let base = ((oy + y) * w + ox) * c;
        out.extend_from_slice(&src[base..base + cw * c]);
    }
    Tensor::from_vec(out, &[ch, cw, c])
}

/// One training batch of aligned random crops.
pub struct Batch<E: Element> {
    pub pairs: Vec<ImagePair<E>>,
}

/// Deterministic per-epoch batch stream: item order is a shuffle keyed by
/// (seed, epoch); each item's crop offset comes from an RNG keyed by
/// (seed, epoch, position). Images smaller than the crop are reflect-padded.
pub struct BatchIter<'a> {
    manifest: &'a Manifest,
    order: Vec<&'a ManifestRecord>,
    crop: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
}

pub fn batch_iter<'a>(
    manifest: &'a Manifest,
    split: Split,
    crop: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if crop == 0 || batch == 0 {
        return Err(Error::Config("crop and batch must be positive".into()));
    }
    let mut order = manifest.split(split);
    if order.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.as_str())));
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, format!("epoch:{epoch}").as_bytes()));
    order.shuffle(&mut rng);
    Ok(BatchIter { manifest, order, crop, batch, seed, epoch, pos: 0 })
}

impl BatchIter<'_> {
    fn load_item(&self, pos: usize) -> Result<ImagePair<f32>> {
        let rec = self.order[pos];
        let clean = load_image::<f32>(&self.manifest.abs_clean(rec))?;
        let rainy = load_image::<f32>(&self.manifest.abs_rainy(rec))?;
        if clean.shape() != rainy.shape() {
            return Err(Error::Data(format!(
                "{}: clean {:?} vs rainy {:?}",
                rec.id,
                clean.shape(),
                rainy.shape()
            )));
        }
        let clean = reflect_pad(&clean, self.crop, self.crop)?;
        let rainy = reflect_pad(&rainy, self.crop, self.crop)?;
        let (h, w) = (clean.shape()[0], clean.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.seed,
            format!("epoch:{}:item:{pos}", self.epoch).as_bytes(),
        ));
        let oy = rng.gen_range(0..=h - self.crop);
        let ox = rng.gen_range(0..=w - self.crop);
        Ok(ImagePair {
            rainy: crop(&rainy, oy, ox, self.crop, self.crop)?,
            clean: crop(&clean, oy, ox, self.crop, self.crop)?,
            id: rec.id.clone(),
        })
    }

    /// Number of batches per epoch (trailing partial batch included).
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    /// Advance past the first `n` batches without loading them.
    pub fn skip_batches(&mut self, n: usize) {
        self.pos = (n * self.batch).min(self.order.len());
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let mut pairs = Vec::with_capacity(end - self.pos);
        for p in self.pos..end {
            match self.load_item(p) {
                Ok(pair) => pairs.push(pair),
                Err(e) => return Some(Err(e)),
            }
        }
        self.pos = end;
        Some(Ok(Batch { pairs }))
    }
}
