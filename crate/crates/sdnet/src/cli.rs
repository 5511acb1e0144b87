//! Command-line interface: synthesize data, train, derain images, evaluate
//! checkpoints, and report parameter counts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    build_dataset, crop, load_image, reflect_pad, save_image, Manifest, Split, StreakSource,
};
use crate::error::{Error, Result};
use crate::model::{
    check_params_match, param_count, param_count_by_module, sdnet_forward, Variant,
};
use crate::train::{evaluate_split, load_checkpoint, mean_scores, train};

#[derive(Parser)]
#[command(name = "sdnet", about = "Single-image deraining with windowed-attention blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

/// Configuration flags shared by every command that builds a model.
#[derive(Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Skip-connection variant: r1, r2, r3, or sdnet.
    #[arg(long)]
    pub variant: Option<String>,

    /// Number of attention branches per fusion module.
    #[arg(long)]
    pub branches: Option<usize>,

    /// Single-key override, repeatable: --set crop=63.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.variant {
            cfg.apply_variant(Variant::parse(v)?);
        }
        if let Some(b) = self.branches {
            cfg.model.num_branches = b;
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a paired rainy/clean dataset with a manifest.
    Synth {
        /// Directory of background images (8-bit RGB PNG).
        #[arg(long)]
        backgrounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory of external streak PNGs used instead of the
        /// procedural renderer.
        #[arg(long)]
        streaks: Option<PathBuf>,
    },

    /// Train a model on a synthesized dataset.
    Train {
        /// Path to manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Derain a PNG or a directory of PNGs with a trained checkpoint.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image or directory.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Score a checkpoint on a manifest split; CSV to stdout or --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Path to manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Print parameter counts per module and in total.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth { backgrounds, out, n_train, n_test, seed, streaks } => {
            let source = match &streaks {
                Some(dir) => StreakSource::Dir(dir),
                None => StreakSource::Procedural,
            };
            let manifest = build_dataset(&backgrounds, &out, n_train, n_test, seed, source)?;
            println!(
                "wrote {} train + {} test pairs and {}",
                manifest.split(Split::Train).len(),
                manifest.split(Split::Test).len(),
                out.join("manifest.tsv").display()
            );
        }

        Command::Train { data, out, resume, config } => {
            let cfg = config.build()?;
            println!("effective configuration:");
            print!("{}", cfg.echo());
            let manifest = Manifest::load(&data)?;
            let final_ckpt = train(&cfg.model, &cfg.train, &manifest, &out, resume.as_deref())?;
            println!("final checkpoint: {}", final_ckpt.display());
        }

        Command::Derain { checkpoint, input, out, config } => {
            let cfg = config.build()?;
            let (params, _) = load_checkpoint(&checkpoint)?;
            check_params_match(&params, &cfg.model)?;
            let bound = params.bind_const();
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

            let inputs: Vec<PathBuf> = if input.is_dir() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(&input)
                    .map_err(|e| Error::io(&input, e))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "png"))
                    .collect();
                v.sort();
                v
            } else {
                vec![input.clone()]
            };
            if inputs.is_empty() {
                return Err(Error::Data(format!("no PNG inputs under {}", input.display())));
            }

            // inputs must divide into patch windows; pad up to the next
            // multiple of patch_size * window_size, then crop back
            let tile = cfg.model.block.min_side();
            for path in inputs {
                let img = load_image::<f32>(&path)?;
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let (ph, pw) = (h.div_ceil(tile) * tile, w.div_ceil(tile) * tile);
                let start = Instant::now();
                let padded = reflect_pad(&img, ph, pw)?;
                let pred = sdnet_forward(&padded, &bound, &cfg.model)?;
                let pred = crop(&pred, 0, 0, h, w)?.clamped(0.0, 1.0);
                let elapsed = start.elapsed();
                let name = path.file_name().expect("file path");
                save_image(&pred, &out.join(name))?;
                println!(
                    "{} ({}x{}) derained in {:.1} ms",
                    Path::new(name).display(),
                    h,
                    w,
                    elapsed.as_secs_f64() * 1e3
                );
            }
        }

        Command::Eval { checkpoint, data, split, out, config } => {
            let cfg = config.build()?;
            let (params, _) = load_checkpoint(&checkpoint)?;
            check_params_match(&params, &cfg.model)?;
            let manifest = Manifest::load(&data)?;
            let rows =
                evaluate_split(&params, &cfg.model, &manifest, Split::parse(&split)?, cfg.train.crop)?;

            let mut csv = String::from("id,psnr,ssim,rainy_psnr,rainy_ssim\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.id, r.psnr, r.ssim, r.rainy_psnr, r.rainy_ssim
                ));
            }
            let (mp, ms) = mean_scores(&rows);
            let n = rows.len() as f64;
            let mrp = rows.iter().map(|r| r.rainy_psnr).sum::<f64>() / n;
            let mrs = rows.iter().map(|r| r.rainy_ssim).sum::<f64>() / n;
            csv.push_str(&format!("mean,{mp},{ms},{mrp},{mrs}\n"));
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?,
                None => print!("{csv}"),
            }
        }

        Command::Params { config } => {
            let cfg = config.build()?;
            for (module, count) in param_count_by_module(&cfg.model) {
                println!("{module:>12}  {count}");
            }
            println!("{:>12}  {}", "total", param_count(&cfg.model));
        }
    }
    Ok(())
}
