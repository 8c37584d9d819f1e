//! Command-line entry points: scene generation, single-image
//! segmentation, mIoU evaluation, the full comparison suite, and model
//! export.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
//! invariant violation.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use seeco_core::config::RunConfig;
use seeco_core::error::{Error, Result};
use seeco_core::imgio;
use seeco_core::metrics::miou;
use seeco_core::numerics::derive_seed;
use seeco_core::pipeline::{segment_image, InferenceMode};
use seeco_core::scene::{category_names, default_synonyms, gen_scene};
use seeco_core::scl::SynonymLibrary;
use seeco_core::suite::run_suite;
use seeco_core::vlm::{build_model, FrozenModel};

#[derive(Parser)]
#[command(
    name = "seeco",
    about = "Test-time consensus adaptation for open-vocabulary segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes: P6 images, P5 ground truth, a manifest,
    /// and the category list.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        classes: usize,
        /// Scene extent as HEIGHT,WIDTH.
        #[arg(long)]
        size: String,
        #[arg(long)]
        out: PathBuf,
        /// Additive texture noise amplitude.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Segment one image and write the P5 label map.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Category names, one per line.
        #[arg(long)]
        categories: PathBuf,
        #[arg(long)]
        synonyms: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frozen consensus only; no test-time adaptation.
        #[arg(long = "static")]
        static_mode: bool,
    },
    /// Compare a predicted label map against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
    },
    /// Full static-versus-adaptive comparison over seeded scenes.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the seeded frozen backbone and serialize it.
    ExportModel {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn read_categories(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let categories: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if categories.is_empty() {
        return Err(Error::FormatError {
            line: 0,
            reason: format!("{}: no categories", path.display()),
        });
    }
    Ok(categories)
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let (h, w) = size
        .split_once(',')
        .ok_or_else(|| Error::ConfigError(format!("size must be HEIGHT,WIDTH, got '{size}'")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::ConfigError(format!("bad size component '{v}'")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn run_gen(
    seed: u64,
    count: usize,
    classes: usize,
    size: &str,
    out: &Path,
    noise: f64,
) -> Result<()> {
    let (height, width) = parse_size(size)?;
    let categories = category_names(classes)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut manifest = String::new();
    manifest.push_str(&format!(
        "seed = {seed}\ncount = {count}\nclasses = {classes}\nheight = {height}\nwidth = {width}\nnoise = {noise}\n"
    ));
    for i in 0..count {
        let scene = gen_scene(derive_seed(seed, i as u64), height, width, classes, noise)?;
        let image_name = format!("scene_{i:04}.ppm");
        let gt_name = format!("scene_{i:04}_gt.pgm");
        imgio::write_ppm(&out.join(&image_name), &scene.image)?;
        imgio::write_pgm(&out.join(&gt_name), &scene.gt)?;
        manifest.push_str(&format!("scene_{i} = {image_name} {gt_name}\n"));
    }
    std::fs::write(out.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(out.join("manifest.txt"), e))?;
    std::fs::write(out.join("categories.txt"), categories.join("\n") + "\n")
        .map_err(|e| Error::io(out.join("categories.txt"), e))?;
    let synonyms = default_synonyms(&categories, 5)?;
    std::fs::write(out.join("synonyms.txt"), synonyms)
        .map_err(|e| Error::io(out.join("synonyms.txt"), e))?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_segment(
    model_path: &Path,
    image: &Path,
    categories_path: &Path,
    synonyms: &Path,
    config: &Option<PathBuf>,
    out: &Path,
    static_mode: bool,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = FrozenModel::load(model_path)?;
    let img = imgio::read_ppm(image)?;
    let categories = read_categories(categories_path)?;
    let library = SynonymLibrary::load(synonyms)?;
    library.validate_for(&categories)?;

    let mode = if static_mode {
        InferenceMode::Static
    } else {
        InferenceMode::Adaptive
    };
    let opts = cfg.segment_options(mode)?;
    if opts.window != model.config().image_size {
        return Err(Error::ConfigError(format!(
            "config window {} does not match the model input size {}",
            opts.window,
            model.config().image_size
        )));
    }
    let segmentation = segment_image(&model, &img, &categories, &library, &opts)?;
    imgio::write_pgm(out, &segmentation.labels)?;
    for w in &segmentation.report.windows {
        match (w.loss_pre, w.loss_post) {
            (Some(pre), Some(post)) => {
                println!("window ({}, {}): loss {pre} -> {post}", w.row, w.col)
            }
            _ if w.diverged => println!(
                "window ({}, {}): diverged, static fallback used",
                w.row, w.col
            ),
            _ => {}
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_eval(pred: &Path, gt: &Path, classes: usize) -> Result<()> {
    let pred = imgio::read_pgm(pred)?;
    let gt = imgio::read_pgm(gt)?;
    let report = miou(&pred, &gt, classes)?;
    for (j, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("iou_{j} = {v}"),
            None => println!("iou_{j} = absent"),
        }
    }
    println!("miou = {}", report.miou);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen {
            seed,
            count,
            classes,
            size,
            out,
            noise,
        } => run_gen(*seed, *count, *classes, size, out, *noise),
        Command::Segment {
            model,
            image,
            categories,
            synonyms,
            config,
            out,
            static_mode,
        } => run_segment(
            model,
            image,
            categories,
            synonyms,
            config,
            out,
            *static_mode,
        ),
        Command::Eval { pred, gt, classes } => run_eval(pred, gt, *classes),
        Command::Suite { config, out } => {
            let cfg = load_config(config)?;
            let outcome = run_suite(&cfg, out)?;
            print!("{}", outcome.summary);
            Ok(())
        }
        Command::ExportModel { config, out } => {
            let cfg = load_config(config)?;
            let model = build_model(&cfg.model_config())?;
            model.save(out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                std::process::exit(0);
            }
            eprintln!("{err}");
            std::process::exit(1);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
