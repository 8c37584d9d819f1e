//! Full synthetic-suite comparison run: static versus adaptive inference
//! over N seeded scenes, with deterministic report files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::miou;
use crate::numerics::{derive_seed, param_constructions};
use crate::pipeline::{segment_image, InferenceMode, Segmentation};
use crate::report::{EvalReport, CSV_HEADER};
use crate::scene::{category_names, default_synonyms, gen_scene};
use crate::scl::SynonymLibrary;
use crate::vlm::{build_model, FrozenModel};

/// In-memory outcome of one suite run, mirroring the emitted files.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub reports: Vec<EvalReport>,
    pub static_mean_miou: Option<f64>,
    pub adaptive_mean_miou: Option<f64>,
    /// (pre, post) for every adapted window across the suite.
    pub window_losses: Vec<(f64, f64)>,
    pub mean_loss_decrease: Option<f64>,
    pub improved_window_fraction: Option<f64>,
    pub median_relative_decrease: Option<f64>,
    pub report_csv: String,
    pub summary: String,
    pub out_dir: PathBuf,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn fmt_stat(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "absent".into())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

struct SuiteContext<'a> {
    model: &'a FrozenModel,
    cfg: &'a RunConfig,
    categories: &'a [String],
    library: &'a SynonymLibrary,
}

fn run_scene(
    ctx: &SuiteContext<'_>,
    scene_id: usize,
    mode: InferenceMode,
    mode_name: &str,
    views_override: Option<usize>,
) -> Result<EvalReport> {
    let cfg = ctx.cfg;
    let scene = gen_scene(
        derive_seed(cfg.seed, scene_id as u64),
        cfg.scene_height,
        cfg.scene_width,
        cfg.classes,
        cfg.texture_noise,
    )?;
    let mut opts = cfg.segment_options(mode)?;
    if let Some(k) = views_override {
        opts.adapt.views = crate::gcl::ViewSet::new(k)?;
    }
    let started = Instant::now();
    let segmentation: Segmentation =
        segment_image(ctx.model, &scene.image, ctx.categories, ctx.library, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();
    let iou = miou(&segmentation.labels, &scene.gt, cfg.classes)?;
    let mut report = EvalReport::new(scene_id, mode_name, &iou);
    report.per_window_losses = segmentation
        .report
        .windows
        .iter()
        .map(|w| (w.loss_pre, w.loss_post))
        .collect();
    report.runtime_seconds = cfg.timing.then_some(elapsed);
    Ok(report)
}

/// Runs the full comparison: every scene in static then adaptive mode,
/// optional K sweep, deterministic report files under `out_dir`.
pub fn run_suite(cfg: &RunConfig, out_dir: &Path) -> Result<SuiteOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scene_dir = out_dir.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;

    let model = build_model(&cfg.model_config())?;
    let categories = category_names(cfg.classes)?;
    let library = match &cfg.synonyms {
        Some(path) => SynonymLibrary::load(path)?,
        None => {
            let text = default_synonyms(&categories, cfg.z)?;
            let path = out_dir.join("synonyms.txt");
            write_file(&path, &text)?;
            SynonymLibrary::parse(&text)?
        }
    };
    library.validate_for(&categories)?;

    let ctx = SuiteContext {
        model: &model,
        cfg,
        categories: &categories,
        library: &library,
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for scene_id in 0..cfg.scenes {
        // The static pass must not create any trainable state.
        let before = param_constructions();
        let static_report = run_scene(&ctx, scene_id, InferenceMode::Static, "static", None)?;
        if param_constructions() != before {
            return Err(Error::Internal(
                "static inference constructed a trainable parameter".into(),
            ));
        }
        let adaptive_report = run_scene(&ctx, scene_id, InferenceMode::Adaptive, "seeco", None)?;
        reports.push(static_report);
        reports.push(adaptive_report);
    }
    for &k in &cfg.k_sweep {
        let mode_name = format!("seeco_k{k}");
        for scene_id in 0..cfg.scenes {
            reports.push(run_scene(
                &ctx,
                scene_id,
                InferenceMode::Adaptive,
                &mode_name,
                Some(k),
            )?);
        }
    }

    for report in &reports {
        let path = scene_dir.join(format!("scene_{:04}_{}.txt", report.scene_id, report.mode));
        write_file(&path, &report.to_kv())?;
    }

    let static_mious: Vec<f64> = reports
        .iter()
        .filter(|r| r.mode == "static")
        .map(|r| r.miou)
        .collect();
    let adaptive_mious: Vec<f64> = reports
        .iter()
        .filter(|r| r.mode == "seeco")
        .map(|r| r.miou)
        .collect();
    let window_losses: Vec<(f64, f64)> = reports
        .iter()
        .filter(|r| r.mode == "seeco")
        .flat_map(|r| r.per_window_losses.iter())
        .filter_map(|(pre, post)| pre.zip(*post))
        .collect();
    let decreases: Vec<f64> = window_losses.iter().map(|(pre, post)| pre - post).collect();
    let relative: Vec<f64> = window_losses
        .iter()
        .map(|(pre, post)| if *pre != 0.0 { (pre - post) / pre } else { 0.0 })
        .collect();
    let improved_window_fraction = (!window_losses.is_empty()).then(|| {
        window_losses
            .iter()
            .filter(|(pre, post)| post < pre)
            .count() as f64
            / window_losses.len() as f64
    });

    let mut report_csv = String::from(CSV_HEADER);
    report_csv.push('\n');
    for report in &reports {
        report_csv.push_str(&report.csv_row());
        report_csv.push('\n');
    }

    let mut summary = String::new();
    summary.push_str(&format!("scenes = {}\n", cfg.scenes));
    summary.push_str(&format!("classes = {}\n", cfg.classes));
    summary.push_str(&format!(
        "static_mean_miou = {}\n",
        fmt_stat(mean(&static_mious))
    ));
    summary.push_str(&format!(
        "seeco_mean_miou = {}\n",
        fmt_stat(mean(&adaptive_mious))
    ));
    summary.push_str(&format!(
        "mean_loss_decrease = {}\n",
        fmt_stat(mean(&decreases))
    ));
    summary.push_str(&format!(
        "improved_window_fraction = {}\n",
        fmt_stat(improved_window_fraction)
    ));
    summary.push_str(&format!(
        "median_relative_decrease = {}\n",
        fmt_stat(median(relative.clone()))
    ));
    for &k in &cfg.k_sweep {
        let mode_name = format!("seeco_k{k}");
        let sweep_mious: Vec<f64> = reports
            .iter()
            .filter(|r| r.mode == mode_name)
            .map(|r| r.miou)
            .collect();
        summary.push_str(&format!(
            "sweep_k{k}_mean_miou = {}\n",
            fmt_stat(mean(&sweep_mious))
        ));
    }
    summary.push_str("\n# configuration\n");
    summary.push_str(&cfg.echo());

    write_file(&out_dir.join("report.csv"), &report_csv)?;
    write_file(&out_dir.join("summary.txt"), &summary)?;

    Ok(SuiteOutcome {
        reports,
        static_mean_miou: mean(&static_mious),
        adaptive_mean_miou: mean(&adaptive_mious),
        window_losses,
        mean_loss_decrease: mean(&decreases),
        improved_window_fraction,
        median_relative_decrease: median(relative),
        report_csv,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}
