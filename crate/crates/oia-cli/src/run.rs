//! Command implementations behind the argument layer in `main`.

use crate::dataset;
use crate::table::{fmt4, mean_sd, metric_cells, Table, REPORT_COLUMNS};
use crate::{AblateArgs, EvalArgs, GenDataArgs, ReportArgs, TrainArgs};
use oia_core::data::checkpoint::{load_checkpoint, save_checkpoint};
use oia_core::metrics::MetricsBundle;
use oia_core::model::Ablation;
use oia_core::optim::Schedule;
use oia_core::trainer::{self, EpochLog, TrainRunConfig};
use oia_core::{OiaError, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn parse_split_percents(s: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(OiaError::Config(format!(
            "split must be three comma-separated percentages, got {s:?}"
        )));
    }
    let mut nums = [0u32; 3];
    for (slot, part) in nums.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| OiaError::Config(format!("bad split percentage {part:?}")))?;
    }
    Ok((nums[0], nums[1], nums[2]))
}

fn parse_lambda(s: &str) -> Result<f64> {
    match s.trim().to_lowercase().as_str() {
        "inf" | "infinity" | "∞" => Ok(f64::INFINITY),
        t => t
            .parse()
            .map_err(|_| OiaError::Config(format!("lambda must be a number or \"inf\", got {s:?}"))),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| OiaError::Config(format!("bad seed {p:?}")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(OiaError::Config("at least one seed is required".into()));
    }
    Ok(seeds)
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let percents = parse_split_percents(&args.split)?;
    let manifest = dataset::generate(
        &args.out,
        args.scenes,
        args.seed,
        &args.profile,
        args.noise,
        percents,
    )?;
    let (tr, va, te) = manifest.split_counts;
    println!(
        "wrote {} scenes to {} (train/val/test = {tr}/{va}/{te}, profile {})",
        manifest.scenes,
        args.out.display(),
        manifest.profile
    );
    Ok(())
}

/// "model.oiac" -> "model.best.oiac".
fn best_checkpoint_path(out: &Path) -> PathBuf {
    match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => out.with_extension(format!("best.{ext}")),
        None => out.with_extension("best"),
    }
}

const LOG_COLUMNS: [&str; 7] = [
    "epoch",
    "lr",
    "train_loss",
    "action_mF1",
    "action_F1all",
    "expl_mF1",
    "expl_F1all",
];

fn write_train_log(path: &Path, log: &[EpochLog], lambda: f64) -> Result<()> {
    let mut table = Table::new(LOG_COLUMNS);
    for entry in log {
        let mut row = vec![
            entry.epoch.to_string(),
            entry.lr.to_string(),
            format!("{:.6}", entry.train_loss),
        ];
        // The report-row metric cells minus the four per-action columns.
        row.extend(metric_cells(&entry.val, lambda).drain(4..));
        table.push_row(row)?;
    }
    fs::write(path, table.to_csv())?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let manifest = dataset::load_manifest(&args.data)?;
    let base = dataset::model_config(&manifest)?;
    let train_split = dataset::load_split(&args.data, "train", &base)?;
    let val_split = dataset::load_split(&args.data, "val", &base)?;

    let mut run = TrainRunConfig::new(args.seed);
    run.lambda = parse_lambda(&args.lambda)?;
    run.k = args.k;
    run.ablation = Ablation::parse(&args.ablation)?;
    run.epochs = args.epochs;
    run.batch_size = args.batch;
    run.schedule = Schedule::with_epochs(args.epochs);

    let result = trainer::train(&train_split, &val_split, &base, &run)?;

    save_checkpoint(&args.out, &result.params)?;
    let best = best_checkpoint_path(&args.out);
    save_checkpoint(&best, &result.best_params)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    write_train_log(&log_path, &result.log, run.lambda)?;

    let last = result.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} scenes; final val action F1_all {} / expl F1_all {}; best epoch {}",
        result.log.len(),
        train_split.len(),
        fmt4(last.val.action_f1_all),
        fmt4(last.val.expl_f1_all),
        result.best_epoch,
    );
    println!(
        "checkpoint {}; best checkpoint {}; log {}",
        args.out.display(),
        best.display(),
        log_path.display()
    );
    Ok(())
}

fn report_row(
    name: &str,
    lambda: f64,
    k: usize,
    metrics: &MetricsBundle,
    wall_seconds: f64,
) -> Vec<String> {
    let mut row = vec![name.to_string(), lambda.to_string(), k.to_string()];
    row.extend(metric_cells(metrics, lambda));
    row.push(format!("{wall_seconds:.1}"));
    row
}

fn mask_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn write_pgm(path: &Path, map: &[f64], side: usize) -> Result<()> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<u32> = if hi > lo {
        map.iter()
            .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u32)
            .collect()
    } else {
        vec![0; map.len()]
    };
    let mut text = format!("P2\n{side} {side}\n255\n");
    for row in pixels.chunks(side) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        let _ = writeln!(text, "{}", line.join(" "));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let cfg = params.config;
    let split = dataset::load_split(&args.data, &args.split, &cfg)?;
    let ablation = Ablation::parse(&args.ablation)?;

    let start = Instant::now();
    let with_maps = args.dump_global_map.is_some();
    let (metrics, evals) =
        trainer::evaluate_detailed(&split, &params, &cfg, ablation, args.seed, with_maps)?;
    let wall = start.elapsed().as_secs_f64();

    let name = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string());
    let mut table = Table::new(REPORT_COLUMNS);
    table.push_row(report_row(&name, cfg.lambda, cfg.k, &metrics, wall))?;
    print!("{}", table.to_csv());

    if let Some(path) = &args.dump_predictions {
        let mut text = String::new();
        for e in &evals {
            let selected: Vec<String> = e
                .selected
                .iter()
                .map(|&i| format!("{i}:{:.6}", e.scores[i]))
                .collect();
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}",
                e.scene_id,
                mask_string(&e.action_pred),
                mask_string(&e.expl_pred),
                selected.join(",")
            );
        }
        fs::write(path, text)?;
    }

    if let Some(dir) = &args.dump_global_map {
        fs::create_dir_all(dir)?;
        for e in &evals {
            let map = e
                .global_mean_map
                .as_ref()
                .expect("maps requested from evaluation");
            write_pgm(&dir.join(format!("{}.pgm", e.scene_id)), map, cfg.spatial)?;
        }
    }
    Ok(())
}

#[derive(Debug)]
struct GridRow {
    name: &'static str,
    lambda: f64,
    k: usize,
    ablation: Ablation,
}

impl GridRow {
    fn new(name: &'static str, lambda: f64, k: usize, ablation: Ablation) -> Self {
        GridRow {
            name,
            lambda,
            k,
            ablation,
        }
    }
}

fn grid_rows(grid: &str) -> Result<Vec<GridRow>> {
    Ok(match grid {
        "lambda-sweep" => vec![
            GridRow::new("lambda-0", 0.0, 10, Ablation::Full),
            GridRow::new("lambda-0.01", 0.01, 10, Ablation::Full),
            GridRow::new("lambda-0.1", 0.1, 10, Ablation::Full),
            GridRow::new("lambda-1", 1.0, 10, Ablation::Full),
            GridRow::new("lambda-inf", f64::INFINITY, 10, Ablation::Full),
        ],
        "branch-ablation" => vec![
            GridRow::new("local-only", 1.0, 10, Ablation::LocalOnly),
            GridRow::new("global-only", 1.0, 10, Ablation::GlobalOnly),
            GridRow::new("random-selector", 1.0, 10, Ablation::RandomSelector),
            GridRow::new("top-5", 1.0, 5, Ablation::Full),
            GridRow::new("top-10", 1.0, 10, Ablation::Full),
        ],
        "single-vs-multi" => vec![
            GridRow::new("multi-action", 1.0, 10, Ablation::Full),
            GridRow::new("single-action", 1.0, 10, Ablation::SingleAction),
        ],
        other => {
            return Err(OiaError::Config(format!(
                "unknown grid {other:?}; available: lambda-sweep, branch-ablation, single-vs-multi"
            )))
        }
    })
}

/// Mean ± sample-sd cell, or "-" when the row's lambda leaves it untrained.
fn aggregate_cell(values: &[f64], trained: bool) -> String {
    if !trained {
        return "-".to_string();
    }
    let (m, s) = mean_sd(values);
    format!("{}±{}", fmt4(m), fmt4(s))
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let rows = grid_rows(&args.grid)?;
    let seeds = parse_seeds(&args.seeds)?;
    let manifest = dataset::load_manifest(&args.data)?;
    let base = dataset::model_config(&manifest)?;
    let train_split = dataset::load_split(&args.data, "train", &base)?;
    let val_split = dataset::load_split(&args.data, "val", &base)?;
    let test_split = dataset::load_split(&args.data, "test", &base)?;

    let mut table = Table::new(REPORT_COLUMNS);
    for row in &rows {
        let mut bundles: Vec<MetricsBundle> = Vec::with_capacity(seeds.len());
        let mut walls = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let start = Instant::now();
            let mut run = TrainRunConfig::new(seed);
            run.lambda = row.lambda;
            run.k = row.k;
            run.ablation = row.ablation;
            run.epochs = args.epochs;
            run.batch_size = args.batch;
            run.schedule = Schedule::with_epochs(args.epochs);
            let result = trainer::train(&train_split, &val_split, &base, &run)?;
            let cfg = trainer::effective_config(&base, &run);
            let metrics =
                trainer::evaluate(&test_split, &result.params, &cfg, row.ablation, seed)?;
            bundles.push(metrics);
            walls.push(start.elapsed().as_secs_f64());
            eprintln!(
                "{} seed {seed}: test action F1_all {} ({:.1}s)",
                row.name,
                fmt4(metrics.action_f1_all),
                walls.last().unwrap()
            );
        }

        let action_trained = !row.lambda.is_infinite();
        let expl_trained = row.lambda != 0.0;
        let collect = |f: &dyn Fn(&MetricsBundle) -> f64| -> Vec<f64> {
            bundles.iter().map(f).collect()
        };
        let mut cells = vec![
            row.name.to_string(),
            row.lambda.to_string(),
            row.k.to_string(),
        ];
        for a in 0..4 {
            cells.push(aggregate_cell(
                &collect(&move |m| m.per_action_f1[a]),
                action_trained,
            ));
        }
        cells.push(aggregate_cell(&collect(&|m| m.action_mf1), action_trained));
        cells.push(aggregate_cell(&collect(&|m| m.action_f1_all), action_trained));
        cells.push(aggregate_cell(&collect(&|m| m.expl_mf1), expl_trained));
        cells.push(aggregate_cell(&collect(&|m| m.expl_f1_all), expl_trained));
        let (wall_mean, _) = mean_sd(&walls);
        cells.push(format!("{wall_mean:.1}"));
        table.push_row(cells)?;
    }

    fs::write(&args.out, table.to_csv())?;
    print!("{}", table.to_markdown());
    eprintln!(
        "grid {} over seeds {:?}: wrote {}",
        args.grid,
        seeds,
        args.out.display()
    );
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    match args.format.as_str() {
        "markdown" | "md" => {}
        other => {
            return Err(OiaError::Config(format!(
                "unknown format {other:?}; expected markdown"
            )))
        }
    }
    let text = fs::read_to_string(&args.input)?;
    let table = Table::parse_csv(&args.input.display().to_string(), &text)?;
    print!("{}", table.to_markdown());
    Ok(())
}
