//! Command-line surface: train / match / eval / bench / viz / config.

use clap::{Args, Parser, Subcommand, ValueEnum};
use fcorr::bench::{run_bench, run_scaling_bench};
use fcorr::config::{ClusterMethod, EngineMode, PipelineConfig};
use fcorr::error::{Error, Result};
use fcorr::filters::{cycle_filter, uncertainty_filter};
use fcorr::image::{write_ppm, ImagePair};
use fcorr::matcher::{Matcher, QuerySet};
use fcorr::matchio::{parse_queries, read_matches, write_flow, write_matches, MatchRecord};
use fcorr::metrics::{aepe, fl_ratio, pck};
use fcorr::model::Model;
use fcorr::synth::SyntheticPair;
use fcorr::train::train;
use fcorr::viz::render_matches;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fcorr", about = "One-pass coarse-to-fine functional image correspondence")]
struct Cli {
    /// JSON config file; defaults apply for every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config worker count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Train,
    Bench,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Onepass,
    Recursive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Filter {
    None,
    Cyc,
    Unc,
    #[value(name = "cyc+unc")]
    CycUnc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClusterArg {
    Aqc,
    Grid,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config {
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the defaults and exit (same as no --config).
        #[arg(long)]
        dump: bool,
    },
    /// Train on synthetic homography pairs.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// JSON-lines metrics log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Detach middle/fine branches from the backbone (ablation).
        #[arg(long)]
        detach_branches: bool,
    },
    /// Find correspondences for a set of queries.
    Match(MatchArgs),
    /// Compare predicted matches against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pixel scale for the metrics (defaults to the config image size).
        #[arg(long)]
        image_size: Option<usize>,
        /// Write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scaling benchmark across query counts.
    Bench {
        /// Comma-separated query counts (defaults from config).
        #[arg(long)]
        counts: Option<String>,
        /// Engine selection; `both` compares onepass against recursive.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render matches over the side-by-side pair.
    Viz {
        #[arg(long, num_args = 2)]
        images: Option<Vec<PathBuf>>,
        #[arg(long)]
        synthetic: Option<u64>,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, default_value = "viz.ppm")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MatchArgs {
    /// Two image files (PPM P6; PNG with the `png` feature).
    #[arg(long, num_args = 2)]
    images: Option<Vec<PathBuf>>,
    /// Generate a synthetic pair from this seed instead of loading files.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Query source: FILE (JSON [[x,y],...]), grid:K, or random:N.
    #[arg(long)]
    queries: String,
    /// Model checkpoint; omitted means seeded random weights.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Match JSON output.
    #[arg(long, default_value = "matches.json")]
    out: PathBuf,
    /// Also write exact ground truth (synthetic pairs only).
    #[arg(long)]
    gt_out: Option<PathBuf>,
    /// Dense flow output (binary) interpolated from kept matches.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum, default_value_t = Filter::None)]
    filter: Filter,
    #[arg(long, value_enum)]
    cluster: Option<ClusterArg>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => match cli.preset {
            Preset::Default => PipelineConfig::default(),
            Preset::Train => PipelineConfig::train_preset(),
            Preset::Bench => PipelineConfig::bench_preset(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_pair(
    images: &Option<Vec<PathBuf>>,
    synthetic: Option<u64>,
    cfg: &PipelineConfig,
) -> Result<(ImagePair, Option<SyntheticPair>)> {
    match (images, synthetic) {
        (Some(paths), None) => {
            if paths.len() != 2 {
                return Err(Error::Invalid("--images needs exactly two paths".to_string()));
            }
            Ok((ImagePair::load(&paths[0], &paths[1], cfg.image_size)?, None))
        }
        (None, Some(seed)) => {
            let sp = SyntheticPair::generate(
                seed,
                cfg.image_size,
                cfg.train.noise_octaves,
                cfg.train.warp_magnitude,
            )?;
            Ok((sp.pair.clone(), Some(sp)))
        }
        _ => Err(Error::Invalid("provide either --images A B or --synthetic SEED".to_string())),
    }
}

fn build_matcher(cfg: &PipelineConfig, ckpt: &Option<PathBuf>) -> Result<Matcher> {
    let model = match ckpt {
        Some(path) => Model::load(cfg, path, false)?,
        None => Model::init(cfg, cfg.seed, false),
    };
    Ok(Matcher::new(model, cfg.clone()))
}

fn cmd_match(cfg: PipelineConfig, args: &MatchArgs) -> Result<()> {
    let mut cfg = cfg;
    if let Some(mode) = args.mode {
        cfg.engine = match mode {
            Mode::Onepass => EngineMode::Onepass,
            Mode::Recursive => EngineMode::Recursive,
        };
    }
    if let Some(cluster) = args.cluster {
        cfg.cluster = match cluster {
            ClusterArg::Aqc => ClusterMethod::Aqc,
            ClusterArg::Grid => ClusterMethod::Grid,
        };
    }
    let (pair, synth) = load_pair(&args.images, args.synthetic, &cfg)?;
    if args.gt_out.is_some() && synth.is_none() {
        return Err(Error::Invalid("--gt-out requires --synthetic".to_string()));
    }
    let coords = parse_queries(&args.queries, cfg.seed)?;
    let queries = QuerySet::new(coords)?;
    let matcher = build_matcher(&cfg, &args.ckpt)?;

    let (output, keep) = match args.filter {
        Filter::None => {
            let out = matcher.match_pair(&pair, &queries)?;
            let keep = vec![true; queries.len()];
            (out, keep)
        }
        Filter::Unc => {
            let out = matcher.match_pair(&pair, &queries)?;
            let keep = uncertainty_filter(&out.fine, cfg.filter.tau_u);
            (out, keep)
        }
        Filter::Cyc => {
            let check = cycle_filter(&matcher, &pair, &queries, cfg.filter.tau_cycle_px)?;
            (check.forward, check.keep)
        }
        Filter::CycUnc => {
            let check = cycle_filter(&matcher, &pair, &queries, cfg.filter.tau_cycle_px)?;
            let unc = uncertainty_filter(&check.forward.fine, cfg.filter.tau_u);
            let keep = check.keep.iter().zip(unc.iter()).map(|(&a, &b)| a && b).collect();
            (check.forward, keep)
        }
    };

    let records: Vec<MatchRecord> = (0..queries.len())
        .map(|i| MatchRecord {
            qx: queries.coords[i].0,
            qy: queries.coords[i].1,
            rx: output.fine.corrs[i].0,
            ry: output.fine.corrs[i].1,
            u: output.fine.uncertainty[i],
            kept: keep[i],
        })
        .collect();

    // Everything below only writes after all computation succeeded, so a
    // failure never leaves partial output files.
    if let Some(flow_path) = &args.flow {
        let size = cfg.image_size as f64;
        let kept: Vec<&MatchRecord> = records.iter().filter(|r| r.kept).collect();
        if kept.len() < 3 {
            return Err(Error::Degenerate(format!(
                "dense flow needs at least 3 kept matches, have {}",
                kept.len()
            )));
        }
        let pts: Vec<(f64, f64)> = kept.iter().map(|r| (r.qx * size, r.qy * size)).collect();
        let flows: Vec<(f64, f64)> =
            kept.iter().map(|r| ((r.rx - r.qx) * size, (r.ry - r.qy) * size)).collect();
        let field = fcorr::delaunay::densify(&pts, &flows, cfg.image_size, cfg.image_size)?;
        write_flow(&field, flow_path)?;
    }
    if let (Some(gt_path), Some(sp)) = (&args.gt_out, &synth) {
        let gt_records: Vec<MatchRecord> = queries
            .coords
            .iter()
            .map(|&q| {
                let s = sp.ground_truth(q);
                MatchRecord { qx: q.0, qy: q.1, rx: s.gt.0, ry: s.gt.1, u: 0.0, kept: s.valid }
            })
            .collect();
        write_matches(&gt_records, gt_path)?;
    }
    write_matches(&records, &args.out)?;
    println!(
        "matched {} queries ({} kept) -> {}",
        records.len(),
        records.iter().filter(|r| r.kept).count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &PipelineConfig,
    pred: &PathBuf,
    gt: &PathBuf,
    image_size: Option<usize>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let pred = read_matches(pred)?;
    let gt = read_matches(gt)?;
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "pred has {} records, gt has {}",
            pred.len(),
            gt.len()
        )));
    }
    let size = image_size.unwrap_or(cfg.image_size) as f64;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if (p.qx - g.qx).abs() > 1e-9 || (p.qy - g.qy).abs() > 1e-9 {
            return Err(Error::Invalid("pred and gt queries do not line up".to_string()));
        }
    }
    // gt.kept marks queries with a valid correspondence; evaluate on the
    // intersection with the predictor's kept set.
    let mask: Vec<bool> = pred.iter().zip(gt.iter()).map(|(p, g)| p.kept && g.kept).collect();
    let pred_flow: Vec<(f64, f64)> =
        pred.iter().map(|r| ((r.rx - r.qx) * size, (r.ry - r.qy) * size)).collect();
    let gt_flow: Vec<(f64, f64)> =
        gt.iter().map(|r| ((r.rx - r.qx) * size, (r.ry - r.qy) * size)).collect();
    let a = aepe(&pred_flow, &gt_flow, &mask)?;
    let p1 = pck(&pred_flow, &gt_flow, &mask, 1.0)?;
    let p3 = pck(&pred_flow, &gt_flow, &mask, 3.0)?;
    let p5 = pck(&pred_flow, &gt_flow, &mask, 5.0)?;
    let fl = fl_ratio(&pred_flow, &gt_flow, &mask)?;
    println!("metric     value");
    println!("AEPE    {:8.4} px", a);
    println!("PCK-1px {:8.4}", p1);
    println!("PCK-3px {:8.4}", p3);
    println!("PCK-5px {:8.4}", p5);
    println!("Fl      {:8.4} %", fl);
    if let Some(path) = out {
        let json = serde_json::json!({
            "aepe": a, "pck1": p1, "pck3": p3, "pck5": p5, "fl": fl,
            "evaluated": mask.iter().filter(|&&m| m).count(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&json).unwrap())?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Config { out, dump: _ } => {
            let text = cfg.dump();
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{}", text),
            }
            Ok(())
        }
        Command::Train { steps, out, log, detach_branches } => {
            let mut cfg = cfg;
            if let Some(steps) = steps {
                cfg.train.steps = *steps;
            }
            cfg.train.detach_branches = *detach_branches;
            let (mut model, report) = train(&cfg, cfg.seed)?;
            model.save(out)?;
            if let Some(log_path) = log {
                report.write_jsonl(log_path)?;
            }
            if let Some(rec) = report.log.last() {
                println!(
                    "trained {} steps: l_c {:.4} l_m {:.4} l_f {:.4}",
                    report.log.len(),
                    rec.l_c,
                    rec.l_m,
                    rec.l_f
                );
            }
            if let Some([c, m, f]) = report.final_eval {
                println!("held-out AEPE px: coarse {:.3} middle {:.3} fine {:.3}", c, m, f);
            }
            println!("checkpoint -> {}", out.display());
            Ok(())
        }
        Command::Match(args) => cmd_match(cfg, args),
        Command::Eval { pred, gt, image_size, out } => cmd_eval(&cfg, pred, gt, *image_size, out),
        Command::Bench { counts, mode, out } => {
            let mut cfg = cfg;
            if let Some(counts) = counts {
                cfg.bench.counts = counts
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Invalid(format!("bad --counts `{}`", counts)))?;
            }
            let reports = match mode.as_str() {
                "both" => {
                    let (one, rec) = run_scaling_bench(&cfg)?;
                    println!("{}", one.format_table());
                    println!("{}", rec.format_table());
                    vec![one, rec]
                }
                "onepass" | "recursive" => {
                    cfg.engine = if mode == "onepass" {
                        EngineMode::Onepass
                    } else {
                        EngineMode::Recursive
                    };
                    let matcher = Matcher::with_random_weights(&cfg, cfg.seed);
                    let report = run_bench(&matcher, &cfg.bench.counts.clone())?;
                    println!("{}", report.format_table());
                    vec![report]
                }
                other => return Err(Error::Invalid(format!("bad --mode `{}`", other))),
            };
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&reports).unwrap())?;
            }
            Ok(())
        }
        Command::Viz { images, synthetic, matches, out } => {
            let (pair, _) = load_pair(images, *synthetic, &cfg)?;
            let records = read_matches(matches)?;
            let canvas = render_matches(&pair.a, &pair.b, &records);
            write_ppm(&canvas, out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
