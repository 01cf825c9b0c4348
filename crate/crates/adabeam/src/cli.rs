//! Command-line entry point: data generation, staged training, evaluation,
//! gradient checking, and diagnostic exports.
//!
//! Artifact layout under `--out`:
//!
//! ```text
//! config.lock   resolved configuration, full key set
//! data/         scenes + manifest from gen-data
//! ckpt/         stage1.ckpt .. stage5.ckpt
//! metrics.log   append-only training and evaluation metrics
//! eval/         per-evaluation CSV reports
//! features/     dump-features exports
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
//! Every command is deterministic given (config, seed); nothing written under
//! `--out` carries a timestamp. The only wall-clock output is a duration note
//! on stderr, and `--deterministic` suppresses it so captured stderr is also
//! byte-stable.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::config::RunConfig;
use crate::dataio::{load_scene, load_split, save_dataset, worker_threads, write_csv_matrix, write_pgm};
use crate::nn::{load_params_into, load_tensors, save_params, TensorData};
use crate::pipeline::{
    assemble_integrated, evaluate, evaluate_am_single_channel, network_filter_sequence,
    prepare_scene, prepare_scenes, pretrain_bf_mse, run_gradient_suite, run_scene,
    train_am_stage1, train_integrated, Capture, EvalReport, FilterMode, IntegratedModel,
    IntegratedParams, MetricsLog, Precision, PreparedScene, Stage1Params, StageConfig,
};
use crate::scenesim::make_dataset;
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "adabeam", version, about = "Adaptive LSTM beamformer and frame classifier")]
struct Cli {
    /// Suppress wall-clock notes on stderr; all output becomes byte-stable.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multichannel dataset.
    GenData(GenData),
    /// Run one stage of the training schedule.
    Train(Train),
    /// Score a checkpoint on a dataset split.
    Eval(Eval),
    /// Check every hand-derived gradient against finite differences.
    Gradcheck(Gradcheck),
    /// Export per-scene diagnostics (features, filters, posteriors).
    DumpFeatures(DumpFeatures),
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact root directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Stage number, 1 to 5.
    #[arg(long)]
    stage: usize,
    /// Checkpoint to start from; defaults to the previous stage's artifact.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Stage 5 ablation: block gradients through the feedback connection.
    #[arg(long)]
    detach_feedback: bool,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to score.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset split: train, dev or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also print the static/moving x SNR breakdown.
    #[arg(long)]
    per_condition: bool,
    /// Filter source: network, das or frozen-t0 (integrated checkpoints).
    #[arg(long)]
    filters: Option<String>,
    /// Score in single precision.
    #[arg(long = "f32")]
    f32_mode: bool,
    /// Input channel for single-channel (stage 1) checkpoints.
    #[arg(long, default_value_t = 0)]
    channel: usize,
}

#[derive(Args)]
struct Gradcheck {
    /// Configuration file; parsed and validated for early failure.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Quick mode: fewer probes per check.
    #[arg(long)]
    tiny: bool,
    /// Probes per check; default 200, or 20 with --tiny.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Test hook: corrupt one analytic gradient to prove the check bites.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct DumpFeatures {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene directory (one entry of the dataset manifest).
    #[arg(long)]
    scene: PathBuf,
    /// What to export: logmel, filters or posteriors.
    #[arg(long)]
    what: String,
    /// Test hook: route the delay-and-sum filters through the network path.
    #[arg(long, hide = true)]
    oracle_filters: bool,
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let start = std::time::Instant::now();
    let deterministic = cli.deterministic;
    match dispatch(cli.cmd) {
        Ok(()) => {
            if !deterministic {
                eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::DumpFeatures(a) => cmd_dump_features(a),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let run = RunConfig::resolve(common.config.as_deref(), &common.out, common.seed)?;
    run.write_lock()?;
    Ok(run)
}

fn cmd_gen_data(args: GenData) -> Result<()> {
    let run = resolve(&args.common)?;
    let cfg = &run.cfg;
    let dataset = make_dataset(cfg.n_scenes, &cfg.template(), cfg.split_ratios(), cfg.seed)?;
    let data = run.out.join("data");
    save_dataset(&data, &dataset)?;
    println!(
        "gen-data scenes={} train={} dev={} test={}",
        cfg.n_scenes,
        dataset.train.len(),
        dataset.dev.len(),
        dataset.test.len()
    );
    Ok(())
}

fn load_prepared(run: &RunConfig, split: &str, threads: usize) -> Result<Vec<PreparedScene>> {
    let scenes = load_split(&run.out.join("data"), split)?;
    prepare_scenes(&scenes, &run.cfg.stft(), run.cfg.fft_size, threads)
}

fn cmd_train(args: Train) -> Result<()> {
    let run = resolve(&args.common)?;
    let cfg = &run.cfg;
    let stage = args.stage;
    if !(1..=5).contains(&stage) {
        return Err(Error::Usage(format!("stage must be 1..=5, got {stage}")));
    }
    if args.detach_feedback && stage != 5 {
        return Err(Error::Usage("--detach-feedback only applies to stage 5".into()));
    }
    let ckpt_dir = run.out.join("ckpt");
    let init = match (stage, &args.init) {
        (1, None) => None,
        (1, Some(_)) => {
            return Err(Error::Usage("stage 1 starts from scratch; --init is not accepted".into()))
        }
        (_, Some(p)) => Some(p.clone()),
        (n, None) => Some(ckpt_dir.join(format!("stage{}.ckpt", n - 1))),
    };
    if let Some(p) = &init {
        if !p.is_file() {
            return Err(Error::Usage(format!(
                "stage {stage} needs the stage {} checkpoint; missing {}",
                stage - 1,
                p.display()
            )));
        }
    }

    let threads = worker_threads();
    let train_scenes = load_prepared(&run, "train", threads)?;
    let dev_scenes = load_prepared(&run, "dev", threads)?;
    let mel = cfg.mel()?;
    let dims = cfg.dims();
    let scfg = StageConfig {
        stage,
        lr: cfg.lr_for(stage),
        truncation: cfg.truncation,
        batch: cfg.batch,
        epochs: cfg.epochs_for(stage)?,
        seed: cfg.seed,
    };
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut log = MetricsLog::append_to(&run.out.join("metrics.log"))?;
    let out_ckpt = ckpt_dir.join(format!("stage{stage}.ckpt"));

    match stage {
        1 => {
            let s1 = train_am_stage1(&dims, &mel, &train_scenes, &dev_scenes, &scfg, &mut log, threads)?;
            save_params(&out_ckpt, &s1)?;
        }
        2 => {
            let mut s1 = Stage1Params::zeros(&dims);
            load_params_into(&mut s1, &load_tensors(init.as_ref().unwrap())?)?;
            let bf = pretrain_bf_mse(&dims, &train_scenes, &dev_scenes, &scfg, &mut log, threads)?;
            let p = assemble_integrated(&s1, bf, &mel, &train_scenes, threads)?;
            save_params(&out_ckpt, &p)?;
        }
        3 | 4 => {
            let p = IntegratedParams::from_checkpoint(&load_tensors(init.as_ref().unwrap())?, &dims)?;
            let mut model = IntegratedModel::new(p, mel);
            train_integrated(&mut model, &train_scenes, &dev_scenes, &scfg, &mut log, threads)?;
            save_params(&out_ckpt, &model.p)?;
        }
        _ => {
            let mut p = IntegratedParams::from_checkpoint(&load_tensors(init.as_ref().unwrap())?, &dims)?;
            if !p.feedback_enabled() {
                p.bf.widen_for_feedback(dims.am_hidden);
            }
            let mut model = IntegratedModel::new(p, mel);
            model.detach_feedback = args.detach_feedback;
            train_integrated(&mut model, &train_scenes, &dev_scenes, &scfg, &mut log, threads)?;
            save_params(&out_ckpt, &model.p)?;
        }
    }
    println!("train stage={stage} ckpt={}", out_ckpt.display());
    Ok(())
}

fn ckpt_kind(loaded: &[(String, TensorData)]) -> &'static str {
    if loaded.iter().any(|(n, _)| n.starts_with("bf.")) {
        "integrated"
    } else {
        "stage1"
    }
}

fn eval_csv_text(report: &EvalReport) -> String {
    let mut text = String::from("condition,frames,ce,accuracy\n");
    text.push_str(&format!(
        "all,{},{:.12},{:.6}\n",
        report.n_frames, report.ce, report.accuracy
    ));
    for (key, ce, acc, frames) in &report.per_condition {
        text.push_str(&format!("{key},{frames},{ce:.12},{acc:.6}\n"));
    }
    text
}

fn cmd_eval(args: Eval) -> Result<()> {
    let run = resolve(&args.common)?;
    let cfg = &run.cfg;
    let threads = worker_threads();
    let scenes = load_prepared(&run, &args.split, threads)?;
    let mel = cfg.mel()?;
    let dims = cfg.dims();
    let loaded = load_tensors(&args.ckpt)?;

    let (report, desc) = if ckpt_kind(&loaded) == "integrated" {
        let p = IntegratedParams::from_checkpoint(&loaded, &dims)?;
        let mode = FilterMode::parse(args.filters.as_deref().unwrap_or("network"))?;
        let precision = if args.f32_mode { Precision::F32 } else { Precision::F64 };
        let report = evaluate(&p, &mel, &scenes, mode, precision, threads)?;
        let desc = format!(
            "filters={} precision={}",
            mode.name(),
            if args.f32_mode { "f32" } else { "f64" }
        );
        (report, desc)
    } else {
        if args.filters.is_some() {
            return Err(Error::Usage(
                "--filters applies to integrated checkpoints; this is a stage-1 classifier".into(),
            ));
        }
        if args.f32_mode {
            return Err(Error::Usage("--f32 applies to integrated checkpoints".into()));
        }
        let mut s1 = Stage1Params::zeros(&dims);
        load_params_into(&mut s1, &loaded)?;
        let report = evaluate_am_single_channel(
            &s1.am,
            &s1.norm_stats(),
            &mel,
            &scenes,
            args.channel,
            threads,
        )?;
        (report, format!("channel={}", args.channel))
    };

    let ckpt_name = args
        .ckpt
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.ckpt.display().to_string());
    let line = format!(
        "eval ckpt={ckpt_name} split={} {desc} ce={:.12} acc={:.6}",
        args.split, report.ce, report.accuracy
    );
    let mut log = MetricsLog::append_to(&run.out.join("metrics.log"))?;
    log.line(line)?;
    if args.per_condition {
        for (key, ce, acc, frames) in &report.per_condition {
            println!("condition={key} frames={frames} ce={ce:.12} acc={acc:.6}");
        }
    }

    let eval_dir = run.out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let stem = args
        .ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    std::fs::write(
        eval_dir.join(format!("{stem}_{}.csv", args.split)),
        eval_csv_text(&report),
    )?;
    Ok(())
}

fn cmd_gradcheck(args: Gradcheck) -> Result<()> {
    if let Some(path) = &args.config {
        crate::config::Config::load(path)?;
    }
    let probes = args.probes.unwrap_or(if args.tiny { 20 } else { 200 });
    let items = run_gradient_suite(probes, args.seed, args.inject_fault)?;
    let mut all_pass = true;
    for item in &items {
        let pass = item.report.max_rel < 1e-4;
        all_pass &= pass;
        println!(
            "gradcheck {:<20} probes={:<4} max_rel={:.3e} {}",
            item.name,
            item.report.n_probes,
            item.report.max_rel,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if !all_pass {
        return Err(Error::Numeric("gradient check failed".into()));
    }
    println!("gradcheck: all {} checks passed", items.len());
    Ok(())
}

fn filters_header(n_bins: usize, n_channels: usize) -> String {
    let mut h = String::from("frame");
    for part in ["mag", "phase"] {
        for m in 0..n_channels {
            for f in 0..n_bins {
                h.push_str(&format!(",{part}_m{m}_f{f}"));
            }
        }
    }
    h
}

fn filters_matrix(g: &ndarray::Array3<num_complex::Complex64>) -> Array2<f64> {
    let (t_len, n_bins, n_channels) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let fm = n_bins * n_channels;
    let mut rows = Array2::<f64>::zeros((t_len, 1 + 2 * fm));
    for t in 0..t_len {
        rows[[t, 0]] = t as f64;
        for m in 0..n_channels {
            for f in 0..n_bins {
                let v = g[[t, f, m]];
                rows[[t, 1 + m * n_bins + f]] = v.norm();
                rows[[t, 1 + fm + m * n_bins + f]] = v.arg();
            }
        }
    }
    rows
}

fn cmd_dump_features(args: DumpFeatures) -> Result<()> {
    let run = resolve(&args.common)?;
    let cfg = &run.cfg;
    let scene = load_scene(&args.scene)?;
    let prepared = prepare_scene(&scene, &cfg.stft(), cfg.fft_size)?;
    let dims = cfg.dims();
    let mel = cfg.mel()?;
    let p = IntegratedParams::from_checkpoint(&load_tensors(&args.ckpt)?, &dims)?;
    let dir = run.out.join("features");
    std::fs::create_dir_all(&dir)?;

    match args.what.as_str() {
        "logmel" => {
            let das = run_scene(
                &p,
                &mel.weights,
                &prepared,
                FilterMode::DasOracle,
                Capture { logmel: true, ..Capture::default() },
            )?;
            let net_mode = if args.oracle_filters {
                FilterMode::NetworkOracleFilters
            } else {
                FilterMode::Network
            };
            let net = run_scene(
                &p,
                &mel.weights,
                &prepared,
                net_mode,
                Capture { logmel: true, ..Capture::default() },
            )?;
            let das_lm = das.logmel.unwrap();
            let net_lm = net.logmel.unwrap();
            write_csv_matrix(&dir.join("logmel_das.csv"), None, &das_lm)?;
            write_csv_matrix(&dir.join("logmel_net.csv"), None, &net_lm)?;
            write_pgm(&dir.join("logmel_das.pgm"), &das_lm)?;
            write_pgm(&dir.join("logmel_net.pgm"), &net_lm)?;
            println!("dump-features what=logmel frames={}", das_lm.shape()[0]);
        }
        "filters" => {
            let seq = network_filter_sequence(&p, &mel, &prepared)?;
            let rows = filters_matrix(&seq.g);
            let header = filters_header(seq.n_bins(), seq.g.shape()[2]);
            write_csv_matrix(&dir.join("filters.csv"), Some(&header), &rows)?;
            println!("dump-features what=filters frames={}", rows.shape()[0]);
        }
        "posteriors" => {
            let net = run_scene(
                &p,
                &mel.weights,
                &prepared,
                FilterMode::Network,
                Capture { posteriors: true, ..Capture::default() },
            )?;
            let post = net.posteriors.unwrap();
            write_csv_matrix(&dir.join("posteriors.csv"), None, &post)?;
            println!("dump-features what=posteriors frames={}", post.shape()[0]);
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown --what '{other}' (expected logmel, filters or posteriors)"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use num_complex::Complex64;

    #[test]
    fn filters_export_layout_has_one_index_and_two_values_per_coefficient() {
        let g = Array3::from_shape_fn((4, 5, 3), |(t, f, m)| {
            Complex64::new((t + f) as f64, m as f64)
        });
        let rows = filters_matrix(&g);
        assert_eq!(rows.shape(), [4, 1 + 2 * 5 * 3]);
        let header = filters_header(5, 3);
        assert_eq!(header.split(',').count(), 1 + 2 * 5 * 3);
        assert_eq!(rows[[2, 0]], 2.0);
        let v = g[[2, 1, 0]];
        assert_eq!(rows[[2, 1 + 1]], v.norm());
        assert_eq!(rows[[2, 1 + 15 + 1]], v.arg());
    }

    #[test]
    fn eval_csv_places_the_overall_row_first() {
        let report = EvalReport {
            ce: 1.5,
            accuracy: 0.25,
            n_frames: 80,
            per_condition: vec![
                ("moving/snr_0".into(), 1.75, 0.2, 40),
                ("static/snr_0".into(), 1.25, 0.3, 40),
            ],
        };
        let text = eval_csv_text(&report);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "condition,frames,ce,accuracy");
        assert!(lines[1].starts_with("all,80,1.5"));
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("moving/snr_0,40,"));
    }

    #[test]
    fn checkpoint_kind_is_detected_from_tensor_names() {
        let stage1 = vec![("am.out.w".to_string(), TensorData::V(ndarray::Array1::zeros(1)))];
        let joint = vec![("bf.proj.w".to_string(), TensorData::V(ndarray::Array1::zeros(1)))];
        assert_eq!(ckpt_kind(&stage1), "stage1");
        assert_eq!(ckpt_kind(&joint), "integrated");
    }

    #[test]
    fn help_and_bad_flags_map_to_documented_exit_codes() {
        assert_eq!(run(["adabeam", "--help"]), 0);
        assert_eq!(run(["adabeam", "no-such-command"]), 1);
        assert_eq!(run(["adabeam", "train", "--stage", "3"]), 1);
    }
}
