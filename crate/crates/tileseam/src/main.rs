//! Command-line front end: generate data, train, predict, diagnose, report.
//! Every subcommand is a thin composition of library operations; exit codes
//! are 0 success, 1 usage error, 2 data/format error, 3 failed
//! `--assert-seamless` gate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tileseam::diagnose::{
    compute_erf, compute_trf, dice_eval, tile_mismatch, train_eval_disparity, MismatchProbe,
    TrfResult,
};
use tileseam::infer::{predict_sliding, NormalizeSpec};
use tileseam::io::{
    load_checkpoint, read_npy, save_checkpoint, write_npy, write_pgm_center_slice, write_report,
    write_rf_summary, write_training_log_csv, NpyDtype, Report, ReportFormat, RfSummary, TableRow,
};
use tileseam::layers::{Mode, NormKind};
use tileseam::synthdata::{generate, SynthSpec};
use tileseam::tensor::{SplitMix64, Tensor};
use tileseam::train::{train, TrainConfig, Volume};
use tileseam::unet::{Model, ModelConfig};
use tileseam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tileseam",
    version,
    about = "Tiled 3D segmentation inference and normalization diagnostics"
)]
struct Cli {
    /// Worker threads for tile-parallel work; results are bit-identical for
    /// any value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic heterogeneous volumes with one-hot labels.
    Gen(GenArgs),
    /// Train a U-Net on a data directory.
    Train(TrainArgs),
    /// Sliding-window prediction of one volume.
    Predict(PredictArgs),
    /// Theoretical and effective receptive field of a model.
    DiagnoseRf(RfArgs),
    /// Tile-mismatch probe (overlapping tile predictions).
    DiagnoseMismatch(MismatchArgs),
    /// Train/eval disparity probe.
    DiagnoseDisparity(DisparityArgs),
    /// Dice evaluation against labels.
    Eval(EvalArgs),
    /// Merge per-kind diagnostic JSONs into a summary table CSV.
    Report(ReportArgs),
    /// End-to-end demo: gen, train all norm kinds, diagnose, emit the table.
    Repro(ReproArgs),
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected three comma-separated extents, got '{s}'")),
    }
}

fn parse_norm(s: &str) -> std::result::Result<NormKind, String> {
    NormKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for image/label NPY pairs plus spec sidecars.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of volumes (seeds are seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, value_parser = parse_triple)]
    shape: Option<[usize; 3]>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    ramp: Option<f64>,
    #[arg(long)]
    line_prob: Option<f64>,
    /// JSON file with a full SynthSpec; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of *.image.npy / *.labels.npy pairs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormKind>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    accum: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Cubic training tile edge.
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature maps per level, e.g. 32,64,128.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<usize>>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// global or tilewise.
    #[arg(long)]
    input_norm: Option<String>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    ramp: Option<u64>,
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    /// Training-log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// File-config twin of the train flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    norm: Option<String>,
    steps: Option<u64>,
    accum: Option<u64>,
    batch: Option<usize>,
    tile: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    features: Option<Vec<usize>>,
    kernel: Option<usize>,
    momentum: Option<f64>,
    input_norm: Option<String>,
    warmup: Option<u64>,
    ramp: Option<u64>,
    r_max: Option<f64>,
    d_max: Option<f64>,
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    /// Halo in voxels, or "auto" for the TRF radius.
    #[arg(long, default_value = "auto")]
    halo: String,
    #[arg(long, default_value = "eval")]
    mode: String,
    #[arg(long, default_value = "global")]
    input_norm: String,
}

#[derive(Args)]
struct RfArgs {
    /// Checkpoint to probe; otherwise a fresh model from --norm/--features.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormKind>,
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "eval")]
    mode: String,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the raw ERF map here as NPY.
    #[arg(long)]
    erf_npy: Option<PathBuf>,
    /// Write the center slice here as PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct MismatchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 32)]
    tile: usize,
    #[arg(long, default_value_t = 16)]
    offset: usize,
    #[arg(long, default_value_t = 16)]
    stride: usize,
    #[arg(long, default_value_t = 4)]
    halo: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value = "global")]
    input_norm: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: String,
    /// Exit 3 unless max_dist is exactly 0.
    #[arg(long)]
    assert_seamless: bool,
}

#[derive(Args)]
struct DisparityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, default_value = "auto")]
    halo: String,
    #[arg(long, default_value = "global")]
    input_norm: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, default_value = "auto")]
    halo: String,
    #[arg(long, default_value = "eval")]
    mode: String,
    #[arg(long, default_value = "global")]
    input_norm: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory produced by `repro` (per-kind subdirectories of JSONs).
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<usize>>,
    /// Cubic training tile edge.
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long, value_parser = parse_triple)]
    volume_shape: Option<[usize; 3]>,
    #[arg(long)]
    accum: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ReproFileConfig {
    seed: Option<u64>,
    steps: Option<u64>,
    features: Option<Vec<usize>>,
    tile: Option<usize>,
    volume_shape: Option<[usize; 3]>,
    accum: Option<u64>,
    lr: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successes, anything else is usage.
            use clap::error::ErrorKind::*;
            let _ = e.print();
            return match e.kind() {
                DisplayHelp | DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::DiagnoseRf(a) => cmd_rf(a),
        Cmd::DiagnoseMismatch(a) => cmd_mismatch(a),
        Cmd::DiagnoseDisparity(a) => cmd_disparity(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Repro(a) => cmd_repro(a),
    }
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Mode::Train),
        "eval" => Ok(Mode::Eval),
        other => Err(Error::Config(format!("unknown mode '{other}'"))),
    }
}

fn parse_input_norm(s: &str) -> Result<NormalizeSpec> {
    match s.to_ascii_lowercase().as_str() {
        "global" => Ok(NormalizeSpec::global()),
        "tilewise" | "tile-wise" | "tile_wise" => Ok(NormalizeSpec::tile_wise()),
        other => Err(Error::Config(format!("unknown input norm '{other}'"))),
    }
}

fn parse_format(s: &str) -> Result<ReportFormat> {
    match s.to_ascii_lowercase().as_str() {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        other => Err(Error::Config(format!("unknown report format '{other}'"))),
    }
}

/// TRF-radius halo for a model, aligned later by the sliding predictor.
fn auto_halo(model: &Model) -> Result<usize> {
    match compute_trf(&model.config, Mode::Eval)? {
        TrfResult::Box { margins } => Ok(margins.iter().map(|&(a, b)| a.max(b)).max().unwrap()),
        TrfResult::FullTile => Err(Error::Config(
            "model has tile-coupled normalization: no finite halo is sufficient; pass an explicit --halo"
                .into(),
        )),
    }
}

fn resolve_halo(spec: &str, model: &Model) -> Result<usize> {
    if spec == "auto" {
        auto_halo(model)
    } else {
        spec.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad halo '{spec}'")))
    }
}

fn load_data_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".image.npy").map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no *.image.npy volumes found in {}",
            dir.display()
        )));
    }
    stems
        .iter()
        .map(|stem| {
            let image = read_npy(&dir.join(format!("{stem}.image.npy")))?;
            let labels = read_npy(&dir.join(format!("{stem}.labels.npy")))?;
            Ok(Volume { image, labels })
        })
        .collect()
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
    }
}

fn cmd_gen(a: GenArgs) -> Result<u8> {
    let mut spec: SynthSpec = match &a.config {
        None => SynthSpec::default(),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
    };
    if let Some(s) = a.shape {
        spec.shape = s;
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    if let Some(r) = a.ramp {
        spec.ramp_amplitude = r;
    }
    if let Some(p) = a.line_prob {
        spec.bright_line_prob = p;
    }
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        spec.seed = a.seed + i as u64;
        let vol = generate(&spec)?;
        let stem = format!("vol_{i:03}");
        write_npy(
            &a.out.join(format!("{stem}.image.npy")),
            &vol.image,
            NpyDtype::F8,
        )?;
        write_npy(
            &a.out.join(format!("{stem}.labels.npy")),
            &vol.labels,
            NpyDtype::F8,
        )?;
        std::fs::write(
            a.out.join(format!("{stem}.spec.json")),
            serde_json::to_string_pretty(&spec)?,
        )?;
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let fc: TrainFileConfig = load_json_config(&a.config)?;
    let norm = match (&a.norm, &fc.norm) {
        (Some(n), _) => *n,
        (None, Some(s)) => NormKind::parse(s)?,
        (None, None) => NormKind::BatchRenorm,
    };
    let features = a.features.or(fc.features).unwrap_or(vec![16, 32, 64]);
    let seed = a.seed.or(fc.seed).unwrap_or(0);
    let mut mc = ModelConfig::new(norm).with_features(features).with_seed(seed);
    if let Some(k) = a.kernel.or(fc.kernel) {
        mc.conv_kernel = k;
    }
    if let Some(m) = a.momentum.or(fc.momentum) {
        mc.norm_momentum = m;
    }
    let tile = a.tile.or(fc.tile).unwrap_or(32);
    let input_norm = match a.input_norm.or(fc.input_norm) {
        Some(s) => parse_input_norm(&s)?,
        None => NormalizeSpec::global(),
    };
    let tc = TrainConfig {
        lr: a.lr.or(fc.lr).unwrap_or(1e-3),
        steps: a.steps.or(fc.steps).unwrap_or(300),
        accum_steps: a.accum.or(fc.accum).unwrap_or(8),
        batch_size: a.batch.or(fc.batch).unwrap_or(1),
        tile_size: [tile; 3],
        flip_prob: 0.5,
        input_norm,
        renorm_warmup_steps: a.warmup.or(fc.warmup).unwrap_or(100),
        renorm_ramp_steps: a.ramp.or(fc.ramp).unwrap_or(100),
        renorm_r_max: a.r_max.or(fc.r_max).unwrap_or(3.0),
        renorm_d_max: a.d_max.or(fc.d_max).unwrap_or(5.0),
        seed,
        checkpoint_every: a.checkpoint_every.or(fc.checkpoint_every),
        checkpoint_dir: Some(a.out.clone()),
    };

    let data = load_data_dir(&a.data)?;
    let mut model = Model::build(&mc)?;
    let log = train(&mut model, &data, &tc)?;
    save_checkpoint(&model, &a.out)?;
    if let Some(log_path) = &a.log {
        write_training_log_csv(&log, log_path)?;
    }
    eprintln!(
        "trained {} steps, loss {:.4} -> {:.4}, checkpoint at {}",
        tc.steps,
        log.initial_smoothed_loss(10),
        log.final_smoothed_loss(10),
        a.out.display()
    );
    Ok(0)
}

fn cmd_predict(a: PredictArgs) -> Result<u8> {
    let model = load_checkpoint(&a.ckpt)?;
    let image = read_npy(&a.image)?;
    let image = match image.shape().len() {
        3 => {
            let [d, h, w] = image.dims3()?;
            image.reshape(&[1, d, h, w])?
        }
        4 => image,
        _ => {
            return Err(Error::Shape(format!(
                "expected a [C,D,H,W] or [D,H,W] image, got {:?}",
                image.shape()
            )))
        }
    };
    let halo = resolve_halo(&a.halo, &model)?;
    let mode = parse_mode(&a.mode)?;
    let spec = parse_input_norm(&a.input_norm)?;
    let pred = predict_sliding(&model, &image, &spec, [a.tile; 3], [halo; 3], mode)?;
    write_npy(&a.out, &pred, NpyDtype::F8)?;
    Ok(0)
}

fn cmd_rf(a: RfArgs) -> Result<u8> {
    let model = match (&a.ckpt, a.norm) {
        (Some(dir), _) => load_checkpoint(dir)?,
        (None, Some(kind)) => {
            let features = a.features.clone().unwrap_or(vec![8, 16, 32]);
            Model::build(
                &ModelConfig::new(kind)
                    .with_features(features)
                    .with_seed(a.seed),
            )?
        }
        (None, None) => {
            return Err(Error::Config("need --ckpt or --norm".into()));
        }
    };
    let mode = parse_mode(&a.mode)?;
    let trf = compute_trf(&model.config, mode)?;
    let mut rng = SplitMix64::with_stream(a.seed, 0xEBF);
    let erf = compute_erf(&model, a.tile, a.samples, &mut rng)?;
    let (lo, hi) = erf
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let summary = RfSummary {
        trf: trf.clone(),
        tile_size: a.tile,
        samples: a.samples,
        erf_log10_min: lo,
        erf_log10_max: hi,
    };
    match &a.out {
        Some(p) => write_rf_summary(&summary, p)?,
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    if let Some(p) = &a.erf_npy {
        write_npy(p, &erf, NpyDtype::F8)?;
    }
    if let Some(p) = &a.pgm {
        write_pgm_center_slice(&erf, p)?;
    }
    match trf {
        TrfResult::Box { margins } => eprintln!("TRF margins per axis: {margins:?}"),
        TrfResult::FullTile => eprintln!("TRF: FULL_TILE (tile-coupled normalization)"),
    }
    Ok(0)
}

fn cmd_mismatch(a: MismatchArgs) -> Result<u8> {
    let model = load_checkpoint(&a.ckpt)?;
    let image = read_npy(&a.image)?;
    let image = if image.shape().len() == 3 {
        let [d, h, w] = image.dims3()?;
        image.reshape(&[1, d, h, w])?
    } else {
        image
    };
    let probe = MismatchProbe {
        tile: [a.tile; 3],
        split_offset: a.offset,
        grid_stride: a.stride,
        halo: a.halo,
        threshold: a.threshold,
    };
    let spec = parse_input_norm(&a.input_norm)?;
    let rep = tile_mismatch(&model, &image, &spec, &probe)?;
    if let Some(p) = &a.out {
        write_report(&Report::Mismatch(&rep), p, parse_format(&a.format)?)?;
    } else {
        println!("{}", serde_json::to_string_pretty(&rep)?);
    }
    if a.assert_seamless && !rep.seamless {
        eprintln!(
            "assert-seamless FAILED: max_dist = {} over {} tiles",
            rep.max_dist, rep.tiles_compared
        );
        return Ok(3);
    }
    Ok(0)
}

fn cmd_disparity(a: DisparityArgs) -> Result<u8> {
    let model = load_checkpoint(&a.ckpt)?;
    let data = load_data_dir(&a.data)?;
    let halo = resolve_halo(&a.halo, &model).unwrap_or(16);
    let spec = parse_input_norm(&a.input_norm)?;
    let images: Vec<Tensor> = data.into_iter().map(|v| v.image).collect();
    let rep = train_eval_disparity(&model, &images, &spec, [a.tile; 3], [halo; 3])?;
    if let Some(p) = &a.out {
        write_report(&Report::Disparity(&rep), p, parse_format(&a.format)?)?;
    } else {
        println!("{}", serde_json::to_string_pretty(&rep)?);
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let model = load_checkpoint(&a.ckpt)?;
    let data = load_data_dir(&a.data)?;
    let halo = resolve_halo(&a.halo, &model).unwrap_or(16);
    let spec = parse_input_norm(&a.input_norm)?;
    let mode = parse_mode(&a.mode)?;
    let rep = dice_eval(&model, &data, &spec, [a.tile; 3], [halo; 3], mode)?;
    match &a.out {
        Some(p) => std::fs::write(p, serde_json::to_string_pretty(&rep)?)?,
        None => println!("{}", serde_json::to_string_pretty(&rep)?),
    }
    Ok(0)
}

const REPRO_KINDS: [NormKind; 4] = [
    NormKind::BatchNorm,
    NormKind::InstanceNorm,
    NormKind::BatchRenorm,
    NormKind::Identity,
];

fn cmd_report(a: ReportArgs) -> Result<u8> {
    let mut rows = Vec::new();
    for kind in REPRO_KINDS {
        let dir = a.dir.join(kind.as_str());
        if !dir.join("mismatch.json").exists() {
            continue;
        }
        rows.push(table_row_from_dir(kind, &dir)?);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no per-kind diagnostic directories under {}",
            a.dir.display()
        )));
    }
    write_report(&Report::Table(&rows), &a.out, ReportFormat::Csv)?;
    Ok(0)
}

fn table_row_from_dir(kind: NormKind, dir: &Path) -> Result<TableRow> {
    let mismatch: tileseam::diagnose::MismatchReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("mismatch.json"))?)?;
    let disparity: tileseam::diagnose::DisparityReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("disparity.json"))?)?;
    let dice_train: tileseam::diagnose::DiceReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dice_train.json"))?)?;
    let dice_eval_rep: tileseam::diagnose::DiceReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dice_eval.json"))?)?;
    // The table reports the foreground-class Dice and the boundary-channel
    // mismatch (the thin structure where artifacts show up first).
    let fg = tileseam::synthdata::CLASS_FOREGROUND;
    let boundary = tileseam::synthdata::CLASS_BOUNDARY;
    Ok(TableRow {
        norm_kind: kind.as_str().to_string(),
        input_norm: "global".to_string(),
        dice_train: dice_train.per_class_median[fg],
        dice_eval: dice_eval_rep.per_class_median[fg],
        disparity: disparity.median,
        max_dist: mismatch.max_dist,
        mismatch: if mismatch.seamless {
            None
        } else {
            Some(mismatch.per_channel_mismatch[boundary])
        },
    })
}

fn cmd_repro(a: ReproArgs) -> Result<u8> {
    let fc: ReproFileConfig = load_json_config(&a.config)?;
    let seed = a.seed.or(fc.seed).unwrap_or(7);
    let steps = a.steps.or(fc.steps).unwrap_or(300);
    let features = a.features.or(fc.features).unwrap_or(vec![4, 8, 16]);
    let tile = a.tile.or(fc.tile).unwrap_or(24);
    let volume_shape = a.volume_shape.or(fc.volume_shape).unwrap_or([64, 64, 96]);
    let accum = a.accum.or(fc.accum).unwrap_or(2);
    let lr = a.lr.or(fc.lr).unwrap_or(2e-3);

    std::fs::create_dir_all(&a.out)?;
    let spec = SynthSpec {
        shape: volume_shape,
        seed,
        ..SynthSpec::default()
    };
    let train_vol: Volume = generate(&spec)?.into();
    let heldout: Volume = generate(&SynthSpec {
        seed: seed + 1,
        ..spec.clone()
    })?
    .into();

    // Probe geometry: the architecture's TRF radius sets the halo; 64-tiles
    // leave enough valid overlap for the mismatch probe.
    let probe_tile = 64usize.min(volume_shape[0]).min(volume_shape[1]);
    let norm_spec = NormalizeSpec::global();

    let mut rows = Vec::new();
    for kind in REPRO_KINDS {
        let kind_dir = a.out.join(kind.as_str());
        std::fs::create_dir_all(&kind_dir)?;
        let mc = ModelConfig::new(kind)
            .with_features(features.clone())
            .with_seed(seed);
        // The halo is sized from the TRF of the global-norm architecture and
        // reused for the tile-coupled models.
        let halo = {
            let global = ModelConfig::new(NormKind::BatchNorm)
                .with_features(features.clone())
                .with_seed(seed);
            match compute_trf(&global, Mode::Eval)? {
                TrfResult::Box { margins } => {
                    margins.iter().map(|&(x, y)| x.max(y)).max().unwrap()
                }
                TrfResult::FullTile => unreachable!(),
            }
        };

        let mut model = Model::build(&mc)?;
        let tc = TrainConfig {
            lr,
            steps,
            accum_steps: accum,
            tile_size: [tile; 3],
            renorm_warmup_steps: steps / 3,
            renorm_ramp_steps: steps / 3,
            seed,
            ..TrainConfig::default()
        };
        eprintln!("[repro] training {} ({steps} steps)...", kind.as_str());
        let log = train(&mut model, std::slice::from_ref(&train_vol), &tc)?;
        save_checkpoint(&model, &kind_dir.join("checkpoint"))?;
        write_training_log_csv(&log, &kind_dir.join("train_log.csv"))?;

        eprintln!("[repro] diagnosing {}...", kind.as_str());
        let probe = MismatchProbe {
            tile: [probe_tile; 3],
            split_offset: 16,
            grid_stride: 16,
            halo,
            threshold: 0.5,
        };
        let mismatch = tile_mismatch(&model, &heldout.image, &norm_spec, &probe)?;
        let disparity = train_eval_disparity(
            &model,
            std::slice::from_ref(&heldout.image),
            &norm_spec,
            [probe_tile; 3],
            [halo; 3],
        )?;
        let heldout_slice = std::slice::from_ref(&heldout);
        let d_train = dice_eval(
            &model,
            heldout_slice,
            &norm_spec,
            [probe_tile; 3],
            [halo; 3],
            Mode::Train,
        )?;
        let d_eval = dice_eval(
            &model,
            heldout_slice,
            &norm_spec,
            [probe_tile; 3],
            [halo; 3],
            Mode::Eval,
        )?;

        write_report(
            &Report::Mismatch(&mismatch),
            &kind_dir.join("mismatch.json"),
            ReportFormat::Json,
        )?;
        write_report(
            &Report::Disparity(&disparity),
            &kind_dir.join("disparity.json"),
            ReportFormat::Json,
        )?;
        std::fs::write(
            kind_dir.join("dice_train.json"),
            serde_json::to_string_pretty(&d_train)?,
        )?;
        std::fs::write(
            kind_dir.join("dice_eval.json"),
            serde_json::to_string_pretty(&d_eval)?,
        )?;
        rows.push(table_row_from_dir(kind, &kind_dir)?);
    }

    let table_path = a.out.join("table.csv");
    write_report(&Report::Table(&rows), &table_path, ReportFormat::Csv)?;
    eprintln!("[repro] table written to {}", table_path.display());
    println!("{}", std::fs::read_to_string(&table_path)?);
    Ok(0)
}
