use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use log::info;
use serde::Serialize;

use lensmtf::aggregate::{
    build_chart, collect_local_estimates, ChartConfig, ChartMeta, ChartMode, GridConfig, ANGLE_OFFSETS, CHART_FREQS,
    COMPENSATION,
};
use lensmtf::estimator::checkpoint::{load_checkpoint, save_checkpoint, TrainingMeta};
use lensmtf::estimator::train::{desk_train_config, train, validation_set, StreamBatches};
use lensmtf::estimator::{ModelParams, NetConfig, TrainConfig};
use lensmtf::kernel_regression::{resample_balanced, rotate_to_common_frame, KrConfig};
use lensmtf::oracle::{run_oracles, Fault, OracleOptions};
use lensmtf::pgm::{read_pgm, write_pgm16};
use lensmtf::psf_lab::{measure_panel, read_dataset, write_dataset, CaptureSettings, PanelCaptures, PanelSpec};
use lensmtf::training_data::{
    gen_regular_pattern_rect, ArtificialPsfConfig, ExampleStream, NaturalImages, NoiseConfig, PatternParams,
    PatternRanges, PsfPool, SharpSource,
};
use lensmtf::{Error, GrayImage};

use crate::config::{parse_grid, parse_length_px, FileConfig};
use crate::{Cli, Command, EstimateArgs, ExamplesArgs, FaultArg, ModeArg, OracleArgs, PanelArgs, PatternArgs, SourceArg, TrainArgs};

/// Failure classes that map to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0} oracle check(s) failed")]
    ChecksFailed(usize),
}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    CliError::Input(msg.into()).into()
}

/// 1 for failed checks, 3 for numeric failures, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> ExitCode {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return ExitCode::from(match c {
                CliError::Input(_) => 2,
                CliError::ChecksFailed(_) => 1,
            });
        }
        if let Some(l) = cause.downcast_ref::<Error>() {
            return ExitCode::from(match l {
                Error::Diverged { .. } | Error::NonFinite(_) | Error::NotPositiveDefinite(_) => 3,
                _ => 2,
            });
        }
    }
    ExitCode::from(2)
}

struct RunContext {
    file: FileConfig,
    seed: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.workers.or(file.workers) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let ctx = RunContext {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        file,
    };
    match cli.command {
        Command::Panel(a) => panel(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Estimate(a) => estimate(&ctx, a),
        Command::Oracle(a) => oracle(&ctx, a),
        Command::Pattern(a) => pattern(a),
        Command::Examples(a) => examples(&ctx, a),
    }
}

fn pitch(flag: Option<f64>, file: &FileConfig) -> anyhow::Result<f64> {
    match flag.or(file.pitch_um) {
        Some(p) if p > 0.0 && p.is_finite() => Ok(p),
        Some(p) => Err(input_error(format!("invalid pixel pitch {p}"))),
        None => Err(input_error("--pitch-um is required")),
    }
}

fn pgm_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    out.sort();
    Ok(out)
}

fn read_images(paths: &[PathBuf], pitch_um: f64) -> anyhow::Result<Vec<GrayImage>> {
    paths
        .iter()
        .map(|p| {
            let pgm = read_pgm(p).map_err(|e| input_error(format!("{}: {e}", p.display())))?;
            Ok(GrayImage::new(pgm.pixels, pitch_um)?)
        })
        .collect()
}

fn panel(ctx: &RunContext, a: PanelArgs) -> anyhow::Result<ExitCode> {
    let pitch_um = pitch(a.pitch_um, &ctx.file)?;
    if !a.input.is_dir() {
        return Err(input_error(format!("{} is not a directory", a.input.display())));
    }
    let mut levels: Vec<PathBuf> = fs::read_dir(&a.input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    levels.sort();
    let mut exposures = Vec::new();
    if levels.is_empty() {
        exposures.push(pgm_files(&a.input)?);
    } else {
        for l in &levels {
            exposures.push(pgm_files(l)?);
        }
    }
    exposures.retain(|l| !l.is_empty());
    if exposures.is_empty() {
        return Err(input_error(format!("no images in {}", a.input.display())));
    }
    let captures = PanelCaptures {
        exposures: exposures
            .iter()
            .map(|l| read_images(l, pitch_um))
            .collect::<anyhow::Result<_>>()?,
    };
    let defaults = PanelSpec::default();
    let spec = PanelSpec {
        image_spacing_px: a.spacing_px.or(ctx.file.spacing_px).unwrap_or(defaults.image_spacing_px),
        columns: a.columns.or(ctx.file.columns).unwrap_or(defaults.columns),
        rows: a.rows.or(ctx.file.rows).unwrap_or(defaults.rows),
        ..defaults
    };
    spec.validate()?;
    let settings = CaptureSettings {
        lens_id: a.lens_id,
        f_number: a.f_number,
        exposure_index: 0,
    };
    let records = measure_panel(&captures, &spec, a.psf_size, &settings)?;
    write_dataset(&a.output, &spec, pitch_um, &records)?;
    let r_max = records.iter().map(|r| r.location.r).fold(0.0, f64::max);
    println!(
        "records: {}  exposure levels: {}  images: {}  max radius: {:.3} mm",
        records.len(),
        captures.exposures.len(),
        captures.exposures.iter().map(Vec::len).sum::<usize>(),
        r_max
    );
    Ok(ExitCode::SUCCESS)
}

struct StreamSetup {
    stream: ExampleStream,
    source: SourceArg,
}

fn build_stream(
    ctx: &RunContext,
    net: &NetConfig,
    source: Option<SourceArg>,
    natural_dir: Option<PathBuf>,
    dataset: Option<PathBuf>,
    fraction: Option<f64>,
    kr_samples: Option<usize>,
) -> anyhow::Result<StreamSetup> {
    let f = &ctx.file;
    let source = match source {
        Some(s) => s,
        None => match f.source.as_deref() {
            None | Some("pattern") => SourceArg::Pattern,
            Some("natural") => SourceArg::Natural,
            Some(other) => return Err(input_error(format!("unknown source {other}"))),
        },
    };
    let sharp = match source {
        SourceArg::Pattern => SharpSource::Pattern(PatternRanges::default()),
        SourceArg::Natural => {
            let dir = natural_dir
                .or_else(|| f.natural_dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| input_error("--source natural needs --natural-dir"))?;
            SharpSource::Natural(NaturalImages::load(&dir).map_err(|e| input_error(format!("{}: {e}", dir.display())))?)
        }
    };
    let pool = match dataset.or_else(|| f.psf_dataset.as_ref().map(PathBuf::from)) {
        None => PsfPool::artificial(ArtificialPsfConfig::default()),
        Some(dir) => {
            let (manifest, records) = read_dataset(&dir).map_err(|e| input_error(format!("{}: {e}", dir.display())))?;
            let rotated = rotate_to_common_frame(&records)?;
            let n = kr_samples.or(f.kr_samples).unwrap_or(0);
            let kernels = if n > 0 {
                let side = (records.len() as f64).sqrt().max(1.0);
                let cfg = KrConfig::for_grid(rotated.max_radius().max(1e-3) / side, std::f64::consts::TAU / side);
                resample_balanced(&rotated, n, ctx.seed, &cfg)?
            } else {
                rotated.records().to_vec()
            };
            let share = fraction.or(f.artificial_fraction).unwrap_or(0.0);
            info!("{} PSFs from {} ({}), artificial share {share}", kernels.len(), dir.display(), manifest.lens_id);
            PsfPool::from_records(&kernels, (share > 0.0).then(ArtificialPsfConfig::default), share)?
        }
    };
    Ok(StreamSetup {
        stream: ExampleStream {
            source: sharp,
            pool,
            noise: NoiseConfig::default(),
            input_size: net.input_size,
            seed: ctx.seed,
        },
        source,
    })
}

fn source_name(s: SourceArg) -> &'static str {
    match s {
        SourceArg::Pattern => "pattern",
        SourceArg::Natural => "natural",
    }
}

fn train_cmd(ctx: &RunContext, a: TrainArgs) -> anyhow::Result<ExitCode> {
    let f = &ctx.file;
    let desk = a.desk_scale || f.desk_scale.unwrap_or(false);
    let net = if desk { NetConfig::desk() } else { NetConfig::full() };
    let mut cfg = if desk {
        desk_train_config(ctx.seed)
    } else {
        TrainConfig {
            seed: ctx.seed,
            ..TrainConfig::default()
        }
    };
    if let Some(n) = a.steps.or(f.steps) {
        cfg.steps = n;
        cfg.multi_steps = 0;
    }
    if let Some(n) = a.multi_steps.or(f.multi_steps) {
        cfg.multi_steps = n;
    }
    if let Some(n) = a.batch_size.or(f.batch_size) {
        cfg.batch_size = n;
    }
    if let Some(n) = a.validation_groups.or(f.validation_groups) {
        cfg.validation_groups = n;
    }
    if let Some(n) = a.validate_every.or(f.validate_every) {
        cfg.validate_every = n;
    }
    let setup = build_stream(
        ctx,
        &net,
        a.source,
        a.natural_dir,
        a.psf_dataset,
        a.artificial_fraction,
        a.kr_samples,
    )?;
    let validation = validation_set(&setup.stream, &net, cfg.validation_groups, 1)?;
    let init = ModelParams::he_init(net.clone(), cfg.seed)?;
    let mut batches = StreamBatches {
        stream: &setup.stream,
        config: &net,
    };
    let total = cfg.total_steps();
    let (params, log) = train(&cfg, init, &mut batches, &validation, |row| {
        if let Some(v) = row.val_loss {
            info!("step {}/{total} lr {:.1e} train {:.5} val {:.5}", row.step + 1, row.lr, row.train_loss, v);
        }
    })?;
    let natural = setup.source == SourceArg::Natural;
    let meta = TrainingMeta {
        source: source_name(setup.source).into(),
        steps: cfg.steps,
        multi_steps: cfg.multi_steps,
        seed: cfg.seed,
        validation_loss: log.last_val_loss(),
        residual_mtf: natural.then(|| COMPENSATION.to_vec()),
    };
    if let Some(dir) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&a.output, &params, &meta)?;
    let log_path = a.log.unwrap_or_else(|| a.output.with_extension("log.csv"));
    log.write_csv(BufWriter::new(File::create(&log_path)?))?;
    println!(
        "checkpoint: {}  log: {}  steps: {}  val loss: {}",
        a.output.display(),
        log_path.display(),
        log.rows.len(),
        meta.validation_loss.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    Ok(ExitCode::SUCCESS)
}

fn estimate(ctx: &RunContext, a: EstimateArgs) -> anyhow::Result<ExitCode> {
    let pitch_um = pitch(a.pitch_um, &ctx.file)?;
    let (params, meta) =
        load_checkpoint(&a.checkpoint).map_err(|e| input_error(format!("{}: {e}", a.checkpoint.display())))?;
    for p in &a.images {
        if !p.is_file() {
            return Err(input_error(format!("{}: no such image", p.display())));
        }
    }
    let images = read_images(&a.images, pitch_um)?;
    let grid_str = a.grid.or(ctx.file.grid.clone()).unwrap_or_else(|| "12x16".into());
    let (radii, angles) = parse_grid(&grid_str).ok_or_else(|| input_error(format!("bad --grid {grid_str}, expected RxA")))?;
    let grid = GridConfig {
        radii,
        angles,
        offsets: ANGLE_OFFSETS.to_vec(),
    };
    let estimates = collect_local_estimates(&images, &params, &grid, &CHART_FREQS)?;
    fs::create_dir_all(&a.output)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(a.output.join("estimates.json"))?), &estimates)?;
    let (w, h) = (images[0].width(), images[0].height());
    let mut cfg = ChartConfig::for_sensor(w, h, pitch_um, &grid);
    let raw = a.no_compensation || ctx.file.no_compensation.unwrap_or(false);
    cfg.compensation = (!raw).then(|| meta.residual_mtf.clone().unwrap_or_else(|| COMPENSATION.to_vec()));
    let modes: &[ChartMode] = match a.mode {
        ModeArg::Ray => &[ChartMode::Ray],
        ModeArg::Azimuthal => &[ChartMode::Azimuthal],
        ModeArg::Both => &[ChartMode::Ray, ChartMode::Azimuthal],
    };
    let chart_meta = ChartMeta {
        lens_id: a.lens_id,
        aperture: a.f_number,
        n_photos: images.len(),
        pixel_pitch_um: pitch_um,
        ..ChartMeta::default()
    };
    for &mode in modes {
        cfg.mode = mode;
        let chart = build_chart(&estimates, &cfg, chart_meta.clone())?;
        let stem = match mode {
            ChartMode::Ray => "chart_ray",
            ChartMode::Azimuthal => "chart_azimuthal",
        };
        chart.write_csv(BufWriter::new(File::create(a.output.join(format!("{stem}.csv")))?))?;
        chart.write_json(BufWriter::new(File::create(a.output.join(format!("{stem}.json")))?))?;
        fs::write(a.output.join(format!("{stem}.svg")), chart.to_svg())?;
    }
    let max_patches = estimates.iter().map(|e| e.n_patches).max().unwrap_or(0);
    println!(
        "locations: {}  photos: {}  max patches per location: {}  compensated: {}  output: {}",
        estimates.len(),
        images.len(),
        max_patches,
        !raw,
        a.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn oracle(ctx: &RunContext, a: OracleArgs) -> anyhow::Result<ExitCode> {
    let opts = OracleOptions {
        seed: ctx.seed,
        fault: match a.inject_fault {
            None => Fault::None,
            Some(FaultArg::FftNormalization) => Fault::FftNormalization,
        },
        skip_timing: a.skip_timing,
    };
    let report = run_oracles(&opts)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for c in &report.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            if c.tolerance == 0.0 {
                let holds = if c.passed { "holds" } else { "violated" };
                println!("{verdict} {:<26} {holds}  ({})", c.name, c.metric);
            } else {
                let cmp = if c.upper_bound { "<" } else { ">=" };
                println!("{verdict} {:<26} {:.3e} {cmp} {:.1e}  ({})", c.name, c.value, c.tolerance, c.metric);
            }
        }
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!(CliError::ChecksFailed(failed));
    }
    Ok(ExitCode::SUCCESS)
}

fn pattern(a: PatternArgs) -> anyhow::Result<ExitCode> {
    if !(a.dpi > 0.0 && a.width_mm > 0.0 && a.height_mm > 0.0) {
        return Err(input_error("size and dpi must be positive"));
    }
    let period = parse_length_px(&a.period, a.dpi).ok_or_else(|| input_error(format!("bad --period {}", a.period)))?;
    let px = |mm: f64| (mm * a.dpi / 25.4).round() as usize;
    let (w, h) = (px(a.width_mm), px(a.height_mm));
    let params = PatternParams {
        period,
        rotation: a.rotation_deg.to_radians(),
        contrast: (a.contrast[0], a.contrast[1]),
        phase: (0.0, 0.0),
    };
    let img = gen_regular_pattern_rect(&params, w, h).map_err(|e| input_error(e.to_string()))?;
    write_pgm16(&a.output, &img)?;
    println!("pattern: {}  {w}x{h} px  period {period:.2} px", a.output.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ExampleRecord<'a> {
    index: usize,
    file: String,
    psf_id: &'a str,
    source: &'a str,
    noise_sigma: f64,
    radial: &'a [f64],
    tangential: &'a [f64],
}

fn examples(ctx: &RunContext, a: ExamplesArgs) -> anyhow::Result<ExitCode> {
    let desk = a.desk_scale || ctx.file.desk_scale.unwrap_or(false);
    let net = if desk { NetConfig::desk() } else { NetConfig::full() };
    let setup = build_stream(ctx, &net, a.source, a.natural_dir, None, None, None)?;
    fs::create_dir_all(&a.output)?;
    let mut labels = BufWriter::new(File::create(a.output.join("labels.jsonl"))?);
    for i in 0..a.count {
        let ex = setup.stream.example(i as u64)?;
        let file = format!("example_{i:05}.pgm");
        write_pgm16(a.output.join(&file), &ex.input)?;
        let rec = ExampleRecord {
            index: i,
            file,
            psf_id: &ex.psf_id,
            source: ex.source.as_str(),
            noise_sigma: ex.noise_sigma,
            radial: &ex.label.radial,
            tangential: &ex.label.tangential,
        };
        serde_json::to_writer(&mut labels, &rec)?;
        writeln!(labels)?;
    }
    labels.flush()?;
    println!("examples: {}  output: {}", a.count, a.output.display());
    Ok(ExitCode::SUCCESS)
}
