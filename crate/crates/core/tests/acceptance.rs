//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails.
//!
//! The trained model of criterion 5 is cached under
//! `target/acceptance/` together with a recipe file; it is reused only
//! when the recipe matches. Set `LENSMTF_RETRAIN=1` to force training.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lensmtf::aggregate::{apply_compensation, COMPENSATION};
use lensmtf::estimator::checkpoint::{load_checkpoint, save_checkpoint, TrainingMeta};
use lensmtf::estimator::gradcheck::{check_gradients, DEFAULT_STEP};
use lensmtf::estimator::train::{
    desk_pattern_stream, desk_train_config, evaluate, prepare_group, train, validation_set, StreamBatches,
    VALIDATION_BASE,
};
use lensmtf::estimator::{forward, predict_multi, ModelParams, NetConfig, TrainConfig, TrainingGroup};
use lensmtf::mtf_core::{nyquist_cy_mm, Direction, DEFAULT_PAD, LABEL_LEN};
use lensmtf::oracle::{
    aggregation_error, gaussian_mtf_error, gp_interpolation_error, kr_agreement, kr_speedup, photometric_error,
    rotation_swaps_directions, subsample_round_trip, Fault,
};
use lensmtf::psf_lab::blur_patch;
use lensmtf::training_data::{example_rng, gen_stripe_pattern, ExampleStream, NoiseConfig};

const SEED: u64 = 1;
const EXPERIMENT_GROUPS: usize = 256;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1} s (limit {limit_s} s)"))
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;
type Check = Box<dyn FnOnce(&mut Suite) -> Res<Outcome>>;

struct Suite {
    model: Option<ModelParams>,
}

fn acceptance_dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target"));
    target.join("acceptance")
}

/// Everything that determines the trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Recipe {
    net: NetConfig,
    train: TrainConfig,
    stream: String,
    init_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecipeFile {
    recipe: Recipe,
    training_seconds: f64,
}

fn recipe() -> Recipe {
    let train = desk_train_config(SEED);
    Recipe {
        net: NetConfig::desk(),
        init_seed: train.seed,
        train,
        stream: format!("{:?}", desk_pattern_stream(SEED)),
    }
}

/// Cached model for the recipe, or a fresh training run.
fn trained_model() -> Res<(ModelParams, f64, bool)> {
    let dir = acceptance_dir();
    let (ckpt, side) = (dir.join("desk.ckpt"), dir.join("desk.recipe.json"));
    let want = recipe();
    let retrain = std::env::var_os("LENSMTF_RETRAIN").is_some_and(|v| v == "1");
    if !retrain {
        if let Ok(text) = fs::read_to_string(&side) {
            if let Ok(file) = serde_json::from_str::<RecipeFile>(&text) {
                if file.recipe == want && ckpt.is_file() {
                    let (params, _) = load_checkpoint(&ckpt)?;
                    return Ok((params, file.training_seconds, true));
                }
            }
        }
    }
    let stream = desk_pattern_stream(SEED);
    let validation = validation_set(&stream, &want.net, want.train.validation_groups, 1)?;
    let init = ModelParams::he_init(want.net.clone(), want.init_seed)?;
    let mut batches = StreamBatches {
        stream: &stream,
        config: &want.net,
    };
    let t = Instant::now();
    let (params, log) = train(&want.train, init, &mut batches, &validation, |row| {
        if let Some(v) = row.val_loss {
            eprintln!("  step {} val loss {v:.5} ({:.0} s)", row.step + 1, t.elapsed().as_secs_f64());
        }
    })?;
    let seconds = t.elapsed().as_secs_f64();
    fs::create_dir_all(&dir)?;
    let meta = TrainingMeta {
        source: "pattern".into(),
        steps: want.train.steps,
        multi_steps: want.train.multi_steps,
        seed: want.train.seed,
        validation_loss: log.last_val_loss(),
        residual_mtf: None,
    };
    save_checkpoint(&ckpt, &params, &meta)?;
    fs::write(
        &side,
        serde_json::to_string_pretty(&RecipeFile {
            recipe: want,
            training_seconds: seconds,
        })?,
    )?;
    Ok((params, seconds, false))
}

fn model(s: &mut Suite) -> Res<&ModelParams> {
    s.model.as_ref().ok_or_else(|| "criterion 5 produced no model".into())
}

/// Held-out groups of the desk stream with another noise level.
fn held_out(stream: &ExampleStream, net: &NetConfig, patches: usize) -> Res<Vec<TrainingGroup>> {
    Ok(validation_set(stream, net, EXPERIMENT_GROUPS, patches)?)
}

fn c1(_: &mut Suite) -> Res<Outcome> {
    let t = Instant::now();
    let err = gaussian_mtf_error(&[1.0, 2.0, 4.0], 31, DEFAULT_PAD, Fault::None)?;
    let (fast, time) = within(t.elapsed(), 1.0);
    Ok(outcome(err < 1e-3 && fast, format!("max error {err:.2e} < 1e-3, {time}")))
}

fn c2(_: &mut Suite) -> Res<Outcome> {
    let t = Instant::now();
    let err = photometric_error(20, SEED, Fault::None)?;
    let (fast, time) = within(t.elapsed(), 30.0);
    Ok(outcome(err < 0.02 && fast, format!("max |grating - Fourier| {err:.2e} < 0.02, {time}")))
}

fn c3(_: &mut Suite) -> Res<Outcome> {
    let t = Instant::now();
    let err = kr_agreement(SEED)?;
    let speedup = kr_speedup(100, 100, SEED)?;
    let (fast, time) = within(t.elapsed(), 60.0);
    Ok(outcome(
        err < 1e-6 && speedup >= 20.0 && fast,
        format!("max gap {err:.2e} < 1e-6, speedup {speedup:.0}x >= 20x, {time}"),
    ))
}

fn c4(_: &mut Suite) -> Res<Outcome> {
    let net = NetConfig::desk();
    let params = ModelParams::he_init(net.clone(), SEED)?;
    let arch = params.architecture();
    let mut p = params.to_f64();
    // nonzero biases keep pre-activations away from exact zeros
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for t in arch.param_tensors() {
        if t.fan_in == 0 {
            for v in &mut p[t.offset..t.offset + t.shape[0]] {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let group = desk_pattern_stream(SEED).group(VALIDATION_BASE, 1)?;
    let batch = vec![prepare_group(&group, &net)?];
    let t = Instant::now();
    let report = check_gradients(arch, &p, &batch, DEFAULT_STEP, |_| {})?;
    let (fast, time) = within(t.elapsed(), 300.0);
    Ok(outcome(
        report.max_rel_error < 1e-4 && fast,
        format!(
            "max rel error {:.2e} < 1e-4 over {} params ({} crossed a ReLU kink), {time}",
            report.max_rel_error, report.checked, report.held_gates
        ),
    ))
}

fn c5(s: &mut Suite) -> Res<Outcome> {
    let (params, seconds, cached) = trained_model()?;
    let net = NetConfig::desk();
    let validation = held_out(&desk_pattern_stream(SEED), &net, 1)?;
    let e = evaluate(&params, &validation)?;
    s.model = Some(params);
    let limit = 3600.0;
    Ok(outcome(
        e.mean_abs_error < 0.05 && seconds < limit,
        format!(
            "held-out mean abs error {:.4} < 0.05 over {EXPERIMENT_GROUPS} groups, training {seconds:.0} s{} (limit {limit} s)",
            e.mean_abs_error,
            if cached { " (cached run)" } else { "" }
        ),
    ))
}

fn c6(s: &mut Suite) -> Res<Outcome> {
    let params = model(s)?.clone();
    let net = NetConfig::desk();
    let stream = desk_pattern_stream(SEED);
    let mut identical = true;
    for i in 0..8 {
        let g = stream.group(VALIDATION_BASE + i, 1)?;
        identical &= predict_multi(&params, &g.inputs)? == forward(&params, &g.inputs[0])?;
    }
    let four = held_out(&stream, &net, 4)?;
    let one: Vec<TrainingGroup> = four
        .iter()
        .map(|g| TrainingGroup {
            patches: g.patches[..1].to_vec(),
            target: g.target,
        })
        .collect();
    let (e1, e4) = (evaluate(&params, &one)?.mean_abs_error, evaluate(&params, &four)?.mean_abs_error);
    Ok(outcome(
        identical && e4 <= e1,
        format!("n=1 identity bit-exact: {identical}; error n=4 {e4:.4} <= n=1 {e1:.4} over {EXPERIMENT_GROUPS} groups"),
    ))
}

fn c7(s: &mut Suite) -> Res<Outcome> {
    let params = model(s)?.clone();
    let net = NetConfig::desk();
    let err = |sigma: f64| -> Res<f64> {
        let stream = ExampleStream {
            noise: NoiseConfig::fixed(sigma),
            ..desk_pattern_stream(SEED)
        };
        Ok(evaluate(&params, &held_out(&stream, &net, 1)?)?.mean_abs_error)
    };
    let (e0, e1, e10) = (err(0.0)?, err(0.01)?, err(0.1)?);
    Ok(outcome(
        e1 <= 1.5 * e0 && e10 > e1,
        format!("error at sigma 0 / 0.01 / 0.1: {e0:.4} / {e1:.4} / {e10:.4}; need {e1:.4} <= {:.4} and {e10:.4} > {e1:.4}", 1.5 * e0),
    ))
}

/// Mean error of one direction over stripe patches at `angle` (0 puts the
/// intensity variation along the radial axis).
fn stripe_errors(params: &ModelParams, angle: f64) -> Res<[f64; 2]> {
    let net = NetConfig::desk();
    let stream = desk_pattern_stream(SEED);
    let mut sums = [0.0; 2];
    for i in 0..EXPERIMENT_GROUPS as u64 {
        let mut rng = example_rng(SEED ^ 0x57e1, VALIDATION_BASE + i);
        let psf = stream.pool.draw(&mut rng)?;
        let period = rng.random_range(8.0..24.0);
        let size = net.input_size + psf.kernel.width() - 1;
        let sharp = gen_stripe_pattern(angle, period, (0.0, 1.0), size)?;
        let sigma = rng.random_range(0.0..0.02);
        let input = blur_patch(&sharp, &psf.kernel, sigma, &mut rng)?;
        let pred = forward(params, &input)?;
        for (k, d) in Direction::BOTH.into_iter().enumerate() {
            let (a, b) = (pred.direction(d), psf.label.direction(d));
            sums[k] += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / LABEL_LEN as f64;
        }
    }
    Ok(sums.map(|v| v / EXPERIMENT_GROUPS as f64))
}

fn c8(s: &mut Suite) -> Res<Outcome> {
    let params = model(s)?.clone();
    let [rad_perp, tan_par] = stripe_errors(&params, 0.0)?;
    let [rad_par, tan_perp] = stripe_errors(&params, std::f64::consts::FRAC_PI_2)?;
    let parallel = 0.5 * (rad_par + tan_par);
    let perpendicular = 0.5 * (rad_perp + tan_perp);
    Ok(outcome(
        parallel > perpendicular,
        format!(
            "stripes parallel to the measured direction {parallel:.4} > perpendicular {perpendicular:.4} \
             (radial {rad_par:.4}/{rad_perp:.4}, tangential {tan_par:.4}/{tan_perp:.4})"
        ),
    ))
}

fn c9(_: &mut Suite) -> Res<Outcome> {
    let chart = aggregation_error()?;
    let gp = gp_interpolation_error()?;
    Ok(outcome(
        chart < 1e-3 && gp < 1e-6,
        format!("chart vs closed form {chart:.2e} < 1e-3, noise-free GP {gp:.2e} < 1e-6"),
    ))
}

fn c10(s: &mut Suite) -> Res<Outcome> {
    let round_trip = subsample_round_trip(SEED)?;
    let swap_init = rotation_swaps_directions(SEED)?;
    let swap_trained = match &s.model {
        Some(p) => {
            let patch = desk_pattern_stream(SEED).example(VALIDATION_BASE + 7)?.input;
            forward(p, &patch)?.swapped() == forward(p, &patch.rotate_cw90())?
        }
        None => true,
    };
    let comp = apply_compensation(&[1.0; 4], &COMPENSATION)? == vec![0.98, 0.95, 0.90, 0.83];
    let nyq = nyquist_cy_mm(4.14);
    // 1000 / 8.28 = 120.77; the target is quoted to one decimal
    let nyq_ok = (nyq - 120.7).abs() < 0.1;
    Ok(outcome(
        round_trip && swap_init && swap_trained && comp && nyq_ok,
        format!(
            "round trip {round_trip}, rotation swap {swap_init}/{swap_trained} (random/trained), compensation {comp}, \
             Nyquist {nyq:.3} cy/mm"
        ),
    ))
}

fn main() -> ExitCode {
    let checks: Vec<(&str, Check)> = vec![
        ("1 analytic Gaussian MTF", Box::new(c1)),
        ("2 grating contrast vs Fourier MTF", Box::new(c2)),
        ("3 fast kernel regression", Box::new(c3)),
        ("4 gradient check", Box::new(c4)),
        ("5 desk-scale training", Box::new(c5)),
        ("6 multi-patch identity and benefit", Box::new(c6)),
        ("7 noise robustness", Box::new(c7)),
        ("8 edge orientation", Box::new(c8)),
        ("9 aggregation oracle", Box::new(c9)),
        ("10 structural invariants", Box::new(c10)),
    ];
    let mut suite = Suite { model: None };
    let mut failed = 0;
    for (name, check) in checks {
        let t = Instant::now();
        let o = check(&mut suite).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failed += usize::from(!o.passed);
        println!(
            "{} criterion {name}: {} [{:.1} s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

