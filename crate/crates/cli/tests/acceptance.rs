//! Acceptance runner: one `PASS`/`FAIL` line per criterion, non-zero exit
//! when any criterion fails. `ACCEPTANCE_ONLY=3,10` restricts the run.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::cell::OnceCell;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use cpu_time::ProcessTime;
use motiondit::alse::{pretrain_expert, PretrainConfig, SyncExpert, SyncExpertConfig};
use motiondit::conditioning::{AudioFeatureSequence, ConditionKind, ConditionSet, DropoutProbs};
use motiondit::data_synth::{generate_clip, ClipRecord, Dataset, OracleSpec, OracleTables};
use motiondit::dit::{param_count, ModelConfig, MotionDit, Variant};
use motiondit::flow::{
    cfg_combine, euler_sample, sync_gate, CfgScales, SamplerConfig, TimestepSampler, VelocityModel, SYNC_GATE_TAU,
};
use motiondit::parallel::Execution;
use motiondit::params::Matrix;
use motiondit::rng::{gaussian_matrix, seeded};
use motiondit::runtime::{
    evaluate, validation_loss, EvalOptions, LrSchedule, StreamSession, TrainConfig, DEFAULT_CHUNK,
};
use motiondit::Result;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

/// One stage of the window-length curriculum used for the toy task.
struct Phase {
    window: usize,
    epochs: usize,
    lr: f64,
    /// Mean of the logit-normal timestep distribution.
    t_mean: f64,
    schedule: LrSchedule,
}

/// Short windows first: with few tokens per window the aligned audio token
/// carries a large share of attention, which is what lets the audio-to-lip
/// mapping start to form. The second stage restarts Adam, decays the rate
/// and shifts timesteps towards the noisy end. Longer training only
/// overfits the validation clips.
const CURRICULUM: [Phase; 2] = [
    Phase { window: 8, epochs: 60, lr: 1e-3, t_mean: 1.0, schedule: LrSchedule::Constant },
    Phase { window: 8, epochs: 40, lr: 1e-3, t_mean: 2.0, schedule: LrSchedule::Cosine },
];

/// Sampling here never uses guidance, so audio is dropped no more often than
/// the other conditions.
const TOY_DROPOUT: DropoutProbs = DropoutProbs { audio: 0.1, identity: 0.1, emotion: 0.1, guide: 0.1 };

const TOY_BUDGET_CPU_SECONDS: f64 = 30.0 * 60.0;
const EVAL_WINDOW: usize = 80;

fn toy_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 128,
        n_heads: 4,
        n_four_stream: 2,
        n_two_stream: 3,
        n_single_stream: 4,
        variant,
        ..Default::default()
    }
}

struct Trained {
    model: MotionDit,
    cpu_seconds: f64,
}

fn train_toy(data: &Dataset, variant: Variant) -> Result<Trained> {
    let mut model = MotionDit::new(toy_model_config(variant))?;
    let start = ProcessTime::now();
    for (k, p) in CURRICULUM.iter().enumerate() {
        let cfg = TrainConfig {
            lr: p.lr,
            epochs: p.epochs,
            window: p.window,
            batch_size: 8,
            seed: k as u64,
            clip_norm: 1.0,
            t_sampler: TimestepSampler::LogitNormal { mean: p.t_mean, std: 1.0 },
            schedule: p.schedule,
            dropout: TOY_DROPOUT,
            ..Default::default()
        };
        let summary = motiondit::runtime::train(&mut model, data, &cfg, None, Execution::Parallel, &mut |_| {})?;
        eprintln!(
            "  [{variant}] phase {k}: window {} steps {} val_mse {:.4} ({:.0} cpu-s)",
            p.window,
            summary.steps,
            summary.val_mse.last().copied().unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(Trained { model, cpu_seconds: start.elapsed().as_secs_f64() })
}

struct Context {
    data: OnceCell<Dataset>,
    toy: OnceCell<Trained>,
}

impl Context {
    fn data(&self) -> &Dataset {
        self.data.get_or_init(|| Dataset::generate(&OracleSpec::default()).expect("oracle dataset"))
    }

    fn toy(&self) -> &Trained {
        self.toy.get_or_init(|| train_toy(self.data(), Variant::C2f).expect("toy training"))
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_abs(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn gradient_correctness(_: &Context) -> Outcome {
    let start = Instant::now();
    let checks = common::gradient_check(Variant::C2f, 11);
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel).fold(0.0f64, f64::max);
    let sampled = checks.iter().all(|c| c.checked >= common::SAMPLES_PER_GROUP);
    let groups: Vec<&str> = checks.iter().map(|c| c.group.as_str()).collect();
    outcome(
        sampled && worst <= common::FD_REL_TOL && secs < 60.0,
        format!("groups={groups:?} max_rel={worst:.2e} seconds={secs:.1}"),
    )
}

/// Velocity field that ignores its inputs.
struct ConstantField(Matrix);

impl VelocityModel for ConstantField {
    fn velocity(&self, _: &Matrix, _: f64, _: &ConditionSet) -> Result<Matrix> {
        Ok(self.0.clone())
    }
}

fn ode_exactness(_: &Context) -> Outcome {
    let (frames, dim, seed) = (12, 70, 5);
    let eps = gaussian_matrix(frames, dim, &mut seeded(seed));
    let z0 = gaussian_matrix(frames, dim, &mut seeded(99));
    let field = ConstantField(&eps - &z0);
    let mut worst = 0.0f64;
    for n in [1, 2, 10, 100] {
        let cfg = SamplerConfig { n_steps: n, seed, ..Default::default() };
        let z = euler_sample(&field, &ConditionSet::default(), frames, dim, &cfg).unwrap();
        worst = worst.max(max_abs(&z, &z0));
    }
    outcome(worst <= 1e-6, format!("max_abs_error={worst:.2e} over N in [1, 2, 10, 100]"))
}

fn toy_convergence(ctx: &Context) -> Outcome {
    let data = ctx.data();
    let toy = ctx.toy();
    let (_, val) = data.split();
    let opts = EvalOptions {
        window: EVAL_WINDOW,
        stride: EVAL_WINDOW,
        sampler: SamplerConfig::default(),
        exec: Execution::Parallel,
    };
    let report = evaluate(&toy.model, data, &val, None, &opts).unwrap();
    let ratio = report.scores.mse_ratio();
    let corr = report.scores.lip_corr;
    outcome(
        toy.cpu_seconds <= TOY_BUDGET_CPU_SECONDS && ratio <= 0.1 && corr >= 0.8,
        format!(
            "lip_mse_ratio={ratio:.4} lip_corr={corr:.4} train_cpu_seconds={:.0} val_windows={}",
            toy.cpu_seconds, report.windows
        ),
    )
}

/// Returns 1 everywhere with audio present and 0.5 without it.
struct AudioStub;

impl VelocityModel for AudioStub {
    fn velocity(&self, z: &Matrix, _: f64, cs: &ConditionSet) -> Result<Matrix> {
        Ok(Matrix::from_elem(z.dim(), if cs.audio.is_some() { 1.0 } else { 0.5 }))
    }
}

fn cfg_identity(_: &Context) -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut model = MotionDit::new(cfg.clone()).unwrap();
    model.params.randomize(21, 0.2);
    let cs = common::random_conditions(&cfg, 6, 22);
    let z = gaussian_matrix(6, cfg.motion_dim(), &mut seeded(23));
    let zeros = CfgScales::from_pairs([("audio", 0.0), ("emotion", 0.0), ("identity", 0.0), ("guide", 0.0)]).unwrap();
    let plain = model.forward(&z, &cs, 0.6).unwrap();
    let guided = cfg_combine(&model, &cs, 0.6, &z, &zeros).unwrap();
    let sample_zero =
        euler_sample(&model, &cs, 6, cfg.motion_dim(), &SamplerConfig { n_steps: 4, scales: zeros, seed: 7 }).unwrap();
    let sample_none =
        euler_sample(&model, &cs, 6, cfg.motion_dim(), &SamplerConfig { n_steps: 4, seed: 7, ..Default::default() })
            .unwrap();
    // the same trajectory written out with plain forward passes
    let mut manual = gaussian_matrix(6, cfg.motion_dim(), &mut seeded(7));
    for i in 0..4 {
        let t = 1.0 - i as f64 / 4.0;
        let v = model.forward(&manual, &cs, t).unwrap();
        manual.scaled_add(-0.25, &v);
    }
    let bitwise = plain == guided && sample_zero == sample_none && sample_zero == manual;

    let stub =
        cfg_combine(&AudioStub, &cs, 0.5, &Matrix::zeros((2, 3)), &CfgScales::none().with(ConditionKind::Audio, 2.0))
            .unwrap();
    let example = stub.iter().all(|&v| v == 2.0);
    outcome(bitwise && example, format!("zero_scales_bitwise={bitwise} stub_value={}", stub[[0, 0]]))
}

fn joint_attention_reduction(_: &Context) -> Outcome {
    let (mut single, mut two) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let (s, t) = common::attention_reduction_errors(seed);
        single = single.max(s);
        two = two.max(t);
    }
    outcome(single <= 1e-6 && two <= 1e-6, format!("single_stream_err={single:.2e} two_stream_err={two:.2e}"))
}

fn rope_relative_invariance(_: &Context) -> Outcome {
    let dev = common::rope_shift_deviation(100);
    outcome(dev <= 1e-5, format!("max_logit_change={dev:.2e} over 100 trials"))
}

fn sync_gate_semantics(_: &Context) -> Outcome {
    let below = sync_gate(Some(SYNC_GATE_TAU - 1e-6), SYNC_GATE_TAU);
    let above = sync_gate(Some(SYNC_GATE_TAU + 1e-6), SYNC_GATE_TAU);
    let absent = sync_gate(None, SYNC_GATE_TAU);
    let data = Dataset::generate(&OracleSpec { n_clips: 8, frames: 24, audio_dim: 8, ..Default::default() }).unwrap();
    let mut model = MotionDit::new(ModelConfig { audio_dim: 8, ..ModelConfig::tiny() }).unwrap();
    let cfg = TrainConfig { epochs: 2, window: 12, batch_size: 2, lr: 1e-3, ..Default::default() };
    let mut lambdas = Vec::new();
    motiondit::runtime::train(&mut model, &data, &cfg, None, Execution::Parallel, &mut |r| lambdas.push(r.lambda_sync))
        .unwrap();
    let closed = !lambdas.is_empty() && lambdas.iter().all(|&l| l == 0.0);
    outcome(
        below == 1.0 && above == 0.0 && absent == 0.0 && closed,
        format!("gate(tau-1e-6)={below} gate(tau+1e-6)={above} no_expert_records={} all_zero={closed}", lambdas.len()),
    )
}

fn sync_expert_discrimination(ctx: &Context) -> Outcome {
    let data = ctx.data();
    let (train, val) = data.split();
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.clips[i].clone()).collect::<Vec<ClipRecord>>();
    let (train_clips, val_clips) = (pick(&train), pick(&val));
    let cfg = SyncExpertConfig {
        audio_dim: data.spec.audio_dim,
        motion_dim: data.spec.motion_dim(),
        lip_dims: data.lip_dims(),
        ..Default::default()
    };
    let shift = cfg.shift_min;
    let start = ProcessTime::now();
    let mut expert = SyncExpert::new(cfg).unwrap();
    let before = expert.discrimination_auc(&val_clips, &data.stats, shift).unwrap();
    pretrain_expert(&mut expert, &train_clips, &data.stats, &PretrainConfig::default(), Execution::Parallel).unwrap();
    let after = expert.discrimination_auc(&val_clips, &data.stats, shift).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        after >= 0.9 && (before - 0.5).abs() <= 0.1 && secs < 600.0,
        format!("auc_untrained={before:.4} auc_trained={after:.4} shift={shift} cpu_seconds={secs:.1}"),
    )
}

fn parameter_economy(_: &Context) -> Outcome {
    let staged = ModelConfig::default();
    let flat = ModelConfig { variant: Variant::NoC2f, ..staged.clone() };
    let (a, b) = (param_count(&staged), param_count(&flat));
    let (ea, eb) = (common::enumerated_params(&staged), common::enumerated_params(&flat));
    let ratio = a as f64 / b as f64;
    outcome(
        a == ea && b == eb && ratio < 0.6,
        format!(
            "staged_{}/{}/{}={a} flat_{}x4={b} ratio={ratio:.4} enumeration_matches={}",
            staged.n_four_stream,
            staged.n_two_stream,
            staged.n_single_stream,
            flat.total_blocks(),
            a == ea && b == eb
        ),
    )
}

fn streaming_continuity(ctx: &Context) -> Outcome {
    let data = ctx.data();
    let model = &ctx.toy().model;
    let tables = OracleTables::new(&data.spec).unwrap();
    // a clip index beyond the dataset: unseen audio, known identity table
    let clip = generate_clip(&data.spec, &tables, data.spec.n_clips + 1, 3 * DEFAULT_CHUNK).unwrap();
    let raw = clip.motion.to_matrix();
    let first = raw.row(0).to_vec();
    let mut session = StreamSession::new(
        model,
        data.stats.clone(),
        SamplerConfig::default(),
        DEFAULT_CHUNK,
        clip.identity.clone(),
        clip.emotion,
        Some(&first),
    )
    .unwrap();
    let mut chunks = Vec::new();
    for k in 0..3 {
        let audio: AudioFeatureSequence = clip.audio.slice(k * DEFAULT_CHUNK, DEFAULT_CHUNK);
        chunks.push(session.push(k, &audio).unwrap());
    }
    let guides_bitwise = chunks
        .windows(2)
        .all(|p| p[1].guide.as_slice() == p[0].normalized.row(p[0].normalized.nrows() - 1).to_vec().as_slice());
    let frames: Vec<Vec<f64>> = chunks
        .iter()
        .flat_map(|c| c.motion.to_matrix().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    let step = |i: usize| frames[i].iter().zip(&frames[i - 1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut intra: Vec<f64> = (1..frames.len()).filter(|i| i % DEFAULT_CHUNK != 0).map(step).collect();
    intra.sort_by(f64::total_cmp);
    let median = intra[intra.len() / 2];
    let boundary = (1..3).map(|k| step(k * DEFAULT_CHUNK)).fold(0.0f64, f64::max);
    outcome(
        frames.len() == 300 && guides_bitwise && boundary <= 2.0 * median,
        format!(
            "frames={} max_boundary_step={boundary:.4} median_intra_step={median:.4} ratio={:.3} guide_bitwise={guides_bitwise}",
            frames.len(),
            boundary / median
        ),
    )
}

/// Mean validation flow MSE over a fixed set of windows and timesteps.
fn validation_mse(model: &MotionDit, data: &Dataset) -> f64 {
    let (_, val) = data.split();
    let seeds = 0..16u64;
    let n = seeds.end as f64;
    seeds.map(|s| validation_loss(model, data, &val, EVAL_WINDOW, 1000 + s, Execution::Parallel).unwrap()).sum::<f64>()
        / n
}

fn ablation_direction(ctx: &Context) -> Outcome {
    let data = ctx.data();
    let c2f = validation_mse(&ctx.toy().model, data);
    let caba = validation_mse(&train_toy(data, Variant::Caba).unwrap().model, data);
    let maf = validation_mse(&train_toy(data, Variant::Maf).unwrap().model, data);
    outcome(
        c2f <= caba && c2f <= maf,
        format!("val_mse c2f={c2f:.5} caba={caba:.5} maf={maf:.5} (same curriculum for each)"),
    )
}

const TINY: &str = "\
model.d_model=16
model.n_heads=2
model.n_four_stream=1
model.n_two_stream=1
model.n_single_stream=1
model.time_freq_dim=16
data.n_clips=10
data.frames=60
data.audio_dim=8
train.epochs=1
train.window=20
train.batch_size=4
sampler.steps=2
";

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_motiondit")).env("NO_COLOR", "1").args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn hash_dir(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn determinism(_: &Context) -> Outcome {
    let tmp = TempDir::new().unwrap();
    let p = |name: &str| tmp.path().join(name).display().to_string();
    fs::write(tmp.path().join("tiny.txt"), TINY).unwrap();
    let config = p("tiny.txt");
    let run = |args: &[&str]| {
        let mut full = vec!["--config", config.as_str(), "--seed", "5"];
        full.extend_from_slice(args);
        cli(&full);
    };
    let mut same = Vec::new();
    for tag in ["a", "b"] {
        run(&["gen-data", "--out", &p(&format!("data_{tag}"))]);
    }
    same.push(("gen-data", p("data_a"), p("data_b")));
    let data = p("data_a");
    for tag in ["a", "b"] {
        run(&["train", "--data", &data, "--out", &p(&format!("train_{tag}"))]);
    }
    same.push(("train", p("train_a"), p("train_b")));
    let model = format!("{}/model.ck", p("train_a"));
    let meta = format!("{data}/clips/0000.meta");
    let audio = format!("{data}/clips/0000.afea");
    for tag in ["a", "b"] {
        run(&["sample", "--model", &model, "--audio", &audio, "--meta", &meta, "--out", &p(&format!("sample_{tag}"))]);
    }
    same.push(("sample", p("sample_a"), p("sample_b")));
    let clip = AudioFeatureSequence::read_afea(Path::new(&audio)).unwrap();
    fs::create_dir_all(p("chunks")).unwrap();
    for (i, start) in [0, 25, 50].into_iter().enumerate() {
        let len = 25.min(clip.frames() - start);
        clip.slice(start, len).write_afea(&tmp.path().join(format!("chunks/{i:03}.afea"))).unwrap();
    }
    let chunks = p("chunks");
    for tag in ["a", "b"] {
        run(&[
            "stream",
            "--model",
            &model,
            "--chunks",
            &chunks,
            "--meta",
            &meta,
            "--out",
            &p(&format!("stream_{tag}")),
            "--chunk-frames",
            "25",
        ]);
    }
    same.push(("stream", p("stream_a"), p("stream_b")));

    let mut details = Vec::new();
    let mut all = true;
    for (cmd, a, b) in &same {
        let (ha, hb) = (hash_dir(Path::new(a)), hash_dir(Path::new(b)));
        all &= ha == hb;
        details.push(format!("{cmd}={}", if ha == hb { &ha[..12] } else { "MISMATCH" }));
    }
    // a different seed must change the data
    cli(&["--config", &config, "--seed", "6", "gen-data", "--out", &p("data_c")]);
    let differs = hash_dir(Path::new(&p("data_c"))) != hash_dir(Path::new(&p("data_a")));
    outcome(all && differs, format!("{} other_seed_differs={differs}", details.join(" ")))
}

type Criterion = (usize, &'static str, fn(&Context) -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "gradient_correctness", gradient_correctness),
    (2, "ode_exactness", ode_exactness),
    (3, "toy_convergence", toy_convergence),
    (4, "cfg_identity", cfg_identity),
    (5, "joint_attention_reduction", joint_attention_reduction),
    (6, "rope_relative_invariance", rope_relative_invariance),
    (7, "sync_gate_semantics", sync_gate_semantics),
    (8, "sync_expert_discrimination", sync_expert_discrimination),
    (9, "parameter_economy", parameter_economy),
    (10, "streaming_continuity", streaming_continuity),
    (11, "ablation_direction", ablation_direction),
    (12, "determinism", determinism),
];

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let ctx = Context { data: OnceCell::new(), toy: OnceCell::new() };
    let (mut passed, mut ran) = (0, 0);
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| check(&ctx)));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        passed += pass as usize;
        println!("{} {id:>2} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if passed == ran {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
