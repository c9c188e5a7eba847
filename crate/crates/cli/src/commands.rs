use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use motiondit::alse::{pretrain_expert, SyncExpert};
use motiondit::checkpoint::Checkpoint;
use motiondit::conditioning::AudioFeatureSequence;
use motiondit::config::RunConfig;
use motiondit::data_synth::{read_clip_meta, segment_windows, ClipMeta, Dataset, OracleSpec};
use motiondit::dit::{MotionDit, Variant};
use motiondit::flow::SamplerConfig;
use motiondit::motion_space::{frame_line, MotionSequence, NormStats, DEFAULT_FPS};
use motiondit::parallel::Execution;
use motiondit::runtime::{
    conditions_for, evaluate, generate, load_model, real_time_factor, run_stream_pipeline, save_model, score_windows,
    EvalOptions, EvalReport, MetricRecord, StreamSession,
};

use crate::{Cli, CliError, Command, GenArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match &cli.command {
        Command::GenData { out, spec } => gen_data(cli, out, spec.as_deref(), exec),
        Command::PretrainAlse { data, out, epochs } => pretrain(cli, data, out, *epochs, exec),
        Command::Train { data, out, variant, alse, init, epochs } => {
            train(cli, data, out, variant.as_deref(), alse.as_deref(), init.as_deref(), *epochs, exec)
        }
        Command::Sample { model, audio, meta, out, gen, text } => sample(cli, model, audio, meta, out, gen, *text),
        Command::Stream { model, chunks, meta, out, gen, chunk_frames } => {
            stream(cli, model, chunks, meta, out, gen, *chunk_frames)
        }
        Command::Eval { data, out, model, ground_truth, split, alse, window, gen } => {
            eval(cli, data, out, model.as_deref(), *ground_truth, split, alse.as_deref(), *window, gen, exec)
        }
        Command::Inspect { path } => inspect(path),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

/// Defaults, then the config file, then `prepare`, then `--set` overrides.
fn load_config(cli: &Cli, prepare: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    prepare(&mut cfg)?;
    for s in &cli.sets {
        cfg.apply(s)?;
    }
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::new("exists", format!("{} is not empty; pass --force to replace it", dir.display())));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn gen_data(cli: &Cli, out: &Path, spec: Option<&Path>, exec: Execution) -> Result<()> {
    let cfg = load_config(cli, |cfg| {
        if let Some(p) = spec {
            cfg.data = OracleSpec::from_text(&fs::read_to_string(p)?)?;
        }
        Ok(())
    })?;
    let mut data_spec = cfg.data.clone();
    if let Some(seed) = cli.seed {
        data_spec.seed = seed;
    }
    let cfg = RunConfig { data: data_spec.clone(), ..cfg };
    prepare_out(out, cli.force)?;
    let clips = motiondit::data_synth::generate_dataset_with(&data_spec, exec)?;
    let stats = motiondit::data_synth::compute_norm_stats(&clips)?;
    let data = Dataset { spec: data_spec, clips, stats };
    data.save(out)?;
    write_config(out, &cfg)?;
    println!("clips={}", data.clips.len());
    println!("stats={}", out.join("stats.norm").display());
    Ok(())
}

/// Makes the sync-expert settings agree with the dataset.
fn fit_alse_to_data(cfg: &mut RunConfig, data: &Dataset) {
    cfg.alse.audio_dim = data.spec.audio_dim;
    cfg.alse.motion_dim = data.spec.motion_dim();
    cfg.alse.lip_dims = data.lip_dims();
}

fn pretrain(cli: &Cli, data_dir: &Path, out: &Path, epochs: Option<usize>, exec: Execution) -> Result<()> {
    let data = Dataset::load(data_dir)?;
    let mut cfg = load_config(cli, |_| Ok(()))?;
    fit_alse_to_data(&mut cfg, &data);
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(seed) = cli.seed {
        cfg.pretrain.seed = seed;
    }
    prepare_out(out, cli.force)?;
    let (train_idx, val_idx) = data.split();
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.clips[i].clone()).collect::<Vec<_>>();
    let (train_clips, val_clips) = (pick(&train_idx), pick(&val_idx));
    let shift = cfg.alse.shift_min;
    let mut expert = SyncExpert::new(cfg.alse.clone())?;
    let auc_before = expert.discrimination_auc(&val_clips, &data.stats, shift)?;
    let log = pretrain_expert(&mut expert, &train_clips, &data.stats, &cfg.pretrain, exec)?;
    let auc_after = expert.discrimination_auc(&val_clips, &data.stats, shift)?;
    let (aligned, shifted) = expert.aligned_vs_shifted_loss(&val_clips, &data.stats, shift)?;
    expert.save(&out.join("alse.ck"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in log.epoch_loss.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    fs::write(out.join("pretrain.csv"), csv)?;
    let report = format!(
        "shift={shift}\nauc_untrained={auc_before}\nauc_trained={auc_after}\naligned_loss={aligned}\nshifted_loss={shifted}\n"
    );
    fs::write(out.join("report.txt"), &report)?;
    write_config(out, &cfg)?;
    print!("{report}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    cli: &Cli,
    data_dir: &Path,
    out: &Path,
    variant: Option<&str>,
    alse: Option<&Path>,
    init: Option<&Path>,
    epochs: Option<usize>,
    exec: Execution,
) -> Result<()> {
    let data = Dataset::load(data_dir)?;
    let mut cfg = load_config(cli, |_| Ok(()))?;
    cfg.model.audio_dim = data.spec.audio_dim;
    cfg.model.keypoints = data.spec.keypoints;
    cfg.model.n_emotions = data.spec.n_emotions;
    if let Some(v) = variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if let Some(p) = alse {
        cfg.train.alse = Some(p.to_path_buf());
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let expert = cfg.train.alse.as_deref().map(SyncExpert::load).transpose()?;
    // a starting checkpoint fixes the architecture
    let mut model = match init {
        Some(p) => {
            let m = load_model(p)?;
            if variant.is_some() && m.cfg.variant != cfg.model.variant {
                return Err(CliError::new(
                    "config",
                    format!(
                        "--variant {} conflicts with the {} checkpoint {}",
                        cfg.model.variant,
                        m.cfg.variant,
                        p.display()
                    ),
                ));
            }
            cfg.model = m.cfg.clone();
            m
        }
        None => MotionDit::new(cfg.model.clone())?,
    };
    prepare_out(out, cli.force)?;
    write_config(out, &cfg)?;
    info!("training {} ({} parameters)", cfg.model.variant, model.param_count());
    let mut metrics = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(metrics, "{}", MetricRecord::HEADER)?;
    let mut io_error = None;
    let summary = motiondit::runtime::train(&mut model, &data, &cfg.train, expert.as_ref(), exec, &mut |r| {
        if !r.val_mse.is_nan() {
            info!("epoch {} step {}: rf {:.4} vel {:.4} val {:.4}", r.epoch, r.step, r.loss_rf, r.loss_vel, r.val_mse);
        }
        if let Err(e) = writeln!(metrics, "{}", r.to_line()) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    metrics.flush()?;
    save_model(&model, &out.join("model.ck"))?;
    data.stats.save(&out.join("stats.norm"))?;
    let summary_text = format!(
        "variant={}\nsteps={}\nfinal_loss={}\nfinal_val_mse={}\ngate_fraction={}\n",
        cfg.model.variant,
        summary.steps,
        summary.epoch_loss.last().copied().unwrap_or(f64::NAN),
        summary.val_mse.last().copied().unwrap_or(f64::NAN),
        summary.gate_fraction,
    );
    fs::write(out.join("summary.txt"), &summary_text)?;
    print!("{summary_text}");
    Ok(())
}

fn sampler_for(cli: &Cli, cfg: &mut RunConfig, gen: &GenArgs) -> Result<SamplerConfig> {
    if let Some(s) = gen.steps {
        cfg.sampler.steps = s;
    }
    if let Some(v) = gen.cfg_audio {
        cfg.sampler.cfg_audio = v;
    }
    if let Some(v) = gen.cfg_emotion {
        cfg.sampler.cfg_emotion = v;
    }
    if let Some(v) = gen.cfg_identity {
        cfg.sampler.cfg_identity = v;
    }
    if let Some(seed) = cli.seed {
        cfg.sampler.seed = seed;
    }
    Ok(cfg.sampler.to_sampler()?)
}

fn stats_for(model_path: &Path, gen: &GenArgs) -> Result<NormStats> {
    let path = gen.stats.clone().unwrap_or_else(|| model_path.parent().unwrap_or(Path::new(".")).join("stats.norm"));
    NormStats::load(&path).map_err(|e| CliError::new(e.kind(), format!("{}: {e}", path.display())))
}

fn guide_frame(gen: &GenArgs) -> Result<Option<Vec<f64>>> {
    match &gen.guide {
        Some(p) => {
            let seq = MotionSequence::read_mseq(p)?;
            let first = seq.frames.first().ok_or_else(|| CliError::new("validation", "guide motion has no frames"))?;
            Ok(Some(first.flatten()))
        }
        None => Ok(None),
    }
}

fn clip_meta(path: &Path, gen: &GenArgs) -> Result<ClipMeta> {
    let mut meta = read_clip_meta(path)?;
    if let Some(e) = gen.emotion {
        meta.emotion = e;
    }
    Ok(meta)
}

fn sample(
    cli: &Cli,
    model_path: &Path,
    audio: &Path,
    meta: &Path,
    out: &Path,
    gen: &GenArgs,
    text: bool,
) -> Result<()> {
    let mut cfg = load_config(cli, |_| Ok(()))?;
    let sampler = sampler_for(cli, &mut cfg, gen)?;
    let model = load_model(model_path)?;
    cfg.model = model.cfg.clone();
    let stats = stats_for(model_path, gen)?;
    let meta = clip_meta(meta, gen)?;
    let audio = AudioFeatureSequence::read_afea(audio)?;
    let frames = audio.frames();
    let guide = guide_frame(gen)?;
    let cs = conditions_for(audio, &meta.identity, meta.emotion, guide.as_deref(), &stats)?;
    prepare_out(out, cli.force)?;
    write_config(out, &cfg)?;
    let start = Instant::now();
    let motion = generate(&model, &cs, frames, &sampler, Some(&stats))?;
    let secs = start.elapsed().as_secs_f64();
    motion.write_mseq(&out.join("motion.mseq"))?;
    if text {
        fs::write(out.join("motion.txt"), motion.to_text())?;
    }
    info!("{frames} frames in {secs:.2}s (rtf {:.3})", real_time_factor(secs, frames, DEFAULT_FPS as f64));
    println!("frames={frames}");
    println!("motion={}", out.join("motion.mseq").display());
    Ok(())
}

fn stream(
    cli: &Cli,
    model_path: &Path,
    chunk_dir: &Path,
    meta: &Path,
    out: &Path,
    gen: &GenArgs,
    chunk_frames: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(cli, |_| Ok(()))?;
    if let Some(c) = chunk_frames {
        cfg.sampler.chunk_frames = c;
    }
    let sampler = sampler_for(cli, &mut cfg, gen)?;
    let model = load_model(model_path)?;
    cfg.model = model.cfg.clone();
    let stats = stats_for(model_path, gen)?;
    let meta = clip_meta(meta, gen)?;
    let guide = guide_frame(gen)?;
    let mut files: Vec<PathBuf> = fs::read_dir(chunk_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "afea"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::new("validation", format!("no .afea chunks in {}", chunk_dir.display())));
    }
    prepare_out(out, cli.force)?;
    write_config(out, &cfg)?;
    fs::create_dir_all(out.join("chunks"))?;
    let mut session = StreamSession::new(
        &model,
        stats,
        sampler,
        cfg.sampler.chunk_frames,
        meta.identity.clone(),
        meta.emotion,
        guide.as_deref(),
    )?;
    let mut frames_txt = BufWriter::new(File::create(out.join("frames.txt"))?);
    let mut all = Vec::new();
    let chunks = files.into_iter().enumerate().map(|(i, p)| AudioFeatureSequence::read_afea(&p).map(|a| (i, a)));
    let start = Instant::now();
    let emitted = run_stream_pipeline(&mut session, chunks, |c| {
        c.motion.write_mseq(&out.join("chunks").join(format!("{:04}.mseq", c.index)))?;
        for f in &c.motion.frames {
            writeln!(frames_txt, "{}", frame_line(&f.flatten()))?;
        }
        frames_txt.flush()?;
        info!("chunk {}: {} frames", c.index, c.motion.len());
        all.extend(c.motion.frames);
        Ok(())
    })?;
    let secs = start.elapsed().as_secs_f64();
    MotionSequence::new(all, DEFAULT_FPS)?.write_mseq(&out.join("motion.mseq"))?;
    info!("rtf {:.3}", real_time_factor(secs, emitted, DEFAULT_FPS as f64));
    println!("frames={emitted}");
    println!("chunks={}", session.next_index());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cli: &Cli,
    data_dir: &Path,
    out: &Path,
    model_path: Option<&Path>,
    ground_truth: bool,
    split: &str,
    alse: Option<&Path>,
    window: usize,
    gen: &GenArgs,
    exec: Execution,
) -> Result<()> {
    let mut cfg = load_config(cli, |_| Ok(()))?;
    let sampler = sampler_for(cli, &mut cfg, gen)?;
    let data = Dataset::load(data_dir)?;
    let (train_idx, val_idx) = data.split();
    let clips = match split {
        "val" => val_idx,
        "train" => train_idx,
        "all" => (0..data.clips.len()).collect(),
        other => return Err(CliError::new("usage", format!("unknown split `{other}`; expected val, train or all"))),
    };
    let expert = alse.map(SyncExpert::load).transpose()?;
    let report = if ground_truth {
        ground_truth_report(&data, &clips, window, expert.as_ref())?
    } else {
        let path = model_path.ok_or_else(|| CliError::new("usage", "--model is required unless --ground-truth"))?;
        let model = load_model(path)?;
        cfg.model = model.cfg.clone();
        let opts = EvalOptions { window, stride: window, sampler, exec };
        evaluate(&model, &data, &clips, expert.as_ref(), &opts)?
    };
    prepare_out(out, cli.force)?;
    write_config(out, &cfg)?;
    let text = report.to_text();
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.csv"), format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    print!("{text}");
    Ok(())
}

/// Scores the reference motion against itself; every error term is zero.
fn ground_truth_report(
    data: &Dataset,
    clips: &[usize],
    window: usize,
    expert: Option<&SyncExpert>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let selected: Vec<_> = clips.iter().map(|&i| data.clips[i].clone()).collect();
    let (windows, _) = segment_windows(&selected, window, window)?;
    if windows.is_empty() {
        return Err(CliError::new("validation", format!("no clip has {window} frames")));
    }
    let refs: Vec<_> = windows.iter().map(|w| w.motion.clone()).collect();
    let scores = score_windows(&refs, &refs, &data.lip_dims())?;
    let alse_mean = match expert {
        Some(e) => {
            let mut total = 0.0;
            for w in &windows {
                total += e.loss(&w.audio.features, &data.stats.normalize(&w.motion)?)?;
            }
            Some(total / windows.len() as f64)
        }
        None => None,
    };
    let seconds = start.elapsed().as_secs_f64();
    let frames = windows.len() * window;
    Ok(EvalReport {
        variant: "ground_truth".into(),
        windows: windows.len(),
        frames,
        scores,
        alse_mean,
        param_count: 0,
        seconds,
        fps: frames as f64 / seconds.max(1e-12),
        rtf: real_time_factor(seconds, frames, DEFAULT_FPS as f64),
    })
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let data = Dataset::load(path)?;
        let (train, val) = data.split();
        println!("clips={}", data.clips.len());
        println!("frames={}", data.clips.iter().map(|c| c.frames()).sum::<usize>());
        println!("train_clips={}", train.len());
        println!("val_clips={}", val.len());
        print!("{}", data.spec.to_text());
        return Ok(());
    }
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        File::open(path)?.read_exact(&mut magic)?;
    }
    match &magic {
        b"MDCK" => print!("{}", Checkpoint::read_manifest(path)?),
        b"MSEQ" => {
            let seq = MotionSequence::read_mseq(path)?;
            println!("format=mseq\nframes={}\nkeypoints={}\nfps={}", seq.len(), seq.keypoints(), seq.fps);
        }
        b"AFEA" => {
            let a = AudioFeatureSequence::read_afea(path)?;
            println!("format=afea\nframes={}\ndim={}", a.frames(), a.dim());
        }
        b"NORM" => {
            let s = NormStats::load(path)?;
            println!("format=norm\ndim={}", s.dim());
            println!("mean={}", frame_line(&s.mean));
            println!("std={}", frame_line(&s.std));
        }
        _ => return Err(CliError::new("format", format!("{}: unrecognised file type", path.display()))),
    }
    Ok(())
}
