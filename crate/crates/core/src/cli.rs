//! Command-line front end.
//!
//! Exit status: 0 on success, 1 for usage and configuration errors, 2 for
//! numeric failures at run time. Every output file carries the settings
//! that produced it, as a comment block or a `config.txt` sidecar.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, DataBatch};
use crate::error::{Error, Result};
use crate::io::{atomic_write, encode_csv, encode_pgm_grid, read_features, write_dlb1};
use crate::metrics::{evaluate, FeatureSet, MetricsRecord};
use crate::objectives::{Decoder, LossConfig, Objective, VarianceMode, VlbTermKind};
use crate::rng::{stream, Stream};
use crate::sampling::{
    nll_eval, sample, Denoiser, ModelSwitch, NllConfig, NllReport, SamplerConfig, SamplerKind,
};
use crate::schedule::{NoiseSchedule, ScheduleDescriptor, StrideMode, StrideSpec, COSINE_S};
use crate::toynet::{NetConfig, NetParams, ToyNet};
use crate::training::{grad_check, TrainBatch, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "difflab",
    version,
    about = "Desk-scale denoising diffusion laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate the variational bound on a data file.
    Nll(NllArgs),
    /// Compare two feature files.
    Metrics(MetricsArgs),
    /// Inspect noise schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
    /// Estimate the gradient noise scale of a checkpoint.
    Noisescale(NoiseScaleArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Overrides both the training and the data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Samples drawn from the final EMA model (0 skips sampling and metrics).
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Second model for a two-model switch.
    #[arg(long, requires = "switch")]
    ckpt2: Option<PathBuf>,
    /// Parent steps `lo,hi`; the second model handles `[lo, hi)`.
    #[arg(long, requires = "ckpt2")]
    switch: Option<String>,
    /// Sampling steps; defaults to the full schedule.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "ancestral")]
    sampler: SamplerKind,
    /// Defaults to the variance mode the checkpoint was trained with.
    #[arg(long)]
    variance: Option<VarianceMode>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class label for every sample; conditional models cycle through classes otherwise.
    #[arg(long)]
    class: Option<usize>,
    /// Clamp predicted x0 to [-1, 1]; defaults on for image data.
    #[arg(long)]
    clip: Option<bool>,
}

#[derive(Debug, Args)]
struct NllArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `full` or a step count K (uses the likelihood-augmented stride).
    #[arg(long, default_value = "full")]
    stride: String,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    decoder: Option<Decoder>,
    #[arg(long)]
    variance: Option<VarianceMode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-term CSV destination; printed after the summary when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Second checkpoint: per-term ratio without `--switch`, ensemble with it.
    #[arg(long)]
    ckpt2: Option<PathBuf>,
    #[arg(long, requires = "ckpt2")]
    switch: Option<String>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ScheduleAction {
    /// Write the per-step table as CSV.
    Dump(DumpArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Cosine,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long)]
    kind: KindArg,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, requires = "stride", default_value = "even")]
    mode: StrideMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value = "8,8")]
    hidden: String,
    #[arg(long, default_value_t = 100)]
    timesteps: usize,
    /// One objective, or every objective when absent.
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct NoiseScaleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    small: usize,
    #[arg(long, default_value_t = 512)]
    big: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Defaults to the objective the checkpoint was trained with.
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// `println!` that tolerates a closed stdout (for example `| head`).
macro_rules! say {
    ($($arg:tt)*) => {
        emit(&format!("{}\n", format_args!($($arg)*)))
    };
}

fn emit(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Relative error a gradient check must stay under to pass.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Parse `args` (program name first), execute, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Nll(a) => nll(a),
        Command::Metrics(a) => metrics(a),
        Command::Schedule {
            action: ScheduleAction::Dump(a),
        } => schedule_dump(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Noisescale(a) => noisescale(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_switch(spec: &str, steps: usize) -> Result<ModelSwitch> {
    let bad = || Error::Config(format!("--switch expects `lo,hi`, got `{spec}`"));
    let (lo, hi) = spec.split_once(',').ok_or_else(bad)?;
    let lo = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim().parse().map_err(|_| bad())?;
    ModelSwitch::ensemble(steps, lo, hi).map_err(|e| Error::Config(e.to_string()))
}

/// A checkpoint together with the run configuration stored inside it.
struct Loaded {
    ckpt: Checkpoint,
    run: RunConfig,
    schedule: NoiseSchedule,
}

fn load(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let run = RunConfig::parse(&ckpt.run_config.to_text())
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let schedule = ckpt.schedule.build()?;
    Ok(Loaded {
        ckpt,
        run,
        schedule,
    })
}

fn load_pair(first: &Path, second: Option<&Path>) -> Result<(Loaded, Option<Loaded>)> {
    let a = load(first)?;
    let b = second.map(load).transpose()?;
    if let Some(b) = &b {
        if b.ckpt.schedule != a.ckpt.schedule
            || b.ckpt.net.config.input_dims != a.ckpt.net.config.input_dims
        {
            return Err(Error::Config(
                "--ckpt2 must share the schedule and input dims of --ckpt".into(),
            ));
        }
    }
    Ok((a, b))
}

fn train(args: TrainArgs) -> Result<i32> {
    let mut run = RunConfig::parse(&read_text(&args.config)?)?;
    if let Some(seed) = args.seed {
        run = run.with_seed(seed);
    }
    run.validate()?;
    let out = &args.out_dir;
    std::fs::create_dir_all(out.join("samples")).map_err(|e| Error::io(out, e))?;
    atomic_write(&out.join("config.txt"), run.to_text().as_bytes())?;

    let data = generate(&run.data)?;
    write_dlb1(&out.join("data_train.bin"), &data.train.x)?;
    write_dlb1(&out.join("data_eval.bin"), &data.eval.x)?;

    let schedule = run.schedule.build()?;
    let mut trainer = Trainer::new(run.net.clone(), schedule, run.train)?;
    let objective = run.train.loss.objective;
    let kv = run.to_key_values();
    let mut log =
        String::from("# config = config.txt\nstep,objective,loss,vlb_bits_per_dim,t_drawn\n");
    let total = run.train.total_steps;
    let save = |trainer: &Trainer, log: &str| -> Result<()> {
        let step = trainer.step;
        let raw = Checkpoint::new(trainer.net.clone(), run.schedule, step, false, kv.clone());
        raw.save(&out.join(format!("ckpt_{step}.bin")))?;
        let ema = Checkpoint::new(trainer.ema_net(), run.schedule, step, true, kv.clone());
        ema.save(&out.join(format!("ckpt_{step}_ema.bin")))?;
        atomic_write(&out.join("log.csv"), log.as_bytes())
    };
    for _ in 0..total {
        let m = trainer.train_step(&data.train)?;
        if m.step % run.log_every == 0 || m.step == total {
            let ts: Vec<String> = m.t_drawn.iter().map(usize::to_string).collect();
            let _ = writeln!(
                log,
                "{},{objective},{},{},{}",
                m.step,
                m.loss,
                m.vlb_bits_per_dim,
                ts.join(" ")
            );
            log::info!("step {} loss {:.6}", m.step, m.loss);
        }
        if run.checkpoint_every > 0 && m.step % run.checkpoint_every == 0 && m.step != total {
            save(&trainer, &log)?;
        }
    }
    save(&trainer, &log)?;
    say!("trained {total} steps into {}", out.display());

    if args.samples > 0 {
        let ema = trainer.ema_net();
        let mut cfg = SamplerConfig::new(run.train.loss.variance);
        cfg.clip_denoised = run.data.kind.is_image();
        let labels = class_labels(&ema.config, args.samples, None)?;
        let mut rng = stream(run.train.seed, Stream::Sampling);
        let x = sample(
            &[&ema as &dyn Denoiser],
            args.samples,
            &cfg,
            &trainer.schedule,
            labels.as_deref(),
            &mut rng,
        )?;
        let comment = format!(
            "config = config.txt\nmodel = ckpt_{total}_ema.bin\nsampler = ancestral\nsteps = {}\nvariance = {}\nseed = {}",
            trainer.schedule.steps(),
            cfg.variance,
            run.train.seed
        );
        write_samples(
            &out.join("samples"),
            "final",
            &x,
            image_side(&run),
            &comment,
        )?;
        let record = evaluate(
            &FeatureSet::new(data.eval.x.clone())?,
            &FeatureSet::new(x)?,
            5,
        )?;
        let json = metrics_json(
            record,
            "data_eval.bin",
            if image_side(&run).is_some() {
                "samples/final.bin"
            } else {
                "samples/final.csv"
            },
        )?;
        atomic_write(&out.join("metrics.json"), format!("{json}\n").as_bytes())?;
        say!("{json}");
    }
    Ok(0)
}

fn image_side(run: &RunConfig) -> Option<usize> {
    match run.data.kind {
        crate::data::DatasetKind::ImageFile { side, .. } => Some(side),
        _ => None,
    }
}

/// Image data gets a viewable PGM grid next to the raw DLB1 features.
fn write_samples(
    dir: &Path,
    stem: &str,
    x: &Array2<f64>,
    side: Option<usize>,
    comment: &str,
) -> Result<()> {
    match side {
        Some(side) => {
            atomic_write(
                &dir.join(format!("{stem}.pgm")),
                &encode_pgm_grid(x, side, Some(comment))?,
            )?;
            write_dlb1(&dir.join(format!("{stem}.bin")), x)
        }
        None => write_csv(&dir.join(format!("{stem}.csv")), comment, x),
    }
}

fn write_csv(path: &Path, comment: &str, x: &Array2<f64>) -> Result<()> {
    let header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    atomic_write(path, encode_csv(Some(comment), &header, x).as_bytes())
}

fn class_labels(net: &NetConfig, n: usize, class: Option<usize>) -> Result<Option<Vec<usize>>> {
    if !net.is_conditional() {
        return match class {
            Some(_) => Err(Error::Config(
                "--class needs a class-conditional model".into(),
            )),
            None => Ok(None),
        };
    }
    match class {
        Some(c) if c >= net.num_classes => Err(Error::Config(format!(
            "--class {c} out of range for {} classes",
            net.num_classes
        ))),
        Some(c) => Ok(Some(vec![c; n])),
        None => Ok(Some((0..n).map(|i| i % net.num_classes).collect())),
    }
}

#[derive(Serialize)]
struct MetricsOutput {
    #[serde(flatten)]
    record: MetricsRecord,
    real: String,
    fake: String,
}

fn metrics_json(record: MetricsRecord, real: &str, fake: &str) -> Result<String> {
    serde_json::to_string(&MetricsOutput {
        record,
        real: real.into(),
        fake: fake.into(),
    })
    .map_err(|e| Error::invalid(e.to_string()))
}

fn sample_cmd(args: SampleArgs) -> Result<i32> {
    let (a, b) = load_pair(&args.ckpt, args.ckpt2.as_deref())?;
    let steps = a.schedule.steps();
    let k = args.steps.unwrap_or(steps);
    let mut cfg = SamplerConfig::new(args.variance.unwrap_or(a.run.train.loss.variance));
    cfg.sampler = args.sampler;
    cfg.clip_denoised = args.clip.unwrap_or(a.ckpt.is_image_like());
    if k != steps {
        let mode = match args.sampler {
            SamplerKind::Ancestral => StrideMode::EvenlySpacedRound,
            SamplerKind::Ddim => StrideMode::DdimConstant,
        };
        cfg.stride =
            Some(StrideSpec::new(steps, k, mode).map_err(|e| Error::Config(e.to_string()))?);
    }
    if let Some(spec) = &args.switch {
        cfg.model_switch = Some(parse_switch(spec, steps)?);
    }
    let effective = cfg.stride.as_ref().map_or(steps, StrideSpec::len);
    let mut models: Vec<&dyn Denoiser> = vec![&a.ckpt.net];
    if let Some(b) = &b {
        models.push(&b.ckpt.net);
    }
    let labels = class_labels(&a.ckpt.net.config, args.n, args.class)?;
    let mut rng = stream(args.seed, Stream::Sampling);
    let x = sample(
        &models,
        args.n,
        &cfg,
        &a.schedule,
        labels.as_deref(),
        &mut rng,
    )?;

    let mut comment = format!(
        "model = {}\nsampler = {}\nsteps = {k}\neffective_steps = {effective}\nvariance = {}\nn = {}\nseed = {}\nclip = {}",
        file_name(&args.ckpt),
        match args.sampler {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Ddim => "ddim",
        },
        cfg.variance,
        args.n,
        args.seed,
        cfg.clip_denoised
    );
    if let (Some(p), Some(s)) = (&args.ckpt2, &args.switch) {
        let _ = write!(comment, "\nmodel2 = {}\nswitch = {s}", file_name(p));
    }
    if let Some(c) = args.class {
        let _ = write!(comment, "\nclass = {c}");
    }
    match a.ckpt.image_side().filter(|_| a.ckpt.is_image_like()) {
        Some(side) => atomic_write(&args.out, &encode_pgm_grid(&x, side, Some(&comment))?)?,
        None => write_csv(&args.out, &comment, &x)?,
    }
    say!(
        "wrote {} samples with {effective} steps to {}",
        args.n,
        args.out.display()
    );
    Ok(0)
}

fn nll(args: NllArgs) -> Result<i32> {
    let (a, b) = load_pair(&args.ckpt, args.ckpt2.as_deref())?;
    let steps = a.schedule.steps();
    let x = read_features(&args.data)?;
    if x.ncols() != a.ckpt.net.config.input_dims {
        return Err(Error::Config(format!(
            "{} has {} columns, the model expects {}",
            file_name(&args.data),
            x.ncols(),
            a.ckpt.net.config.input_dims
        )));
    }
    let data = DataBatch::unlabeled(x);
    let mut cfg = NllConfig::new(
        args.variance.unwrap_or(a.run.train.loss.variance),
        args.decoder.unwrap_or(a.run.train.loss.decoder),
    );
    cfg.repeats = args.repeats;
    if args.stride != "full" {
        let k: usize = args.stride.parse().map_err(|_| {
            Error::Config(format!(
                "--stride expects `full` or K, got `{}`",
                args.stride
            ))
        })?;
        cfg.stride = Some(
            StrideSpec::new(steps, k, StrideMode::NllAugmented)
                .map_err(|e| Error::Config(e.to_string()))?,
        );
    }
    let switch = args
        .switch
        .as_deref()
        .map(|s| parse_switch(s, steps))
        .transpose()?;
    let eval = |models: &[&dyn Denoiser], switch: Option<&ModelSwitch>| -> Result<NllReport> {
        let mut rng = stream(args.seed, Stream::Evaluation);
        nll_eval(models, switch, &data, &a.schedule, &cfg, &mut rng)
    };
    let (report, other) = match (&b, &switch) {
        (Some(b), Some(sw)) => (eval(&[&a.ckpt.net, &b.ckpt.net], Some(sw))?, None),
        (Some(b), None) => (
            eval(&[&a.ckpt.net], None)?,
            Some(eval(&[&b.ckpt.net], None)?),
        ),
        _ => (eval(&[&a.ckpt.net], None)?, None),
    };
    let ratios = other.as_ref().map(|o| report.term_ratio(o)).transpose()?;

    let mut csv = format!(
        "# model = {}\n# data = {}\n# stride = {}\n# repeats = {}\n# variance = {}\n# decoder = {}\n# seed = {}\n",
        file_name(&args.ckpt),
        file_name(&args.data),
        args.stride,
        cfg.repeats,
        cfg.variance,
        cfg.decoder,
        args.seed
    );
    if let Some(p) = &args.ckpt2 {
        let role = if switch.is_some() {
            "model2"
        } else {
            "compare"
        };
        let _ = writeln!(csv, "# {role} = {}", file_name(p));
    }
    if let Some(s) = &args.switch {
        let _ = writeln!(csv, "# switch = {s}");
    }
    csv.push_str("term,t,kind,nats,bits_per_dim");
    if ratios.is_some() {
        csv.push_str(",ratio");
    }
    csv.push('\n');
    let per_dim = (data.dims() as f64) * std::f64::consts::LN_2;
    for (i, term) in report.per_term.iter().enumerate() {
        let _ = write!(
            csv,
            "{},{},{},{},{}",
            term.term,
            term.t_model,
            match term.kind {
                VlbTermKind::Decoder => "decoder",
                VlbTermKind::Kl => "kl",
                VlbTermKind::Prior => "prior",
            },
            term.mean_nats,
            term.mean_nats / per_dim
        );
        if let Some(r) = &ratios {
            let _ = write!(csv, ",{}", r[i]);
        }
        csv.push('\n');
    }
    say!("bits_per_dim = {}", report.bits_per_dim);
    say!("nats_per_dim = {}", report.nats_per_dim);
    if let Some(o) = &other {
        say!("compare_bits_per_dim = {}", o.bits_per_dim);
    }
    match &args.out {
        Some(path) => atomic_write(path, csv.as_bytes())?,
        None => emit(&csv),
    }
    Ok(0)
}

fn metrics(args: MetricsArgs) -> Result<i32> {
    let real = FeatureSet::new(read_features(&args.real)?)?;
    let fake = FeatureSet::new(read_features(&args.fake)?)?;
    let record = evaluate(&real, &fake, args.k)?;
    let json = metrics_json(record, &file_name(&args.real), &file_name(&args.fake))?;
    if let Some(out) = &args.out {
        atomic_write(out, format!("{json}\n").as_bytes())?;
    }
    say!("{json}");
    Ok(0)
}

fn schedule_dump(args: DumpArgs) -> Result<i32> {
    let desc = match args.kind {
        KindArg::Cosine => {
            if args.beta_start.is_some() || args.beta_end.is_some() {
                return Err(Error::Config(
                    "--beta-start/--beta-end apply to the linear schedule".into(),
                ));
            }
            ScheduleDescriptor::Cosine {
                steps: args.steps,
                s: args.s.unwrap_or(COSINE_S),
            }
        }
        KindArg::Linear => {
            if args.s.is_some() {
                return Err(Error::Config("--s applies to the cosine schedule".into()));
            }
            let ScheduleDescriptor::Linear {
                beta_start,
                beta_end,
                ..
            } = ScheduleDescriptor::linear_rescaled(args.steps)
            else {
                unreachable!("linear_rescaled is linear")
            };
            ScheduleDescriptor::Linear {
                steps: args.steps,
                beta_start: args.beta_start.unwrap_or(beta_start),
                beta_end: args.beta_end.unwrap_or(beta_end),
            }
        }
    };
    let parent = desc.build().map_err(|e| Error::Config(e.to_string()))?;
    let mut comment = match desc {
        ScheduleDescriptor::Cosine { steps, s } => {
            format!("kind = cosine\nsteps = {steps}\ns = {s}")
        }
        ScheduleDescriptor::Linear {
            steps,
            beta_start,
            beta_end,
        } => format!(
            "kind = linear\nsteps = {steps}\nbeta_start = {beta_start}\nbeta_end = {beta_end}"
        ),
    };
    let sched = match args.stride {
        Some(k) => {
            let spec = StrideSpec::new(args.steps, k, args.mode)
                .map_err(|e| Error::Config(e.to_string()))?;
            let _ = write!(
                comment,
                "\nstride = {k}\nmode = {}\neffective_steps = {}",
                args.mode,
                spec.len()
            );
            parent.respace(&spec)?
        }
        None => parent,
    };
    let k = sched.steps();
    let mut table = Array2::zeros((k, 6));
    for (i, mut row) in table.rows_mut().into_iter().enumerate() {
        let t = i + 1;
        let (beta, bt) = (sched.beta(t), sched.posterior_variance(t));
        row[0] = sched.model_timestep(t) as f64;
        row[1] = beta;
        row[2] = sched.alpha(t);
        row[3] = sched.alphabar(t);
        row[4] = bt;
        row[5] = bt / beta;
    }
    let csv = encode_csv(
        Some(&comment),
        &["t", "beta", "alpha", "alphabar", "beta_tilde", "ratio"],
        &table,
    );
    match &args.out {
        Some(path) => atomic_write(path, csv.as_bytes())?,
        None => emit(&csv),
    }
    Ok(0)
}

fn parse_widths(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|w| {
            w.trim().parse().map_err(|_| {
                Error::Config(format!("--hidden expects widths like 8,8, got `{spec}`"))
            })
        })
        .collect()
}

fn gradcheck(args: GradcheckArgs) -> Result<i32> {
    let net_config = NetConfig::new(args.dims, parse_widths(&args.hidden)?, args.timesteps);
    net_config
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    if args.batch == 0 {
        return Err(Error::Config("--batch must be at least 1".into()));
    }
    let sched = NoiseSchedule::cosine(args.timesteps, COSINE_S)?;
    // Random rather than initial weights: the zero-initialised output layer hides
    // most of the network from the check.
    let params = NetParams::random(&net_config, &mut stream(args.seed, Stream::Init));
    let net = ToyNet::new(net_config, params)?;
    let mut rng = stream(args.seed, Stream::Batches);
    let x0 = crate::sampling::standard_normal(args.batch, args.dims, &mut rng);
    let eps = crate::sampling::standard_normal(args.batch, args.dims, &mut rng);
    // Spread the rows from t = 1 (decoder) to t = T.
    let t: Vec<usize> = (0..args.batch)
        .map(|i| 1 + i * (args.timesteps - 1) / (args.batch - 1).max(1))
        .collect();
    let batch = TrainBatch::new(x0, None, t, eps, &sched)?;
    let objectives = match args.objective {
        Some(o) => vec![o],
        None => vec![Objective::Simple, Objective::Vlb, Objective::Hybrid],
    };
    say!("parameters = {}", net.params.len());
    let mut worst: f64 = 0.0;
    for obj in objectives {
        let report = grad_check(&net, &sched, &LossConfig::new(obj), &batch, args.h)?;
        say!(
            "{obj}: max_rel_error = {:.3e} (block {}, index {}, {} checked)",
            report.max_rel_error,
            report.worst_block,
            report.worst_index,
            report.checked
        );
        worst = worst.max(report.max_rel_error);
    }
    say!("max_rel_error = {worst:.3e}");
    Ok(if worst < GRAD_CHECK_TOLERANCE { 0 } else { 2 })
}

fn noisescale(args: NoiseScaleArgs) -> Result<i32> {
    let loaded = load(&args.ckpt)?;
    let x = read_features(&args.data)?;
    if x.ncols() != loaded.ckpt.net.config.input_dims {
        return Err(Error::Config(format!(
            "{} has {} columns, the model expects {}",
            file_name(&args.data),
            x.ncols(),
            loaded.ckpt.net.config.input_dims
        )));
    }
    if loaded.ckpt.net.config.is_conditional() {
        return Err(Error::Config(
            "noisescale needs labels; use an unconditional checkpoint".into(),
        ));
    }
    let data = DataBatch::unlabeled(x);
    let mut loss = loaded.run.train.loss;
    if let Some(obj) = args.objective {
        let mut fresh = LossConfig::new(obj);
        fresh.decoder = loss.decoder;
        loss = fresh;
    }
    let mut config: TrainConfig = loaded.run.train;
    config.seed = args.seed;
    config.loss = loss;
    let trainer = Trainer::with_net(loaded.ckpt.net, loaded.schedule, config)?;
    let est = trainer.grad_noise_scale(&data, &loss, args.small, args.big, args.repeats)?;
    say!(
        "# model = {}\n# data = {}\n# objective = {}\n# small = {}\n# big = {}\n# repeats = {}\n# seed = {}",
        file_name(&args.ckpt),
        file_name(&args.data),
        loss.objective,
        args.small,
        args.big,
        args.repeats,
        args.seed
    );
    say!("b_simple = {}", est.b_simple);
    say!("grad_sq = {}", est.grad_sq);
    say!("trace = {}", est.trace);
    Ok(0)
}
