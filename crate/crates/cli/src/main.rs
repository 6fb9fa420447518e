//! `jhcodec` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use jhcodec::bench::{self, WallClock};
use jhcodec::checkpoint::{self, CODEC_MAGIC, EXTRACTOR_MAGIC};
use jhcodec::gradcheck::{GradCheckReport, DEFAULT_TOLERANCE};
use jhcodec::ssr::{self, DistillPlan};
use jhcodec::train::{self, SyntheticDataset, TrainPlan};
use jhcodec::{bitstream, wav, Codec, CodecConfig, FeatureExtractor, Style};

#[derive(Parser, Debug)]
#[command(name = "jhcodec", version, about = "Streaming residual-VQ speech codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// WAV to .jhc bitstream.
    Encode(EncodeArgs),
    /// .jhc bitstream to WAV.
    Decode(DecodeArgs),
    /// Train a codec on synthetic clips.
    Train(TrainArgs),
    /// Distill a student feature extractor from a frozen teacher.
    Distill(DistillArgs),
    /// MAC count, latency and real-time factor.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Describe a .jhc, JHCK or JHSW file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StyleArg {
    Dac,
    Mimi,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Dac => Style::Dac,
            StyleArg::Mimi => Style::Mimi,
        }
    }
}

/// Model selection shared by every command that builds a codec.
#[derive(Args, Debug)]
struct ModelArgs {
    /// Codec checkpoint; its stored config wins over --preset/--config/--style.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Base configuration before --config overrides.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// key=value file with CodecConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    style: Option<StyleArg>,
    /// Seed for fresh initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn codec_config(&self) -> Result<CodecConfig> {
        let base = match self.preset {
            Preset::Toy => CodecConfig::toy(),
            Preset::Paper => CodecConfig::paper(),
        };
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                CodecConfig::parse_with_base(&text, base)?
            }
            None => base,
        };
        if let Some(s) = self.style {
            cfg.style = s.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn codec(&self) -> Result<Codec> {
        match &self.ckpt {
            Some(p) => checkpoint::load_codec(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(Codec::new(self.codec_config()?, self.seed)?),
        }
    }
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Quantizer levels to transmit; defaults to all.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Decode only the first k levels of the stream.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// key=value TrainPlan overrides.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Frozen teacher (JHSW); a seeded surrogate is used otherwise.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss curve.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print every n-th step; 0 is silent.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Output student (JHSW).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Held-out clips for the final cosine similarity.
    #[arg(long, default_value_t = 16)]
    eval_clips: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    k: Option<usize>,
    /// Analytical MAC count only; no model is built.
    #[arg(long)]
    macs_only: bool,
    #[arg(long, default_value_t = 50)]
    latency_frames: usize,
    #[arg(long, default_value_t = 2.0)]
    rtf_seconds: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// One of autodiff, nnet, rvq, losses, ssr, codec, or all.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Element type of the checked build. The encoder-to-loss chain needs f64.
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let codec = a.model.codec()?;
    let cfg = &codec.config;
    let k = a.k.unwrap_or(cfg.num_quantizers);
    let samples = wav::read_wav(&a.input, cfg.sample_rate).with_context(|| format!("reading {}", a.input.display()))?;
    let enc = codec.encode(&samples, k)?;
    let header = bitstream::BitstreamHeader::for_grid(&enc.grid, cfg.style, cfg.num_quantizers, cfg.codebook_size, enc.pad_samples);
    let bytes = bitstream::pack(&enc.grid, &header)?;
    std::fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "{} frames x {} levels, {} bytes, {} bit/s",
        enc.grid.frames(),
        k,
        bytes.len(),
        header.bitrate()
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let codec = a.model.codec()?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (header, grid) = bitstream::unpack(&bytes)?;
    let cfg = &codec.config;
    if header.codebook_size as usize != cfg.codebook_size || header.num_quantizers as usize != cfg.num_quantizers {
        bail!(
            "stream was made for K={} V={}, model has K={} V={}",
            header.num_quantizers,
            header.codebook_size,
            cfg.num_quantizers,
            cfg.codebook_size
        );
    }
    let grid = match a.k {
        Some(k) => grid.truncate(k)?,
        None => grid,
    };
    let mut samples = codec.decode(&grid)?;
    let keep = samples.len().saturating_sub(header.pad_samples as usize);
    samples.truncate(keep);
    wav::write_wav(&a.out, &samples, cfg.sample_rate)?;
    eprintln!("{} samples", samples.len());
    Ok(())
}

fn teacher_for(path: Option<&Path>, cfg: &CodecConfig, seed: u64) -> Result<FeatureExtractor> {
    match path {
        Some(p) => {
            let phi = checkpoint::load_extractor(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(phi.freeze())
        }
        None => Ok(ssr::make_surrogate_teacher(seed.wrapping_add(1000), cfg)?),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut codec = a.model.codec()?;
    let base = TrainPlan {
        seed: a.model.seed,
        ..TrainPlan::toy(a.steps)
    };
    let plan = match &a.plan {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainPlan::parse_with_base(&text, base)?
        }
        None => base,
    };
    let phi = teacher_for(a.teacher.as_deref(), &codec.config, a.model.seed)?;
    let data = SyntheticDataset::new(plan.seed, plan.clip_len, codec.config.sample_rate);
    let mut csv = match &a.csv {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            writeln!(w, "{}", train::CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let mut io_err = None;
    let result = train::train_codec(&mut codec, &plan, &data, Some(&phi), |s| {
        if let Some(w) = csv.as_mut() {
            if let Err(e) = writeln!(w, "{}", s.csv_row()) {
                io_err.get_or_insert(e);
            }
        }
        if a.log_every > 0 && s.step % a.log_every == 0 {
            eprintln!(
                "step {:5} {:?} k={} mel {:.4} ssrr {:.4} total {:.4} |g| {:.2}",
                s.step, s.phase, s.k, s.report.mel, s.report.ssrr, s.report.total, s.grad_norm
            );
        }
    });
    // The last good parameters are saved even when training aborts.
    checkpoint::save_codec(&codec, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(mut w) = csv {
        w.flush()?;
    }
    if let Some(e) = io_err {
        return Err(e).context("writing loss curve");
    }
    let report = result?;
    let n = report.curve.len();
    if n > 0 {
        let tail = n.saturating_sub(100)..n;
        eprintln!(
            "final 100-step means: mel {:.4} ssrr {:.4} total {:.4}",
            report.mean(tail.clone(), |s| s.report.mel),
            report.mean(tail.clone(), |s| s.report.ssrr),
            report.mean(tail, |s| s.report.total)
        );
        let clips: Vec<_> = (0..16).map(|i| data.clip(1_000_000 + i)).collect();
        let usage = train::codebook_usage(&codec, &clips)?;
        eprintln!("codebook usage per level: {usage:.2?}");
    }
    Ok(())
}

fn distill(a: DistillArgs) -> Result<()> {
    let cfg = a.model.codec_config()?;
    let teacher = teacher_for(a.teacher.as_deref(), &cfg, a.model.seed)?;
    let plan = DistillPlan {
        steps: a.steps,
        seed: a.model.seed,
        ..DistillPlan::default()
    };
    let data = SyntheticDataset::new(plan.seed, plan.clip_len, cfg.sample_rate);
    let (student, report) = ssr::distill_student(&teacher, &cfg, &data, &plan)?;
    checkpoint::save_extractor(&student, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.csv {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "step,cosine_distance")?;
        for (i, v) in report.curve.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        w.flush()?;
    }
    let held_out = SyntheticDataset::new(plan.seed ^ 0xdead_beef, plan.clip_len, cfg.sample_rate);
    let clips: Vec<_> = (0..a.eval_clips as u64).map(|i| held_out.clip(i)).collect();
    let cos = ssr::mean_cosine(&student, &teacher, &clips)?;
    println!("held-out mean cosine similarity {cos:.4}");
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    if a.macs_only {
        let cfg = match &a.model.ckpt {
            Some(_) => a.model.codec()?.config,
            None => a.model.codec_config()?,
        };
        let b = bench::mac_breakdown(&cfg);
        println!("framer    {:>14}", b.framer);
        println!("encoder   {:>14}", b.encoder);
        println!("quantizer {:>14}", b.quantizer);
        println!("decoder   {:>14}", b.decoder);
        println!("deframer  {:>14}", b.deframer);
        println!("MAC (G)   {:>14.3}", bench::count_macs(&cfg));
        return Ok(());
    }
    let codec = a.model.codec()?;
    let k = a.k.unwrap_or(codec.config.num_quantizers);
    let report = bench::cost_report(&codec, k, a.latency_frames, a.rtf_seconds, &WallClock::default())?;
    print!("{}", report.table());
    if let Some(p) = &a.csv {
        std::fs::write(p, format!("{}\n{}\n", bench::CostReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let module = a.module.as_str();
    let known = jhcodec::gradcheck::suites::MODULES;
    if module != "all" && !known.contains(&module) {
        bail!("unknown module {module:?}; expected one of {known:?} or all");
    }
    let rows: Vec<(String, Row)> = match a.precision {
        Precision::F32 => collect(module, a.seed, jhcodec::gradcheck::suites::run_module, |r: &GradCheckReport| {
            (r.name.clone(), r.max_rel_err as f64, r.checked, r.worst.clone())
        })?,
        Precision::F64 => collect(module, a.seed, jhcodec64::gradcheck::suites::run_module, |r: &jhcodec64::gradcheck::GradCheckReport| {
            (r.name.clone(), r.max_rel_err, r.checked, r.worst.clone())
        })?,
    };
    let tol = DEFAULT_TOLERANCE as f64;
    let mut csv = String::from("module,check,max_rel_err,checked,worst,pass\n");
    let mut failed = 0;
    for (m, (name, err, checked, worst)) in &rows {
        let pass = err.is_finite() && *err < tol;
        failed += usize::from(!pass);
        println!(
            "{:4} {m:8} {name:24} {err:.3e} over {checked:5} coords (worst {worst})",
            if pass { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{m},{name},{err:e},{checked},{worst},{pass}\n"));
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, csv)?;
    }
    if failed > 0 {
        bail!("{failed} check(s) above relative error {tol:e}");
    }
    Ok(())
}

type Row = (String, f64, usize, String);

fn collect<R, E: std::error::Error + Send + Sync + 'static>(
    module: &str,
    seed: u64,
    run: fn(&str, u64) -> std::result::Result<Vec<R>, E>,
    row: impl Fn(&R) -> Row,
) -> Result<Vec<(String, Row)>> {
    let modules: Vec<&str> = if module == "all" {
        jhcodec::gradcheck::suites::MODULES.to_vec()
    } else {
        vec![module]
    };
    let mut out = Vec::new();
    for m in modules {
        for r in run(m, seed)? {
            out.push((m.to_string(), row(&r)));
        }
    }
    Ok(out)
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let magic: [u8; 4] = bytes.get(..4).and_then(|m| m.try_into().ok()).unwrap_or_default();
    if magic == bitstream::MAGIC {
        let (h, grid) = bitstream::unpack(&bytes)?;
        println!("bitstream v{}", h.version);
        println!("style          {:?}", h.style);
        println!("levels         {} of {}", h.k, h.num_quantizers);
        println!("codebook size  {}", h.codebook_size);
        println!("frame rate     {} Hz", h.frame_rate);
        println!("frames         {}", h.frame_count);
        println!("pad samples    {}", h.pad_samples);
        println!("bitrate        {} bit/s", h.bitrate());
        println!("payload bytes  {}", h.payload_len());
        let preview: Vec<_> = (0..grid.frames().min(4)).map(|f| grid.frame(f).to_vec()).collect();
        println!("first frames   {preview:?}");
    } else if magic == CODEC_MAGIC || magic == EXTRACTOR_MAGIC {
        let (config, tensors) = checkpoint::read_sections(&bytes, magic)?;
        let kind = if magic == CODEC_MAGIC { "codec" } else { "feature extractor" };
        let params: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        println!("{kind} checkpoint, {} tensors, {params} values", tensors.len());
        for line in config.lines() {
            println!("  {line}");
        }
        let store = match magic {
            m if m == CODEC_MAGIC => checkpoint::codec_from_bytes(&bytes)?.store,
            _ => checkpoint::extractor_from_bytes(&bytes)?.store,
        };
        println!("checksum {:016x}", store.checksum());
        if magic == CODEC_MAGIC {
            let cfg: CodecConfig = config.parse()?;
            println!(
                "bitrate at k={} {:.0} bit/s, {:.3} GMAC/s",
                cfg.num_quantizers,
                cfg.bitrate(cfg.num_quantizers),
                bench::count_macs(&cfg)
            );
        }
    } else {
        bail!("{}: unrecognized magic {:?}", a.input.display(), String::from_utf8_lossy(&magic));
    }
    Ok(())
}
