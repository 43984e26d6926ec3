use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use liconet::conv::Activation;
use liconet::format::{load_model, save_model, Model, ModelFile};
use liconet::frontend::stream_features;
use liconet::linearize::{check_linearizable, linearize_network, LinearizabilityReport};
use liconet::model::{
    build_lico_net, build_mlp, count_macs_per_step, count_params, ConvNet, Network,
};
use liconet::quant::{calibrate_activations, quantize_network};
use liconet::runtime::{
    frame_end_seconds, verify_model, EngineKind, StreamRunner, DRIFT_TOL, LINEAR_TOL, STREAM_TOL,
};
use liconet::wav::read_wav_pcm16;
use liconet::{Result, Tensor2D};

#[derive(Parser)]
#[command(
    name = "liconet",
    version,
    about = "Streaming keyword spotting with linearized convolutions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Lico,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Large,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Conv,
    Linear,
    Int8,
}

impl From<EngineArg> for EngineKind {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Conv => EngineKind::Conv,
            EngineArg::Linear => EngineKind::Linear,
            EngineArg::Int8 => EngineKind::Int8,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a seeded random model.
    Init {
        #[arg(long, value_enum)]
        arch: Arch,
        #[arg(long, value_enum, default_value = "large")]
        preset: Preset,
        /// First-layer stride (default: the preset's).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print params, MACs per step, receptive field and the layer table.
    Info { model: PathBuf },
    /// Check whether the model linearizes at a chunk size.
    Check {
        model: PathBuf,
        #[arg(long)]
        chunk: usize,
    },
    /// Rewrite a float conv model as linear stages.
    Linearize {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate on a WAV file and write an int8 model.
    Quantize {
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a WAV file and print detection events.
    Run {
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        engine: EngineArg,
        #[arg(long)]
        threshold: Option<f32>,
        /// Write one line per step: `idx p0 p1 ...`.
        #[arg(long)]
        posteriors: Option<PathBuf>,
    },
    /// Run the equivalence suites on seeded random features.
    Verify {
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(liconet::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::None => "none",
        Activation::Relu => "relu",
    }
}

fn init(arch: Arch, preset: Preset, stride: Option<usize>, seed: u64) -> Result<Network> {
    Ok(match (arch, preset) {
        (Arch::Lico, Preset::Large) => {
            build_lico_net(40, 5, 32, 6, 5, stride.unwrap_or(1), 11, seed)?.into()
        }
        (Arch::Lico, Preset::Small) => {
            build_lico_net(40, 5, 16, 4, 4, stride.unwrap_or(3), 11, seed)?.into()
        }
        (Arch::Mlp, p) => {
            let h1 = if matches!(p, Preset::Large) { 80 } else { 40 };
            build_mlp(21, 40, h1, 320, 11, seed)?
                .with_first_stride(stride.unwrap_or(1))?
                .into()
        }
    })
}

// name, op, in, out, K, s, activation, params
type Row = (
    String,
    &'static str,
    usize,
    usize,
    usize,
    usize,
    &'static str,
    usize,
);

fn info(file: &ModelFile) -> Result<()> {
    let m = &file.model;
    let rows: Vec<Row> = match m {
        Model::Float(net) => net
            .layers()
            .iter()
            .map(|l| {
                let c = l.layer;
                (
                    l.name.clone(),
                    "conv1d",
                    c.in_channels(),
                    c.out_channels(),
                    c.kernel(),
                    c.stride(),
                    act_name(c.activation()),
                    c.param_count(),
                )
            })
            .collect(),
        Model::Linearized(n) => n
            .stages()
            .iter()
            .map(|s| {
                let l = s.linear();
                (
                    s.name().into(),
                    "linear",
                    s.in_channels(),
                    l.out_dim(),
                    s.kernel(),
                    s.stride(),
                    act_name(l.activation()),
                    l.weights().len() + l.bias().len(),
                )
            })
            .collect(),
        Model::Quantized(n) => n
            .stages()
            .iter()
            .map(|s| {
                let l = s.layer();
                (
                    s.name().into(),
                    "linear_int8",
                    s.in_channels(),
                    l.out_dim(),
                    s.kernel(),
                    s.stride(),
                    act_name(l.activation()),
                    l.weights().len() + l.bias().len(),
                )
            })
            .collect(),
    };
    let params: usize = match m {
        Model::Float(net) => count_params(net),
        _ => rows.iter().map(|r| r.7).sum(),
    };
    let macs = match m {
        Model::Float(net) => count_macs_per_step(net)
            .map(|v| v.to_string())
            .unwrap_or_else(|e| format!("n/a ({e})")),
        Model::Linearized(n) => n.macs_per_step().to_string(),
        Model::Quantized(n) => n.macs_per_step().to_string(),
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "params {params}, macs {macs}")?;
    writeln!(out, "kind {}", m.kind())?;
    writeln!(out, "receptive_field {}", m.receptive_field())?;
    writeln!(out, "first_stride {}", m.first_stride())?;
    writeln!(out, "classes {}", m.n_classes())?;
    writeln!(out)?;
    writeln!(
        out,
        "{:<16} {:<12} {:>6} {:>6} {:>3} {:>3} {:<5} {:>8} {:>8}",
        "layer", "op", "in", "out", "K", "s", "act", "params", "macs"
    )?;
    for (name, op, c, d, k, s, act, p) in rows {
        writeln!(
            out,
            "{name:<16} {op:<12} {c:>6} {d:>6} {k:>3} {s:>3} {act:<5} {p:>8} {:>8}",
            c * k * d
        )?;
    }
    Ok(())
}

fn check(file: &ModelFile, chunk: usize) -> LinearizabilityReport {
    match &file.model {
        Model::Float(net) => check_linearizable(net, chunk),
        m => {
            let ok = m.first_stride() == chunk;
            LinearizabilityReport {
                compliant: ok,
                violations: if ok {
                    vec![]
                } else {
                    vec![liconet::linearize::Violation {
                        layer: "input".into(),
                        reason: format!(
                            "model is fixed to chunk size {}, not {chunk}",
                            m.first_stride()
                        ),
                    }]
                },
            }
        }
    }
}

fn features_of(path: &PathBuf, file: &ModelFile) -> Result<Tensor2D> {
    let pcm = read_wav_pcm16(path, file.frontend.sample_rate)?;
    let frames = stream_features(&pcm, &file.frontend)?;
    if frames.is_empty() {
        return Err(liconet::Error::Calibration(format!(
            "{} is shorter than one frame",
            path.display()
        )));
    }
    Tensor2D::from_columns(file.frontend.n_mels, &frames)
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Init {
            arch,
            preset,
            stride,
            seed,
            out,
        } => {
            let net = init(arch, preset, stride, seed)?;
            save_model(&ModelFile::with_defaults(Model::Float(net)), &out)?;
        }
        Cmd::Info { model } => info(&load_model(model)?)?,
        Cmd::Check { model, chunk } => {
            let report = check(&load_model(model)?, chunk);
            if report.compliant {
                println!("compliant");
            } else {
                println!("not linearizable");
                for v in &report.violations {
                    println!("  {}: {}", v.layer, v.reason);
                }
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Linearize { model, out } => {
            let file = load_model(model)?;
            let Model::Float(net) = &file.model else {
                return Err(liconet::Error::Config(format!(
                    "{} model is already linear",
                    file.model.kind()
                )));
            };
            let lnet = linearize_network(net, net.first_stride())?;
            save_model(
                &ModelFile {
                    model: Model::Linearized(lnet),
                    ..file.clone()
                },
                out,
            )?;
        }
        Cmd::Quantize { model, calib, out } => {
            let file = load_model(model)?;
            let lnet = match &file.model {
                Model::Float(net) => linearize_network(net, net.first_stride())?,
                Model::Linearized(l) => l.clone(),
                Model::Quantized(_) => {
                    return Err(liconet::Error::Config("model is already quantized".into()))
                }
            };
            let x = features_of(&calib, &file)?;
            let q = quantize_network(&lnet, &calibrate_activations(&lnet, &x)?)?;
            save_model(
                &ModelFile {
                    model: Model::Quantized(q),
                    ..file.clone()
                },
                out,
            )?;
        }
        Cmd::Run {
            model,
            wav,
            engine,
            threshold,
            posteriors,
        } => {
            let file = load_model(model)?;
            let pcm = read_wav_pcm16(&wav, file.frontend.sample_rate)?;
            let mut cfg = file.decoder.clone();
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            let mut runner = StreamRunner::new(&file, engine.into(), cfg)?;
            let outputs = runner.push(&pcm)?;
            let mut stdout = std::io::stdout().lock();
            for o in &outputs {
                if let Some(e) = &o.event {
                    writeln!(
                        stdout,
                        "t={:.2} score={:.6}",
                        frame_end_seconds(e.end_timestamp, &file),
                        e.score
                    )?;
                }
            }
            if let Some(path) = posteriors {
                let mut w = BufWriter::new(File::create(path)?);
                for (i, o) in outputs.iter().enumerate() {
                    write!(w, "{i}")?;
                    for p in &o.posterior.probs {
                        write!(w, " {p:.6}")?;
                    }
                    writeln!(w)?;
                }
                w.flush()?;
            }
        }
        Cmd::Verify { model, steps, seed } => {
            let file = load_model(model)?;
            let r = verify_model(&file.model, steps, seed)?;
            println!("steps {}", r.steps);
            let line = |name: &str, v: Option<f32>, tol: f32| {
                if let Some(v) = v {
                    let verdict = if v <= tol { "ok" } else { "FAIL" };
                    println!("{name} {v:.3e} (tol {tol:e}) {verdict}");
                }
            };
            line("stream_vs_batch", r.stream_vs_batch, STREAM_TOL);
            line("linear_vs_stream", r.linear_vs_stream, LINEAR_TOL);
            line("quant_drift", r.quant_drift, DRIFT_TOL);
            if let Some(ok) = r.macs_match {
                println!("macs_match {}", if ok { "ok" } else { "FAIL" });
            }
            if let Some(ok) = r.int8_deterministic {
                println!("int8_deterministic {}", if ok { "ok" } else { "FAIL" });
            }
            if !r.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
