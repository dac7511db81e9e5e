use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use privshape::commands::{client_sequence, cmd_gen, cmd_run, cmd_sweep, cmd_transform, RUN_SCHEMA};
use privshape::config::{ConfigOverrides, ExperimentConfig};
use privshape::transport::{connect, serve, ServeOptions};
use privshape::ucr::write_ucr;
use privshape_core::eval::WaveVariant;
use privshape_core::ShapeTransform;

#[derive(Parser)]
#[command(name = "privshape", version, about = "Frequent time-series shapes under local differential privacy")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        self.overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(clap::Args)]
struct TransformArgs {
    #[arg(long, default_value_t = 4)]
    t: usize,
    #[arg(long, default_value_t = 10)]
    w: usize,
    /// Keep repeated symbols.
    #[arg(long)]
    no_compress: bool,
    /// Bin raw values into the fixed eight bins instead of SAX.
    #[arg(long)]
    no_sax: bool,
}

impl TransformArgs {
    fn transform(&self) -> anyhow::Result<ShapeTransform> {
        if self.no_sax {
            return Ok(ShapeTransform::fixed_bins(!self.no_compress));
        }
        let mut tf = ShapeTransform::compressive_sax(self.t, self.w)?;
        tf.compress = !self.no_compress;
        Ok(tf)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run seeded trials and print metrics and shapes as CSV.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every report, one per line.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Print the symbol string of every instance in a UCR file.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        shape: TransformArgs,
    },
    /// Generate sine/cosine waves as a UCR file.
    Gen {
        #[arg(long, default_value = "trig")]
        kind: String,
        #[arg(long, default_value_t = 20_000)]
        count: usize,
        #[arg(long, value_delimiter = ',', default_value = "200")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// full: one period per instance; prefix: prefixes of a 1000-point period.
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One CSV row of mean and std per parameter value.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// epsilon, t or w.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one protocol instance for networked clients.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        users: usize,
        /// Number of classes clients may label with (classification only).
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Seconds to wait for a round's reports.
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Join a served run as one user.
    Client {
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        /// Symbol string, e.g. acba.
        #[arg(long)]
        sequence: Option<String>,
        /// Comma-separated raw values, transformed locally.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        label: Option<u32>,
        #[command(flatten)]
        shape: TransformArgs,
    },
}

fn emit(out: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Run {
            config,
            out,
            transcript,
        } => {
            let cfg = config.load()?;
            let report = cmd_run(&cfg)?;
            emit(out.as_ref(), &report.csv)?;
            if let Some(p) = transcript {
                fs::write(&p, &report.transcript).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Cmd::Transform { input, shape } => {
            let text = cmd_transform(&input, &shape.transform()?).with_context(|| format!("reading {}", input.display()))?;
            emit(None, &text)?;
        }
        Cmd::Gen {
            kind,
            count,
            lengths,
            noise,
            variant,
            seed,
            out,
        } => {
            if kind != "trig" {
                bail!("unknown dataset kind {kind:?} (only trig is supported)");
            }
            let variant = match variant.as_str() {
                "full" => WaveVariant::FullPeriod,
                "prefix" => WaveVariant::Prefix,
                other => bail!("unknown variant {other:?} (expected full or prefix)"),
            };
            let ds = cmd_gen(count, &lengths, noise, variant, seed)?;
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_ucr(&ds, std::io::BufWriter::new(file))?;
        }
        Cmd::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = config.load()?;
            emit(out.as_ref(), &cmd_sweep(&cfg, &param, &values)?)?;
        }
        Cmd::Serve {
            config,
            listen,
            users,
            classes,
            timeout,
            transcript,
        } => {
            let cfg = config.load()?;
            let protocol = cfg.protocol(classes, cfg.seed)?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            log::info!("listening on {}", listener.local_addr()?);
            let opts = ServeOptions {
                users,
                round_timeout: Duration::from_secs(timeout),
            };
            let outcome = serve(&listener, protocol, &opts)?;
            let mut text = String::from("shape,count,label\n");
            for (i, (s, c)) in outcome.result.shapes.iter().zip(&outcome.result.counts).enumerate() {
                let label = outcome.result.labels.as_ref().map_or_else(String::new, |l| l[i].to_string());
                text.push_str(&format!("{s},{c},{label}\n"));
            }
            emit(None, &text)?;
            if let Some(p) = transcript {
                let mut t = format!("{RUN_SCHEMA}\n");
                for r in &outcome.transcript {
                    t.push_str(&format!("{r}\n"));
                }
                fs::write(&p, t)?;
            }
        }
        Cmd::Client {
            connect: addr,
            sequence,
            values,
            label,
            shape,
        } => {
            let seq = client_sequence(sequence.as_deref(), values.as_deref(), &shape.transform()?)?;
            let outcome = connect(addr.as_str(), seq, label)?;
            println!("user {} ({})", outcome.assignment.user, outcome.assignment.group);
            for (s, c) in outcome.result.shapes.iter().zip(&outcome.result.counts) {
                println!("{s}\t{c}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
