use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gldfn::degradation::Setting;
use gldfn::harness::{self, gradcheck_suite, EvalOptions, TrainConfig};
use gldfn::Result;

#[derive(Parser)]
#[command(name = "gldfn", version, about = "Blind super-resolution with global and local dynamic filters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write degraded LR copies of every PNG in a directory.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        deg: Degradation,
    },
    /// Train a network on a directory of HR PNGs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config override, e.g. `--set train.iters=500`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score trained weights (or bicubic) on degraded copies of HR images.
    Eval {
        #[arg(long, required_unless_present = "bicubic")]
        weights: Option<PathBuf>,
        /// Score bicubic upsampling instead of a network.
        #[arg(long)]
        bicubic: bool,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        deg: Degradation,
        /// Table output; JSON lines go next to it with a `.jsonl` extension.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Border ignored by the metrics; defaults to the scale.
        #[arg(long)]
        shave: Option<usize>,
        /// Score all eight isotropic kernels.
        #[arg(long)]
        sweep: bool,
    },
    /// Super-resolve one PNG.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: usize,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Only run checks whose name contains this.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Degradation {
    #[arg(long, default_value = "iso")]
    setting: Setting,
    #[arg(long)]
    scale: usize,
    /// Noise level on the 0–255 scale (upper end of the band for `varying`).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Isotropic kernel, 1–8.
    #[arg(long, default_value_t = harness::DEFAULT_GAUSSIAN8_INDEX + 1)]
    kernel: usize,
}

impl Degradation {
    fn options(&self) -> Result<EvalOptions> {
        if !(1..=8).contains(&self.kernel) {
            return Err(gldfn::Error::InvalidArgument { op: "kernel", msg: format!("expected 1..=8, got {}", self.kernel) });
        }
        let mut o = EvalOptions::new(self.setting, self.scale);
        if let Some(s) = self.sigma {
            o.sigma = s;
        }
        o.seed = self.seed;
        o.kernel_index = self.kernel - 1;
        Ok(o)
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Degrade { input, out, deg } => {
            let written = harness::degrade_dataset(&input, &out, &deg.options()?)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Cmd::Train { config, data, out, overrides } => {
            let cfg = match config {
                Some(path) => TrainConfig::load(&path, &overrides)?,
                None => TrainConfig::parse("", &overrides)?,
            };
            let log = harness::train(&cfg, &data, &out)?;
            let tail = log.losses.len().min(100);
            let mean = log.losses[log.losses.len() - tail..].iter().map(|&l| l as f64).sum::<f64>() / tail.max(1) as f64;
            println!("trained {} iterations, final loss {mean:.5}, weights in {}", log.losses.len(), out.display());
        }
        Cmd::Eval { weights, bicubic, data, deg, report, shave, sweep } => {
            let mut opts = deg.options()?;
            opts.shave = shave;
            opts.sweep = sweep;
            let r = match (bicubic, weights) {
                (false, Some(w)) => harness::evaluate(&w, &data, &opts)?,
                _ => harness::evaluate_bicubic(&harness::HrPool::load_dir(&data)?, &opts)?,
            };
            print!("{}", r.to_table());
            if let Some(path) = report {
                harness::write_report(&r, &path)?;
            }
        }
        Cmd::Infer { weights, input, out, scale } => harness::infer(&weights, &input, &out, scale)?,
        Cmd::Gradcheck { module, seed } => {
            let cases: Vec<_> =
                gradcheck_suite::CASES.iter().filter(|c| module.as_deref().map_or(true, |m| c.name.contains(m))).collect();
            if cases.is_empty() {
                return Err(gldfn::Error::InvalidArgument {
                    op: "gradcheck",
                    msg: format!("no check matches {:?}", module.unwrap_or_default()),
                });
            }
            let mut all_ok = true;
            for case in cases {
                let t = Instant::now();
                let r = gradcheck_suite::run_case(case.name, seed)?;
                let ok = r.max_rel_error < case.tolerance;
                all_ok &= ok;
                println!(
                    "{:<5} {:<24} max_rel_err {:.3e} (< {:.0e})  {} coords  {:.2}s",
                    if ok { "PASS" } else { "FAIL" },
                    case.name,
                    r.max_rel_error,
                    case.tolerance,
                    r.checked,
                    t.elapsed().as_secs_f64()
                );
            }
            return Ok(all_ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
