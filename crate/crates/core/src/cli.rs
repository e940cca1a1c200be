//! Command-line front end. [`run_cli`] returns the process exit code:
//! 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config_file, render_config, resolve, Settings};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageBuffer, Role};
use crate::metrics::evaluate;
use crate::resampling::{bicubic_upsample, downsample};
use crate::selftest::run_selftest;
use crate::training::{run_optimization_with, write_log, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mipsr", version, about = "Unsupervised reference-guided super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Super-resolve an LSR image guided by an HR reference.
    Sr(SrArgs),
    /// Print PSNR, SSIM, VIF and ERGAS of `b` against `a` as JSON.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Lanczos-3 downsample (simulates the low-resolution acquisition).
    Downsample(Resize),
    /// Bicubic upsample baseline.
    Baseline(Resize),
    /// Run the gradient-check and kernel-oracle suites.
    Selftest,
}

#[derive(Args, Debug)]
struct Resize {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SrArgs {
    #[arg(long)]
    lsr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground truth; when given, metrics of the result are printed as JSON.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Loss log destination, one `iter<TAB>loss_sr<TAB>loss_ref` line per record.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Any config key, e.g. `--set lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl SrArgs {
    fn overrides(&self) -> Result<Settings> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(v) = self.scale {
            out.push(("scale".into(), v.to_string()));
        }
        if let Some(v) = self.iters {
            out.push(("iterations".into(), v.to_string()));
        }
        if let Some(v) = self.seed {
            out.push(("seed".into(), v.to_string()));
        }
        Ok(out)
    }

    /// Defaults < config file < flags.
    fn config(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => load_config_file(p)?,
            None => Vec::new(),
        };
        resolve(&file, &self.overrides()?)
    }
}

/// Crops the LSR to a multiple of `2^levels` and the reference to `t` times that.
pub fn prepare_inputs(cfg: &RunConfig, lsr: &ImageBuffer, reference: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    let (lsr_c, lsr_off) = lsr.center_crop_to_multiple(cfg.generator.multiple())?;
    let t = cfg.scale;
    let (ref_c, ref_off) = reference
        .center_crop(t * lsr_c.height(), t * lsr_c.width())
        .map_err(|_| {
            Error::invalid(
                "sr",
                format!(
                    "reference {}x{} is smaller than {t} x the cropped LSR {}x{}",
                    reference.height(),
                    reference.width(),
                    lsr_c.height(),
                    lsr_c.width()
                ),
            )
        })?;
    if lsr_c.shape() != lsr.shape() {
        eprintln!("lsr cropped to {}x{} at offset {lsr_off:?}", lsr_c.height(), lsr_c.width());
    }
    if ref_c.shape() != reference.shape() {
        eprintln!("ref cropped to {}x{} at offset {ref_off:?}", ref_c.height(), ref_c.width());
    }
    Ok((lsr_c, ref_c))
}

fn sr(args: &SrArgs) -> Result<()> {
    let cfg = args.config()?;
    if args.print_config {
        print!("{}", render_config(&cfg));
        return Ok(());
    }
    eprint!("{}", render_config(&cfg));
    let lsr = load_image(&args.lsr, Role::Lsr)?;
    let reference = load_image(&args.reference, Role::Reference)?;
    let (lsr, reference) = prepare_inputs(&cfg, &lsr, &reference)?;
    let out = run_optimization_with::<f32>(&cfg, &lsr, &reference, |_, step| {
        if cfg.logs_iteration(step.iteration) {
            eprintln!("iter {:>6}  loss_sr {:.4e}  loss_ref {:.4e}", step.iteration, step.loss_sr, step.loss_ref);
        }
    })?;
    save_image(&out.sr, &args.out)?;
    if let Some(p) = &args.log {
        let mut f = std::fs::File::create(p)?;
        write_log(&out.log, &mut f)?;
    }
    if let Some(p) = &args.gt {
        let gt = load_image(p, Role::GroundTruth)?;
        let (gt, _) = gt.center_crop(out.sr.height(), out.sr.width())?;
        println!("{}", evaluate(&gt, &out.sr, cfg.scale)?.to_json());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Sr(args) => sr(&args)?,
        Command::Metrics { a, b, scale } => {
            let a = load_image(a, Role::GroundTruth)?;
            let b = load_image(b, Role::Sr)?;
            println!("{}", evaluate(&a, &b, scale)?.to_json());
        }
        Command::Downsample(r) => {
            let img = load_image(&r.input, Role::GroundTruth)?;
            let (img, _) = img.center_crop_to_multiple(r.scale)?;
            let low = downsample(&img.to_tensor::<f64>(), r.scale)?;
            save_image(&ImageBuffer::from_tensor(&low, Role::Lsr)?, &r.out)?;
        }
        Command::Baseline(r) => {
            let img = load_image(&r.input, Role::Lsr)?;
            let up = bicubic_upsample(&img.to_tensor::<f64>(), r.scale)?;
            save_image(&ImageBuffer::from_tensor(&up, Role::Sr)?, &r.out)?;
        }
        Command::Selftest => {
            let mut stdout = std::io::stdout();
            let ok = run_selftest(&mut stdout)?;
            stdout.flush()?;
            return Ok(ok);
        }
    }
    Ok(true)
}

pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
