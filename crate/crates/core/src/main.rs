use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use adapterseg::adapters::{plan_sites, AdaptedModel, AdapterKind, AdapterPlan, SiteDims, Variant};
use adapterseg::autodiff::inject_fault;
use adapterseg::data::{self, GeneratorSpec, Split};
use adapterseg::metrics::MetricsReport;
use adapterseg::model::{ModelConfig, Vlsm};
use adapterseg::run::{self, RunConfig};
use adapterseg::{checkpoint, checks, Error};

/// Adapter fine-tuning for a frozen vision-language segmentation model.
///
/// Exit codes: 0 ok, 1 check failure, 2 configuration or usage error,
/// 3 numerical abort. Set ADAPTERSEG_LOG to error, warn, info or debug.
#[derive(Parser)]
#[command(name = "adapterseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as PNG files plus a JSONL manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters as described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// JSON report path; defaults to eval_<split>.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form trainable-parameter count of an adapter plan.
    CountParams {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, value_enum)]
        adapter: AdapterArg,
        /// Defaults to vlc for dense adapters and vl for shallow ones.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Bottleneck width; defaults depend on preset and adapter kind.
        #[arg(long)]
        d_prime: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks of every op and the model.
    GradCheck {
        /// Only the end-to-end checks on the tiny model config.
        #[arg(long)]
        tiny_config: bool,
        /// Corrupt the backward rule of this op (to prove failures are caught).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print a run config with every default filled in.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ClipB,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    Sa,
    Da,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    V,
    Vl,
    Vlc,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::V => Variant::V,
            VariantArg::Vl => Variant::VL,
            VariantArg::Vlc => Variant::VLC,
        }
    }
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADAPTERSEG_LOG", "info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { seed, n, size, out } => gen_data(seed, n, size, &out),
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Eval { checkpoint, manifest, split, threshold, out } => {
            eval(&checkpoint, &manifest, split, threshold, out)
        }
        Command::CountParams { preset, adapter, variant, d_prime, json } => {
            count_params(preset, adapter, variant, d_prime, json)
        }
        Command::GradCheck { tiny_config, inject_fault: fault } => grad_check(tiny_config, fault),
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default()).map_err(Error::from)?);
            Ok(())
        }
    }
}

fn gen_data(seed: u64, n: usize, size: usize, out: &Path) -> Result<(), Failure> {
    let splits = data::generate(&GeneratorSpec { seed, n, size })?;
    let manifest = data::save(&splits, out)?;
    println!(
        "wrote {} samples (train {}, val {}, test {}) to {}",
        splits.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        manifest.display()
    );
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let outcome = run::execute(&cfg)?;
    let h = &outcome.history;
    println!(
        "stopped after {} epochs ({:?}); best val DSC {:.2} at epoch {}",
        h.epochs.len(),
        h.stop_reason,
        h.best_val_dsc,
        h.best_epoch
    );
    print!("{}", MetricsReport::table(&[("val", &outcome.val_report)]));
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn eval(ckpt: &Path, manifest: &Path, split: Split, threshold: f64, out: Option<PathBuf>) -> Result<(), Failure> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config { field: "threshold".into(), reason: format!("{threshold} is not in (0, 1)") }.into());
    }
    let model = checkpoint::load(ckpt)?;
    let splits = data::load(manifest)?;
    let report = run::evaluate(&model, splits.get(split), threshold)?;
    print!("{}", MetricsReport::table(&[(split.name(), &report)]));
    let path = out.unwrap_or_else(|| {
        ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval_{}.json", split.name()))
    });
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    std::fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!("report: {}", path.display());
    Ok(())
}

fn count_params(
    preset: Preset,
    adapter: AdapterArg,
    variant: Option<VariantArg>,
    d_prime: Option<usize>,
    json: bool,
) -> Result<(), Failure> {
    let kind = match adapter {
        AdapterArg::Sa => AdapterKind::Shallow,
        AdapterArg::Da => AdapterKind::Dense,
    };
    let variant: Variant = variant.map(Into::into).unwrap_or(match kind {
        AdapterKind::Dense => Variant::VLC,
        AdapterKind::Shallow => Variant::VL,
    });
    let (dims, default_dp) = match (preset, kind) {
        (Preset::ClipB, AdapterKind::Dense) => (SiteDims::clip_b(), 64),
        (Preset::ClipB, AdapterKind::Shallow) => (SiteDims::clip_b(), 512),
        (Preset::Toy, AdapterKind::Dense) => (SiteDims::from_config(&ModelConfig::toy()), 8),
        (Preset::Toy, AdapterKind::Shallow) => (SiteDims::from_config(&ModelConfig::toy()), 50),
    };
    let plan = AdapterPlan::new(variant, kind, d_prime.unwrap_or(default_dp));
    let sites = plan_sites(&plan, &dims)?;
    let total: u64 = sites.iter().map(|s| s.params).sum();
    let census = match preset {
        Preset::Toy => {
            let model = AdaptedModel::attach(plan.clone(), Vlsm::new(ModelConfig::toy(), 0)?, 0)?;
            Some(model.trainable_count())
        }
        Preset::ClipB => None,
    };
    let with_conditioning = if kind == AdapterKind::Shallow && !plan.conditioning() {
        let mut p = plan.clone();
        p.include_conditioning = true;
        Some(plan_sites(&p, &dims)?.iter().map(|s| s.params).sum::<u64>())
    } else {
        None
    };
    if json {
        let v = serde_json::json!({
            "plan": plan,
            "dims": dims,
            "total": total,
            "live_census": census,
            "total_with_conditioning": with_conditioning,
            "sites": sites,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    } else {
        println!("{:<34} {:>6} {:>12}", "site", "width", "params");
        for s in &sites {
            println!("{:<34} {:>6} {:>12}", s.site.path(), s.width, group(s.params));
        }
        println!("total trainable ({} {}, d'={}): {}", variant, kind, plan.d_prime, group(total));
        if let Some(c) = with_conditioning {
            println!("with a conditioning adapter:        {}", group(c));
        }
        if let Some(c) = census {
            println!("live census of the toy model:       {}", group(c));
        }
    }
    if let Some(c) = census {
        if c != total {
            return Err(Failure::Check(format!("live census {c} differs from closed form {total}")));
        }
    }
    Ok(())
}

/// `3040576` -> `3,040,576`.
fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn grad_check(tiny_config: bool, fault: Option<String>) -> Result<(), Failure> {
    if let Some(op) = fault {
        inject_fault(Some(Box::leak(op.into_boxed_str())));
    }
    let mut reports = checks::run_suite()?;
    if tiny_config {
        reports.retain(|r| r.label.starts_with("tiny model"));
    }
    let mut failed = Vec::new();
    println!("{:<30} {:>12} {:>8}  result", "check", "max rel err", "tol");
    for r in &reports {
        println!("{:<30} {:>12.3e} {:>8.0e}  {}", r.label, r.worst(), r.tol, if r.passed { "ok" } else { "FAIL" });
        if !r.passed {
            failed.push(r.label.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
