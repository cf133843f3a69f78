use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedgc::graphstore::{load_bundle, sbm_generate, save_bundle, Split};
use fedgc::miaeval::{build_shadow, run_attack, train_shadow_and_attack, ProbeView};
use fedgc::models::Arch;
use fedgc::pipeline::{run_and_emit, AblateFlags, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "fedgc", about = "Federated graph condensation simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full federated condensation pipeline.
    Run(RunArgs),
    /// Generate a stochastic block model bundle on disk.
    GenSbm(GenSbmArgs),
    /// Run the membership-inference attack against a condensed-trained model.
    Attack(AttackArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv / curves.csv / config.echo / condensed bundle.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated ablations: com,ft,ib,st
    #[arg(long)]
    ablate: Option<String>,
    /// none | ib | pl | ldp
    #[arg(long)]
    defense: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
}

#[derive(Args)]
struct GenSbmArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long = "per-block", default_value_t = 100)]
    per_block: usize,
    #[arg(long = "p-in", default_value_t = 0.1)]
    p_in: f64,
    #[arg(long = "p-out", default_value_t = 0.01)]
    p_out: f64,
    #[arg(long = "feat-dim", default_value_t = 8)]
    feat_dim: usize,
    #[arg(long = "feat-shift", default_value_t = 1.0)]
    feat_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    /// Original graph bundle directory (attacker's population view).
    #[arg(long)]
    bundle: PathBuf,
    /// Condensed bundle directory; the target model is trained on it.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe view for attack posteriors: star | rewire | self
    #[arg(long, default_value = "rewire")]
    probe: String,
}

fn parse_ablate(s: &str) -> Result<AblateFlags, String> {
    let mut flags = AblateFlags::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "com" => flags.com = true,
            "ft" => flags.ft = true,
            "ib" => flags.ib = true,
            "st" => flags.st = true,
            other => return Err(format!("unknown ablation '{other}' (expected com|ft|ib|st)")),
        }
    }
    Ok(flags)
}

fn build_config(args: &RunArgs) -> Result<RunConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| format!("invalid config {}: {e}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.display().to_string());
    }
    if let Some(spec) = &args.ablate {
        cfg.ablate = parse_ablate(spec)?;
    }
    if let Some(defense) = &args.defense {
        cfg.defense = defense.clone();
    }
    if let Some(gamma) = args.gamma {
        cfg.gamma = gamma;
    }
    if let Some(ratio) = args.ratio {
        cfg.ratio = ratio;
    }
    if let Some(clients) = args.clients {
        cfg.clients = clients;
    }
    Ok(cfg)
}

/// On a runtime abort, flush what we can of the report so a partial run
/// still leaves a record: the resolved config plus the failing stage.
fn flush_partial(cfg: &RunConfig, err: &PipelineError) {
    if let Some(dir) = &cfg.out {
        let dir = Path::new(dir);
        if std::fs::create_dir_all(dir).is_ok() {
            if let Ok(echo) = serde_json::to_string_pretty(cfg) {
                let _ = std::fs::write(dir.join("config.echo"), echo);
            }
            let _ = std::fs::write(dir.join("error.txt"), format!("{err}\n"));
        }
    }
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let cfg = match build_config(args) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = cfg.validate() {
        eprintln!("{e}");
        return ExitCode::from(1);
    }
    match run_and_emit(&cfg) {
        Ok(report) => {
            println!("ablation: {}  defense: {}  seed: {}", report.ablation, report.defense, report.seed);
            println!("condensed nodes: {}", report.condensed_nodes);
            for a in &report.archs {
                match (a.acc_ft_mean, a.acc_ft_std) {
                    (Some(m), Some(s)) => println!(
                        "{}: acc {:.4}  fine-tuned {:.4} +/- {:.4}",
                        a.arch, a.acc, m, s
                    ),
                    _ => println!("{}: acc {:.4}", a.arch, a.acc),
                }
            }
            println!("mia auc: {:.4}", report.mia_auc);
            println!("transcript digest: {:016x}", report.transcript_digest);
            ExitCode::SUCCESS
        }
        Err(e @ PipelineError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            flush_partial(&cfg, &e);
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_sbm(args: &GenSbmArgs) -> ExitCode {
    if args.blocks == 0 || args.per_block == 0 || args.feat_dim == 0 {
        eprintln!("config error: blocks, per-block, and feat-dim must be positive");
        return ExitCode::from(1);
    }
    if !(0.0..=1.0).contains(&args.p_in) || !(0.0..=1.0).contains(&args.p_out) {
        eprintln!("config error: p-in and p-out must be probabilities in [0, 1]");
        return ExitCode::from(1);
    }
    let g = match sbm_generate(
        args.blocks,
        args.per_block,
        args.p_in,
        args.p_out,
        args.feat_dim,
        args.feat_shift,
        args.seed,
    ) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("generation failed: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = save_bundle(&g, &args.out) {
        eprintln!("write failed: {e}");
        return ExitCode::from(2);
    }
    println!(
        "wrote bundle: {} nodes, {} edges, {} classes -> {}",
        g.n,
        g.edges.len(),
        g.num_classes,
        args.out.display()
    );
    ExitCode::SUCCESS
}

fn cmd_attack(args: &AttackArgs) -> ExitCode {
    let g = match load_bundle(&args.bundle) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("config error: cannot load bundle: {e}");
            return ExitCode::from(1);
        }
    };
    let condensed = match load_bundle(&args.target) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("config error: cannot load target bundle: {e}");
            return ExitCode::from(1);
        }
    };
    if condensed.feat_dim() != g.feat_dim() || condensed.num_classes != g.num_classes {
        eprintln!("config error: target bundle shape does not match graph bundle");
        return ExitCode::from(1);
    }
    let view = match args.probe.as_str() {
        "star" => ProbeView::Star,
        "rewire" => ProbeView::StarRewired,
        "self" => ProbeView::SelfOnly,
        other => {
            eprintln!("config error: unknown probe view '{other}' (expected star|rewire|self)");
            return ExitCode::from(1);
        }
    };
    let run = || -> Result<f64, String> {
        let arch = Arch::Gcn2 {
            input: g.feat_dim(),
            hidden: args.hidden,
            classes: g.num_classes,
        };
        let target = fedgc::pipeline::train_on_bundle(&condensed, arch, args.epochs, 0.3, args.seed)
            .map_err(|e| e.to_string())?;
        let members = g.mask_nodes(Split::Train);
        let mut nonmembers = g.mask_nodes(Split::Test);
        nonmembers.truncate(members.len().min(nonmembers.len()));
        let pool = g
            .splits
            .iter()
            .filter(|&&s| s != Split::Train && s != Split::Test)
            .count();
        let shadow_size = (pool / 2).min(members.len()).max(1);
        let split = build_shadow(&g, shadow_size, args.seed ^ 0x5d).map_err(|e| e.to_string())?;
        let model = train_shadow_and_attack(&g, &split, args.hidden, args.epochs, view, args.seed ^ 0x5e)
            .map_err(|e| e.to_string())?;
        let report = run_attack(
            &model,
            &target,
            &g,
            &members,
            &nonmembers,
            view,
            args.seed ^ 0xa8,
        )
        .map_err(|e| e.to_string())?;
        Ok(report.auc)
    };
    match run() {
        Ok(auc) => {
            println!("mia auc: {auc:.4}");
            ExitCode::SUCCESS
        }
        Err(msg) => {
            eprintln!("attack failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::GenSbm(args) => cmd_gen_sbm(args),
        Command::Attack(args) => cmd_attack(args),
    }
}
