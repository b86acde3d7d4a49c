//! `alignlab` command line: runs the experiments and writes CSVs, transition
//! table dumps, loss logs and SVG charts under the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use alignlab::checks::{gradient_suite, property_suites, GRADIENT_TOLERANCE};
use alignlab::frozen_lake::{
    load_map, median, policy_table, run_grid_experiment, runs_to_csv, shipped_map, value_iteration,
    OrderingVerdict, RewardSpec,
};
use alignlab::reporting::{atomic_write, bar_chart, line_chart, load_config, summarize_csvs, ResolvedConfig};
use alignlab::toy_lm::{generate_corpus, run_toy_experiment, to_tsv, toy_runs_to_csv, CorpusSpec, ToyVerdict};
use alignlab::Error;

#[derive(Parser)]
#[command(name = "alignlab", version, about = "SFT / IFT / DPO / ORPO alignment lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// First seed. Without --seeds, runs this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Comma-separated methods for the chosen experiment.
    #[arg(long, global = true)]
    methods: Option<String>,
    #[arg(long, global = true, env = "ALIGN_LAB_OUT", default_value = "out")]
    out_dir: PathBuf,
    /// `key=value` or `section.key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "K=V")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train grid policies with each method and check the MSE ordering.
    Frozenlake,
    /// Train the toy decoder with SFT and IFT on a synthetic corpus.
    Toylm,
    /// Finite-difference check of every loss on random fixtures.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        fixtures: usize,
    },
    /// Degeneracy, propagation weight and Bellman identity suites.
    Losscheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Merge run CSVs into one summary table.
    Report {
        /// CSV files or directories (searched recursively); defaults to the output directory.
        paths: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Ordering,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidLossConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Ordering) => ExitCode::from(3),
    }
}

fn run(cli: Cli) -> Outcome {
    let section = match cli.command {
        Command::Frozenlake => Some("frozenlake"),
        Command::Toylm => Some("toylm"),
        _ => None,
    };
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("run.seed={s}"));
        if cli.seeds.is_none() {
            overrides.push("run.seeds=1".into());
        }
    }
    if let Some(n) = cli.seeds {
        overrides.push(format!("run.seeds={n}"));
    }
    if let Some(m) = &cli.methods {
        let s = section.ok_or_else(|| Failure::Usage("--methods applies to frozenlake and toylm".into()))?;
        overrides.push(format!("{s}.methods={m}"));
    }
    let cfg = load_config(&text, &overrides, section)?;
    match cli.command {
        Command::Frozenlake => frozenlake(&cfg, &cli.out_dir.join("frozenlake")),
        Command::Toylm => toylm(&cfg, &cli.out_dir.join("toylm")),
        Command::Gradcheck { fixtures } => gradcheck(fixtures, cfg.seed),
        Command::Losscheck { cases } => losscheck(cases, cfg.seed),
        Command::Report { paths } => {
            let paths = if paths.is_empty() { vec![cli.out_dir.clone()] } else { paths };
            report(&paths, &cli.out_dir)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
    Ok(atomic_write(path, bytes.as_ref())?)
}

/// Resolved config with its hash, written next to every run's artifacts.
fn write_echo(dir: &Path, cfg: &ResolvedConfig) -> Result<(), Failure> {
    let path = write(&dir.join("config.txt"), format!("# sha256 {}\n{}", cfg.hash(), cfg.echo()))?;
    println!("config {} -> {}", cfg.hash(), path.display());
    Ok(())
}

fn svg_with_hash(svg: String, cfg: &ResolvedConfig) -> String {
    svg.replacen("<rect", &format!("<!-- config sha256 {} -->\n<rect", cfg.hash()), 1)
}

fn frozenlake(cfg: &ResolvedConfig, dir: &Path) -> Outcome {
    let spec = if cfg.map == "shipped" { shipped_map() } else { load_map(Path::new(&cfg.map))? };
    let oracle = value_iteration(&spec, cfg.discount, RewardSpec::default())?;
    let runs = run_grid_experiment(&spec, &oracle, &cfg.grid_methods, &cfg.seed_list(), &cfg.grid)?;
    write_echo(dir, cfg)?;
    let csv = write(&dir.join("runs.csv"), runs_to_csv(&runs))?;
    write(&dir.join("tables/oracle.txt"), oracle.table.to_text())?;
    let hash = cfg.hash();
    let mut log = String::new();
    for r in &runs {
        let table = policy_table(&r.model, &spec)?;
        write(&dir.join(format!("tables/{}_seed{}.txt", r.method, r.seed)), table.to_text())?;
        for (step, total) in r.loss_history.iter().enumerate() {
            let line = serde_json::json!({
                "method": r.method.name(), "seed": r.seed, "step": step, "config_hash": hash, "total": total,
            });
            log.push_str(&format!("{line}\n"));
        }
    }
    write(&dir.join("losses.jsonl"), log)?;
    let bars: Vec<(String, f64)> = cfg
        .grid_methods
        .iter()
        .map(|m| {
            let mut v: Vec<f64> = runs.iter().filter(|r| r.method == *m).map(|r| r.mse).collect();
            (m.name().to_string(), median(&mut v))
        })
        .collect();
    let title = format!("Frozen Lake: median policy MSE over {} seeds", cfg.seeds);
    write(&dir.join("mse.svg"), svg_with_hash(bar_chart(&title, "MSE to oracle", &bars), cfg))?;
    println!("wrote {} ({} runs)", csv.display(), runs.len());
    let verdict = OrderingVerdict::from_runs(&runs);
    println!("{}", verdict.line());
    if verdict.passed() {
        Ok(())
    } else {
        Err(Failure::Ordering)
    }
}

fn toylm(cfg: &ResolvedConfig, dir: &Path) -> Outcome {
    let seeds = cfg.seed_list();
    let runs = run_toy_experiment(&cfg.toy, &cfg.toy_methods, &seeds)?;
    write_echo(dir, cfg)?;
    let csv = write(&dir.join("runs.csv"), toy_runs_to_csv(&runs))?;
    for &s in &seeds {
        let data = generate_corpus(&CorpusSpec { seed: s, ..cfg.toy.corpus })?;
        write(&dir.join(format!("corpus/seed{s}_train.tsv")), to_tsv(&data.train))?;
        write(&dir.join(format!("corpus/seed{s}_eval.tsv")), to_tsv(&data.eval))?;
    }
    let hash = cfg.hash();
    let (mut loss_curves, mut acc_curves) = (Vec::new(), Vec::new());
    for r in &runs {
        let mut log = String::new();
        for rec in &r.records {
            let mut rec = rec.clone();
            rec.config_hash = hash.clone();
            log.push_str(&rec.to_json_line());
            log.push('\n');
        }
        let name = format!("{}_seed{}", r.method, r.seed);
        write(&dir.join(format!("losses/{name}.jsonl")), log)?;
        let history = serde_json::to_string_pretty(&r.history).map_err(Error::from)?;
        write(&dir.join(format!("history/{name}.json")), history)?;
        let pts = |f: &dyn Fn(&alignlab::toy_lm::Snapshot) -> f64| {
            r.history.iter().map(|h| (h.epoch as f64, f(h))).collect::<Vec<_>>()
        };
        loss_curves.push((name.clone(), pts(&|h| h.eval.mean_eval_loss)));
        acc_curves.push((name, pts(&|h| h.eval.exact_match)));
    }
    let loss_svg = line_chart("Toy LM: eval loss", "epoch", "mean eval loss", &loss_curves);
    write(&dir.join("eval_loss.svg"), svg_with_hash(loss_svg, cfg))?;
    let acc_svg = line_chart("Toy LM: exact match", "epoch", "exact match", &acc_curves);
    write(&dir.join("exact_match.svg"), svg_with_hash(acc_svg, cfg))?;
    println!("wrote {} ({} runs)", csv.display(), runs.len());
    println!("{}", ToyVerdict::from_runs(&runs).line());
    Ok(())
}

fn gradcheck(fixtures: usize, seed: u64) -> Outcome {
    let cases = gradient_suite(fixtures, seed)?;
    for c in &cases {
        println!(
            "{:<9} fixture {} ({}, {} params): worst rel err {:.3e} {}",
            c.loss,
            c.fixture,
            c.model,
            c.params,
            c.worst,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if cases.iter().all(|c| c.passed) {
        println!("all pass <= {GRADIENT_TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn losscheck(cases: usize, seed: u64) -> Outcome {
    let suites = property_suites(cases, seed)?;
    for s in &suites {
        println!(
            "{:<22} {} cases, worst {:.3e} (tol {:e}) {}",
            s.name,
            s.cases,
            s.worst,
            s.tolerance,
            if s.passed() { "green" } else { "RED" }
        );
    }
    if suites.iter().all(|s| s.passed()) {
        Ok(())
    } else {
        Err(Failure::Runtime("property suite failed".into()))
    }
}

fn collect_csvs(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            collect_csvs(&e, out)?;
        }
    } else if path.extension().is_some_and(|e| e == "csv")
        && !path.file_name().is_some_and(|n| n.to_string_lossy().starts_with("summary"))
    {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn report(paths: &[PathBuf], out_dir: &Path) -> Outcome {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Failure::Runtime(format!("{} does not exist", p.display())));
        }
        collect_csvs(p, &mut files).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if files.is_empty() {
        return Err(Failure::Runtime("no CSV files found".into()));
    }
    let texts = files
        .iter()
        .map(|f| Ok((f.display().to_string(), std::fs::read_to_string(f)?)))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let summary = summarize_csvs(&texts)?;
    let path = write(&out_dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    println!("merged {} files -> {}", files.len(), path.display());
    Ok(())
}
