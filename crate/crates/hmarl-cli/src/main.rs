//! Operator CLI for the full pipeline: synthetic cohort generation, model
//! training (hierarchy, ablations and baselines), off-policy evaluation and
//! single-decision recommendation.
//!
//! Every artifact-producing command writes a `manifest.json` with content
//! hashes of its outputs; all commands are deterministic for a fixed seed.
//! Exit codes: 0 success, 2 usage/input error, 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use hmarl::actions::ActionSpace;
use hmarl::agents::AgentSet;
use hmarl::baselines::{train_baseline, BaselineKind, BaselineModel};
use hmarl::features::{build_episodes, EpisodeStore, FeatureSchema, NormalizationConstants};
use hmarl::ope::{evaluate_policy, BehaviorModel, Policy};
use hmarl::persist::file_sha256;
use hmarl::simulator::{generate_cohort, true_policy_value, write_cohort_csvs, DynamicsConfig, OraclePolicy};
use hmarl::training::{
    recommend, root_q_values, train_phase1, train_phase2, transitions_from_store,
    write_run_manifest, TrainConfig,
};
use hmarl::{Error, Result};

/// Observation window length; one decision per window.
const WINDOW_MINUTES: u32 = 240;

#[derive(Parser)]
#[command(name = "hmarl", about = "Hierarchical multi-agent offline RL for multi-organ treatment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test/external cohorts from a dynamics config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train_patients: usize,
        #[arg(long, default_value_t = 700)]
        test_patients: usize,
        #[arg(long, default_value_t = 700)]
        external_patients: usize,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force the single-threaded deterministic path (always on; kept as
        /// an explicit contract flag).
        #[arg(long)]
        deterministic: bool,
    },
    /// Train a model on a generated cohort.
    Train {
        /// proposed | prop-noc | prop-nosr | prop-noc-nosr | d3qn-s |
        /// d3qn-o | d3qn-t | qmix-o | qmix-t
        #[arg(long)]
        model: String,
        /// Data directory (defaults to $HMARL_DATA_DIR).
        #[arg(long, env = "HMARL_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training hyperparameters (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        /// Worker threads; deterministic mode forces 1 (the only level
        /// currently implemented).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a trained model on the test (and external) cohorts.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, env = "HMARL_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated dataset names under the data directory.
        #[arg(long, default_value = "test,external")]
        datasets: String,
        /// Calibration bin count (clamped to the cohort size).
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Also roll the policy through the simulator for its true value.
        #[arg(long)]
        true_value: bool,
        #[arg(long, default_value_t = 1000)]
        rollouts: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Recommend a single decision for one observation (CSV rows: up to
    /// three history rows then the current row).
    Recommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Normalization constants to apply to raw rows (optional; omit if
        /// the rows are already normalized).
        #[arg(long)]
        constants: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    config_sha256: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    formats: BTreeMap<String, String>,
    duration_secs: f64,
    artifact_sha256: BTreeMap<String, String>,
}

fn format_versions() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("weights".into(), hmarl::persist::WEIGHTS_FORMAT.into());
    m.insert("agents".into(), hmarl::agents::AGENTS_FORMAT.into());
    m.insert("baseline".into(), hmarl::baselines::BASELINE_FORMAT.into());
    m.insert("episodes".into(), hmarl::features::EPISODES_FORMAT.into());
    m.insert("run".into(), "hmarl-run-v1".into());
    m
}

/// Content hashes of every regular file under `dir` (relative paths,
/// sorted), excluding the manifest itself.
fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().map(|n| n != "manifest.json").unwrap_or(true) {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut out = BTreeMap::new();
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().to_string();
        out.insert(rel, file_sha256(f)?);
    }
    Ok(out)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config_sha256: Option<String>,
    inputs: Vec<String>,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        seed,
        config_sha256,
        inputs,
        outputs: vec![dir.to_string_lossy().to_string()],
        formats: format_versions(),
        duration_secs: started.elapsed().as_secs_f64(),
        artifact_sha256: hash_artifacts(dir)?,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config: &Path,
    out: &Path,
    n_train: usize,
    n_test: usize,
    n_external: usize,
    seed: Option<u64>,
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = DynamicsConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out)?;
    let raw = out.join("raw");
    fs::create_dir_all(&raw)?;
    let schema = FeatureSchema::synthetic_default();
    let space = ActionSpace::default();
    let oracle = OraclePolicy::build(&cfg);
    let ext_cfg = cfg.shifted_external();
    let ext_oracle = OraclePolicy::build(&ext_cfg);

    let mut constants: Option<NormalizationConstants> = None;
    let plans: [(&str, &DynamicsConfig, &OraclePolicy, usize, usize); 3] = [
        ("train", &cfg, &oracle, n_train, 0),
        ("test", &cfg, &oracle, n_test, n_train),
        ("external", &ext_cfg, &ext_oracle, n_external, n_train + n_test),
    ];
    for (name, c, orc, n, start) in plans {
        let trajs = generate_cohort(c, orc, n, start)?;
        let events = raw.join(format!("{name}_events.csv"));
        let actions = raw.join(format!("{name}_actions.csv"));
        write_cohort_csvs(&trajs, &schema, &space, &events, &actions, WINDOW_MINUTES)?;
        let (store, fitted) = build_episodes(
            &events,
            &actions,
            &schema,
            &space,
            constants.clone(),
            WINDOW_MINUTES,
            c.terminal_r,
        )?;
        if constants.is_none() {
            fitted.save(&out.join("constants.json"))?;
            constants = Some(fitted);
        }
        store.save(out, name)?;
        println!(
            "{name}: {} patients, mortality {:.3}, mean LOS {:.1} steps",
            store.episodes.len(),
            store.mortality(),
            store.mean_length()
        );
    }
    cfg.save(&out.join("dynamics.json"))?;
    ext_cfg.save(&out.join("dynamics_external.json"))?;
    write_manifest(
        out,
        "generate",
        cfg.seed,
        Some(file_sha256(config)?),
        vec![config.to_string_lossy().to_string()],
        started,
    )
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

const MODEL_KINDS: &str =
    "proposed, prop-noc, prop-nosr, prop-noc-nosr, d3qn-s, d3qn-o, d3qn-t, qmix-o, qmix-t";

fn cmd_train(
    model: &str,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let store = EpisodeStore::load(data, "train")?;
    let transitions = transitions_from_store(&store)?;
    fs::create_dir_all(out)?;

    let hierarchy_flags = match model {
        "proposed" => Some((false, false)),
        "prop-noc" => Some((true, false)),
        "prop-nosr" => Some((false, true)),
        "prop-noc-nosr" => Some((true, true)),
        _ => None,
    };
    if let Some((noc, nosr)) = hierarchy_flags {
        cfg.no_communication = noc;
        cfg.no_state_repr = nosr;
        let (mut set, mut log) = train_phase1(&transitions, &cfg)?;
        let log2 = train_phase2(&transitions, &mut set, &cfg)?;
        log.curves.extend(log2.curves);
        set.save(out)?;
        write_run_manifest(out, &cfg, &log)?;
        for w in &log.warnings {
            eprintln!("warning: {w}");
        }
    } else {
        let kind = BaselineKind::from_name(model).map_err(|_| {
            Error::Contract(format!("unknown model kind {model:?}; valid kinds: {MODEL_KINDS}"))
        })?;
        let (bm, log) = train_baseline(kind, &transitions, &cfg)?;
        bm.save(out)?;
        write_run_manifest(out, &cfg, &log)?;
    }
    cfg.save(&out.join("train_config.json"))?;
    fs::write(out.join("model_kind.json"), serde_json::json!({ "kind": model }).to_string())?;
    write_manifest(
        out,
        "train",
        cfg.seed,
        Some(cfg.sha256()?),
        vec![data.to_string_lossy().to_string()],
        started,
    )
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

enum LoadedModel {
    Hierarchy(AgentSet),
    Baseline(BaselineModel),
}

impl LoadedModel {
    fn load(dir: &Path) -> Result<Self> {
        if dir.join("hierarchy.json").exists() {
            Ok(LoadedModel::Hierarchy(AgentSet::load(dir)?))
        } else if dir.join("baseline.json").exists() {
            Ok(LoadedModel::Baseline(BaselineModel::load(dir)?))
        } else {
            Err(Error::Contract(format!(
                "no trained model (hierarchy.json or baseline.json) in {}",
                dir.display()
            )))
        }
    }

    fn policy(&self) -> &dyn Policy {
        match self {
            LoadedModel::Hierarchy(set) => set,
            LoadedModel::Baseline(m) => m,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    model_dir: &Path,
    data: &Path,
    out: &Path,
    datasets: &str,
    bins: usize,
    true_value: bool,
    rollouts: usize,
    seed: Option<u64>,
) -> Result<()> {
    let started = Instant::now();
    let model = LoadedModel::load(model_dir)?;
    let gamma = TrainConfig::load(&model_dir.join("train_config.json"))
        .map(|c| c.gamma)
        .unwrap_or(0.99);
    let seed = seed.unwrap_or(7);
    let constants = NormalizationConstants::load(&data.join("constants.json")).ok();
    fs::create_dir_all(out)?;
    let mut summary = Vec::new();
    for name in datasets.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if !data.join(format!("{name}.json")).exists() {
            eprintln!("warning: dataset {name} not found under {}, skipped", data.display());
            continue;
        }
        let store = EpisodeStore::load(data, name)?;
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let report = evaluate_policy(
            &store.episodes,
            model.policy(),
            &BehaviorModel::Logged,
            gamma,
            bins.min(store.episodes.len()).max(2),
            seed,
            Some(&dir),
        )?;
        let mut row = serde_json::to_value(&report)?;
        if true_value {
            let dyn_file = if name == "external" { "dynamics_external.json" } else { "dynamics.json" };
            let cfg = DynamicsConfig::load(&data.join(dyn_file))?;
            let policy = model.policy();
            let (v, se) = true_policy_value(&cfg, constants.as_ref(), rollouts, seed, |view, _| {
                policy.action(view.x, view.history)
            })?;
            row["true_value_mc"] = serde_json::json!({ "mean": v, "stderr": se, "rollouts": rollouts });
        }
        println!(
            "{name}: V_CWPDIS {:.3}, est. mortality {:.3} ± {:.3}, behavior mortality {:.3}",
            report.v_cwpdis,
            report.estimated_mortality.mean,
            report.estimated_mortality.stderr,
            report.behavior_mortality
        );
        summary.push(serde_json::json!({ "dataset": name, "report": row }));
    }
    if summary.is_empty() {
        return Err(Error::Data("no datasets evaluated".into()));
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write_manifest(
        out,
        "evaluate",
        seed,
        None,
        vec![model_dir.to_string_lossy().to_string(), data.to_string_lossy().to_string()],
        started,
    )
}

// ---------------------------------------------------------------------------
// recommend
// ---------------------------------------------------------------------------

fn parse_state_csv(path: &Path, constants: Option<&NormalizationConstants>) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            row.push(field.trim().parse::<f64>().map_err(|e| {
                Error::Data(format!("{}:{}: bad number {field:?}: {e}", path.display(), ln + 1))
            })?);
        }
        if let Some(c) = constants {
            c.apply_row(&mut row);
        }
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::Data(format!(
                    "{}: ragged rows ({} vs {} columns)",
                    path.display(),
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no state rows", path.display())));
    }
    Ok(rows)
}

fn cmd_recommend(model_dir: &Path, state: &Path, constants: Option<&Path>) -> Result<()> {
    let constants = match constants {
        Some(p) => Some(NormalizationConstants::load(p)?),
        None => None,
    };
    let mut rows = parse_state_csv(state, constants.as_ref())?;
    let x = rows.pop().expect("at least one row");
    let start = rows.len().saturating_sub(3);
    let history = rows[start..].to_vec();
    let output = match LoadedModel::load(model_dir)? {
        LoadedModel::Hierarchy(set) => {
            let rec = recommend(&set, &x, &history)?;
            let root_q = root_q_values(&set, &x, &history)?;
            serde_json::json!({
                "action": action_json(&rec.action),
                "root_q": root_q,
                "trace": rec.trace,
                "evaluations": rec.evaluations,
            })
        }
        LoadedModel::Baseline(m) => {
            let a = m.recommend(&x, &history)?;
            serde_json::json!({ "action": action_json(&a) })
        }
    };
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn action_json(a: &hmarl::actions::JointAction) -> serde_json::Value {
    serde_json::json!({
        "levels": a.levels,
        "s1": a.levels[0],
        "s2": a.levels[1],
        "iv": a.levels[2],
        "vaso": a.levels[3],
        "diuretic": a.levels[4],
        "dialysis": a.levels[5],
        "joint_index": a.joint_index(),
    })
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            train_patients,
            test_patients,
            external_patients,
            seed,
            deterministic: _,
        } => cmd_generate(&config, &out, train_patients, test_patients, external_patients, seed),
        Command::Train { model, data, out, config, seed, deterministic: _, threads: _ } => {
            cmd_train(&model, &data, &out, config.as_deref(), seed)
        }
        Command::Evaluate {
            model,
            data,
            out,
            datasets,
            bins,
            true_value,
            rollouts,
            seed,
            deterministic: _,
        } => cmd_evaluate(&model, &data, &out, &datasets, bins, true_value, rollouts, seed),
        Command::Recommend { model, state, constants } => {
            cmd_recommend(&model, &state, constants.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
