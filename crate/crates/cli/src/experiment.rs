use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use qme_core::baselines::{EvalEncoder, Methodology};
use qme_core::dfo::DfoConfig;
use qme_core::envdata::{generate_offline, Behavior, EnvConfig, PENDULUM_ENV};
use qme_core::rl::Algo;

use crate::commands::{
    fit_qme, hyperbolicity, methodology_dataset, qme_config, random_traces, report, save_dataset,
    train_runs, DecodeArg, QmeSettings, Repr, RlArgs,
};
use crate::manifest::{write_json, Manifest};
use crate::UsageError;

#[derive(Args, Debug, Serialize)]
pub struct ExperimentArgs {
    /// Experiment configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Parent directory of the timestamped run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Run directory name; defaults to a UTC timestamp.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub env: String,
    pub lift: usize,
    pub behavior: Behavior,
    pub n: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            env: PENDULUM_ENV.into(),
            lift: 15,
            behavior: Behavior::NoisyEnergy { epsilon: 0.3 },
            n: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QmeSection {
    pub qubits: Option<usize>,
    pub trash: usize,
    pub delta: f64,
    pub budget: usize,
    pub rho_begin: f64,
    pub rho_end: f64,
    pub decode: DecodeArg,
    pub seed: u64,
}

impl Default for QmeSection {
    fn default() -> Self {
        Self {
            qubits: None,
            trash: 1,
            delta: 0.5,
            budget: 2000,
            rho_begin: 1.0,
            rho_end: 1e-4,
            decode: DecodeArg::Amplitude,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub qme: QmeSection,
    pub rl: RlArgs,
    pub methodologies: Vec<Methodology>,
    pub algos: Vec<Algo>,
    pub runs: usize,
    pub seed0: u64,
    /// Seed of the CNN and QNN reward regressors.
    pub regressor_seed: u64,
    pub qnn_budget: usize,
    pub window: usize,
    pub base: Methodology,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            qme: QmeSection::default(),
            rl: RlArgs::default(),
            methodologies: Methodology::ALL.to_vec(),
            algos: vec![Algo::Sac, Algo::Iql],
            runs: 5,
            seed0: 0,
            regressor_seed: 0,
            qnn_budget: 2000,
            window: 200,
            base: Methodology::Rl,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.env != PENDULUM_ENV {
            return Err(UsageError(format!("unknown environment {:?}", self.data.env)).into());
        }
        if self.runs == 0 {
            return Err(UsageError("runs must be at least 1".into()).into());
        }
        if self.methodologies.is_empty() || self.algos.is_empty() {
            return Err(UsageError("methodologies and algos must be non-empty".into()).into());
        }
        if !self.methodologies.contains(&self.base) {
            return Err(
                UsageError(format!("base {} is not among the methodologies", self.base)).into(),
            );
        }
        for algo in &self.algos {
            self.rl.config(*algo, self.seed0).validate()?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("lift{}", self.data.lift)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the whole pipeline into `dir` and returns the files it wrote.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let echo = dir.join("config.json");
    write_json(&echo, cfg)?;
    written.push(echo);

    let env = EnvConfig {
        lift_dim: cfg.data.lift,
        seed: cfg.data.seed,
    };
    let raw = generate_offline(&env, cfg.data.behavior, cfg.data.n, cfg.data.seed)?;
    let data_path = dir.join("data").join("raw.jsonl");
    save_dataset(&raw, &data_path)?;
    written.push(data_path);

    let needs_qme = cfg.methodologies.contains(&Methodology::Qme);
    let model = if needs_qme {
        let settings = QmeSettings {
            qubits: cfg.qme.qubits,
            trash: cfg.qme.trash,
            delta: cfg.qme.delta,
            decode: cfg.qme.decode.into(),
            dfo: DfoConfig {
                rho_begin: cfg.qme.rho_begin,
                rho_end: cfg.qme.rho_end,
                max_evals: cfg.qme.budget,
                seed: cfg.qme.seed,
            },
        };
        let qcfg = qme_config(&raw, &settings)?;
        let ckpt = dir.join("qme").join("checkpoint.json");
        let trace = dir.join("qme").join("loss.csv");
        let model = fit_qme(&raw, &qcfg, cfg.qme.seed, &ckpt, &trace)?;
        eprintln!(
            "qme: loss {:.6} -> {:.6}",
            model.initial_loss, model.final_loss
        );
        written.push(ckpt);
        written.push(trace);
        Some(model)
    } else {
        None
    };

    let label = cfg.label();
    let traces_root = dir.join("traces");
    for &m in &cfg.methodologies {
        let set = methodology_dataset(m, &raw, model.as_ref(), cfg.regressor_seed, cfg.qnn_budget)?;
        if let Some(set) = &set {
            let path = dir
                .join("data")
                .join(format!("{}.jsonl", m.name().to_ascii_lowercase()));
            save_dataset(set, &path)?;
            written.push(path);
        }
        for &algo in &cfg.algos {
            let out = traces_root.join(&label).join(m.name()).join(algo.name());
            eprintln!("training {} / {}", m.name(), algo.name());
            let files = match &set {
                None => random_traces(&raw, &cfg.rl, cfg.runs, cfg.seed0, &out)?,
                Some(set) => {
                    let encoder = match m {
                        Methodology::Qme => EvalEncoder::Qme(model.clone().expect("trained above")),
                        Methodology::Norm => EvalEncoder::L2,
                        _ => EvalEncoder::Identity,
                    };
                    train_runs(set, &encoder, &cfg.rl, algo, cfg.runs, cfg.seed0, &out)?
                }
            };
            written.extend(files);
        }
    }

    let (_, files) = report(&traces_root, cfg.window, cfg.base, &dir.join("report"))?;
    written.extend(files);

    let mut geometry = vec![
        hyperbolicity(&raw, Repr::Raw, None)?,
        hyperbolicity(&raw, Repr::Norm, None)?,
    ];
    if let Some(model) = &model {
        geometry.push(hyperbolicity(&raw, Repr::Qme, Some(model))?);
    }
    let geo = dir.join("hyperbolicity.json");
    write_json(&geo, &geometry)?;
    written.push(geo);
    Ok(written)
}

pub fn experiment_cmd(args: &ExperimentArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string());
    let dir = args.out.join(name);
    let written = run(&cfg, &dir)?;
    let mut m = Manifest::new("experiment", &cfg)?;
    m.input(&args.config)?;
    for p in &written {
        m.output(p)?;
    }
    m.write(&dir.join("manifest.json"))?;
    println!("{}", dir.display());
    Ok(())
}
