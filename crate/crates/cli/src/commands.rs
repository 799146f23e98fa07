use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use qme_core::ansatz::QmeArchitecture;
use qme_core::baselines::{
    l2_normalize_dataset, random_policy_return, relabel_rewards, train_reward_regressor_classical,
    train_reward_regressor_quantum, EvalEncoder, Methodology,
};
use qme_core::dfo::DfoConfig;
use qme_core::envdata::{
    generate_offline, load_jsonl_file, save_jsonl_file, Behavior, EnvConfig, Pendulum,
    TransitionSet, PENDULUM_ENV,
};
use qme_core::geom::{delta_for_states, HyperbolicityReport};
use qme_core::qme::{train_qme, DecodeMode, QmeCheckpoint, QmeConfig, QmeModel};
use qme_core::report::{r_max, smoothed_curve, Cell, ResultsTable};
use qme_core::rl::{
    train_offline, Algo, CheckpointReturn, EvalTrace, RlConfig, StateEncoder, EVAL_SEED_OFFSET,
};

use crate::manifest::{sidecar, write_json, Manifest};
use crate::traces::{load_trace_tree, trace_path};
use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorArg {
    Random,
    NoisyEnergy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeArg {
    Amplitude,
    Probability,
}

impl From<DecodeArg> for DecodeMode {
    fn from(d: DecodeArg) -> Self {
        match d {
            DecodeArg::Amplitude => DecodeMode::Amplitude,
            DecodeArg::Probability => DecodeMode::Probability,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMethod {
    Qme,
    Norm,
    Cnn,
    Qnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoArg {
    Sac,
    Iql,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Sac => Algo::Sac,
            AlgoArg::Iql => Algo::Iql,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Repr {
    Raw,
    Norm,
    Qme,
}

pub fn behavior(kind: BehaviorArg, eps: f64) -> Behavior {
    match kind {
        BehaviorArg::Random => Behavior::Random,
        BehaviorArg::NoisyEnergy => Behavior::NoisyEnergy { epsilon: eps },
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// Environment name; only the built-in pendulum is available.
    #[arg(long, default_value = PENDULUM_ENV)]
    pub env: String,
    /// Observation lift dimension (0 keeps cos, sin, speed).
    #[arg(long, default_value_t = 15)]
    pub lift: usize,
    #[arg(long, value_enum, default_value_t = BehaviorArg::NoisyEnergy)]
    pub behavior: BehaviorArg,
    /// Probability of a uniform random action for the noisy behavior.
    #[arg(long, default_value_t = 0.3)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    if args.env != PENDULUM_ENV {
        return Err(UsageError(format!("unknown environment {:?}", args.env)).into());
    }
    let env = EnvConfig {
        lift_dim: args.lift,
        seed: args.seed,
    };
    let set = generate_offline(&env, behavior(args.behavior, args.eps), args.n, args.seed)?;
    save_dataset(&set, &args.out)?;
    let mut m = Manifest::new("gen-data", args)?;
    m.output(&args.out)?;
    m.write(&sidecar(&args.out))
}

pub fn load_dataset(path: &Path) -> Result<TransitionSet> {
    load_jsonl_file(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn save_dataset(set: &TransitionSet, path: &Path) -> Result<()> {
    crate::manifest::ensure_parent(path)?;
    save_jsonl_file(set, path).with_context(|| format!("writing dataset {}", path.display()))
}

/// Checkpoint file: the trained encoder plus training metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub n_params: usize,
    pub initial_loss: f64,
    pub evals: usize,
    pub checkpoint: QmeCheckpoint,
}

pub fn load_checkpoint(path: &Path) -> Result<QmeModel> {
    let file =
        File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let ckpt: CheckpointFile = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing checkpoint {}", path.display()))?;
    Ok(ckpt.checkpoint.into_model()?)
}

#[derive(Args, Debug, Serialize)]
pub struct TrainQmeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Register width; defaults to the smallest that holds a state.
    #[arg(long)]
    pub qubits: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub trash: usize,
    /// Weight of the trash-compression term.
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    /// Objective evaluations allowed to the optimizer.
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho_begin: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub rho_end: f64,
    #[arg(long, value_enum, default_value_t = DecodeArg::Amplitude)]
    pub decode: DecodeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a `.loss.csv` extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub struct QmeSettings {
    pub qubits: Option<usize>,
    pub trash: usize,
    pub delta: f64,
    pub decode: DecodeMode,
    pub dfo: DfoConfig,
}

pub fn qme_config(set: &TransitionSet, s: &QmeSettings) -> Result<QmeConfig> {
    let needed = qme_core::statevector::qubits_for_dim(set.meta.obs_dim);
    let n_qubits = s.qubits.unwrap_or(needed);
    if n_qubits < needed {
        return Err(UsageError(format!(
            "{n_qubits} qubits cannot hold {}-dimensional states",
            set.meta.obs_dim
        ))
        .into());
    }
    let cfg = QmeConfig {
        arch: QmeArchitecture::new(n_qubits, s.trash)?,
        delta: s.delta,
        decode_mode: s.decode,
        dfo: s.dfo.clone(),
    };
    cfg.validate()?;
    cfg.dfo.validate(cfg.arch.parameter_count())?;
    Ok(cfg)
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    crate::manifest::ensure_parent(path)?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "eval,loss,best")?;
    let mut best = f64::INFINITY;
    for (i, l) in trace.iter().enumerate() {
        best = best.min(*l);
        writeln!(out, "{},{l},{best}", i + 1)?;
    }
    out.flush()?;
    Ok(())
}

/// Trains the encoder and writes checkpoint plus loss trace.
pub fn fit_qme(
    set: &TransitionSet,
    cfg: &QmeConfig,
    seed: u64,
    out: &Path,
    trace: &Path,
) -> Result<QmeModel> {
    let model = train_qme(set, cfg, seed)?;
    let file = CheckpointFile {
        n_params: cfg.arch.parameter_count(),
        initial_loss: model.initial_loss,
        evals: model.trace.len(),
        checkpoint: model.to_checkpoint(),
    };
    write_json(out, &file)?;
    write_loss_trace(trace, &model.trace)?;
    Ok(model)
}

pub fn train_qme_cmd(args: &TrainQmeArgs) -> Result<()> {
    let set = load_dataset(&args.data)?;
    let settings = QmeSettings {
        qubits: args.qubits,
        trash: args.trash,
        delta: args.delta,
        decode: args.decode.into(),
        dfo: DfoConfig {
            rho_begin: args.rho_begin,
            rho_end: args.rho_end,
            max_evals: args.budget,
            seed: args.seed,
        },
    };
    let cfg = qme_config(&set, &settings)?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    let model = fit_qme(&set, &cfg, args.seed, &args.out, &trace)?;
    eprintln!(
        "{} parameters, loss {:.6} -> {:.6} in {} evaluations",
        cfg.arch.parameter_count(),
        model.initial_loss,
        model.final_loss,
        model.trace.len()
    );
    let mut m = Manifest::new("train-qme", args)?;
    m.input(&args.data)?;
    m.output(&args.out)?;
    m.output(&trace)?;
    m.write(&sidecar(&args.out))
}

#[derive(Args, Debug, Serialize)]
pub struct TransformArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder checkpoint, required for `--method qme`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: TransformMethod,
    /// Seed of the reward regressors.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer evaluations for the quantum regressor.
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Dataset transform of a methodology; `None` for RD, which trains nothing.
pub fn methodology_dataset(
    m: Methodology,
    raw: &TransitionSet,
    qme: Option<&QmeModel>,
    seed: u64,
    qnn_budget: usize,
) -> Result<Option<TransitionSet>> {
    Ok(match m {
        Methodology::Rd => None,
        Methodology::Rl => Some(raw.clone()),
        Methodology::Norm => {
            let (set, zeros) = l2_normalize_dataset(raw);
            if zeros > 0 {
                eprintln!("warning: {zeros} zero state vectors left unnormalized");
            }
            Some(set)
        }
        Methodology::Cnn => {
            let reg = train_reward_regressor_classical(raw, seed)?;
            let mut set = relabel_rewards(raw, &reg)?;
            set.meta.repr = Some("cnn".into());
            Some(set)
        }
        Methodology::Qnn => {
            let dfo = DfoConfig {
                max_evals: qnn_budget,
                seed,
                ..DfoConfig::default()
            };
            let reg = train_reward_regressor_quantum(raw, seed, &dfo)?;
            let mut set = relabel_rewards(raw, &reg)?;
            set.meta.repr = Some("qnn".into());
            Some(set)
        }
        Methodology::Qme => {
            let model =
                qme.ok_or_else(|| UsageError("the qme transform needs a checkpoint".into()))?;
            Some(model.transform(raw)?)
        }
    })
}

pub fn transform_cmd(args: &TransformArgs) -> Result<()> {
    let raw = load_dataset(&args.data)?;
    let model = match (&args.ckpt, args.method) {
        (Some(p), TransformMethod::Qme) => Some(load_checkpoint(p)?),
        (None, TransformMethod::Qme) => {
            return Err(UsageError("--method qme requires --ckpt".into()).into())
        }
        _ => None,
    };
    let method = match args.method {
        TransformMethod::Qme => Methodology::Qme,
        TransformMethod::Norm => Methodology::Norm,
        TransformMethod::Cnn => Methodology::Cnn,
        TransformMethod::Qnn => Methodology::Qnn,
    };
    let set = methodology_dataset(method, &raw, model.as_ref(), args.seed, args.budget)?
        .expect("every transform method yields a dataset");
    save_dataset(&set, &args.out)?;
    let mut m = Manifest::new("transform", args)?;
    m.input(&args.data)?;
    if let Some(p) = &args.ckpt {
        m.input(p)?;
    }
    m.output(&args.out)?;
    m.write(&sidecar(&args.out))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlArgs {
    #[arg(long, default_value_t = 1200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// SAC entropy weight.
    #[arg(long, default_value_t = 0.2)]
    pub zeta: f64,
    /// IQL expectile.
    #[arg(long, default_value_t = 0.7)]
    pub tau: f64,
    /// IQL advantage temperature.
    #[arg(long, default_value_t = 3.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.005)]
    pub polyak: f64,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 5)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = 50)]
    pub eval_max_steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "256,256")]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub twin_q: bool,
}

impl Default for RlArgs {
    fn default() -> Self {
        Self {
            epochs: 1200,
            batch: 100,
            gamma: 0.99,
            lr: 3e-4,
            zeta: 0.2,
            tau: 0.7,
            beta: 3.0,
            polyak: 0.005,
            eval_every: 10,
            eval_episodes: 5,
            eval_max_steps: 50,
            hidden: vec![256, 256],
            twin_q: false,
        }
    }
}

impl RlArgs {
    pub fn config(&self, algo: Algo, seed: u64) -> RlConfig {
        RlConfig {
            algo,
            gamma: self.gamma,
            batch_size: self.batch,
            epochs: self.epochs,
            lr: self.lr,
            zeta: self.zeta,
            tau_expectile: self.tau,
            beta_awr: self.beta,
            polyak_rho: self.polyak,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            eval_max_steps: self.eval_max_steps,
            seed,
            hidden: self.hidden.clone(),
            twin_q: self.twin_q,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainRlArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub algo: AlgoArg,
    /// Encoder checkpoint applied to evaluation observations (QME datasets).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Run k uses seed `seed0 + k`.
    #[arg(long, default_value_t = 0)]
    pub seed0: u64,
    #[command(flatten)]
    pub rl: RlArgs,
    /// Output directory for traces and policies.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn environment_for(set: &TransitionSet) -> Result<Pendulum> {
    let cfg = set.meta.env_config().ok_or_else(|| {
        UsageError(format!(
            "dataset env {:?} has no built-in simulator",
            set.meta.env
        ))
    })?;
    Ok(Pendulum::new(&cfg)?)
}

/// Evaluation-time encoder implied by the dataset representation.
pub fn encoder_for(set: &TransitionSet, ckpt: Option<QmeModel>) -> Result<EvalEncoder> {
    match (set.meta.repr.as_deref(), ckpt) {
        (Some("qme"), Some(model)) => Ok(EvalEncoder::Qme(model)),
        (Some("qme"), None) => {
            Err(UsageError("QME datasets need --ckpt for evaluation".into()).into())
        }
        (_, Some(_)) => {
            Err(UsageError("--ckpt given but the dataset is not QME-encoded".into()).into())
        }
        (Some("norm"), None) => Ok(EvalEncoder::L2),
        _ => Ok(EvalEncoder::Identity),
    }
}

/// Trains `runs` seeded agents, writing `run_k.csv` and `policy_k.json` into `out`.
pub fn train_runs(
    set: &TransitionSet,
    encoder: &EvalEncoder,
    rl: &RlArgs,
    algo: Algo,
    runs: usize,
    seed0: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for k in 0..runs {
        let cfg = rl.config(algo, seed0 + k as u64);
        let mut env = environment_for(set)?;
        let enc: &dyn StateEncoder = encoder;
        let (policy, mut trace) = train_offline(set, &cfg, &mut env, Some(enc))
            .with_context(|| format!("{} run {k}", algo.name()))?;
        trace.run = k;
        let csv = trace_path(out, k);
        fs::write(&csv, trace.to_csv())?;
        let pol = out.join(format!("policy_{k}.json"));
        write_json(&pol, &policy)?;
        written.push(csv);
        written.push(pol);
    }
    Ok(written)
}

pub fn train_rl_cmd(args: &TrainRlArgs) -> Result<()> {
    if args.runs == 0 {
        return Err(UsageError("--runs must be at least 1".into()).into());
    }
    let set = load_dataset(&args.data)?;
    let model = args.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let encoder = encoder_for(&set, model)?;
    args.rl.config(args.algo.into(), args.seed0).validate()?;
    let written = train_runs(
        &set,
        &encoder,
        &args.rl,
        args.algo.into(),
        args.runs,
        args.seed0,
        &args.out,
    )?;
    let mut m = Manifest::new("train-rl", args)?;
    m.input(&args.data)?;
    if let Some(p) = &args.ckpt {
        m.input(p)?;
    }
    for p in &written {
        m.output(p)?;
    }
    m.write(&args.out.join("manifest.json"))
}

/// Random-policy return repeated on the checkpoint grid of a training run.
pub fn random_traces(
    set: &TransitionSet,
    rl: &RlArgs,
    runs: usize,
    seed0: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for k in 0..runs {
        let seed = seed0 + k as u64;
        let mut env = environment_for(set)?;
        let value = random_policy_return(
            &mut env,
            rl.eval_episodes,
            rl.eval_max_steps,
            seed.wrapping_add(EVAL_SEED_OFFSET),
        );
        let trace = EvalTrace {
            run: k,
            points: (1..=rl.epochs / rl.eval_every.max(1))
                .map(|c| CheckpointReturn {
                    epoch: c * rl.eval_every,
                    mean_return: value,
                })
                .collect(),
        };
        let csv = trace_path(out, k);
        fs::write(&csv, trace.to_csv())?;
        written.push(csv);
    }
    Ok(written)
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Directory laid out as `[config/]METHOD/algo/run_k.csv`.
    #[arg(long)]
    pub traces: PathBuf,
    /// Trailing smoothing window in epochs.
    #[arg(long, default_value_t = 200)]
    pub window: usize,
    /// Methodology the enhancement percentages are relative to.
    #[arg(long, default_value = "RL")]
    pub base: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes `results.json`, `results.txt` and `curves.csv` into `out`.
pub fn report(
    traces_dir: &Path,
    window: usize,
    base: Methodology,
    out: &Path,
) -> Result<(ResultsTable, Vec<PathBuf>)> {
    let groups = load_trace_tree(traces_dir)?;
    if groups.is_empty() {
        bail!("no traces found under {}", traces_dir.display());
    }
    fs::create_dir_all(out)?;
    let mut cells = Vec::new();
    let curves_path = out.join("curves.csv");
    let mut curves = BufWriter::new(File::create(&curves_path)?);
    writeln!(curves, "config,methodology,algo,epoch,mean_return,smoothed")?;
    for g in &groups {
        let curve = smoothed_curve(&g.traces, window)
            .with_context(|| format!("{}/{}/{}", g.config, g.methodology, g.algo.name()))?;
        for k in 0..curve.epochs.len() {
            writeln!(
                curves,
                "{},{},{},{},{},{}",
                g.config,
                g.methodology,
                g.algo.name(),
                curve.epochs[k],
                curve.mean[k],
                curve.smoothed[k]
            )?;
        }
        cells.push(Cell {
            config: g.config.clone(),
            methodology: g.methodology,
            algo: g.algo,
            r_max: r_max(&g.traces)?,
        });
    }
    curves.flush()?;
    drop(curves);
    let table = ResultsTable::build(base, &cells);
    let json = out.join("results.json");
    write_json(&json, &table)?;
    let txt = out.join("results.txt");
    let mut text = Vec::new();
    table.write_text(&mut text)?;
    fs::write(&txt, text)?;
    Ok((table, vec![json, txt, curves_path]))
}

pub fn report_cmd(args: &ReportArgs) -> Result<()> {
    let base: Methodology = args
        .base
        .parse()
        .map_err(|_| UsageError(format!("unknown base methodology {:?}", args.base)))?;
    let (table, written) = report(&args.traces, args.window, base, &args.out)?;
    table.write_text(std::io::stdout().lock())?;
    let mut m = Manifest::new("report", args)?;
    for g in load_trace_tree(&args.traces)? {
        for p in &g.files {
            m.input(p)?;
        }
    }
    for p in &written {
        m.output(p)?;
    }
    m.write(&args.out.join("manifest.json"))
}

#[derive(Args, Debug, Serialize)]
pub struct HyperbolicityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Repr::Raw)]
    pub repr: Repr,
    /// Encoder checkpoint, required for `--repr qme`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityFile {
    pub repr: Repr,
    /// Dimension of the analysed states.
    pub dim: usize,
    #[serde(flatten)]
    pub report: HyperbolicityReport,
}

/// Delta-hyperbolicity of the dataset states under a representation.
pub fn hyperbolicity(
    set: &TransitionSet,
    repr: Repr,
    model: Option<&QmeModel>,
) -> Result<HyperbolicityFile> {
    let states = set.states();
    let mapped: Vec<Vec<f64>> = match repr {
        Repr::Raw => states,
        Repr::Norm => states
            .iter()
            .map(|s| qme_core::rl::l2_normalize(s).0)
            .collect(),
        Repr::Qme => {
            let model = model.ok_or_else(|| UsageError("--repr qme requires --ckpt".into()))?;
            states
                .iter()
                .map(|s| model.embed(s))
                .collect::<Result<_, _>>()?
        }
    };
    let dim = mapped.first().map_or(0, Vec::len);
    Ok(HyperbolicityFile {
        repr,
        dim,
        report: delta_for_states(&mapped)?,
    })
}

pub fn hyperbolicity_cmd(args: &HyperbolicityArgs) -> Result<()> {
    let set = load_dataset(&args.data)?;
    let model = args.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let result = hyperbolicity(&set, args.repr, model.as_ref())?;
    write_json(&args.out, &result)?;
    let mut m = Manifest::new("hyperbolicity", args)?;
    m.input(&args.data)?;
    if let Some(p) = &args.ckpt {
        m.input(p)?;
    }
    m.output(&args.out)?;
    m.write(&sidecar(&args.out))
}
