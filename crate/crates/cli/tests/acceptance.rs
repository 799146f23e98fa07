//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line and
//! the process exits non-zero when any of them fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qme_core::ansatz::{build_qme_circuit, QmeArchitecture, Stage, TARGET_QUBIT};
use qme_core::baselines::{random_policy_return, Methodology};
use qme_core::envdata::{
    generate_offline, load_jsonl, save_jsonl, Behavior, DatasetMeta, EnvConfig, Pendulum,
    Transition, TransitionSet, PENDULUM_ENV,
};
use qme_core::geom::{delta_for_states, delta_hyperbolicity, distance_matrix};
use qme_core::neural::{expectile_loss, polyak_update, Mlp};
use qme_core::qme::{
    decode_normalized, qme_loss_terms, train_qme, DecodeMode, QmeCheckpoint, QmeConfig, QmeParams,
};
use qme_core::report::{Cell, ResultsTable};
use qme_core::rl::{
    iql_policy_loss, iql_q_loss, iql_v_loss, sac_policy_loss, sac_q_loss, sac_v_loss,
    train_offline, AgentNets, Algo, Batch, RlConfig, EVAL_SEED_OFFSET,
};
use qme_core::statevector::{GateOp, StateVector};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn desk_dataset() -> TransitionSet {
    let env = EnvConfig {
        lift_dim: 15,
        seed: 0,
    };
    generate_offline(&env, Behavior::NoisyEnergy { epsilon: 0.3 }, 100, 0).unwrap()
}

fn c1_table_arithmetic() -> Outcome {
    let envs = ["ant", "halfcheetah", "hopper"];
    let published = [
        (Algo::Sac, [33.6, -8.0, 41.5], [45.0, 14.6, 54.9]),
        (Algo::Iql, [41.7, 6.6, 58.9], [46.1, 27.9, 70.4]),
    ];
    let mut cells = Vec::new();
    for (algo, base, qme) in published {
        for i in 0..3 {
            for (m, v) in [(Methodology::Rl, base[i]), (Methodology::Qme, qme[i])] {
                cells.push(Cell {
                    config: envs[i].into(),
                    methodology: m,
                    algo,
                    r_max: v,
                });
            }
        }
    }
    let table = ResultsTable::build(Methodology::Rl, &cells);
    let sac = table
        .row(Methodology::Qme, Algo::Sac)
        .and_then(|r| r.avg_enh)
        .ok_or("missing SAC row")?;
    let iql = table
        .row(Methodology::Qme, Algo::Iql)
        .and_then(|r| r.avg_enh)
        .ok_or("missing IQL row")?;
    ensure(
        (sac - 116.2).abs() <= 0.1 && (iql - 117.6).abs() <= 0.1,
        || format!("avg enh SAC {sac:.3}, IQL {iql:.3}"),
    )?;
    Ok(format!("SAC {sac:.2}%, IQL {iql:.2}%"))
}

fn c2_parameter_count() -> Outcome {
    let arch = QmeArchitecture::new(4, 1).map_err(|e| e.to_string())?;
    let n = arch.parameter_count();
    ensure(n == 26, || format!("{n} parameters"))?;
    Ok(format!("{n} parameters"))
}

/// Dense gate matrix built by enumerating basis states.
fn gate_matrix(gate: &GateOp, n: usize) -> Vec<Vec<f64>> {
    let dim = 1 << n;
    let mut m = vec![vec![0.0; dim]; dim];
    for input in 0..dim {
        match *gate {
            GateOp::Ry { target, angle } => {
                let (s, c) = (angle / 2.0).sin_cos();
                let bit = 1 << target;
                let low = input & !bit;
                if input & bit == 0 {
                    m[low][input] += c;
                    m[low | bit][input] += s;
                } else {
                    m[low][input] += -s;
                    m[low | bit][input] += c;
                }
            }
            GateOp::Cx { control, target } => {
                let out = input ^ (((input >> control) & 1) << target);
                m[out][input] += 1.0;
            }
        }
    }
    m
}

fn c3_simulator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_amp, mut worst_prob, mut worst_norm) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.random_range(1..=5);
        let dim = 1 << n;
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|a| a * a).sum::<f64>().sqrt();
        let amps: Vec<f64> = raw.iter().map(|a| a / norm).collect();
        let n_gates = rng.random_range(0..40);
        let mut gates = Vec::new();
        for _ in 0..n_gates {
            if n > 1 && rng.random_bool(0.4) {
                let control = rng.random_range(0..n);
                let mut target = rng.random_range(0..n - 1);
                if target >= control {
                    target += 1;
                }
                gates.push(GateOp::Cx { control, target });
            } else {
                gates.push(GateOp::Ry {
                    target: rng.random_range(0..n),
                    angle: rng.random_range(-2.0 * PI..2.0 * PI),
                });
            }
        }
        let sim = StateVector::from_amplitudes(n, amps.clone())
            .and_then(|s| s.run(&gates))
            .map_err(|e| format!("case {case}: {e}"))?;
        let mut oracle = amps;
        for g in &gates {
            let m = gate_matrix(g, n);
            oracle = (0..dim)
                .map(|r| (0..dim).map(|k| m[r][k] * oracle[k]).sum())
                .collect();
        }
        for (a, b) in sim.amplitudes().iter().zip(&oracle) {
            worst_amp = worst_amp.max((a - b).abs());
        }
        for q in 0..n {
            let p: f64 = (0..dim)
                .filter(|i| (i >> q) & 1 == 1)
                .map(|i| oracle[i] * oracle[i])
                .sum();
            let got = sim.prob_one(q).map_err(|e| e.to_string())?;
            worst_prob = worst_prob.max((got - p).abs());
        }
        worst_norm = worst_norm.max((sim.norm_sq().sqrt() - 1.0).abs());
    }
    ensure(
        worst_amp <= 1e-10 && worst_prob <= 1e-12 && worst_norm <= 1e-10,
        || format!("amp {worst_amp:e}, prob {worst_prob:e}, norm {worst_norm:e}"),
    )?;
    Ok(format!(
        "100 circuits, max amp err {worst_amp:.1e}, prob err {worst_prob:.1e}"
    ))
}

/// Inverse of a real RY/CX circuit: reversed order, negated angles.
fn inverse(gates: &[GateOp]) -> Vec<GateOp> {
    gates
        .iter()
        .rev()
        .map(|g| match *g {
            GateOp::Ry { target, angle } => GateOp::Ry {
                target,
                angle: -angle,
            },
            cx => cx,
        })
        .collect()
}

fn c4_reward_coding() -> Outcome {
    let arch = QmeArchitecture::new(4, 1).map_err(|e| e.to_string())?;
    let mut cfg = QmeConfig::new(arch);
    cfg.decode_mode = DecodeMode::Amplitude;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = QmeParams::random(&arch, &mut rng);
    let decode = build_qme_circuit(&arch, &params, Stage::FullDecode).map_err(|e| e.to_string())?;
    let mut worst_loss = 0.0f64;
    let mut worst_decode = 0.0f64;
    for g in [0.0f64, 0.25, 0.5, 0.9, 1.0] {
        // Input whose decoded target qubit holds (sqrt(1 - g^2), g), other qubits at 0.
        let mut target = vec![0.0; 16];
        target[0] = (1.0 - g * g).sqrt();
        target[1] = g;
        let x = StateVector::from_amplitudes(4, target)
            .and_then(|s| s.run(&inverse(&decode)))
            .map_err(|e| e.to_string())?
            .into_amplitudes();
        let gates =
            build_qme_circuit(&arch, &params, Stage::Train(g)).map_err(|e| e.to_string())?;
        let state = StateVector::amplitude_encode(&x, 4)
            .and_then(|s| s.run(&gates))
            .map_err(|e| e.to_string())?;
        let term = state.prob_one(TARGET_QUBIT).map_err(|e| e.to_string())?;
        let terms = qme_loss_terms(&params, &cfg, &x, g).map_err(|e| e.to_string())?;
        worst_loss = worst_loss.max(term).max(terms.reward);
        let decoded = decode_normalized(&params, &cfg, &x).map_err(|e| e.to_string())?;
        worst_decode = worst_decode.max((decoded - g).abs());
    }
    ensure(worst_loss < 1e-12 && worst_decode <= 1e-10, || {
        format!("reward term {worst_loss:e}, decode err {worst_decode:e}")
    })?;
    Ok(format!(
        "reward term {worst_loss:.1e}, decode err {worst_decode:.1e}"
    ))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..ra.len() {
        c += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    c / (va * vb).sqrt()
}

fn c5_qme_training() -> Outcome {
    let data = desk_dataset();
    let mut cfg = QmeConfig::new(QmeArchitecture::new(4, 1).map_err(|e| e.to_string())?);
    cfg.delta = 0.5;
    cfg.dfo.max_evals = 2000;
    let model = train_qme(&data, &cfg, 0).map_err(|e| e.to_string())?;
    let ratio = model.final_loss / model.initial_loss;
    let decoded: Vec<f64> = data
        .transitions
        .iter()
        .map(|t| model.decode_reward(&t.s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let rho = spearman(&decoded, &data.rewards());
    ensure(ratio <= 0.6 && rho >= 0.5, || {
        format!("loss ratio {ratio:.3}, spearman {rho:.3}")
    })?;
    Ok(format!(
        "loss {:.4} -> {:.4} (ratio {ratio:.3}), spearman {rho:.3}",
        model.initial_loss, model.final_loss
    ))
}

/// Largest relative deviation of an analytic gradient from central differences.
fn fd_error(params: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max((fd - analytic[i]).abs() / scale);
    }
    worst
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.params_mut().copy_from_slice(p);
    n
}

fn c6_gradients() -> Outcome {
    let batch = Batch {
        s: vec![vec![0.3, -0.7], vec![-1.1, 0.4], vec![0.9, 0.1]],
        a: vec![vec![0.25], vec![-0.6], vec![0.8]],
        r: vec![-1.5, -0.2, 0.7],
        s_next: vec![vec![0.2, -0.5], vec![-0.9, 0.8], vec![0.5, 0.5]],
        done: vec![false, true, false],
    };
    let noise = vec![vec![0.4], vec![-1.3], vec![0.2]];
    let mut worst = 0.0f64;
    for (seed, twin, hidden) in [(1, false, 1), (2, true, 1), (3, false, 5), (4, true, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets =
            AgentNets::new(2, 1, &[hidden], twin, &mut rng).map_err(|e| e.to_string())?;
        for t in nets.q_target.iter_mut() {
            *t = Mlp::new(t.sizes(), &mut rng).map_err(|e| e.to_string())?;
        }
        nets.v_target = Mlp::new(nets.v.sizes(), &mut rng).map_err(|e| e.to_string())?;

        for q_loss in [sac_q_loss, iql_q_loss] {
            let (_, g) = q_loss(&nets, &batch, 0.9).map_err(|e| e.to_string())?;
            for k in 0..nets.q.len() {
                worst = worst.max(fd_error(nets.q[k].params(), &g[k], |p| {
                    let mut n = nets.clone();
                    n.q[k] = with_params(&nets.q[k], p);
                    q_loss(&n, &batch, 0.9).unwrap().0
                }));
            }
        }
        let (_, g) = sac_v_loss(&nets, &batch, 0.2, &noise).map_err(|e| e.to_string())?;
        worst = worst.max(fd_error(nets.v.params(), &g, |p| {
            let mut n = nets.clone();
            n.v = with_params(&nets.v, p);
            sac_v_loss(&n, &batch, 0.2, &noise).unwrap().0
        }));
        let (_, g) = iql_v_loss(&nets, &batch, 0.7).map_err(|e| e.to_string())?;
        worst = worst.max(fd_error(nets.v.params(), &g, |p| {
            let mut n = nets.clone();
            n.v = with_params(&nets.v, p);
            iql_v_loss(&n, &batch, 0.7).unwrap().0
        }));
        let (_, g) = sac_policy_loss(&nets, &batch, 0.2, &noise).map_err(|e| e.to_string())?;
        worst = worst.max(fd_error(nets.policy.params(), &g, |p| {
            let mut n = nets.clone();
            n.policy = with_params(&nets.policy, p);
            sac_policy_loss(&n, &batch, 0.2, &noise).unwrap().0
        }));
        let (_, g) = iql_policy_loss(&nets, &batch, 3.0).map_err(|e| e.to_string())?;
        worst = worst.max(fd_error(nets.policy.params(), &g, |p| {
            let mut n = nets.clone();
            n.policy = with_params(&nets.policy, p);
            iql_policy_loss(&n, &batch, 3.0).unwrap().0
        }));
    }
    ensure(worst < 1e-4, || {
        format!("worst relative gradient error {worst:e}")
    })?;

    for u in [-3.0, -0.5, 0.0, 0.25, 2.0] {
        ensure(expectile_loss(u, 0.5) == 0.5 * u * u, || {
            format!("expectile_loss({u}, 0.5)")
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let online = Mlp::new(&[3, 4, 1], &mut rng).map_err(|e| e.to_string())?;
    let mut target = Mlp::new(&[3, 4, 1], &mut rng).map_err(|e| e.to_string())?;
    polyak_update(&mut target, &online, 1.0).map_err(|e| e.to_string())?;
    ensure(target.params() == online.params(), || {
        "polyak rho=1 did not copy".into()
    })?;
    Ok(format!("worst relative gradient error {worst:.1e}"))
}

fn c7_offline_rl() -> Outcome {
    let data = desk_dataset();
    let env_cfg = data.meta.env_config().ok_or("dataset has no environment")?;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let cfg = RlConfig {
            seed,
            epochs: 1200,
            gamma: 0.99,
            ..RlConfig::new(Algo::Iql)
        };
        let mut env = Pendulum::new(&env_cfg).map_err(|e| e.to_string())?;
        let (_, trace) = train_offline(&data, &cfg, &mut env, None).map_err(|e| e.to_string())?;
        let last = *trace.returns().last().ok_or("empty trace")?;
        let random = random_policy_return(
            &mut env,
            cfg.eval_episodes,
            cfg.eval_max_steps,
            seed + EVAL_SEED_OFFSET,
        );
        if last > random {
            wins += 1;
        }
        lines.push(format!("{last:.1}/{random:.1}"));
    }
    let detail = format!(
        "{wins}/5 runs above random (iql/random: {})",
        lines.join(", ")
    );
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

/// Four-point condition over every quadruple, from pair sums.
fn four_point_delta(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let d = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = 0.0f64;
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                for w in 0..n {
                    let mut sums = [d(x, y) + d(z, w), d(x, z) + d(y, w), d(x, w) + d(y, z)];
                    sums.sort_by(f64::total_cmp);
                    best = best.max(0.5 * (sums[2] - sums[1]));
                }
            }
        }
    }
    best
}

fn c8_hyperbolicity() -> Outcome {
    let square = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![0.0, 1.0],
    ];
    let sq = delta_for_states(&square).map_err(|e| e.to_string())?.delta;
    ensure((sq - (2f64.sqrt() - 1.0)).abs() <= 1e-9, || {
        format!("unit square delta {sq}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=12 {
        for _ in 0..10 {
            let dim = rng.random_range(1..=4);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let fast =
                delta_hyperbolicity(&distance_matrix(&pts).map_err(|e| e.to_string())?).delta;
            let slow = four_point_delta(&pts);
            ensure((fast - slow).abs() <= 1e-9, || {
                format!("n={n}: fast {fast} vs brute force {slow}")
            })?;
        }
    }

    let data = desk_dataset();
    let cfg = QmeConfig::new(QmeArchitecture::new(4, 1).map_err(|e| e.to_string())?);
    let model = train_qme(&data, &cfg, 0).map_err(|e| e.to_string())?;
    let raw = delta_for_states(&data.states())
        .map_err(|e| e.to_string())?
        .delta_rel;
    let embedded = model.transform(&data).map_err(|e| e.to_string())?;
    let qme = delta_for_states(&embedded.states())
        .map_err(|e| e.to_string())?
        .delta_rel;
    let detail = format!("delta_rel raw {raw:.4}, qme {qme:.4}; oracles agree");
    ensure(qme < raw, || detail.clone())?;
    Ok(detail)
}

fn qme_bin() -> &'static str {
    env!("CARGO_BIN_EXE_qme")
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(qme_bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "qme {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn random_set(rng: &mut ChaCha8Rng) -> TransitionSet {
    let obs_dim = rng.random_range(1..6);
    let action_dim = rng.random_range(1..3);
    let n = rng.random_range(1..20);
    let f =
        |rng: &mut ChaCha8Rng| rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-6..3));
    let transitions = (0..n)
        .map(|_| Transition {
            s: (0..obs_dim).map(|_| f(rng)).collect(),
            a: (0..action_dim).map(|_| f(rng)).collect(),
            r: f(rng),
            s_next: (0..obs_dim).map(|_| f(rng)).collect(),
            done: rng.random_bool(0.2),
        })
        .collect();
    let meta = DatasetMeta {
        env: PENDULUM_ENV.into(),
        obs_dim,
        action_dim,
        seed: rng.random_bool(0.5).then(|| rng.random()),
        lift_dim: rng.random_bool(0.5).then(|| rng.random_range(0..20)),
        behavior: None,
        action_bound: rng.random_bool(0.5).then(|| rng.random_range(0.1..5.0)),
        repr: rng.random_bool(0.3).then(|| "norm".to_string()),
    };
    TransitionSet::new(meta, transitions).unwrap()
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> QmeCheckpoint {
    let n = rng.random_range(2..=5);
    let arch = QmeArchitecture::new(n, rng.random_range(1..n)).unwrap();
    let p = QmeParams::random(&arch, rng);
    QmeCheckpoint {
        arch,
        delta: rng.random_range(0.0..=1.0),
        decode_mode: if rng.random_bool(0.5) {
            DecodeMode::Amplitude
        } else {
            DecodeMode::Probability
        },
        theta_e: p.theta_e,
        theta_t: p.theta_t,
        theta_d: p.theta_d,
        r_min: -rng.random_range(1.0..20.0),
        r_max: rng.random_range(0.0..5.0),
        seed: rng.random(),
        final_loss: rng.random(),
    }
}

fn c9_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let set = random_set(&mut rng);
        let mut buf = Vec::new();
        save_jsonl(&set, &mut buf).map_err(|e| e.to_string())?;
        let back = load_jsonl(buf.as_slice()).map_err(|e| format!("jsonl case {case}: {e}"))?;
        ensure(back == set, || format!("jsonl case {case} differs"))?;

        let ckpt = random_checkpoint(&mut rng);
        let json = serde_json::to_string(&ckpt).map_err(|e| e.to_string())?;
        let parsed: QmeCheckpoint = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        let model = parsed
            .clone()
            .into_model()
            .map_err(|e| format!("checkpoint case {case}: {e}"))?;
        ensure(parsed == ckpt && model.to_checkpoint() == ckpt, || {
            format!("checkpoint case {case} differs")
        })?;
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("det");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let config = tmp.path().join("experiment.json");
    fs::write(
        &config,
        r#"{"data": {"lift": 3, "n": 40}, "qme": {"budget": 150},
            "rl": {"epochs": 20, "hidden": [8, 8], "eval_episodes": 2, "eval_max_steps": 10},
            "runs": 1, "qnn_budget": 100, "window": 20}"#,
    )
    .map_err(|e| e.to_string())?;
    let steps: Vec<Vec<String>> = vec![
        vec![
            "gen-data".into(),
            "--lift".into(),
            "7".into(),
            "--n".into(),
            "50".into(),
            "--out".into(),
            p("d.jsonl"),
        ],
        vec![
            "train-qme".into(),
            "--data".into(),
            p("d.jsonl"),
            "--budget".into(),
            "200".into(),
            "--out".into(),
            p("q.json"),
        ],
        vec![
            "transform".into(),
            "--data".into(),
            p("d.jsonl"),
            "--method".into(),
            "qme".into(),
            "--ckpt".into(),
            p("q.json"),
            "--out".into(),
            p("qme.jsonl"),
        ],
        vec![
            "transform".into(),
            "--data".into(),
            p("d.jsonl"),
            "--method".into(),
            "norm".into(),
            "--out".into(),
            p("norm.jsonl"),
        ],
        vec![
            "transform".into(),
            "--data".into(),
            p("d.jsonl"),
            "--method".into(),
            "cnn".into(),
            "--out".into(),
            p("cnn.jsonl"),
        ],
        vec![
            "transform".into(),
            "--data".into(),
            p("d.jsonl"),
            "--method".into(),
            "qnn".into(),
            "--budget".into(),
            "100".into(),
            "--out".into(),
            p("qnn.jsonl"),
        ],
        vec![
            "hyperbolicity".into(),
            "--data".into(),
            p("d.jsonl"),
            "--repr".into(),
            "qme".into(),
            "--ckpt".into(),
            p("q.json"),
            "--out".into(),
            p("h.json"),
        ],
        vec![
            "train-rl".into(),
            "--data".into(),
            p("qme.jsonl"),
            "--ckpt".into(),
            p("q.json"),
            "--algo".into(),
            "sac".into(),
            "--runs".into(),
            "2".into(),
            "--epochs".into(),
            "20".into(),
            "--hidden".into(),
            "8,8".into(),
            "--out".into(),
            p("tr/QME/sac"),
        ],
        vec![
            "train-rl".into(),
            "--data".into(),
            p("d.jsonl"),
            "--algo".into(),
            "iql".into(),
            "--runs".into(),
            "2".into(),
            "--epochs".into(),
            "20".into(),
            "--hidden".into(),
            "8,8".into(),
            "--out".into(),
            p("tr/RL/iql"),
        ],
        vec![
            "report".into(),
            "--traces".into(),
            p("tr"),
            "--window".into(),
            "20".into(),
            "--out".into(),
            p("rep"),
        ],
        vec![
            "experiment".into(),
            "--config".into(),
            config.to_string_lossy().into_owned(),
            "--out".into(),
            p("exp"),
            "--name".into(),
            "fixed".into(),
        ],
    ];
    let run_all = || -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let _ = fs::remove_dir_all(&dir);
        for s in &steps {
            let args: Vec<&str> = s.iter().map(String::as_str).collect();
            run_cli(&args)?;
        }
        Ok(snapshot(&dir))
    };
    let first = run_all()?;
    let second = run_all()?;
    ensure(first.keys().eq(second.keys()), || {
        "different output file sets".into()
    })?;
    for (path, bytes) in &first {
        ensure(second[path] == *bytes, || {
            format!("{} differs between runs", path.display())
        })?;
    }

    let bad = Command::new(qme_bin())
        .args(["gen-data", "--bogus"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(bad.status.code() == Some(2), || {
        format!("bad flag exit code {:?}", bad.status.code())
    })?;
    Ok(format!(
        "{} CLI outputs bit-identical; 100 jsonl and checkpoint round trips",
        first.len()
    ))
}

fn c10_methodology_matrix() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("smoke.json");
    fs::write(&config, r#"{"rl": {"epochs": 100}, "runs": 2}"#).map_err(|e| e.to_string())?;
    let out = tmp.path().join("runs");
    let start = Instant::now();
    run_cli(&[
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--name",
        "smoke",
    ])?;
    let elapsed = start.elapsed();
    let text =
        fs::read_to_string(out.join("smoke/report/results.json")).map_err(|e| e.to_string())?;
    let table: ResultsTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    for m in Methodology::ALL {
        for algo in [Algo::Sac, Algo::Iql] {
            let row = table
                .row(m, algo)
                .ok_or_else(|| format!("missing row {m} {}", algo.name()))?;
            ensure(row.r_max.iter().all(Option::is_some), || {
                format!("empty cell {m} {}", algo.name())
            })?;
        }
    }
    for algo in [Algo::Sac, Algo::Iql] {
        let avg = table.row(Methodology::Rl, algo).and_then(|r| r.avg_enh);
        ensure(avg == Some(0.0), || format!("base avg enh {avg:?}"))?;
    }
    ensure(elapsed < Duration::from_secs(30 * 60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("12 cells complete in {:.0?}", elapsed))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 table arithmetic", c1_table_arithmetic),
        ("2 parameter count", c2_parameter_count),
        ("3 simulator oracle", c3_simulator_oracle),
        ("4 reward coding", c4_reward_coding),
        ("5 qme training progress", c5_qme_training),
        ("6 gradient correctness", c6_gradients),
        ("7 offline rl sanity", c7_offline_rl),
        ("8 hyperbolicity", c8_hyperbolicity),
        ("9 determinism and round trips", c9_determinism),
        ("10 methodology matrix", c10_methodology_matrix),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
