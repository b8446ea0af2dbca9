//! The five experiment commands — dataset generation, training, evaluation,
//! the data-quality ablation grid, and the numerical verification battery —
//! plus the reusable checks behind `verify`.
//!
//! Every command is deterministic given (config, seed): artifacts written
//! twice from the same inputs are byte-identical.

use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use macaw_core::baselines::{build_nets, finetune, mt_awr_train, trainer_for, Method};
use macaw_core::check::{finite_diff_gradient, rel_err_inf};
use macaw_core::envs::{
    generate_offline_dataset, Batch, BehaviorPolicy, ReplayBuffer, SampleMode, Task, Tier,
    ACT_DIM, EPISODE_LEN, OBS_DIM,
};
use macaw_core::graph::{Graph, NodeId};
use macaw_core::losses::{
    awr_loss_with_values, nll_loss, policy_adapt_loss_with_values, value_loss, LossConfig,
};
use macaw_core::meta::{evaluate_policy, meta_test, meta_train, DataRegime, EvalHook};
use macaw_core::nets::{Act, LayerSpec, PolicyNet, ValueNet};
use macaw_core::params::ParamSet;
use macaw_core::rng::{normal01, purpose, stream_rng, uniform_in};
use macaw_core::tensor::Tensor;
use macaw_core::universality::{
    colliding_pair, enriched_grads, recover_labels, verify_collision, LabelPair,
    UniversalityError,
};

use crate::checkpoint::{self, RunInfo, KIND_NETS, KIND_TRAINER};
use crate::invalid;
use crate::config::ExperimentConfig;
use crate::dataset_io::{
    dataset_file_name, load_buffers, load_manifest, write_dataset, write_manifest, Manifest,
    ManifestTask, TaskParamsJson,
};
use crate::metrics::{stderr_of, MetricsWriter, RowAggregator};
use crate::ValidationError;

/// File names inside the output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const VERIFY_FILE: &str = "verify.json";

/// The two methods the data-quality ablation compares.
pub const ABLATION_METHODS: [Method; 2] = [Method::Macaw, Method::MacawNoEnriched];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn run_info(cfg: &ExperimentConfig) -> RunInfo<'_> {
    RunInfo {
        method: &cfg.method,
        env: &cfg.env,
        obs_dim: OBS_DIM,
        act_dim: ACT_DIM,
        hidden: &cfg.hidden,
        latent: cfg.latent,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> std::io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Generate one offline dataset per task (train + held-out) plus the run
/// manifest into `cfg.data_dir`. Refuses to clobber a non-empty directory
/// unless `force` is set.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let kind = cfg.kind().expect("validated config");
    let dir = Path::new(&cfg.data_dir);
    if dir.is_dir() && dir.read_dir()?.next().is_some() && !force {
        invalid!("data dir {} is not empty (pass --force to overwrite)", dir.display());
    }
    std::fs::create_dir_all(dir)?;

    let n = cfg.train_tasks + cfg.test_tasks;
    let behavior = BehaviorPolicy::default();
    let mut tasks = Vec::with_capacity(n);
    for id in 0..n {
        let task = Task::sample(kind, id, cfg.data_seed);
        let buffer = generate_offline_dataset(
            &task,
            &behavior,
            cfg.episodes_per_task,
            cfg.gamma,
            cfg.data_seed,
        );
        let file = dataset_file_name(id);
        write_dataset(&dir.join(&file), &buffer)?;
        tasks.push(ManifestTask { id, file, params: TaskParamsJson::from_params(&task.params) });
    }
    let manifest = Manifest {
        version: 1,
        env: cfg.env.clone(),
        gamma: cfg.gamma,
        episode_length: EPISODE_LEN,
        episodes_per_task: cfg.episodes_per_task,
        data_seed: cfg.data_seed,
        train_ids: cfg.train_ids(),
        test_ids: cfg.test_ids(),
        tasks,
    };
    write_manifest(dir, &manifest)?;
    println!("wrote {n} datasets and the manifest to {}", dir.display());
    Ok(())
}

/// Load the manifest plus the train and held-out buffers, verifying the
/// files on disk agree with the config's env, split, discount, and episode
/// count.
fn load_run_data(cfg: &ExperimentConfig) -> Result<(Vec<ReplayBuffer>, Vec<ReplayBuffer>)> {
    let dir = Path::new(&cfg.data_dir);
    let manifest = load_manifest(dir)?;
    if manifest.env != cfg.env {
        invalid!("datasets in {} are for env `{}`, config wants `{}`", dir.display(), manifest.env, cfg.env);
    }
    if manifest.train_ids != cfg.train_ids() || manifest.test_ids != cfg.test_ids() {
        invalid!("dataset train/test split does not match the config (regenerate the data)");
    }
    if manifest.gamma != cfg.gamma {
        invalid!("dataset gamma {} does not match config gamma {}", manifest.gamma, cfg.gamma);
    }
    if manifest.episodes_per_task != cfg.episodes_per_task {
        invalid!(
            "datasets hold {} episodes per task, config wants {}",
            manifest.episodes_per_task,
            cfg.episodes_per_task
        );
    }
    let train = load_buffers(dir, &manifest, &manifest.train_ids, Some(cfg.gamma))?;
    let test = load_buffers(dir, &manifest, &manifest.test_ids, Some(cfg.gamma))?;
    Ok((train, test))
}

/// Train per the config, writing `metrics.csv` and `checkpoint.bin` into
/// `cfg.out_dir`. `resume` restores the trainer from the existing
/// checkpoint bit-exactly and appends the remaining iterations, so the
/// final artifacts match an uninterrupted run byte for byte.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let method = cfg.method_tag().expect("validated config");
    let (train, test) = load_run_data(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    // The main method writes the bare seven-column schema; baselines and
    // ablations tag every row so comparison files stay self-describing.
    let method_col = (method != Method::Macaw).then(|| method.tag());
    let info = run_info(cfg);
    let (pnet, vnet) = build_nets(method, OBS_DIM, ACT_DIM, &cfg.hidden, cfg.latent);

    if method == Method::MtAwrFt {
        if resume {
            invalid!("--resume is not supported for the multi-task baseline");
        }
        let mut agg = RowAggregator::new(MetricsWriter::create(&metrics_path, method_col)?);
        let mut io_err: Option<std::io::Error> = None;
        let nets =
            mt_awr_train(&pnet, &vnet, &train, &cfg.train_config(), &cfg.loss_config(), |m| {
                if io_err.is_none() {
                    if let Err(e) = agg.push(m) {
                        io_err = Some(e);
                    }
                }
            })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let rows = agg.finish()?;
        checkpoint::save_nets(&ckpt_path, &info, cfg.iterations, &nets.theta, &nets.phi)?;
        println!(
            "{}: {} iterations ({rows} metric rows) -> {}",
            method.tag(),
            cfg.iterations,
            out_dir.display()
        );
        return Ok(());
    }

    let mut trainer =
        trainer_for(method, pnet, vnet, cfg.train_config(), cfg.loss_config(), cfg.seed);
    let writer = if resume {
        let ckpt = checkpoint::load(&ckpt_path)?;
        ckpt.expect_kind(KIND_TRAINER)?;
        ckpt.check_run(&info)?;
        trainer
            .restore_state(&ckpt.trainer_state()?)
            .map_err(|e| ValidationError(format!("checkpoint does not fit this run: {e}")))?;
        MetricsWriter::append(&metrics_path, method_col).map_err(|e| {
            ValidationError(format!("cannot append to {}: {e}", metrics_path.display()))
        })?
    } else {
        MetricsWriter::create(&metrics_path, method_col)?
    };
    let remaining = cfg.iterations.saturating_sub(trainer.iteration);
    let hook = (cfg.eval_every > 0).then(|| EvalHook {
        buffers: &test,
        every: cfg.eval_every,
        rollouts: cfg.eval_rollouts,
        adapt_steps: cfg.eval_adapt_steps,
        final_iteration: cfg.iterations,
    });
    let mut agg = RowAggregator::new(writer);
    let mut io_err: Option<std::io::Error> = None;
    meta_train(&mut trainer, &train, DataRegime::Standard, hook.as_ref(), remaining, |m| {
        if io_err.is_none() {
            if let Err(e) = agg.push(m) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let rows = agg.finish()?;
    checkpoint::save_trainer(&ckpt_path, &info, &trainer)?;
    println!(
        "{}: {remaining} iterations{} ({rows} metric rows) -> {}",
        method.tag(),
        if resume { " resumed" } else { "" },
        out_dir.display()
    );
    Ok(())
}

/// Evaluate the checkpoint in `cfg.out_dir` on every held-out task: adapt
/// offline on one batch per task, then roll out the policy before and after
/// adaptation. The pre- and post-adaptation rollouts replay the same
/// episode stream, so the comparison is paired. Writes and returns the
/// JSON report.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let method = cfg.method_tag().expect("validated config");
    let (_, test) = load_run_data(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    let ckpt = checkpoint::load(&out_dir.join(CHECKPOINT_FILE))?;
    ckpt.expect_kind(if method == Method::MtAwrFt { KIND_NETS } else { KIND_TRAINER })?;
    ckpt.check_run(&run_info(cfg))?;
    let (pnet, vnet) = build_nets(method, OBS_DIM, ACT_DIM, &cfg.hidden, cfg.latent);
    let meta = ckpt.meta_params()?;
    let (objective, loss_cfg) = eval_objective(method, cfg.loss_config());
    let adapt_steps =
        if method == Method::MtAwrFt { cfg.finetune_steps } else { cfg.eval_adapt_steps };

    let mut task_reports = Vec::with_capacity(test.len());
    let mut pre_means = Vec::with_capacity(test.len());
    let mut post_means = Vec::with_capacity(test.len());
    let mut improved = 0usize;
    for (slot, buffer) in test.iter().enumerate() {
        let mut batch_rng = stream_rng(cfg.seed, purpose::EVAL, 0, (2 * slot) as u32);
        let d_test = buffer.sample_batch(
            cfg.batch_size.min(buffer.len()),
            SampleMode::Uniform,
            buffer.full_region(),
            &mut batch_rng,
        )?;
        let (theta_ad, curves) = if method == Method::MtAwrFt {
            let (th, _) =
                finetune(&pnet, &vnet, &meta.theta, &meta.phi, &d_test, adapt_steps, &loss_cfg)?;
            (th, None)
        } else {
            let (th, _, cv) =
                meta_test(&pnet, &vnet, &meta, &d_test, adapt_steps, objective, &loss_cfg)?;
            (th, Some(cv))
        };

        // Same stream for both policies: identical initial states, so the
        // post-minus-pre comparison is paired.
        let mut pre_rng = stream_rng(cfg.seed, purpose::EVAL, 0, (2 * slot + 1) as u32);
        let pre = evaluate_policy(&buffer.task, &pnet, &meta.theta, cfg.eval_rollouts, &mut pre_rng)?;
        let mut post_rng = stream_rng(cfg.seed, purpose::EVAL, 0, (2 * slot + 1) as u32);
        let post = evaluate_policy(&buffer.task, &pnet, &theta_ad, cfg.eval_rollouts, &mut post_rng)?;

        pre_means.push(pre.mean);
        post_means.push(post.mean);
        if post.mean > pre.mean {
            improved += 1;
        }
        task_reports.push(serde_json::json!({
            "task_id": buffer.task.id,
            "pre_return_mean": pre.mean,
            "pre_return_stderr": pre.stderr,
            "post_return_mean": post.mean,
            "post_return_stderr": post.stderr,
            "value_adapt_curve": curves.as_ref().map(|c| c.value.clone()),
            "policy_adapt_curve": curves.as_ref().map(|c| c.policy.clone()),
        }));
    }
    let report = serde_json::json!({
        "env": cfg.env,
        "method": cfg.method,
        "checkpoint_iteration": ckpt.header.iteration,
        "adapt_steps": adapt_steps,
        "rollouts_per_task": cfg.eval_rollouts,
        "tasks": task_reports,
        "aggregate": {
            "pre_return_mean": mean(&pre_means),
            "post_return_mean": mean(&post_means),
            "improved_tasks": improved,
            "tasks": test.len(),
        },
    });
    let path = out_dir.join(EVAL_FILE);
    write_json(&path, &report)?;
    println!(
        "{}: pre {:.3} -> post {:.3} over {} held-out tasks -> {}",
        method.tag(),
        mean(&pre_means),
        mean(&post_means),
        test.len(),
        path.display()
    );
    Ok(report)
}

/// Offline adaptation settings for a trained method: behavior cloning
/// adapts by likelihood alone, and the no-enriched ablation adapts with the
/// advantage-regression term switched off.
fn eval_objective(
    method: Method,
    mut loss_cfg: LossConfig,
) -> (macaw_core::meta::PolicyObjective, LossConfig) {
    use macaw_core::meta::PolicyObjective;
    let objective =
        if method == Method::MetaBc { PolicyObjective::Nll } else { PolicyObjective::EnrichedAwr };
    if method == Method::MacawNoEnriched {
        loss_cfg.lambda = 0.0;
    }
    (objective, loss_cfg)
}

/// One cell of the data-quality ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub tier: Tier,
    pub method: Method,
    /// Post-adaptation mean return of each held-out task.
    pub task_means: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

/// Data-quality ablation: for every tier × method cell, meta-train from
/// scratch with inner batches drawn from that tier while outer batches stay
/// pinned to the good tier, then adapt and evaluate each held-out task on
/// the same tier. Writes `ablation.csv` (per-task rows, then one aggregate
/// row per cell with an empty task_id) and returns the grid.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    let (train, test) = load_run_data(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;

    let mut cells = Vec::with_capacity(Tier::ALL.len() * ABLATION_METHODS.len());
    let mut csv = String::from("tier,method,task_id,return_mean,return_stderr\n");
    for tier in Tier::ALL {
        for method in ABLATION_METHODS {
            let (pnet, vnet) = build_nets(method, OBS_DIM, ACT_DIM, &cfg.hidden, cfg.latent);
            let mut trainer =
                trainer_for(method, pnet, vnet, cfg.train_config(), cfg.loss_config(), cfg.seed);
            meta_train(
                &mut trainer,
                &train,
                DataRegime::TierAblation { adapt_tier: tier },
                None,
                cfg.iterations,
                |_| {},
            )?;

            let mut task_means = Vec::with_capacity(test.len());
            for (slot, buffer) in test.iter().enumerate() {
                let region = buffer.tier_slice(tier)?;
                let mut batch_rng = stream_rng(cfg.seed, purpose::EVAL, 0, (2 * slot) as u32);
                let d_test = buffer.sample_batch(
                    cfg.batch_size.min(region.len),
                    SampleMode::Uniform,
                    region,
                    &mut batch_rng,
                )?;
                let (theta_ad, _, _) = meta_test(
                    &trainer.pnet,
                    &trainer.vnet,
                    &trainer.meta,
                    &d_test,
                    cfg.eval_adapt_steps,
                    trainer.objective,
                    &trainer.loss_cfg,
                )?;
                let mut roll_rng = stream_rng(cfg.seed, purpose::EVAL, 0, (2 * slot + 1) as u32);
                let stats = evaluate_policy(
                    &buffer.task,
                    &trainer.pnet,
                    &theta_ad,
                    cfg.eval_rollouts,
                    &mut roll_rng,
                )?;
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    tier.tag(),
                    method.tag(),
                    buffer.task.id,
                    stats.mean,
                    stats.stderr
                ));
                task_means.push(stats.mean);
            }
            let cell_mean = mean(&task_means);
            let cell_stderr = stderr_of(&task_means);
            csv.push_str(&format!("{},{},,{cell_mean},{cell_stderr}\n", tier.tag(), method.tag()));
            cells.push(AblationCell { tier, method, task_means, mean: cell_mean, stderr: cell_stderr });
        }
    }
    let path = out_dir.join(ABLATION_FILE);
    std::fs::write(&path, csv)?;

    println!("{:<8} {:>18} {:>18}", "tier", ABLATION_METHODS[0].tag(), ABLATION_METHODS[1].tag());
    for tier in Tier::ALL {
        let row: Vec<String> = ABLATION_METHODS
            .iter()
            .map(|m| {
                let cell =
                    cells.iter().find(|c| c.tier == tier && c.method == *m).expect("grid complete");
                format!("{:>18.3}", cell.mean)
            })
            .collect();
        println!("{:<8} {}", tier.tag(), row.join(" "));
    }
    println!("wrote {}", path.display());
    Ok(cells)
}

/// Numerical verification battery. Writes `verify.json` and fails (runtime
/// error, exit code 2) unless every check passes. `inject_fault` corrupts
/// one analytic gradient coordinate before the comparison, proving the
/// checks can actually fail.
pub fn cmd_verify(cfg: &ExperimentConfig, inject_fault: bool) -> Result<serde_json::Value> {
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;

    // Losses against central finite differences.
    let loss_trials = 40;
    let loss_err = loss_gradient_max_err(loss_trials, 11, inject_fault)?;
    let loss_pass = loss_err < 1e-4;

    // The one-dimensional bi-level gradient with a hand-computable value.
    let (meta_grad, meta_expected) = one_d_meta_oracle()?;
    let meta_err = (meta_grad - meta_expected).abs();
    let meta_pass = meta_err < 1e-10;

    // Distinct labels, identical plain AWR gradient.
    let mut collision_gap: f64 = 0.0;
    let mut collision_all = true;
    for k in [1usize, 2, 6] {
        for sigma2 in [0.04, 1.0] {
            let (p1, p2) = colliding_pair(k, 1.0);
            let rep = verify_collision(&p1, &p2, sigma2, 1.0, 1e-12)?;
            collision_gap = collision_gap.max(rep.gap).max(rep.gap_autodiff);
            collision_all &= rep.collides;
        }
    }
    let collision_pass = collision_all && collision_gap < 1e-12;

    // Labels recovered from enriched-loss gradients; λ = 0 must be refused.
    let recovery_draws = 1000;
    let (recovery_err, lambda0_rejected) = recovery_max_err(recovery_draws, 13)?;
    let recovery_pass = recovery_err < 1e-8 && lambda0_rejected;

    // Single-sample update rank: rank one for a dense layer, higher for the
    // weight-transform parameterization.
    let rank_trials = 20usize;
    let mut dense_max: f64 = 0.0;
    let mut wt_above = 0usize;
    for t in 0..rank_trials {
        dense_max = dense_max.max(dense_update_rank_ratio(100 + t as u64)?);
        if wt_update_rank_ratio(200 + t as u64)? > 1e-4 {
            wt_above += 1;
        }
    }
    let rank_pass = dense_max < 1e-8 && wt_above * 20 >= rank_trials * 19;

    // Weight-transform forward equals the materialized affine map.
    let wt_gap = wt_equivalence_gap(17)?;
    let wt_pass = wt_gap < 1e-12;

    let all_pass =
        loss_pass && meta_pass && collision_pass && recovery_pass && rank_pass && wt_pass;
    let report = serde_json::json!({
        "gradient_checks": {
            "trials": loss_trials, "max_rel_err": loss_err, "threshold": 1e-4, "pass": loss_pass,
        },
        "meta_gradient_oracle": {
            "value": meta_grad, "expected": meta_expected, "abs_err": meta_err,
            "threshold": 1e-10, "pass": meta_pass,
        },
        "collision": {
            "collision_gap": collision_gap, "threshold": 1e-12, "pass": collision_pass,
        },
        "label_recovery": {
            "trials": recovery_draws, "recovery_max_err": recovery_err,
            "lambda_zero_rejected": lambda0_rejected, "threshold": 1e-8, "pass": recovery_pass,
        },
        "update_rank": {
            "trials": rank_trials, "dense_max_ratio": dense_max,
            "wt_above_threshold": wt_above, "pass": rank_pass,
        },
        "wt_equivalence": {
            "max_abs_gap": wt_gap, "threshold": 1e-12, "pass": wt_pass,
        },
        "all_pass": all_pass,
    });
    let path = out_dir.join(VERIFY_FILE);
    write_json(&path, &report)?;
    for (name, ok) in [
        ("gradient_checks", loss_pass),
        ("meta_gradient_oracle", meta_pass),
        ("collision", collision_pass),
        ("label_recovery", recovery_pass),
        ("update_rank", rank_pass),
        ("wt_equivalence", wt_pass),
    ] {
        println!("{name}: {}", if ok { "pass" } else { "FAIL" });
    }
    println!("report -> {}", path.display());
    if !all_pass {
        anyhow::bail!("verification failed (see {})", path.display());
    }
    Ok(report)
}

/// A random batch with plausible magnitudes for gradient checking.
pub fn synthetic_batch(rows: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Batch {
    let obs: Vec<f64> = (0..rows * OBS_DIM).map(|_| normal01(rng)).collect();
    let act: Vec<f64> = (0..rows * ACT_DIM).map(|_| uniform_in(rng, -1.0, 1.0)).collect();
    let ret: Vec<f64> = (0..rows).map(|_| normal01(rng)).collect();
    Batch {
        obs: Tensor::matrix(rows, OBS_DIM, obs),
        act: Tensor::matrix(rows, ACT_DIM, act),
        ret,
        indices: (0..rows).collect(),
    }
}

fn build_loss(
    g: &mut Graph,
    which: usize,
    pnet: &PolicyNet,
    vnet: &ValueNet,
    ids: &[NodeId],
    batch: &Batch,
    v_values: &[f64],
    lc: &LossConfig,
) -> Result<NodeId> {
    Ok(match which {
        0 => value_loss(g, vnet, ids, batch)?,
        1 => awr_loss_with_values(g, pnet, ids, batch, v_values, lc)?,
        2 => policy_adapt_loss_with_values(g, pnet, ids, batch, v_values, lc)?,
        _ => nll_loss(g, pnet, ids, batch)?,
    })
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients, cycling over the four training losses (value regression,
/// advantage-weighted regression, the enriched adaptation loss, and
/// negative log-likelihood) on alternating weight-transform and dense nets.
/// The value predictions feeding the policy losses are fixed inputs, so
/// every probe differentiates the same smooth function. `inject_fault`
/// corrupts one analytic coordinate on the first trial.
pub fn loss_gradient_max_err(trials: usize, seed: u64, inject_fault: bool) -> Result<f64> {
    let mut max_err: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, purpose::TEST, trial as u32, 0);
        let rows = 6;
        let batch = synthetic_batch(rows, &mut rng);
        let lc = LossConfig::default();
        let hidden = [5usize];
        let (pnet, vnet) = if trial % 2 == 0 {
            (PolicyNet::wt(OBS_DIM, ACT_DIM, &hidden, 3), ValueNet::wt(OBS_DIM, &hidden, 3))
        } else {
            (PolicyNet::dense(OBS_DIM, ACT_DIM, &hidden), ValueNet::dense(OBS_DIM, &hidden))
        };
        let phi = vnet.init_params(&mut rng);
        let theta = pnet.init_params(&mut rng);
        let v_values = vnet.forward_plain(&phi, batch.obs.data(), rows);

        let which = trial % 4;
        let params = if which == 0 { &phi } else { &theta };
        let flat = params.flatten();

        let mut analytic = {
            let mut g = Graph::new();
            let ids = params.bind(&mut g);
            let loss = build_loss(&mut g, which, &pnet, &vnet, &ids, &batch, &v_values, &lc)?;
            let gs = g.grad(loss, &ids, false)?;
            gs.iter().flat_map(|&id| g.value(id).data().to_vec()).collect::<Vec<f64>>()
        };
        if inject_fault && trial == 0 {
            let bump = 1e-2 * (1.0 + analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            analytic[0] += bump;
        }
        let fd = finite_diff_gradient(
            |p| {
                let set = params.with_values(p).expect("same layout");
                let mut g = Graph::new();
                let ids = set.bind_const(&mut g);
                let loss = build_loss(&mut g, which, &pnet, &vnet, &ids, &batch, &v_values, &lc)
                    .expect("loss builds on probed parameters");
                g.item(loss)
            },
            &flat,
            1e-5,
        )?;
        max_err = max_err.max(rel_err_inf(&analytic, &fd));
    }
    Ok(max_err)
}

/// The one-dimensional bi-level oracle: inner loss `½(θ−1)²`, one gradient
/// step at rate `½`, outer loss `½θ′²`. At `θ = 0` the adapted value is
/// `θ′ = ½` and the exact outer gradient is `dθ′²/2 /dθ = θ′·(1−½) = ¼`.
/// Returns `(computed, expected)`.
pub fn one_d_meta_oracle() -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let theta = g.param(Tensor::scalar(0.0));
    let shifted = g.offset(theta, -1.0);
    let sq = g.square(shifted);
    let inner = g.scale(sq, 0.5);
    let inner_grad = g.grad(inner, &[theta], true)?;
    let step = g.scale(inner_grad[0], -0.5);
    let adapted = g.add(theta, step)?;
    let outer_sq = g.square(adapted);
    let outer = g.scale(outer_sq, 0.5);
    let meta = g.grad(outer, &[theta], false)?;
    Ok((g.item(meta[0]), 0.25))
}

/// Max round-trip error of label recovery over `draws` random
/// (labels, predictions, hyperparameter) draws, plus whether recovery with
/// λ = 0 is correctly refused as non-invertible.
pub fn recovery_max_err(draws: usize, seed: u64) -> Result<(f64, bool)> {
    let mut rng = stream_rng(seed, purpose::TEST, 0, 1);
    let lambdas = [1e-2, 0.1];
    let temps = [0.7, 1.0, 3.0];
    let sigmas = [0.04, 1.0];
    let mut max_err: f64 = 0.0;
    for draw in 0..draws {
        let k = 1 + draw % 6;
        let lambda = lambdas[(draw / 3) % 2];
        let temp = temps[draw % 3];
        let sigma2 = sigmas[(draw / 6) % 2];
        let action: Vec<f64> = (0..k).map(|_| uniform_in(&mut rng, -1.0, 1.0)).collect();
        let advantage = uniform_in(&mut rng, -2.0, 2.0);
        let labels = LabelPair::new(action, advantage)?;
        let mu: Vec<f64> = (0..k).map(|_| normal01(&mut rng)).collect();
        let adv_pred = normal01(&mut rng);
        let (g_awr, g_adv) = enriched_grads(&mu, adv_pred, &labels, sigma2, lambda, temp)?;
        let recovered = recover_labels(g_adv, &g_awr, adv_pred, &mu, sigma2, lambda, temp)?;
        max_err = max_err.max(recovered.distance(&labels));
    }
    let labels = LabelPair::new(vec![0.3, -0.2], 0.5)?;
    let (g_awr, g_adv) = enriched_grads(&[0.0, 0.0], 0.1, &labels, 0.04, 0.0, 1.0)?;
    let rejected = matches!(
        recover_labels(g_adv, &g_awr, 0.1, &[0.0, 0.0], 0.04, 0.0, 1.0),
        Err(UniversalityError::NonInvertible)
    );
    Ok((max_err, rejected))
}

/// σ₂/σ₁ of a rows×cols matrix given row-major data (0 when fewer than two
/// singular values exist or the matrix is zero).
pub fn singular_ratio(data: &[f64], rows: usize, cols: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    if sv.len() < 2 || sv[0] == 0.0 {
        return 0.0;
    }
    sv[1] / sv[0]
}

/// σ₂/σ₁ of the single-sample squared-error gradient of a dense layer's
/// weight matrix. The gradient of a single sample is an outer product, so
/// this is numerically zero.
pub fn dense_update_rank_ratio(seed: u64) -> Result<f64> {
    let (d_in, d_out) = (5, 7);
    let spec = LayerSpec::dense(d_in, d_out, Act::Identity);
    let mut rng = stream_rng(seed, purpose::TEST, 1, 0);
    let mut set = ParamSet::new();
    spec.init_into(&mut set, "layer", &mut rng);
    let x: Vec<f64> = (0..d_in).map(|_| normal01(&mut rng)).collect();
    let target: Vec<f64> = (0..d_out).map(|_| normal01(&mut rng)).collect();

    let mut g = Graph::new();
    let ids = set.bind(&mut g);
    let x_id = g.constant(Tensor::matrix(1, d_in, x));
    let y = spec.forward(&mut g, &ids, x_id)?;
    let t_id = g.constant(Tensor::matrix(1, d_out, target));
    let diff = g.sub(y, t_id)?;
    let sq = g.square(diff);
    let loss = g.sum(sq);
    let gs = g.grad(loss, &ids, false)?;
    Ok(singular_ratio(g.value(gs[0]).data(), d_out, d_in))
}

/// σ₂/σ₁ of the effective weight change `W*(p − ηg) − W*(p)` after one
/// single-sample gradient step on a weight-transform layer's parameters.
/// Unlike the dense case this is generically far from rank one.
pub fn wt_update_rank_ratio(seed: u64) -> Result<f64> {
    let (d_in, d_out, latent) = (5, 7, 8);
    let spec = LayerSpec::wt(d_in, d_out, latent, Act::Identity);
    let mut rng = stream_rng(seed, purpose::TEST, 2, 0);
    let mut set = ParamSet::new();
    spec.init_into(&mut set, "layer", &mut rng);
    let x: Vec<f64> = (0..d_in).map(|_| normal01(&mut rng)).collect();
    let target: Vec<f64> = (0..d_out).map(|_| normal01(&mut rng)).collect();

    let mut flat = set.flatten();
    let w_before = {
        let mut g = Graph::new();
        let ids = set.bind(&mut g);
        let (w_star, _) = spec.materialize(&mut g, &ids)?;
        let before = g.value(w_star).data().to_vec();
        let x_id = g.constant(Tensor::matrix(1, d_in, x));
        let y = spec.forward(&mut g, &ids, x_id)?;
        let t_id = g.constant(Tensor::matrix(1, d_out, target));
        let diff = g.sub(y, t_id)?;
        let sq = g.square(diff);
        let loss = g.sum(sq);
        let gs = g.grad(loss, &ids, false)?;
        let flat_g: Vec<f64> = gs.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
        for (p, gr) in flat.iter_mut().zip(&flat_g) {
            *p -= 0.01 * gr;
        }
        before
    };
    let stepped = set.with_values(&flat)?;
    let w_after = {
        let mut g = Graph::new();
        let ids = stepped.bind_const(&mut g);
        let (w_star, _) = spec.materialize(&mut g, &ids)?;
        g.value(w_star).data().to_vec()
    };
    let dw: Vec<f64> = w_after.iter().zip(&w_before).map(|(a, b)| a - b).collect();
    Ok(singular_ratio(&dw, d_out, d_in))
}

/// Max absolute gap between a weight-transform layer's forward output and
/// the materialized affine map applied by hand, over 20 random layers and
/// inputs.
pub fn wt_equivalence_gap(seed: u64) -> Result<f64> {
    let mut max_gap: f64 = 0.0;
    for trial in 0..20u32 {
        let d_in = 4 + (trial as usize) % 3;
        let d_out = 3 + (trial as usize) % 4;
        let latent = 2 + (trial as usize) % 5;
        let mut rng = stream_rng(seed, purpose::TEST, 3, trial);
        let spec = LayerSpec::wt(d_in, d_out, latent, Act::Identity);
        let mut set = ParamSet::new();
        spec.init_into(&mut set, "wt", &mut rng);
        let rows = 3;
        let x: Vec<f64> = (0..rows * d_in).map(|_| normal01(&mut rng)).collect();

        let mut g = Graph::new();
        let ids = set.bind_const(&mut g);
        let x_id = g.constant(Tensor::matrix(rows, d_in, x.clone()));
        let y_id = spec.forward(&mut g, &ids, x_id)?;
        let y_wt = g.value(y_id).data().to_vec();
        let (w_id, b_id) = spec.materialize(&mut g, &ids)?;
        let w = g.value(w_id).data().to_vec();
        let b = g.value(b_id).data().to_vec();

        for r in 0..rows {
            for o in 0..d_out {
                let mut acc = b[o];
                for i in 0..d_in {
                    acc += x[r * d_in + i] * w[o * d_in + i];
                }
                max_gap = max_gap.max((y_wt[r * d_out + o] - acc).abs());
            }
        }
    }
    Ok(max_gap)
}
