use std::io::Write;
use std::path::Path;

use gplar_core::iterative::{bench_cg as run_bench, CgConfig, Preconditioner};
use gplar_core::kernels::model_covariance;
use gplar_core::latent_prior::{chain_logdensity, joint_logdensity};
use gplar_core::samplers::{sample_batch, sample_conditioned, SamplerMode};
use gplar_core::toy_model::{
    isotropic_ablation, reference_config, reference_data_kernel, reference_decoder, synth_dataset, train as run_train,
    LinearDecoder, StepMetrics, ToyParams, TrainConfig, TrainError, REFERENCE_STEPS,
};
use gplar_core::variational::{kl_isotropic_special_case, kl_monte_carlo, kl_to_gp_prior};
use gplar_core::{
    build_gram, checks, rng, BetaSchedule, DiagonalPosterior, GramMatrix, KernelSpec, KlCap, LatentTrajectory,
    NoiseBlock,
};
use ndarray::{Array1, Array2};
use serde_json::{json, Map, Value};

use crate::config::{build_grid, kernel_options, layered, resolve_kernel, KernelOptions, Layered, *};
use crate::output::{read_matrix, to_json, Sink, Table};
use crate::CliError;

fn finite(name: &str, v: f64) -> Result<Value, CliError> {
    if v.is_finite() {
        Ok(Value::from(v))
    } else {
        Err(CliError::Numerical(format!("{name} is not finite ({v})")))
    }
}

fn matrix_json(m: &Array2<f64>) -> Value {
    Value::Array(m.rows().into_iter().map(|r| Value::from(r.to_vec())).collect())
}

fn vector_json(v: &Array1<f64>) -> Value {
    Value::from(v.to_vec())
}

/// Flags over config file, plus the kernel resolved from both.
fn merge_with_kernel<T: Layered>(
    opts: T,
    kernel: impl Fn(&T) -> KernelOptions,
    defaults: KernelOptions,
) -> Result<(T, KernelSpec<f64>), CliError> {
    let (flags, file) = layered(opts)?;
    let spec = resolve_kernel(kernel(&flags), kernel(&file).or(defaults))?;
    Ok((flags.or(file), spec))
}

/// Reads a trajectory CSV: either plain `L x d_z` columns, or the long format
/// written by `sample` holding a single sample (`sample` and `t` columns
/// are dropped).
pub(crate) fn read_trajectory(path: &Path) -> Result<Array2<f64>, CliError> {
    let table = Table::read_csv(path)?;
    if table.rows.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    let long = table.header.len() > 2 && table.header[0] == "sample" && table.header[1] == "t";
    if !long {
        return Ok(table.to_matrix());
    }
    let first = table.rows[0][0];
    if table.rows.iter().any(|r| r[0] != first) {
        return Err(CliError::Input(format!(
            "{}: holds several samples; pass a single trajectory",
            path.display()
        )));
    }
    let m = table.to_matrix();
    Ok(m.slice(ndarray::s![.., 2..]).to_owned())
}

pub fn gram(opts: GramOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (o, spec) = merge_with_kernel(opts, |o| kernel_options!(o), KernelOptions::default())?;
    let mut sink = Sink::open(o.out.as_deref())?;
    let grid = build_grid(o.len, o.grid.as_deref())?;
    let factored = build_gram(&spec, &grid)?;
    let m = if o.with_jitter.unwrap_or(false) { factored.matrix().clone() } else { model_covariance(&spec, &grid)? };
    sink.write(stdout, &Table::from_matrix(&m, "c").to_csv()?)
}

pub fn sample(opts: SampleOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (o, spec) = merge_with_kernel(opts, |o| kernel_options!(o), KernelOptions::default())?;
    let mut sink = Sink::open(o.out.as_deref())?;
    let n = o.n.unwrap_or(1);
    let seed = o.seed.unwrap_or(0);
    let mode = o.mode.as_deref().unwrap_or("seq");
    let grid = build_grid(o.len, o.grid.as_deref())?;
    let gram = build_gram(&spec, &grid)?;
    let trajectories = match mode {
        "seq" | "para" => {
            if o.prefix.is_some() {
                return Err(CliError::Usage("--prefix only applies to --mode cond".into()));
            }
            let m = if mode == "seq" { SamplerMode::Sequential } else { SamplerMode::Parallel };
            sample_batch(&gram, o.dz.unwrap_or(1), n, seed, m)?
        }
        "cond" => {
            let path = o.prefix.as_deref().ok_or_else(|| CliError::Usage("--mode cond needs --prefix".into()))?;
            let prefix = read_trajectory(path)?;
            let d_z = prefix.ncols();
            if o.dz.is_some_and(|d| d != d_z) {
                return Err(CliError::Usage(format!("--dz {} disagrees with the prefix width {d_z}", o.dz.unwrap())));
            }
            let rest = gram.len().saturating_sub(prefix.nrows());
            (0..n)
                .map(|i| {
                    let noise = NoiseBlock::standard(rest, d_z, seed, &format!("sample/{i}"));
                    sample_conditioned(&gram, prefix.view(), &noise)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        other => return Err(CliError::Usage(format!("unknown mode `{other}` (expected seq, para or cond)"))),
    };
    let d_z = trajectories.first().map_or(o.dz.unwrap_or(1), LatentTrajectory::dim);
    let mut table = Table::new(["sample".to_string(), "t".to_string()].into_iter().chain((1..=d_z).map(|j| format!("z{j}"))));
    for (i, traj) in trajectories.iter().enumerate() {
        for (t, row) in traj.z().rows().into_iter().enumerate() {
            table.push([i as f64, (t + 1) as f64].into_iter().chain(row.iter().copied()).collect());
        }
    }
    sink.write(stdout, &table.to_csv()?)
}

pub fn logdensity(opts: LogdensityOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (o, spec) = merge_with_kernel(opts, |o| kernel_options!(o), KernelOptions::default())?;
    let mut sink = Sink::open(o.out.as_deref())?;
    let path = o.traj.as_deref().ok_or_else(|| CliError::Usage("--traj is required".into()))?;
    let traj = LatentTrajectory::new(read_trajectory(path)?)?;
    let grid = build_grid(Some(traj.len()), o.grid.as_deref())?;
    let gram = build_gram(&spec, &grid)?;
    let chain = chain_logdensity(&gram, &traj)?;
    let joint = joint_logdensity(&gram, &traj)?;
    let mut m = Map::new();
    m.insert("L".into(), Value::from(traj.len()));
    m.insert("d_z".into(), Value::from(traj.dim()));
    m.insert("chain_logdensity".into(), finite("chain_logdensity", chain)?);
    m.insert("joint_logdensity".into(), finite("joint_logdensity", joint)?);
    m.insert("abs_diff".into(), finite("abs_diff", (chain - joint).abs())?);
    sink.write(stdout, &to_json(m))
}

pub fn kl(opts: KlOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (flags, file) = layered(opts)?;
    let o = flags.or(file);
    let mut sink = Sink::open(o.out.as_deref())?;
    let gram_path = o.gram.as_deref().ok_or_else(|| CliError::Usage("--gram is required".into()))?;
    let pair = o.posterior.as_deref().ok_or_else(|| CliError::Usage("--posterior is required".into()))?;
    let (mu_path, lv_path) = pair
        .split_once(',')
        .ok_or_else(|| CliError::Usage("--posterior expects `mu.csv,logvar.csv`".into()))?;
    let gram = GramMatrix::from_matrix(read_matrix(gram_path)?)?;
    let q = DiagonalPosterior::new(read_trajectory(Path::new(mu_path))?, read_trajectory(Path::new(lv_path))?)?;
    let total = kl_to_gp_prior(&q, &gram)?;
    let mut m = Map::new();
    m.insert("L".into(), Value::from(q.len()));
    m.insert("d_z".into(), Value::from(q.dim()));
    m.insert("kl_total".into(), finite("kl_total", total)?);
    m.insert("kl_per_token".into(), finite("kl_per_token", total / q.len() as f64)?);
    if let Some(s2) = o.isotropic {
        m.insert("kl_isotropic".into(), finite("kl_isotropic", kl_isotropic_special_case(&q, s2)?)?);
    }
    if let Some(samples) = o.mc {
        let seed = o.seed.unwrap_or(0);
        let (est, se) = kl_monte_carlo(&q, &gram, samples, &mut rng::substream(seed, "kl/mc"))?;
        m.insert(
            "monte_carlo".into(),
            json!({
                "samples": samples,
                "seed": seed,
                "estimate": finite("mc estimate", est)?,
                "stderr": finite("mc stderr", se)?,
            }),
        );
    }
    sink.write(stdout, &to_json(m))
}

pub fn bench_cg(opts: BenchOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (o, spec) = merge_with_kernel(opts, |o| kernel_options!(o), KernelOptions::default())?;
    let mut sink = Sink::open(o.out.as_deref())?;
    let lengths = o.lengths.clone().unwrap_or_else(|| vec![64, 128, 256, 512]);
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(CliError::Usage("--lengths must list positive sizes".into()));
    }
    let preconditioner = match o.preconditioner.as_deref().unwrap_or("none") {
        "none" => Preconditioner::None,
        "jacobi" => Preconditioner::Jacobi,
        other => return Err(CliError::Usage(format!("unknown preconditioner `{other}` (expected none or jacobi)"))),
    };
    let max_len = lengths.iter().copied().max().unwrap_or(1);
    let cfg = CgConfig::new(o.tol.unwrap_or(1e-6), o.max_iters.unwrap_or(10 * max_len), preconditioner)?;
    let rows = run_bench(&spec, &lengths, &cfg, o.trials.unwrap_or(5), o.seed.unwrap_or(0))?;
    let mut table = Table::new(["L", "kappa_est", "iters_mean", "iters_std", "wall_ms_mean"]);
    for r in rows {
        table.push(vec![r.len as f64, r.kappa_est, r.iters_mean, r.iters_std, r.wall_ms_mean]);
    }
    sink.write(stdout, &table.to_csv()?)
}

fn train_kernel_defaults() -> KernelOptions {
    let k = reference_config(0, 1).kernel;
    KernelOptions {
        kernel: Some(k.family.name().into()),
        lengthscale: Some(k.lengthscale()),
        variance: Some(k.variance()),
        nugget: Some(k.nugget_rel),
        ..KernelOptions::default()
    }
}

/// Ground-truth decoder of the synthetic data: the fixed reference decoder
/// for `(d_z, d_x) = (2, 4)`, otherwise random weights from substream
/// `synth/decoder`, scaled by `1 / sqrt(d_z)`.
fn data_decoder(d_z: usize, d_x: usize, seed: u64) -> LinearDecoder<f64> {
    let reference = reference_decoder();
    if reference.v.dim() == (d_z, d_x) {
        return reference;
    }
    let mut g = rng::substream(seed, "synth/decoder");
    LinearDecoder {
        v: rng::standard_normal_matrix(&mut g, d_z, d_x) / (d_z as f64).sqrt(),
        c: Array1::zeros(d_x),
        log_obs_var: reference.log_obs_var,
    }
}

fn train_config(o: &TrainOptions, kernel: KernelSpec<f64>) -> Result<TrainConfig<f64>, CliError> {
    let seed = o.seed.unwrap_or(0);
    let base = reference_config(seed, o.steps.unwrap_or(REFERENCE_STEPS));
    let beta_max = o.beta_max.unwrap_or(base.schedule.beta_max);
    let schedule = BetaSchedule::new(
        beta_max,
        o.warmup_steps.unwrap_or(base.schedule.warmup_steps),
        o.kl_target.unwrap_or(base.schedule.kl_target),
        o.adapt_rate.unwrap_or(base.schedule.adapt_rate),
        o.beta_min.unwrap_or(1e-4_f64.min(beta_max)),
    )?;
    let cfg = TrainConfig {
        batch_size: o.batch_size.unwrap_or(base.batch_size),
        learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
        seq_len: o.seq_len.unwrap_or(base.seq_len),
        d_z: o.d_z.unwrap_or(base.d_z),
        d_x: o.d_x.unwrap_or(base.d_x),
        kernel,
        schedule,
        cap: KlCap::new(o.kl_cap.unwrap_or(f64::INFINITY))?,
        train_kernel: o.train_kernel.unwrap_or(base.train_kernel),
        ..base
    };
    match o.prior.as_deref().unwrap_or("gp") {
        "gp" => Ok(cfg),
        "isotropic" => Ok(isotropic_ablation(&cfg)),
        other => Err(CliError::Usage(format!("unknown prior `{other}` (expected gp or isotropic)"))),
    }
}

fn metrics_table(history: &[StepMetrics<f64>]) -> Table {
    let mut t = Table::new(["step", "elbo_tok", "ll_tok", "kl_tok_raw", "kl_tok_capped", "beta", "lengthscale", "variance"]);
    for h in history {
        t.push(vec![
            h.step as f64,
            h.elbo_tok,
            h.ll_tok,
            h.kl_tok_raw,
            h.kl_tok_capped,
            h.beta,
            h.lengthscale,
            h.variance,
        ]);
    }
    t
}

fn params_json(p: &ToyParams<f64>, status: Value) -> Result<Vec<u8>, CliError> {
    if p.to_flat().iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("parameters are not finite".into()));
    }
    let k = &p.kernel;
    let mut m = Map::new();
    m.insert("status".into(), status);
    m.insert("d_x".into(), Value::from(p.d_x()));
    m.insert("d_z".into(), Value::from(p.d_z()));
    m.insert(
        "kernel".into(),
        json!({
            "family": k.family.name(),
            "lengthscale": k.lengthscale(),
            "variance": k.variance(),
            "raw_lengthscale": k.raw_lengthscale,
            "raw_variance": k.raw_variance,
            "nugget": k.nugget_rel,
            "jitter": k.jitter_abs,
        }),
    );
    let e = &p.encoder;
    m.insert(
        "encoder".into(),
        json!({
            "w_mu": matrix_json(&e.w_mu),
            "b_mu": vector_json(&e.b_mu),
            "w_lv": matrix_json(&e.w_lv),
            "b_lv": vector_json(&e.b_lv),
        }),
    );
    let d = &p.decoder;
    m.insert(
        "decoder".into(),
        json!({
            "v": matrix_json(&d.v),
            "c": vector_json(&d.c),
            "log_obs_var": d.log_obs_var,
        }),
    );
    Ok(to_json(m))
}

pub fn train(opts: TrainOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (o, kernel) = merge_with_kernel(opts, |o| kernel_options!(o), train_kernel_defaults())?;
    let mut metrics_sink = Sink::open(o.out_metrics.as_deref())?;
    let mut params_sink = o.out_params.as_deref().map(|p| Sink::open(Some(p))).transpose()?;
    let cfg = train_config(&o, kernel)?;

    let data_kernel = {
        let r = reference_data_kernel();
        KernelSpec::rbf(o.data_lengthscale.unwrap_or(r.lengthscale()), o.data_variance.unwrap_or(r.variance()))?
            .with_nugget(o.data_nugget.unwrap_or(r.nugget_rel))
    };
    let decoder = data_decoder(cfg.d_z, cfg.d_x, cfg.seed);
    let data = synth_dataset(&data_kernel, &decoder, o.n_seqs.unwrap_or(64), cfg.seq_len, cfg.seed)?;

    let (history, params, failure) = match run_train(&cfg, &data) {
        Ok(out) => (out.history, out.params, None),
        Err(TrainError::Setup(e)) => return Err(e.into()),
        Err(TrainError::Diverged { step, cause, last_good, history }) => {
            (history, *last_good, Some(format!("training diverged at step {step}: {cause}")))
        }
    };
    metrics_sink.write(stdout, &metrics_table(&history).to_csv()?)?;
    if let Some(sink) = params_sink.as_mut() {
        let status = match &failure {
            None => json!({ "completed": true, "steps": history.len() }),
            Some(msg) => json!({ "completed": false, "steps": history.len(), "reason": msg }),
        };
        sink.write(stdout, &params_json(&params, status)?)?;
    }
    match failure {
        None => Ok(()),
        Some(msg) => Err(CliError::Numerical(msg)),
    }
}

pub fn check(opts: CheckOptions, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (flags, file) = layered(opts)?;
    let o = flags.or(file);
    let mut sink = Sink::open(o.out.as_deref())?;
    let outcomes = checks::run_checks(o.seed.unwrap_or(0))?;
    sink.write(stdout, checks::format_table(&outcomes).as_bytes())?;
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} checks failed", outcomes.len())));
    }
    Ok(())
}
