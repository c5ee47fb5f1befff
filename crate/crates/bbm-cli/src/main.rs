//! `bbm`: simulation and rare-event estimation for binary branching
//! Brownian motion. Every run is driven by a single seed, emits plot-ready
//! CSV/JSON, and writes a manifest with digests of all outputs.

mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use bbm_core::error::Error;
use bbm_core::estimators::{
    conditioned_stats, martingale_tail, naive_ldp, spine_ldp_sum, summarize_replica, trend_e_it,
    LdpMethod,
};
use bbm_core::observables::overlap_limit;
use bbm_core::params::LdpParamsT;
use bbm_core::spine::{ig_cdf, sample_spine_fpt};
use bbm_core::stats::{ks_pvalue, ks_statistic};
use bbm_core::LdpParams;

use output::{Row, RunWriter};

const DEFAULT_MAX_PARTICLES: usize = 1 << 22;

#[derive(Parser)]
#[command(
    name = "bbm",
    version,
    about = "Branching Brownian motion: large-deviation simulation and estimation"
)]
struct Cli {
    /// Output directory for CSV/JSON artifacts and the run manifest.
    #[arg(long, global = true, default_value = "bbm-out")]
    out_dir: PathBuf,
    /// Worker threads (default: available parallelism). Results are
    /// byte-identical for any worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Naive,
    Spine,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the derived large-deviation parameter bundle as JSON.
    Params {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
    },
    /// Simulate replicas and emit one observable row per replica.
    Simulate {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        t: f64,
        /// Window offset for the reported first-passage time tau(z).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        z: f64,
        #[arg(long, default_value_t = 100)]
        replicas: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also dump the segment skeleton of replica 0 to tree.csv.
        #[arg(long)]
        dump_tree: bool,
    },
    /// Estimate P(L_t(xt) >= y e^{at}/sqrt t), naively or by the spine
    /// change of measure summed over unit windows.
    EstimateLdp {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Replicas for the naive method.
        #[arg(long, default_value_t = 100_000)]
        replicas: u64,
        #[arg(long, default_value_t = -6, allow_negative_numbers = true)]
        z_min: i64,
        #[arg(long, default_value_t = 6, allow_negative_numbers = true)]
        z_max: i64,
        /// Replicas per window for the spine method.
        #[arg(long, default_value_t = 2000)]
        replicas_per_window: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Fit the power-law tail of the additive martingale W_T(theta).
    TailFit {
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 8.0)]
        t: f64,
        #[arg(long, default_value_t = 50_000)]
        replicas: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Conditioned statistics (overlap, maximum, argmin, Pareto index)
    /// under the rare level-set event.
    Conditioned {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
        #[arg(long, default_value_t = -6, allow_negative_numbers = true)]
        z_min: i64,
        #[arg(long, default_value_t = 6, allow_negative_numbers = true)]
        z_max: i64,
        #[arg(long, default_value_t = 2000)]
        replicas_per_window: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Monte Carlo estimate of the overlap observable OL(r, beta).
    Overlap {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 10.0)]
        t: f64,
        #[arg(long, default_value_t = 2000)]
        replicas: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Kolmogorov-Smirnov check of the spine first-passage time against
    /// the inverse-Gaussian law.
    FptTest {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        z: f64,
        #[arg(long, default_value_t = 20_000)]
        replicas: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// e^{It} P_hat across horizons: the Theorem-1.1 plateau diagnostic.
    Trend {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[arg(long, value_delimiter = ',', default_value = "6,8,10")]
        t_list: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
        #[arg(long, value_enum, default_value = "naive")]
        method: MethodArg,
        /// Replicas per horizon (naive) or per window (spine).
        #[arg(long, default_value_t = 10_000)]
        replicas: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
    {
        eprintln!("error: failed to build worker pool: {e}");
        std::process::exit(1);
    }
    match run(cli, workers) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(match e {
                Error::Domain(_) | Error::Range(_) | Error::DegenerateLevel(_) => 2,
                _ => 1,
            });
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Range(format!("io: {e}"))
}

fn run(cli: Cli, workers: usize) -> Result<(), Error> {
    let start = Instant::now();
    let argv: Vec<String> = std::env::args().collect();
    let command = argv.join(" ");
    match cli.cmd {
        Cmd::Params { x, a } => {
            let params: LdpParams = LdpParamsT::derive(x, a)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&params).expect("params serialization")
            );
            Ok(())
        }
        Cmd::Simulate {
            x,
            a,
            t,
            z,
            replicas,
            seed,
            dump_tree,
        } => {
            let params = LdpParamsT::derive(x, a)?;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            let mut csv = String::from(
                "replica,population,level_count,W_theta,I_min,s_argmin,tau_z,M_t,hits_line\n",
            );
            let mut summaries = Vec::new();
            for rep in 0..replicas {
                let s = summarize_replica(&params, t, z, seed, rep)?;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    s.replica,
                    s.population,
                    s.level_count,
                    s.w_theta,
                    s.i_min,
                    s.s_argmin,
                    s.tau_z.map(|v| v.to_string()).unwrap_or_default(),
                    s.m_t,
                    s.hits_line
                ));
                summaries.push(s);
            }
            w.write("replicas.csv", &csv).map_err(io_err)?;
            let json =
                serde_json::to_string_pretty(&summaries).expect("summary serialization");
            w.write("replicas.json", &format!("{json}\n")).map_err(io_err)?;
            if dump_tree {
                let tree =
                    bbm_core::simulate(&bbm_core::SimConfig::new(t, seed, 0))?;
                w.write("tree.csv", &tree.dump_csv()).map_err(io_err)?;
            }
            w.replica_counts.insert("simulate".into(), replicas);
            let cfg = serde_json::json!({
                "x": x, "a": a, "t": t, "z": z, "replicas": replicas,
                "dump_tree": dump_tree,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
        Cmd::EstimateLdp {
            x,
            a,
            t,
            y,
            method,
            replicas,
            z_min,
            z_max,
            replicas_per_window,
            seed,
        } => {
            let params = LdpParamsT::derive(x, a)?;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            let mut rows = Vec::new();
            match method {
                MethodArg::Naive => {
                    let est = naive_ldp(x, a, t, y, replicas, seed)?;
                    w.replica_counts.insert("naive".into(), replicas);
                    rows.push(Row {
                        quantity: "ldp_probability".into(),
                        x: Some(x),
                        a: Some(a),
                        t: Some(t),
                        y: Some(y),
                        z_lo: None,
                        z_hi: None,
                        estimate: est.value,
                        stderr: est.stderr,
                        n: est.n,
                        method: est.method.clone(),
                        seed,
                    });
                }
                MethodArg::Spine => {
                    let sum = spine_ldp_sum(
                        &params,
                        t,
                        y,
                        z_min,
                        z_max,
                        replicas_per_window,
                        seed,
                        DEFAULT_MAX_PARTICLES,
                    )?;
                    w.replica_counts
                        .insert("spine".into(), sum.combined.n);
                    for win in &sum.windows {
                        rows.push(Row {
                            quantity: "ldp_window".into(),
                            x: Some(x),
                            a: Some(a),
                            t: Some(t),
                            y: Some(y),
                            z_lo: Some(win.z as f64),
                            z_hi: Some((win.z + 1) as f64),
                            estimate: win.estimate.value,
                            stderr: win.estimate.stderr,
                            n: win.estimate.n,
                            method: win.estimate.method.clone(),
                            seed: win.estimate.seed,
                        });
                    }
                    rows.push(Row {
                        quantity: "ldp_probability".into(),
                        x: Some(x),
                        a: Some(a),
                        t: Some(t),
                        y: Some(y),
                        z_lo: Some(z_min as f64),
                        z_hi: Some(z_max as f64),
                        estimate: sum.combined.value,
                        stderr: sum.combined.stderr,
                        n: sum.combined.n,
                        method: sum.combined.method.clone(),
                        seed,
                    });
                    let acceptance_mean = sum
                        .windows
                        .iter()
                        .map(|w| w.acceptance)
                        .sum::<f64>()
                        / sum.windows.len() as f64;
                    let detail = serde_json::json!({
                        "windows": sum.windows,
                        "combined": sum.combined,
                        "tail_bound": sum.tail_bound,
                        "acceptance_mean": acceptance_mean,
                    });
                    w.write(
                        "spine_detail.json",
                        &format!(
                            "{}\n",
                            serde_json::to_string_pretty(&detail).expect("detail")
                        ),
                    )
                    .map_err(io_err)?;
                    if sum.tail_bound > sum.combined.stderr {
                        w.warnings.push(format!(
                            "tail-window bound {} exceeds combined stderr; widen the z grid",
                            sum.tail_bound
                        ));
                    }
                }
            }
            w.write_rows(&rows).map_err(io_err)?;
            let cfg = serde_json::json!({
                "x": x, "a": a, "t": t, "y": y,
                "method": match method { MethodArg::Naive => "naive", MethodArg::Spine => "spine" },
                "replicas": replicas, "z_min": z_min, "z_max": z_max,
                "replicas_per_window": replicas_per_window,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
        Cmd::TailFit {
            theta,
            t,
            replicas,
            seed,
        } => {
            let fit = martingale_tail(theta, t, replicas, seed)?;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            w.replica_counts.insert("tail_fit".into(), replicas);
            let rows = vec![
                Row {
                    quantity: "kappa_hat".into(),
                    x: None,
                    a: None,
                    t: Some(t),
                    y: None,
                    z_lo: None,
                    z_hi: None,
                    estimate: fit.kappa_hat,
                    stderr: 0.0,
                    n: replicas,
                    method: "loglog_fit".into(),
                    seed,
                },
                Row {
                    quantity: "c_w_hat".into(),
                    x: None,
                    a: None,
                    t: Some(t),
                    y: None,
                    z_lo: None,
                    z_hi: None,
                    estimate: fit.c_w_hat,
                    stderr: 0.0,
                    n: replicas,
                    method: "plateau_median".into(),
                    seed,
                },
            ];
            w.write_rows(&rows).map_err(io_err)?;
            w.write(
                "tail_fit.json",
                &format!(
                    "{}\n",
                    serde_json::to_string_pretty(&fit).expect("fit serialization")
                ),
            )
            .map_err(io_err)?;
            let cfg = serde_json::json!({
                "theta": theta, "t": t, "replicas": replicas,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
        Cmd::Conditioned {
            x,
            a,
            t,
            y,
            z_min,
            z_max,
            replicas_per_window,
            seed,
        } => {
            let params = LdpParamsT::derive(x, a)?;
            let summary = conditioned_stats(
                &params,
                t,
                y,
                z_min,
                z_max,
                replicas_per_window,
                seed,
                DEFAULT_MAX_PARTICLES,
            )?;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            w.replica_counts.insert("conditioned".into(), summary.n);
            if summary.low_ess {
                w.warnings.push(format!(
                    "effective sample size {:.1} below 100",
                    summary.effective_sample_size
                ));
            }
            if summary.truncation_warning_frac > 0.05 {
                w.warnings.push(format!(
                    "argmin within 1 of horizon on {:.1}% of conditioned mass",
                    100.0 * summary.truncation_warning_frac
                ));
            }
            let quantities: [(&str, f64); 8] = [
                ("pareto_index_hat", summary.pareto_index_hat),
                ("overlap_mean_norm", summary.overlap_mean),
                ("overlap_var_norm", summary.overlap_var),
                ("max_var_norm", summary.max_var),
                ("s_argmin_var_norm", summary.s_argmin_var),
                ("raw_overlap_mean", summary.raw_overlap_mean),
                ("s_tau_far_frac", summary.s_tau_far_frac),
                ("effective_sample_size", summary.effective_sample_size),
            ];
            let rows: Vec<Row> = quantities
                .iter()
                .map(|(q, v)| Row {
                    quantity: (*q).into(),
                    x: Some(x),
                    a: Some(a),
                    t: Some(t),
                    y: Some(y),
                    z_lo: Some(z_min as f64),
                    z_hi: Some(z_max as f64),
                    estimate: *v,
                    stderr: 0.0,
                    n: summary.n,
                    method: "self_normalized_is".into(),
                    seed,
                })
                .collect();
            w.write_rows(&rows).map_err(io_err)?;
            w.write(
                "conditioned.json",
                &format!(
                    "{}\n",
                    serde_json::to_string_pretty(&summary).expect("summary")
                ),
            )
            .map_err(io_err)?;
            let cfg = serde_json::json!({
                "x": x, "a": a, "t": t, "y": y, "z_min": z_min, "z_max": z_max,
                "replicas_per_window": replicas_per_window,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
        Cmd::Overlap {
            beta,
            r,
            t,
            replicas,
            seed,
        } => {
            if !(beta >= 0.0 && beta < std::f64::consts::SQRT_2) {
                return Err(Error::Domain(format!(
                    "beta must lie in [0, sqrt 2), got {beta}"
                )));
            }
            let est = overlap_limit(beta, r, t, replicas, seed)?;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            w.replica_counts.insert("overlap".into(), replicas);
            let rows = vec![Row {
                quantity: "overlap".into(),
                x: None,
                a: None,
                t: Some(t),
                y: Some(beta),
                z_lo: Some(r),
                z_hi: None,
                estimate: est.value,
                stderr: est.stderr,
                n: est.n,
                method: est.method.clone(),
                seed,
            }];
            w.write_rows(&rows).map_err(io_err)?;
            let cfg = serde_json::json!({
                "beta": beta, "r": r, "t": t, "replicas": replicas,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
        Cmd::FptTest {
            x,
            a,
            t,
            z,
            replicas,
            seed,
        } => {
            let params = LdpParamsT::derive(x, a)?;
            let level = params.v_level(t, z);
            if !(level < 0.0) {
                return Err(Error::DegenerateLevel(level));
            }
            let alpha = -level;
            let sigma2 = params.theta * params.theta;
            let mut taus = Vec::new();
            for rep in 0..replicas {
                if let Some(s) =
                    sample_spine_fpt(&params, t, level, seed, rep, DEFAULT_MAX_PARTICLES)?
                {
                    taus.push(s.tau_w.unwrap());
                }
            }
            if taus.is_empty() {
                return Err(Error::EmptySample);
            }
            taus.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let mass = ig_cdf(alpha, params.dpsi_kappa, sigma2, t);
            let d = ks_statistic(&taus, |v| {
                ig_cdf(alpha, params.dpsi_kappa, sigma2, v) / mass
            });
            let p = ks_pvalue(d, taus.len() as f64);
            let mean = taus.iter().sum::<f64>() / taus.len() as f64;
            let var = taus.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / taus.len() as f64;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            w.replica_counts.insert("fpt_test".into(), replicas);
            let rows = vec![
                Row {
                    quantity: "fpt_ks_d".into(),
                    x: Some(x),
                    a: Some(a),
                    t: Some(t),
                    y: None,
                    z_lo: Some(z),
                    z_hi: None,
                    estimate: d,
                    stderr: 0.0,
                    n: taus.len() as u64,
                    method: "ks".into(),
                    seed,
                },
                Row {
                    quantity: "fpt_ks_pvalue".into(),
                    x: Some(x),
                    a: Some(a),
                    t: Some(t),
                    y: None,
                    z_lo: Some(z),
                    z_hi: None,
                    estimate: p,
                    stderr: 0.0,
                    n: taus.len() as u64,
                    method: "ks".into(),
                    seed,
                },
            ];
            w.write_rows(&rows).map_err(io_err)?;
            let detail = serde_json::json!({
                "alpha": alpha,
                "nu": params.dpsi_kappa,
                "sigma2": sigma2,
                "accepted": taus.len(),
                "truncated_mass": 1.0 - mass,
                "ks_d": d,
                "ks_pvalue": p,
                "sample_mean": mean,
                "sample_var": var,
                "theory_mean": alpha / params.dpsi_kappa,
                "theory_var": alpha * sigma2 / params.dpsi_kappa.powi(3),
            });
            w.write(
                "fpt_test.json",
                &format!("{}\n", serde_json::to_string_pretty(&detail).expect("detail")),
            )
            .map_err(io_err)?;
            let cfg = serde_json::json!({
                "x": x, "a": a, "t": t, "z": z, "replicas": replicas,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
        Cmd::Trend {
            x,
            a,
            t_list,
            y,
            method,
            replicas,
            seed,
        } => {
            let params = LdpParamsT::derive(x, a)?;
            let m = match method {
                MethodArg::Naive => LdpMethod::Naive,
                MethodArg::Spine => LdpMethod::Spine,
            };
            let rows_data = trend_e_it(
                &params,
                &t_list,
                y,
                m,
                replicas,
                seed,
                DEFAULT_MAX_PARTICLES,
            )?;
            let mut w = RunWriter::new(&cli.out_dir).map_err(io_err)?;
            w.replica_counts
                .insert("trend".into(), replicas * t_list.len() as u64);
            let rows: Vec<Row> = rows_data
                .iter()
                .map(|r| Row {
                    quantity: "ldp_probability".into(),
                    x: Some(x),
                    a: Some(a),
                    t: Some(r.t),
                    y: Some(y),
                    z_lo: None,
                    z_hi: None,
                    estimate: r.estimate,
                    stderr: r.stderr,
                    n: replicas,
                    method: match method {
                        MethodArg::Naive => "naive".into(),
                        MethodArg::Spine => "spine_sum".into(),
                    },
                    seed,
                })
                .collect();
            w.write_rows(&rows).map_err(io_err)?;
            w.write(
                "trend.json",
                &format!(
                    "{}\n",
                    serde_json::to_string_pretty(&rows_data).expect("trend")
                ),
            )
            .map_err(io_err)?;
            let cfg = serde_json::json!({
                "x": x, "a": a, "t_list": t_list, "y": y,
                "method": match method { MethodArg::Naive => "naive", MethodArg::Spine => "spine" },
                "replicas": replicas,
            });
            w.finish(&command, cfg, seed, workers, start.elapsed().as_secs_f64())
                .map_err(io_err)
        }
    }
}
