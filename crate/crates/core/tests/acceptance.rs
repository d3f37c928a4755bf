//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use fedgrow::client::{operator_loss_and_grad, ClientSetup, ClientState};
use fedgrow::config::{count_report, ExperimentConfig};
use fedgrow::data::{dirichlet_partition, make_synthetic_task, total_variation, PartitionSpec};
use fedgrow::optim::OptimizerSettings;
use fedgrow::server::aggregate;
use fedgrow::{GrowthOperator, InitScheme, ModelConfig, ParamSet, WidthMaps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEEDS: [u64; 3] = [0, 1, 2];
const HETERO_RUN: &str = "hetero_case = \"case1\"\n";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn parameter_counts() -> Outcome {
    let cfg = ExperimentConfig::from_toml("scale = \"literal\"\n").unwrap();
    let r = count_report(&cfg).unwrap();
    let op = r.global_operator.total as f64;
    let scratch = r.scratch_trainable as f64;
    outcome(
        within(op, 2.089e6, 0.25) && within(scratch, 7.740e6, 0.25),
        format!("global operator {op} (target 2.089M +-25%), scratch large {scratch} (target 7.740M +-25%)"),
    )
}

fn reduction_ratios() -> Outcome {
    let cfg = ExperimentConfig::from_toml("scale = \"literal\"\n").unwrap();
    let r = count_report(&cfg).unwrap();
    outcome(
        r.trainable_reduction_pct >= 50.0 && r.comm_reduction_pct >= 65.0,
        format!(
            "trainable reduction {:.2}% (>= 50), communication reduction {:.2}% (>= 65)",
            r.trainable_reduction_pct, r.comm_reduction_pct
        ),
    )
}

fn gradient_suites() -> Outcome {
    let mut worst_kernel: (f64, &str) = (0.0, "");
    for &(name, seed, gen) in common::KERNELS {
        let w = common::suite(seed, gen);
        if w > worst_kernel.0 {
            worst_kernel = (w, name);
        }
    }
    let model = common::model_worst();
    let chain = common::chain_worst();
    let pass = worst_kernel.0 < 1e-5 && model < 1e-5 && chain < 1e-5;
    outcome(
        pass,
        format!(
            "{} kernels x {} instances, worst {:.2e} ({}); forward {:.2e}; operator chain {:.2e}; bound 1e-5",
            common::KERNELS.len(),
            common::INSTANCES,
            worst_kernel.0,
            worst_kernel.1,
            model,
            chain
        ),
    )
}

fn op_pair() -> (ModelConfig, ModelConfig) {
    (
        ModelConfig::new(6, 2, 2).with_task(24, 3, 5).with_ffn_multiplier(2),
        ModelConfig::new(8, 3, 2).with_task(24, 3, 5).with_ffn_multiplier(2),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn aggregation_oracle() -> Outcome {
    let (src, dst) = op_pair();
    let mut worst: f64 = 0.0;
    let mut perm_worst: f64 = 0.0;
    let mut fixed_worst: f64 = 0.0;
    for i in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let n = rng.random_range(2..=6);
        let ops: Vec<GrowthOperator> = (0..n)
            .map(|_| GrowthOperator::init(src, dst, WidthMaps::PerFamily, InitScheme::Random, rng.random()).unwrap())
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(1..500) as f64).collect();
        let total: f64 = weights.iter().sum();
        let flat: Vec<Vec<f64>> = ops.iter().map(|o| o.tensors().flatten()).collect();
        let expected: Vec<f64> = (0..flat[0].len())
            .map(|k| flat.iter().zip(&weights).map(|(f, w)| f[k] * w).sum::<f64>() / total)
            .collect();
        let got = aggregate(&ops, &weights).unwrap().tensors().flatten();
        worst = worst.max(max_diff(&got, &expected));

        let rev_ops: Vec<_> = ops.iter().rev().cloned().collect();
        let rev_w: Vec<f64> = weights.iter().rev().copied().collect();
        perm_worst = perm_worst.max(max_diff(
            &aggregate(&rev_ops, &rev_w).unwrap().tensors().flatten(),
            &got,
        ));

        let same = vec![ops[0].clone(); n];
        fixed_worst = fixed_worst.max(max_diff(
            &aggregate(&same, &weights).unwrap().tensors().flatten(),
            &flat[0],
        ));
    }
    outcome(
        worst < 1e-12 && perm_worst < 1e-12 && fixed_worst <= 1e-15,
        format!(
            "50 instances: oracle {worst:.1e} (< 1e-12), permutation {perm_worst:.1e}, fixed point {fixed_worst:.1e}"
        ),
    )
}

fn update_rule() -> Outcome {
    let cfg = |d, l| ModelConfig::new(d, l, 2).with_task(24, 3, 5).with_ffn_multiplier(2);
    let setup = ClientSetup {
        id: 0,
        small: cfg(4, 1),
        intermediate: cfg(6, 2),
        large: cfg(8, 3),
        width_maps: WidthMaps::PerFamily,
        init_scheme: InitScheme::IdentityPreserving,
        seed: 3,
        global_seed: 4,
    };
    let shard = make_synthetic_task(24, 3, 5, 30, 9).unwrap();
    let mut c = ClientState::new(&setup, shard).unwrap();
    let lr = 0.05;
    let step = OptimizerSettings::sgd(lr, 64);
    let oracle = |op: &GrowthOperator, src: &ParamSet, c: &ClientState| {
        let (_, g) = operator_loss_and_grad(op, src, &c.shard().sequences, &c.shard().labels).unwrap();
        let mut m = op.tensors().clone();
        for (name, t) in m.iter_mut() {
            t.axpy(-lr, &g[name]).unwrap();
        }
        m
    };
    c.pretrain_small(3, &OptimizerSettings::adamw(1e-2, 8)).unwrap();
    let local_expected = oracle(c.local_ligo(), c.small_params(), &c);
    c.train_local_ligo(1, &step).unwrap();
    let local = c.local_ligo().tensors().max_abs_diff(&local_expected).unwrap();
    let global_expected = oracle(c.global_ligo(), c.inter_params().unwrap(), &c);
    c.train_global_ligo(1, &step).unwrap();
    let global = c.global_ligo().tensors().max_abs_diff(&global_expected).unwrap();
    outcome(
        local < 1e-12 && global < 1e-12,
        format!("private step {local:.1e}, shared step {global:.1e} (< 1e-12)"),
    )
}

fn partition_statistics() -> Outcome {
    let mut tv = [0.0; 3];
    let mut iid_dev = 0.0;
    let mut n = 0.0;
    for seed in 0..20u64 {
        let data = make_synthetic_task(64, 4, 8, 2000, seed).unwrap();
        let global = data.label_histogram();
        for (k, beta) in [0.1, 0.5, 100.0].into_iter().enumerate() {
            let spec = PartitionSpec {
                n_clients: 10,
                beta,
                seed,
                min_shard: 1,
            };
            for shard in dirichlet_partition(&data, &spec).unwrap().materialize(&data) {
                let h = shard.label_histogram();
                tv[k] += total_variation(&h, &global) / 200.0;
                if k == 2 {
                    iid_dev += h.iter().zip(&global).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    n += 1.0;
                }
            }
        }
    }
    iid_dev /= n;
    outcome(
        tv[0] > tv[1] && tv[1] > tv[2] && iid_dev < 0.05,
        format!(
            "mean TV at beta 0.1/0.5/100: {:.3}/{:.3}/{:.3}; beta 100 mean max-deviation {:.2}pp (< 5pp)",
            tv[0],
            tv[1],
            tv[2],
            100.0 * iid_dev
        ),
    )
}

fn run(config: &Path, preset: &str, seed: u64, out: &Path) -> Result<Value, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedgrow"))
        .args(["run", "--config"])
        .arg(config)
        .args(["--preset", preset, "--seed", &seed.to_string(), "--out"])
        .arg(out)
        .env_remove("FEDGROW_SEED")
        .env_remove("FEDGROW_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let text = std::fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

struct Runs {
    agg: Vec<(PathBuf, Value)>,
    noagg: Vec<Value>,
}

fn hetero_runs(root: &Path) -> Result<Runs, String> {
    let config = root.join("hetero.toml");
    std::fs::write(&config, HETERO_RUN).map_err(|e| e.to_string())?;
    let mut runs = Runs {
        agg: Vec::new(),
        noagg: Vec::new(),
    };
    for seed in SEEDS {
        let dir = root.join(format!("agg-{seed}"));
        let s = run(&config, "agg", seed, &dir)?;
        runs.agg.push((dir, s));
        runs.noagg
            .push(run(&config, "noagg", seed, &root.join(format!("noagg-{seed}")))?);
    }
    Ok(runs)
}

fn stat(v: &Value, key: &str) -> f64 {
    v["accuracy"][key].as_f64().unwrap()
}

fn directional_trend(runs: &Runs) -> Outcome {
    let agg_mean = runs.agg.iter().map(|(_, s)| stat(s, "mean")).sum::<f64>() / SEEDS.len() as f64;
    let noagg_mean = runs.noagg.iter().map(|s| stat(s, "mean")).sum::<f64>() / SEEDS.len() as f64;
    let lower_std = runs
        .agg
        .iter()
        .zip(&runs.noagg)
        .filter(|((_, a), n)| stat(a, "std") <= stat(n, "std"))
        .count();
    let per_seed: Vec<String> = runs
        .agg
        .iter()
        .zip(&runs.noagg)
        .map(|((_, a), n)| {
            format!(
                "[{:.3}/{:.3} vs {:.3}/{:.3}]",
                stat(a, "mean"),
                stat(a, "std"),
                stat(n, "mean"),
                stat(n, "std")
            )
        })
        .collect();
    outcome(
        agg_mean >= noagg_mean && lower_std >= 2,
        format!(
            "mean accuracy agg {agg_mean:.4} vs noagg {noagg_mean:.4}; agg std lower in {lower_std}/3 seeds; per seed mean/std agg vs noagg {}",
            per_seed.join(" ")
        ),
    )
}

fn determinism(root: &Path, runs: &Runs) -> Outcome {
    let (first, _) = &runs.agg[0];
    let again = root.join("agg-0-repeat");
    if let Err(e) = run(&root.join("hetero.toml"), "agg", SEEDS[0], &again) {
        return outcome(false, format!("repeat run failed: {e}"));
    }
    let files = ["metrics.csv", "ledger.csv", "similarity.csv", "summary.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(first.join(f)).ok() != std::fs::read(again.join(f)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} byte-identical across two runs", files.join(", "))
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn read_similarity(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[allow(clippy::needless_range_loop)]
fn similarity(runs: &Runs) -> Outcome {
    let mut ok = true;
    let mut worst_off: f64 = f64::NEG_INFINITY;
    for (dir, _) in &runs.agg {
        let m = read_similarity(&dir.join("similarity.csv"));
        let n = m.len();
        for i in 0..n {
            ok &= m[i].len() == n && m[i][i] == 1.0;
            for j in 0..n {
                ok &= (m[i][j] - m[j][i]).abs() <= 1e-12 && (-1.0..=1.0).contains(&m[i][j]);
                if i != j {
                    worst_off = worst_off.max(m[i][j]);
                }
            }
        }
    }
    outcome(
        ok && worst_off < 0.5,
        format!(
            "symmetric, unit diagonal, in [-1, 1]: {ok}; largest off-diagonal {worst_off:.3} (< 0.5) over {} runs",
            runs.agg.len()
        ),
    )
}

fn timed(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let o = f();
    println!(
        "criterion {n} {name}: {} ({:.1}s) {}",
        if o.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        o.detail
    );
    o.pass
}

fn main() -> ExitCode {
    let mut passed = vec![
        timed(1, "parameter counts", parameter_counts),
        timed(2, "reduction ratios", reduction_ratios),
        timed(3, "gradient suites", gradient_suites),
        timed(4, "aggregation oracle", aggregation_oracle),
        timed(5, "update rule", update_rule),
    ];
    let root = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let runs = hetero_runs(root.path());
    println!(
        "agg and noagg runs over {} seeds: {:.1}s",
        SEEDS.len(),
        started.elapsed().as_secs_f64()
    );
    match runs {
        Ok(runs) => {
            passed.push(timed(6, "agg vs noagg trend", || directional_trend(&runs)));
            passed.push(timed(7, "partition statistics", partition_statistics));
            passed.push(timed(8, "determinism", || determinism(root.path(), &runs)));
            passed.push(timed(9, "similarity diagnostic", || similarity(&runs)));
        }
        Err(e) => {
            let failed = || outcome(false, format!("run failed: {e}"));
            passed.push(timed(6, "agg vs noagg trend", failed));
            passed.push(timed(7, "partition statistics", partition_statistics));
            passed.push(timed(8, "determinism", failed));
            passed.push(timed(9, "similarity diagnostic", failed));
        }
    }
    let ok = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {ok} of {} criteria passed", passed.len());
    if ok == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
