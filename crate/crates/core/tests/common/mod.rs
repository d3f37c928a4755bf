//! Finite-difference machinery shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use fedgrow::client::{model_loss_and_grad, operator_loss_and_grad};
use fedgrow::tape::Axis;
use fedgrow::{GrowthOperator, InitScheme, ModelConfig, ParamSet, Result, Tape, Tensor, Var, WidthMaps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const INSTANCES: u64 = 100;
pub const KERNEL_TOL: f64 = 1e-6;
pub const CHAIN_TOL: f64 = 1e-5;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
pub type Gen = fn(&mut ChaCha8Rng) -> (Build, Vec<Tensor>);

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient of `sum(build(inputs) * r)` for a fixed random `r`, analytic vs central differences.
pub fn check(build: &Build, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let r = uniform(tape.value(out).shape(), rng);
    let rv = tape.constant(r.clone());
    let weighted = tape.mul(out, rv).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    let value = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &v).unwrap();
        t.value(o).dot(&r)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        assert_eq!(g.shape(), x.shape());
        analytic.extend_from_slice(g.data());
        let mut xs = inputs.to_vec();
        for j in 0..x.numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + H;
            let up = value(&xs);
            xs[i].data_mut()[j] = orig - H;
            let down = value(&xs);
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Run `INSTANCES` random instances from `gen` and return the worst error.
pub fn suite(seed: u64, gen: impl Fn(&mut ChaCha8Rng) -> (Build, Vec<Tensor>)) -> f64 {
    (0..INSTANCES)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1_000 + i);
            let (build, inputs) = gen(&mut rng);
            check(&build, &inputs, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// Worst error of one named kernel over its instances.
pub fn kernel_worst(name: &str) -> f64 {
    let &(_, seed, gen) = KERNELS.iter().find(|k| k.0 == name).expect("known kernel");
    suite(seed, gen)
}

fn gen_add(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (
        Box::new(|t, v| t.add(v[0], v[1])),
        vec![uniform(&s, rng), uniform(&s, rng)],
    )
}

fn gen_mul(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (
        Box::new(|t, v| t.mul(v[0], v[1])),
        vec![uniform(&s, rng), uniform(&s, rng)],
    )
}

fn gen_add_row(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
    (
        Box::new(|t, v| t.add_row(v[0], v[1])),
        vec![uniform(&[r, c], rng), uniform(&[c], rng)],
    )
}

fn gen_scale(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let c: f64 = rng.random_range(-2.0..2.0);
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (Box::new(move |t, v| Ok(t.scale(v[0], c))), vec![uniform(&s, rng)])
}

fn gen_scale_by(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (
        Box::new(|t, v| t.scale_by(v[0], v[1])),
        vec![uniform(&s, rng), uniform(&[1], rng)],
    )
}

fn gen_matmul(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    (
        Box::new(|t, v| t.matmul(v[0], v[1])),
        vec![uniform(&[m, k], rng), uniform(&[k, n], rng)],
    )
}

fn gen_transpose(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (Box::new(|t, v| t.transpose(v[0])), vec![uniform(&s, rng)])
}

fn gen_reshape(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
    (
        Box::new(move |t, v| t.reshape(v[0], &[c, r])),
        vec![uniform(&[r, c], rng)],
    )
}

fn gen_sum(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (Box::new(|t, v| Ok(t.sum(v[0]))), vec![uniform(&s, rng)])
}

fn gen_gelu(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    (Box::new(|t, v| Ok(t.gelu(v[0]))), vec![uniform(&s, rng)])
}

fn gen_softmax(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
    (Box::new(|t, v| t.softmax(v[0])), vec![uniform(&s, rng)])
}

fn gen_layer_norm(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 3, 6));
    (
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        vec![uniform(&[r, c], rng), uniform(&[c], rng), uniform(&[c], rng)],
    )
}

fn gen_embedding(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (n, d) = (dim(rng, 1, 5), dim(rng, 1, 4));
    let ids: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..n)).collect();
    (
        Box::new(move |t, v| t.embedding(v[0], &ids)),
        vec![uniform(&[n, d], rng)],
    )
}

fn gen_mean_pool(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (b, g, d) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    (
        Box::new(move |t, v| t.mean_pool(v[0], g)),
        vec![uniform(&[b * g, d], rng)],
    )
}

fn gen_slice(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
    let (rows, cols) = (dim(rng, 1, r - r0), dim(rng, 1, c - c0));
    (
        Box::new(move |t, v| t.slice(v[0], r0, rows, c0, cols)),
        vec![uniform(&[r, c], rng)],
    )
}

fn gen_concat_rows_and_cols(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let k = dim(rng, 1, 3);
    let fixed = dim(rng, 1, 3);
    let by_rows = rng.random_bool(0.5);
    let inputs = (0..k)
        .map(|_| {
            let free = dim(rng, 1, 3);
            let shape = if by_rows { [free, fixed] } else { [fixed, free] };
            uniform(&shape, rng)
        })
        .collect();
    let axis = if by_rows { Axis::Rows } else { Axis::Cols };
    (Box::new(move |t, v| t.concat(v, axis)), inputs)
}

fn gen_combine(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (k, rows) = (dim(rng, 1, 4), dim(rng, 1, 3));
    let row = rng.random_range(0..rows);
    let s = [dim(rng, 1, 3), dim(rng, 1, 3)];
    let mut inputs = vec![uniform(&[rows, k], rng)];
    inputs.extend((0..k).map(|_| uniform(&s, rng)));
    (Box::new(move |t, v| t.combine(v[0], row, &v[1..])), inputs)
}

fn gen_kron_identity(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (r, c, m) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    (
        Box::new(move |t, v| t.kron_identity(v[0], m)),
        vec![uniform(&[r, c], rng)],
    )
}

fn gen_softmax_cross_entropy(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
    let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    (
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
        vec![uniform(&[r, c], rng)],
    )
}

fn gen_composed_five_parameter_graph(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor>) {
    let (b, d, k) = (dim(rng, 1, 3), dim(rng, 3, 5), dim(rng, 2, 4));
    let inputs = vec![
        uniform(&[b, d], rng),
        uniform(&[d, k], rng),
        uniform(&[k], rng),
        uniform(&[k], rng),
        uniform(&[k], rng),
    ];
    (
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_row(y, v[2])?;
            let y = t.gelu(y);
            let y = t.layer_norm(y, v[3], v[4], 1e-5)?;
            t.softmax(y)
        }),
        inputs,
    )
}

/// Every tape kernel with its instance generator and base seed.
pub const KERNELS: &[(&str, u64, Gen)] = &[
    ("add", 1, gen_add),
    ("mul", 2, gen_mul),
    ("add_row", 3, gen_add_row),
    ("scale", 4, gen_scale),
    ("scale_by", 5, gen_scale_by),
    ("matmul", 6, gen_matmul),
    ("transpose", 7, gen_transpose),
    ("reshape", 8, gen_reshape),
    ("sum", 9, gen_sum),
    ("gelu", 10, gen_gelu),
    ("softmax", 11, gen_softmax),
    ("layer_norm", 12, gen_layer_norm),
    ("embedding", 13, gen_embedding),
    ("mean_pool", 14, gen_mean_pool),
    ("slice", 15, gen_slice),
    ("concat_rows_and_cols", 16, gen_concat_rows_and_cols),
    ("combine", 17, gen_combine),
    ("kron_identity", 18, gen_kron_identity),
    ("softmax_cross_entropy", 19, gen_softmax_cross_entropy),
    ("composed_five_parameter_graph", 20, gen_composed_five_parameter_graph),
];

pub fn add_noise(p: &mut ParamSet, amplitude: f64, rng: &mut ChaCha8Rng) {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += amplitude * rng.random_range(-1.0..=1.0);
        }
    }
}

pub fn random_batch(cfg: &ModelConfig, b: usize, s: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<usize>) {
    let seqs = (0..b)
        .map(|_| (0..s).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
        .collect();
    let labels = (0..b).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    (seqs, labels)
}

/// Test-side mean cross-entropy from logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Worst error over random D=4, L=1 models, 20 random scalar parameters each.
pub fn model_worst() -> f64 {
    let cfg = ModelConfig::new(4, 1, 2).with_task(10, 3, 4);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
        let mut params = cfg.init_params(i).unwrap();
        add_noise(&mut params, 0.5, &mut rng);
        let (seqs, labels) = random_batch(&cfg, 3, dim(&mut rng, 1, 4), &mut rng);
        let (_, grads) = model_loss_and_grad(&cfg, &params, &seqs, &labels).unwrap();

        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..20 {
            let name = &names[rng.random_range(0..names.len())];
            let j = rng.random_range(0..params.require(name).unwrap().numel());
            let loss_at = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[j] += delta;
                cross_entropy(&cfg.forward(&p, &seqs).unwrap(), &labels)
            };
            analytic.push(grads[name.as_str()].data()[j]);
            numeric.push((loss_at(H) - loss_at(-H)) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_operator(src: ModelConfig, dst: ModelConfig, maps: WidthMaps, rng: &mut ChaCha8Rng) -> GrowthOperator {
    let base = GrowthOperator::init(src, dst, maps, InitScheme::IdentityPreserving, rng.random()).unwrap();
    let mut tensors = base.into_tensors();
    add_noise(&mut tensors, 0.3, rng);
    GrowthOperator::from_tensors(src, dst, maps, tensors).unwrap()
}

/// Worst error over random operators in all three map layouts.
pub fn chain_worst() -> f64 {
    let src = ModelConfig::new(2, 1, 1).with_task(8, 2, 4).with_ffn_multiplier(2);
    let dst = ModelConfig::new(4, 2, 2).with_task(8, 2, 4).with_ffn_multiplier(2);
    let modes = [WidthMaps::Shared, WidthMaps::PerFamily, WidthMaps::PerLayer];
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + i);
        let maps = modes[i as usize % modes.len()];
        let op = random_operator(src, dst, maps, &mut rng);
        assert!(op.count().total <= 200);
        let mut small = src.init_params(i).unwrap();
        add_noise(&mut small, 0.5, &mut rng);
        let (seqs, labels) = random_batch(&src, 3, 3, &mut rng);
        let (_, grads) = operator_loss_and_grad(&op, &small, &seqs, &labels).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (name, t) in op.tensors().iter() {
            analytic.extend_from_slice(grads[name].data());
            for j in 0..t.numel() {
                let loss_at = |delta: f64| {
                    let mut m = op.tensors().clone();
                    m.get_mut(name).unwrap().data_mut()[j] += delta;
                    let moved = GrowthOperator::from_tensors(src, dst, maps, m).unwrap();
                    let large = moved.apply(&small).unwrap();
                    cross_entropy(&dst.forward(&large, &seqs).unwrap(), &labels)
                };
                numeric.push((loss_at(H) - loss_at(-H)) / (2.0 * H));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
