//! Scratch diagnostic: measure how much the conditioning path influences
//! the generated output for an overfit checkpoint.

use seisflow::nets::ChannelGateMode;
use seisflow::pipeline::{load_checkpoint, load_dataset};
use seisflow::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape).unwrap()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-30)).sqrt()
}

fn stats(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn main() {
    let ckpt = load_checkpoint(std::path::Path::new("/tmp/overfit_probe5")).unwrap();
    let ds = load_dataset(std::path::Path::new("target/fixtures/data_train")).unwrap();
    let (h, w) = ds.grid_hw();

    // 0. Truth statistics per record (normalized units).
    println!("styles: {:?}", ds.manifest.styles);
    for i in 0..8 {
        let v = ds.velocity_norm(i);
        let (m, s, lo, hi) = stats(&v);
        println!("truth[{i}]: mean {m:.3} std {s:.3} range [{lo:.3}, {hi:.3}]");
    }

    // 1. Cond maps for records 0..8: stats and pairwise distances.
    let conds: Vec<Tensor> = (0..8)
        .map(|i| {
            ckpt.model
                .encoder
                .encode_with_mode(&ds.seismic_norm(i), ChannelGateMode::Learned)
                .unwrap()
                .0
                .map
        })
        .collect();
    for (i, c) in conds.iter().enumerate() {
        let (m, s, lo, hi) = stats(&c.data());
        println!("cond[{i}]: mean {m:.4} std {s:.4} min {lo:.4} max {hi:.4}");
    }
    println!("pairwise rel-L2 of cond maps (vs record 0): ");
    for i in 1..8 {
        println!("  d(cond0, cond{i}) = {:.4}", rel_l2(&conds[i].data(), &conds[0].data()));
    }

    // 2. Output sensitivity to cond at fixed x_t.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x1 = randn(&mut rng, &[1, h, w]);
    for t in [1.0, 0.6, 0.2] {
        let out0 = ckpt.model.unet.forward(&x1, t, &conds[0]).unwrap();
        let out3 = ckpt.model.unet.forward(&x1, t, &conds[3]).unwrap();
        let (m0, s0, _, _) = stats(&out0.data());
        println!(
            "t={t}: |out|stats mean {m0:.4} std {s0:.4}; rel diff cond0 vs cond3: {:.4}",
            rel_l2(&out3.data(), &out0.data())
        );
    }

    // 3. One-step reconstruction per record: x0_hat = x1 - u(x1, 1, cond_i).
    println!("one-step reconstruction SSIM (normalized units):");
    for i in 0..8 {
        let u = ckpt.model.unet.forward(&x1, 1.0, &conds[i]).unwrap();
        let x0_hat: Vec<f64> =
            x1.data().iter().zip(u.data().iter()).map(|(a, b)| a - b).collect();
        let truth = ds.velocity_norm(i);
        let s = seisflow::metrics::ssim(&x0_hat, &truth, h, w).unwrap();
        println!("  rec {i}: ssim {s:.4} mae {:.4}", seisflow::metrics::mae(&x0_hat, &truth).unwrap());
    }

    // 4. Fuse / encoder weight magnitudes after training.
    println!("parameter group L2 norms:");
    let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
    for (name, p) in ckpt.model.params() {
        let key = if name.contains("fuse") {
            let lvl = name.split('.').take(2).collect::<Vec<_>>().join(".");
            format!("{lvl}.fuse")
        } else if name.starts_with("enc.") {
            name.split('.').take(2).collect::<Vec<_>>().join(".")
        } else {
            name.split('.').take(2).collect::<Vec<_>>().join(".")
        };
        let n2: f64 = p.data().iter().map(|v| v * v).sum();
        *groups.entry(key).or_insert(0.0) += n2;
    }
    for (k, v) in groups {
        println!("  {k}: {:.4}", v.sqrt());
    }

    // 5. Per-record loss at fixed t values (L1 elementwise mean, single draw).
    println!("per-record crf loss by t:");
    for i in 0..8 {
        let v_true = Tensor::from_vec(ds.velocity_norm(i), &[1, h, w]).unwrap();
        let mut line = format!("  rec {i}:");
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let x1s = randn(&mut rng, &[1, h, w]);
            let xt_vals: Vec<f64> = v_true
                .data()
                .iter()
                .zip(x1s.data().iter())
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            let xt = Tensor::from_vec(xt_vals, &[1, h, w]).unwrap();
            let u = ckpt.model.unet.forward(&xt, t, &conds[i]).unwrap();
            let target: Vec<f64> =
                x1s.data().iter().zip(v_true.data().iter()).map(|(a, b)| a - b).collect();
            let l1: f64 = u
                .data()
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / target.len() as f64;
            line += &format!(" t{t}:{l1:.3}");
        }
        println!("{line}");
    }
}
