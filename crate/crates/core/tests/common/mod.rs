//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use localtrans::data::{generate_range, write_dataset, GenConfig, SamplePair};
use localtrans::homography::warp::valid_mask;
use localtrans::homography::{dlt, psnr_masked, rect_corners, warp, Homography, Point};
use localtrans::lak::{self, Boundary, LakOptions};
use localtrans::network::{level_loss, FrozenLevel, Model, ModelConfig, Trainer};
use localtrans::tensor::{Mode, Real, Tape, Tensor, Var};
use localtrans::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: Real = 1e-5;

/// Smaller step for the full cascade: with ~1e3 relu and maxpool kinks a
/// wider window crosses one often enough to dominate the error.
pub const CASCADE_FD_STEP: Real = 1e-6;

/// `max |a - n| / max(max |n|, 1e-8)`.
pub fn rel_err(analytic: &[Real], numeric: &[Real]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, Real::max);
    let scale = numeric
        .iter()
        .map(|n| n.abs())
        .fold(0.0, Real::max)
        .max(1e-8);
    (diff / scale) as f64
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn projected_loss(
    build: &Build,
    inputs: &[Tensor],
    proj: Option<&Tensor>,
) -> Result<(Tape, Var, Vec<Var>, Tensor)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<_>>()?;
    let y = build(&mut tape, &vars)?;
    let r = match proj {
        Some(r) => r.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            random_tensor(&mut rng, tape.value(y).shape())
        }
    };
    let rv = tape.constant(r.clone())?;
    let p = tape.mul(y, rv)?;
    let loss = tape.sum(p)?;
    Ok((tape, loss, vars, r))
}

/// Central-difference check of every input of `build` under a fixed random
/// projection of its output. Returns the worst relative error.
pub fn fd_check(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let (tape, loss, vars, proj) = projected_loss(build, &inputs, None).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let eval = |xs: &[Tensor]| -> Real {
        let (t, l, _, _) = projected_loss(build, xs, Some(&proj)).expect("forward");
        t.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *v);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut xs = inputs.clone();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

pub fn grad_conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_tensor(&mut rng, &[2, 5, 5]),
        random_tensor(&mut rng, &[3, 2, 3, 3]),
        random_tensor(&mut rng, &[3]),
    ];
    fd_check(inputs, &|t, v| t.conv2d(v[0], v[1], Some(v[2])))
}

pub fn grad_conv1x1(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 4, 5]),
        random_tensor(&mut rng, &[2, 3, 1, 1]),
        random_tensor(&mut rng, &[2]),
    ];
    fd_check(inputs, &|t, v| t.conv1x1(v[0], v[1], Some(v[2])))
}

/// Random input whose 2x2 windows have a clear maximum.
pub fn grad_maxpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = loop {
        let x = random_tensor(&mut rng, &[2, 4, 4]);
        let separated = (0..2 * 2 * 2).all(|w| {
            let (c, wy, wx) = (w / 4, (w / 2) % 2, w % 2);
            let mut v: Vec<Real> = (0..4)
                .map(|k| x.at(c, 2 * wy + k / 2, 2 * wx + k % 2))
                .collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1] > 1e-3
        });
        if separated {
            break x;
        }
    };
    fd_check(vec![x], &|t, v| t.maxpool2x2(v[0]))
}

pub fn grad_avgpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fd_check(vec![random_tensor(&mut rng, &[3, 4, 6])], &|t, v| {
        t.global_avgpool(v[0])
    })
}

pub fn grad_relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[2, 4, 4]).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
    fd_check(vec![x], &|t, v| t.relu(v[0]))
}

/// Batch of four `[2, 3, 3]` samples plus gamma and beta, train mode.
pub fn grad_batchnorm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor> = (0..4)
        .map(|_| random_tensor(&mut rng, &[2, 3, 3]))
        .collect();
    inputs.push(random_tensor(&mut rng, &[2]).map(|v| v + 1.5));
    inputs.push(random_tensor(&mut rng, &[2]));
    fd_check(inputs, &|t, v| {
        let mut stats = localtrans::tensor::kernels::RunningStats::new(2);
        let ys = t.batchnorm(&v[..4], v[4], v[5], &mut stats, Mode::Train)?;
        let mut acc = ys[0];
        for (i, &y) in ys.iter().enumerate().skip(1) {
            let s = t.scale(y, 1.0 + i as Real)?;
            acc = t.add(acc, s)?;
        }
        Ok(acc)
    })
}

pub fn grad_lak_logits(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 5, 6]),
        random_tensor(&mut rng, &[3, 5, 6]),
    ];
    fd_check(inputs, &|t, v| t.lak_logits(v[0], v[1], 2))
}

pub fn grad_lak_softmax(seed: u64, boundary: Boundary) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_tensor(&mut rng, &[3, 5, 5]);
    let k = random_tensor(&mut rng, &[3, 5, 5]);
    let raw = lak::local_attention_logits(&q, &k, 2).unwrap().data;
    fd_check(vec![raw], &|t, v| t.lak_softmax(v[0], 3, 2, boundary))
}

pub fn grad_lak_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_tensor(&mut rng, &[2, 5, 4]);
    let m = lak::softmax_local(&lak::local_attention_logits(&q, &q, 1).unwrap(), 2).unwrap();
    let inputs = vec![m.data, random_tensor(&mut rng, &[3, 5, 4])];
    fd_check(inputs, &|t, v| t.lak_conv(v[0], v[1], 1, Boundary::Mask))
}

pub fn grad_lak_fused(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = (0..3)
        .map(|_| random_tensor(&mut rng, &[3, 10, 5]))
        .collect();
    fd_check(inputs, &|t, v| {
        t.lak_fused(v[0], v[1], v[2], LakOptions::new(2))
    })
}

/// End-to-end: sum of all level losses of a `K = 3, C = 4, 32 x 32` model
/// on a batch of two pairs, with the inter-level inputs and residual
/// targets frozen at the values the training step used. One coordinate of
/// every parameter tensor is checked.
pub fn grad_cascade(seed: u64) -> f64 {
    let mut cfg = ModelConfig::new(3, 4, 32, 32);
    cfg.seed = seed;
    cfg.offset_scale = 4.0;
    let mut model = Model::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    // non-zero final layers so that every parameter receives gradient
    let fc: Vec<_> = model
        .store
        .ids()
        .filter(|&id| model.store.get(id).name.ends_with("fc.weight"))
        .collect();
    for id in fc {
        let shape = model.store.value(id).shape().to_vec();
        model.store.get_mut(id).value = random_tensor(&mut rng, &shape).map(|v| 0.5 * v);
    }
    let gen = GenConfig {
        patch: 32,
        rho: 6.0,
        augment: None,
        ..GenConfig::default()
    };
    let pairs = generate_range(&gen, seed, 0, 2).unwrap();
    let batch: Vec<&SamplePair> = pairs.iter().collect();
    let mut trainer = Trainer::new(model, 1e-4, 2, seed);
    trainer.model.store.zero_grad();
    let (_, schedule) = trainer.compute_gradients(&batch).unwrap();
    let model = trainer.model;
    let targets: Vec<Tensor> = pairs.iter().map(|p| p.target.clone()).collect();
    let total = |m: &Model| -> Real {
        let mut stats = m.store.stats_snapshot();
        schedule
            .iter()
            .enumerate()
            .map(|(i, frozen): (usize, &FrozenLevel)| {
                let mut tape = Tape::new();
                let (_, l) = level_loss(
                    m,
                    &mut tape,
                    &mut stats,
                    &targets,
                    frozen,
                    i + 1,
                    Mode::Train,
                )
                .unwrap();
                tape.value(l).data()[0]
            })
            .sum()
    };
    let h = CASCADE_FD_STEP;
    let mut probe = model.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in model.store.ids() {
        let len = model.store.value(id).len();
        let j = rng.random_range(0..len);
        analytic.push(model.store.get(id).grad.data()[j]);
        let x0 = model.store.value(id).data()[j];
        probe.store.get_mut(id).value.data_mut()[j] = x0 + h;
        let up = total(&probe);
        probe.store.get_mut(id).value.data_mut()[j] = x0 - h;
        let down = total(&probe);
        probe.store.get_mut(id).value.data_mut()[j] = x0;
        numeric.push((up - down) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

/// Max abs difference between the fused kernel and the masked global
/// oracle on a random case with `H, W <= 12`, `C <= 8`, `r <= 3`.
pub fn lak_vs_oracle(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(1..=12);
    let w = rng.random_range(1..=12);
    let c = rng.random_range(1..=8);
    let r = rng.random_range(1..=3);
    let [q, k, v] = std::array::from_fn(|_| random_tensor(&mut rng, &[c, h, w]));
    let (fused, _) = lak::lak_fused(&q, &k, &v, LakOptions::new(r)).unwrap();
    let oracle = lak::global_attention(&q, &k, &v, Some(r), lak::DEFAULT_GLOBAL_BUDGET).unwrap();
    fused.max_abs_diff(&oracle) as f64
}

fn random_quad(rng: &mut ChaCha8Rng) -> ([Point; 4], [Point; 4]) {
    let src = rect_corners(128, 128);
    loop {
        let mut dst = src;
        for p in dst.iter_mut() {
            p[0] += rng.random_range(-32.0..32.0);
            p[1] += rng.random_range(-32.0..32.0);
        }
        let co = localtrans::homography::CornerOffsets {
            base: src,
            offsets: std::array::from_fn(|i| [dst[i][0] - src[i][0], dst[i][1] - src[i][1]]),
        };
        if co.is_convex() {
            return (src, dst);
        }
    }
}

/// Worst corner residual over `n` random DLT solves.
pub fn dlt_round_trips(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (src, dst) = random_quad(&mut rng);
        let h = dlt(&src, &dst).unwrap();
        for i in 0..4 {
            let p = h.apply(src[i]).unwrap();
            worst = worst.max((p[0] - dst[i][0]).hypot(p[1] - dst[i][1]));
        }
    }
    worst
}

fn mat_diff(a: &Homography, b: &Homography) -> f64 {
    a.matrix()
        .iter()
        .flatten()
        .zip(b.matrix().iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `(associativity, inverse, identity)` worst errors over `n` random
/// well-conditioned homographies. Associativity is measured on points.
pub fn group_laws(n: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut assoc, mut inv, mut ident) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let [a, b, c] = std::array::from_fn(|_| {
            let (s, d) = random_quad(&mut rng);
            dlt(&s, &d).unwrap()
        });
        let p = [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)];
        let left = a
            .compose(&b)
            .unwrap()
            .compose(&c)
            .unwrap()
            .apply(p)
            .unwrap();
        let right = a
            .compose(&b.compose(&c).unwrap())
            .unwrap()
            .apply(p)
            .unwrap();
        let seq = a.apply(b.apply(c.apply(p).unwrap()).unwrap()).unwrap();
        assoc = assoc.max((left[0] - right[0]).hypot(left[1] - right[1]));
        assoc = assoc.max((left[0] - seq[0]).hypot(left[1] - seq[1]));
        let ai = a.inverse().unwrap();
        inv = inv.max(mat_diff(&a.compose(&ai).unwrap(), &Homography::IDENTITY));
        inv = inv.max(mat_diff(&ai.compose(&a).unwrap(), &Homography::IDENTITY));
        ident = ident.max(mat_diff(&Homography::IDENTITY.compose(&a).unwrap(), &a));
        ident = ident.max(mat_diff(&a.compose(&Homography::IDENTITY).unwrap(), &a));
    }
    (assoc, inv, ident)
}

/// Whether `warp(warp(I, A), B)` equals `warp(I, A B)` bit-exactly wherever
/// the intermediate sample is inside the frame, over integer translations.
pub fn translation_warps_compose_exactly(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = localtrans::data::procedural_image(seed, 20, 24);
    (0..20).all(|_| {
        let mut t = || {
            Homography::translation(
                rng.random_range(-5..=5) as f64,
                rng.random_range(-5..=5) as f64,
            )
        };
        let (a, b) = (t(), t());
        let twice = warp(&warp(&img, &a, 20, 24).unwrap(), &b, 20, 24).unwrap();
        let once = warp(&img, &a.compose(&b).unwrap(), 20, 24).unwrap();
        (0..3).all(|c| {
            (0..20).all(|y| {
                (0..24).all(|x| {
                    let p = b.apply([x as f64, y as f64]).unwrap();
                    let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= 23.0 && p[1] <= 19.0;
                    !inside || twice.at(c, y, x) == once.at(c, y, x)
                })
            })
        })
    })
}

/// Lowest interior PSNR of `warp(I_U, gt_H)` against `I_T` over `n`
/// default-size pairs without augmentation.
pub fn worst_pair_psnr(n: usize, seed: u64) -> f64 {
    let cfg = GenConfig {
        augment: None,
        ..GenConfig::default()
    };
    let pairs = generate_range(&cfg, seed, 0, n).unwrap();
    pairs
        .iter()
        .map(|s| {
            let p = cfg.patch;
            let back = warp(&s.unaligned, &s.gt_h, p, p).unwrap();
            let mask = valid_mask(&s.gt_h, p, p, p, p);
            psnr_masked(&back, &s.target, Some(&mask)).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

fn dir_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Writes the same seeded dataset twice and compares every byte.
pub fn regeneration_is_identical(n: usize, seed: u64) -> bool {
    let cfg = GenConfig {
        patch: 64,
        rho: 16.0,
        ..GenConfig::default()
    };
    let base = std::env::temp_dir().join(format!("lt-regen-{}-{seed}", std::process::id()));
    let dirs = [base.join("a"), base.join("b")];
    for d in &dirs {
        let pairs = generate_range(&cfg, seed, 0, n).unwrap();
        write_dataset(d, &pairs, 0).unwrap();
    }
    let same = dir_bytes(&dirs[0]) == dir_bytes(&dirs[1]) && !dir_bytes(&dirs[0]).is_empty();
    let _ = std::fs::remove_dir_all(&base);
    same
}

/// Per level of a `K = 3, C = 32, 128 x 128` model: encoder grid, attention
/// window side and head output length, read off the tensors of one forward
/// pass.
pub fn shape_ladder() -> Vec<((usize, usize), usize, usize)> {
    let model = Model::new(ModelConfig::default()).unwrap();
    let t = localtrans::data::procedural_image(1, 128, 128);
    let u = localtrans::data::procedural_image(2, 128, 128);
    let mut stats = model.store.stats_snapshot();
    (1..=model.cfg.levels)
        .map(|k| {
            let mut tape = Tape::new();
            let vars = [
                tape.input(t.clone()).unwrap(),
                tape.input(u.clone()).unwrap(),
            ];
            let feats = model
                .encode(&mut tape, &mut stats, &vars, k, Mode::Infer)
                .unwrap();
            let s = tape.value(feats[0]).shape().to_vec();
            let v = model
                .level_forward(
                    &mut tape,
                    &mut stats,
                    &[t.clone()],
                    &[u.clone()],
                    k,
                    Mode::Infer,
                )
                .unwrap();
            let m = tape.value(v.m_att[0]).shape().to_vec();
            assert_eq!(m[2], m[3]);
            ((s[1], s[2]), m[2], tape.value(v.offsets[0]).len())
        })
        .collect()
}
