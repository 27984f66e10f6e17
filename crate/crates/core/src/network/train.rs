use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{param_group, LevelVars, Model, ModelConfig};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::homography::{corner_error, dlt, psnr, ssim, warp, CornerOffsets, Homography};
use crate::tensor::kernels::RunningStats;
use crate::tensor::{checkpoint, Mode, ParamStore, Real, Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "model.ltck";
pub const CONFIG_FILE: &str = "model.cfg";
pub const OPTIMIZER_FILE: &str = "optimizer.ltck";

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as Real, self.beta2 as Real);
        let step = (self.lr / c1) as Real;
        let c2 = c2 as Real;
        let eps = self.eps as Real;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * g[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
                *x -= step * md[i] / ((vd[i] / c2).sqrt() + eps);
            }
        }
    }

    fn named_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as Real))];
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            out.push((format!("adam.m.{}", p.name), m.clone()));
            out.push((format!("adam.v.{}", p.name), v.clone()));
        }
        out
    }

    fn load_state(
        &mut self,
        store: &ParamStore,
        tensors: &[(String, Tensor)],
        path: &Path,
    ) -> Result<()> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Invariant {
                    path: path.to_path_buf(),
                    message: format!("optimizer state lacks {name}"),
                })
        };
        self.step = get("adam.step")?.data()[0] as u64;
        for (i, p) in store.iter().enumerate() {
            let (m, v) = (
                get(&format!("adam.m.{}", p.name))?,
                get(&format!("adam.v.{}", p.name))?,
            );
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Invariant {
                    path: path.to_path_buf(),
                    message: format!("optimizer state shape mismatch for {}", p.name),
                });
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Residual offsets `A^-1 gt` at the base corners for a sample whose
/// unaligned image has been warped by `acc`.
pub fn level_targets(
    acc: &Homography,
    gt: &Homography,
    base: [crate::homography::Point; 4],
) -> Result<CornerOffsets> {
    CornerOffsets::from_homography(&acc.inverse()?.compose(gt)?, base)
}

/// What one level of a training step saw: the (already warped) unaligned
/// inputs and the residual corner targets. Both are constants for the
/// gradient because no gradient crosses the inter-level warp.
#[derive(Clone, Debug)]
pub struct FrozenLevel {
    pub inputs: Vec<Tensor>,
    pub residuals: Vec<[Real; 8]>,
}

/// Batch-mean corner loss of level `k` on frozen inputs.
pub fn level_loss(
    model: &Model,
    tape: &mut Tape,
    stats: &mut [RunningStats],
    targets: &[Tensor],
    frozen: &FrozenLevel,
    k: usize,
    mode: Mode,
) -> Result<(LevelVars, Var)> {
    let vars = model.level_forward(tape, stats, targets, &frozen.inputs, k, mode)?;
    let mut total: Option<Var> = None;
    for (i, r) in frozen.residuals.iter().enumerate() {
        let l = tape.corner_l1(vars.offsets[i], r)?;
        total = Some(match total {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / frozen.residuals.len() as Real)?;
    Ok((vars, loss))
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: u64,
    /// Batch-mean loss per level.
    pub level_losses: Vec<f64>,
    pub loss: f64,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: Model, lr: f64, batch_size: usize, seed: u64) -> Self {
        let adam = Adam::new(&model.store, lr);
        Trainer {
            model,
            adam,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Next batch of indices into a dataset of `n` samples; reshuffles at
    /// each epoch boundary.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.batch_size.min(n);
        if self.order.len() != n || self.cursor + b > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }

    /// Per-level losses and parameter gradients of one batch, accumulated
    /// into the store; running statistics are updated. Also returns the
    /// inputs and residual targets each level was trained on.
    pub fn compute_gradients(
        &mut self,
        batch: &[&SamplePair],
    ) -> Result<(Vec<f64>, Vec<FrozenLevel>)> {
        let model = &mut self.model;
        let base = model.base();
        let n = batch.len();
        let targets: Vec<Tensor> = batch.iter().map(|s| s.target.clone()).collect();
        let mut acc = vec![Homography::IDENTITY; n];
        let mut losses = Vec::with_capacity(model.cfg.levels);
        let mut schedule = Vec::with_capacity(model.cfg.levels);
        let mut stats = model.store.stats_snapshot();
        for k in 1..=model.cfg.levels {
            let wrap = |e: Error| Error::Cascade {
                level: k,
                source: Box::new(e),
            };
            let frozen = FrozenLevel {
                inputs: batch
                    .iter()
                    .zip(&acc)
                    .map(|(s, a)| model.warp_input(&s.unaligned, a))
                    .collect::<Result<_>>()
                    .map_err(wrap)?,
                residuals: batch
                    .iter()
                    .zip(&acc)
                    .map(|(s, a)| {
                        level_targets(a, &s.gt_h, base).map(|t| t.to_vec8().map(|v| v as Real))
                    })
                    .collect::<Result<_>>()
                    .map_err(wrap)?,
            };
            let mut tape = Tape::new();
            let (vars, loss) = level_loss(
                model,
                &mut tape,
                &mut stats,
                &targets,
                &frozen,
                k,
                Mode::Train,
            )
            .map_err(wrap)?;
            losses.push(tape.value(loss).data()[0] as f64);
            let grads = tape.backward(loss).map_err(wrap)?;
            tape.accumulate_param_grads(&grads, &mut model.store)?;
            for i in 0..n {
                let v: Vec<f64> = tape
                    .value(vars.offsets[i])
                    .data()
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                let h =
                    dlt(&base, &CornerOffsets::from_vec8(base, &v).displaced()).map_err(wrap)?;
                acc[i] = acc[i].compose(&h).map_err(wrap)?;
            }
            schedule.push(frozen);
        }
        model.store.restore_stats(stats);
        Ok((losses, schedule))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&SamplePair]) -> Result<StepReport> {
        self.model.store.zero_grad();
        let (level_losses, _) = self.compute_gradients(batch)?;
        let loss: f64 = level_losses.iter().sum();
        let step = self.adam.step + 1;
        if !loss.is_finite() {
            let level = level_losses
                .iter()
                .position(|l| !l.is_finite())
                .map_or(0, |i| i + 1);
            let group = self
                .model
                .store
                .iter()
                .find(|p| !p.grad.all_finite())
                .map_or("none", |p| param_group(&p.name));
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "non-finite loss at level {level}, first non-finite gradient in group {group}"
                ),
            });
        }
        self.adam.update(&mut self.model.store);
        if let Some(p) = self.model.store.iter().find(|p| !p.value.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "non-finite parameter {} in group {}",
                    p.name,
                    param_group(&p.name)
                ),
            });
        }
        Ok(StepReport {
            step: self.adam.step,
            level_losses,
            loss,
        })
    }

    /// Writes model, config sidecar and optimizer state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(&self.model, dir)?;
        checkpoint::save(
            &dir.join(OPTIMIZER_FILE),
            &self.adam.named_state(&self.model.store),
        )
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn resume(dir: &Path, lr: f64, batch_size: usize, seed: u64) -> Result<Trainer> {
        let model = load_model(dir)?;
        let mut t = Trainer::new(model, lr, batch_size, seed);
        let path = dir.join(OPTIMIZER_FILE);
        let state = checkpoint::load(&path)?;
        t.adam.load_state(&t.model.store, &state, &path)?;
        t.rng = ChaCha8Rng::seed_from_u64(seed ^ t.adam.step.rotate_left(32));
        Ok(t)
    }
}

pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &model.store.named_tensors())?;
    let cfg = dir.join(CONFIG_FILE);
    std::fs::write(&cfg, model.cfg.to_sidecar()).map_err(|e| Error::io(&cfg, e))
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ModelConfig::from_sidecar(&text, &cfg_path)?;
    let mut model = Model::new(cfg)?;
    let tensors = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    model.store.load_named(&tensors)?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct SampleEval {
    pub corner_error: f64,
    pub identity_error: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub mean_corner_error: f64,
    pub median_corner_error: f64,
    pub mean_identity_error: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Corner error of the cascade estimate and PSNR/SSIM of the aligned
/// unaligned image against the target, per sample and averaged. Identical
/// images count as 100 dB in the PSNR mean.
pub fn evaluate(model: &Model, pairs: &[SamplePair], batch: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one sample".into(),
        ));
    }
    let base = model.base();
    let mut samples = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let t: Vec<Tensor> = chunk.iter().map(|s| s.target.clone()).collect();
        let u: Vec<Tensor> = chunk.iter().map(|s| s.unaligned.clone()).collect();
        for (s, out) in chunk.iter().zip(model.predict(&t, &u)?) {
            let aligned = if out.h.is_identity() {
                s.unaligned.clone()
            } else {
                warp(&s.unaligned, &out.h, model.cfg.height, model.cfg.width)?
            };
            samples.push(SampleEval {
                corner_error: corner_error(&out.h, &s.gt_h, &base)?,
                identity_error: s.gt_offsets.mean_displacement(),
                psnr: psnr(&aligned, &s.target)?.min(100.0),
                ssim: ssim(&aligned, &s.target)?,
            });
        }
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleEval) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let mut errs: Vec<f64> = samples.iter().map(|s| s.corner_error).collect();
    Ok(EvalReport {
        mean_corner_error: mean(|s| s.corner_error),
        median_corner_error: median(&mut errs),
        mean_identity_error: mean(|s| s.identity_error),
        mean_psnr: mean(|s| s.psnr),
        mean_ssim: mean(|s| s.ssim),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_range, GenConfig};

    fn pairs(n: usize) -> Vec<SamplePair> {
        let cfg = GenConfig {
            patch: 32,
            rho: 4.0,
            augment: None,
            ..GenConfig::default()
        };
        generate_range(&cfg, 1, 0, n).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        store.get_mut(id).grad = Tensor::new(&[2], vec![0.5, -3.0]).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.update(&mut store);
        let v = store.value(id).data();
        assert!(
            (v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6,
            "{v:?}"
        );
    }

    #[test]
    fn residual_target_of_identity_is_ground_truth() {
        let s = &pairs(1)[0];
        let base = s.gt_offsets.base;
        let t = level_targets(&Homography::IDENTITY, &s.gt_h, base).unwrap();
        for (a, b) in t.to_vec8().iter().zip(s.gt_offsets.to_vec8()) {
            assert!((a - b).abs() < 1e-9);
        }
        let t = level_targets(&s.gt_h, &s.gt_h, base).unwrap();
        assert!(t.to_vec8().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_model_eval_reports_identity_baseline() {
        let model = Model::new(ModelConfig::new(2, 4, 32, 32)).unwrap();
        let data = pairs(3);
        let r = evaluate(&model, &data, 2).unwrap();
        for (s, p) in r.samples.iter().zip(&data) {
            let id = corner_error(&Homography::IDENTITY, &p.gt_h, &p.gt_offsets.base).unwrap();
            assert!((s.corner_error - id).abs() < 1e-12);
            assert!((s.identity_error - id).abs() < 1e-9);
        }
    }

    #[test]
    fn save_resume_round_trip() {
        let dir = std::env::temp_dir().join(format!("lt-train-{}", std::process::id()));
        let data = pairs(2);
        let batch: Vec<&SamplePair> = data.iter().collect();
        let mut t = Trainer::new(
            Model::new(ModelConfig::new(2, 4, 32, 32)).unwrap(),
            1e-3,
            2,
            0,
        );
        t.step(&batch).unwrap();
        t.save(&dir).unwrap();
        let r = Trainer::resume(&dir, 1e-3, 2, 0).unwrap();
        assert_eq!(r.adam.step, 1);
        for (a, b) in t
            .model
            .store
            .named_tensors()
            .iter()
            .zip(r.model.store.named_tensors())
        {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
