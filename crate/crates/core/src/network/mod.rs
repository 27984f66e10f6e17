//! The multiscale cascade.
//!
//! At level `k` (1-based, coarse to fine) both images pass through the
//! first `K - k + 1` encoder blocks, a self-attention encoder module (SAEM)
//! and a two-iteration cross-attention decoder (TDM) whose final output is
//! the local correlation map `M_att`. A head regresses eight corner offsets
//! from `M_att`; the unaligned image is then warped by the accumulated
//! estimate before the next level. No gradient crosses the warp.

mod config;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::homography::{dlt, rect_corners, warp, CornerOffsets, Homography, Point};
use crate::lak::LakOptions;
use crate::tensor::kernels::RunningStats;
use crate::tensor::param::StatsId;
use crate::tensor::{Mode, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use config::{default_radii, AttentionNorm, ModelConfig};
pub use train::{
    evaluate, level_loss, level_targets, load_model, save_model, Adam, EvalReport, FrozenLevel,
    SampleEval, StepReport, Trainer, CHECKPOINT_FILE, CONFIG_FILE, OPTIMIZER_FILE,
};

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
}

#[derive(Clone, Debug)]
struct Block {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Clone, Debug)]
struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: ParamId,
}

#[derive(Clone, Debug)]
struct Head {
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Parameters and layer wiring of a LocalTrans model.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// One stack of `K` blocks, or per level `K - k + 1` blocks.
    encoder: Vec<Vec<Block>>,
    saem: Vec<Attention>,
    tdm: Vec<Attention>,
    heads: Vec<Head>,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as Real)
}

fn conv_bn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> ConvBn {
    ConvBn {
        w: store.add(format!("{name}.weight"), kaiming(rng, &[cout, cin, 3, 3])),
        b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0)),
        beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
        stats: store.add_stats(format!("{name}.bn"), cout),
    }
}

fn block(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, c: usize) -> Block {
    Block {
        first: conv_bn(store, rng, &format!("{name}.conv1"), cin, c),
        second: conv_bn(store, rng, &format!("{name}.conv2"), c, c),
    }
}

fn attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Attention {
    let mut w = |part: &str| store.add(format!("{name}.{part}"), kaiming(rng, &[c, c, 1, 1]));
    Attention {
        q: w("query"),
        k: w("key"),
        v: w("value"),
        out: w("out"),
    }
}

/// Values recorded for one level of a batch.
pub struct LevelVars {
    /// Predicted offsets `[8, 1, 1]` per sample, in pixels.
    pub offsets: Vec<Var>,
    /// Correlation maps `[H_k, W_k, S, S]` per sample.
    pub m_att: Vec<Var>,
    /// SAEM attention maps of the targets.
    pub saem_target: Vec<Var>,
}

/// Result of one level of the cascade for one pair.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub offsets: CornerOffsets,
    pub h: Homography,
    pub m_att: Tensor,
    /// The unaligned image as warped by the estimate accumulated so far.
    pub warped: Tensor,
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub levels: Vec<LevelOutput>,
    pub h: Homography,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let k_max = cfg.levels;
        let encoder = if cfg.shared_encoder {
            vec![(0..k_max)
                .map(|b| {
                    block(
                        &mut store,
                        &mut rng,
                        &format!("encoder.block{}", b + 1),
                        if b == 0 { 3 } else { c },
                        c,
                    )
                })
                .collect()]
        } else {
            (1..=k_max)
                .map(|k| {
                    (0..cfg.encoder_blocks(k))
                        .map(|b| {
                            let name = format!("encoder.level{k}.block{}", b + 1);
                            block(&mut store, &mut rng, &name, if b == 0 { 3 } else { c }, c)
                        })
                        .collect()
                })
                .collect()
        };
        let saem = (1..=k_max)
            .map(|k| attention(&mut store, &mut rng, &format!("saem{k}"), c))
            .collect();
        let tdm = (1..=k_max)
            .map(|k| attention(&mut store, &mut rng, &format!("tdm{k}"), c))
            .collect();
        let heads = (1..=k_max)
            .map(|k| {
                let s = 2 * cfg.radius(k) + 1;
                let blocks = (0..=k)
                    .map(|b| {
                        block(
                            &mut store,
                            &mut rng,
                            &format!("head{k}.block{}", b + 1),
                            if b == 0 { s * s } else { c },
                            c,
                        )
                    })
                    .collect();
                Head {
                    blocks,
                    fc_w: store.add(format!("head{k}.fc.weight"), Tensor::zeros(&[8, c, 1, 1])),
                    fc_b: store.add(format!("head{k}.fc.bias"), Tensor::zeros(&[8])),
                }
            })
            .collect();
        Ok(Model {
            cfg,
            store,
            encoder,
            saem,
            tdm,
            heads,
        })
    }

    /// Base corners of the model input.
    pub fn base(&self) -> [Point; 4] {
        rect_corners(self.cfg.width, self.cfg.height)
    }

    fn conv_bn_relu(
        &self,
        tape: &mut Tape,
        stats: &mut [RunningStats],
        layer: &ConvBn,
        xs: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let w = tape.param(&self.store, layer.w);
        let b = tape.param(&self.store, layer.b);
        let ys = xs
            .iter()
            .map(|&x| tape.conv2d(x, w, Some(b)))
            .collect::<Result<Vec<_>>>()?;
        let gamma = tape.param(&self.store, layer.gamma);
        let beta = tape.param(&self.store, layer.beta);
        let ys = tape.batchnorm(&ys, gamma, beta, &mut stats[layer.stats.0], mode)?;
        ys.into_iter().map(|y| tape.relu(y)).collect()
    }

    fn run_block(
        &self,
        tape: &mut Tape,
        stats: &mut [RunningStats],
        blk: &Block,
        xs: &[Var],
        mode: Mode,
        global_pool: bool,
    ) -> Result<Vec<Var>> {
        let ys = self.conv_bn_relu(tape, stats, &blk.first, xs, mode)?;
        let ys = self.conv_bn_relu(tape, stats, &blk.second, &ys, mode)?;
        ys.into_iter()
            .map(|y| {
                if global_pool {
                    tape.global_avgpool(y)
                } else {
                    tape.maxpool2x2(y)
                }
            })
            .collect()
    }

    /// Encoder features of every image at level `k`; all images share one
    /// batch-normalization batch.
    pub fn encode(
        &self,
        tape: &mut Tape,
        stats: &mut [RunningStats],
        images: &[Var],
        k: usize,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let stack = if self.cfg.shared_encoder {
            &self.encoder[0]
        } else {
            &self.encoder[k - 1]
        };
        let mut xs = images.to_vec();
        for blk in &stack[..self.cfg.encoder_blocks(k)] {
            xs = self.run_block(tape, stats, blk, &xs, mode, false)?;
        }
        Ok(xs)
    }

    fn lak_opts(&self, k: usize) -> LakOptions {
        LakOptions {
            radius: self.cfg.radius(k),
            boundary: self.cfg.boundary,
            low_memory: true,
        }
    }

    /// Self-attention encoder: returns `(phi_s, attention map)`.
    pub fn saem(&self, tape: &mut Tape, x: Var, k: usize) -> Result<(Var, Var)> {
        let a = &self.saem[k - 1];
        let [wq, wk, wv, wo] = [a.q, a.k, a.v, a.out].map(|id| tape.param(&self.store, id));
        let q = tape.conv1x1(x, wq, None)?;
        let kk = tape.conv1x1(x, wk, None)?;
        let v = tape.conv1x1(x, wv, None)?;
        let h = tape.lak_fused(q, kk, v, self.lak_opts(k))?;
        let map = tape.fused_map(h).expect("fused node").data.clone();
        let map = tape.constant(map)?;
        Ok((tape.conv1x1(h, wo, None)?, map))
    }

    /// Decoder: two cross-attention iterations, then the correlation map.
    pub fn tdm(&self, tape: &mut Tape, target: Var, unaligned: Var, k: usize) -> Result<Var> {
        let a = &self.tdm[k - 1];
        let [wq, wk, wv, wo] = [a.q, a.k, a.v, a.out].map(|id| tape.param(&self.store, id));
        let mut qkv = |x: Var| -> Result<[Var; 3]> {
            Ok([
                tape.conv1x1(x, wq, None)?,
                tape.conv1x1(x, wk, None)?,
                tape.conv1x1(x, wv, None)?,
            ])
        };
        let [qt, kt, vt] = qkv(target)?;
        let [qu, ku, vu] = qkv(unaligned)?;
        let opts = self.lak_opts(k);
        let ht = tape.lak_fused(qu, kt, vt, opts)?;
        let hu = tape.lak_fused(qt, ku, vu, opts)?;
        let st = tape.conv1x1(ht, wo, None)?;
        let su = tape.conv1x1(hu, wo, None)?;
        let r = self.cfg.radius(k);
        let m = tape.lak_logits(st, su, r)?;
        let c = self.cfg.channels;
        match self.cfg.attention_norm {
            crate::network::AttentionNorm::Raw => Ok(m),
            crate::network::AttentionNorm::Scaled => tape.scale(m, 1.0 / (c as Real).sqrt()),
            crate::network::AttentionNorm::Softmax => tape.lak_softmax(m, c, r, self.cfg.boundary),
        }
    }

    /// Regression head: eight offsets `[8, 1, 1]` per map, in pixels.
    pub fn head(
        &self,
        tape: &mut Tape,
        stats: &mut [RunningStats],
        maps: &[Var],
        k: usize,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let head = &self.heads[k - 1];
        let mut xs = maps
            .iter()
            .map(|&m| tape.map_to_channels(m))
            .collect::<Result<Vec<_>>>()?;
        let last = head.blocks.len() - 1;
        for (i, blk) in head.blocks.iter().enumerate() {
            xs = self.run_block(tape, stats, blk, &xs, mode, i == last)?;
        }
        let w = tape.param(&self.store, head.fc_w);
        let b = tape.param(&self.store, head.fc_b);
        let scale = self.cfg.offset_scale as Real;
        xs.into_iter()
            .map(|x| {
                let y = tape.conv1x1(x, w, Some(b))?;
                tape.scale(y, scale)
            })
            .collect()
    }

    /// Records level `k` for a batch of equally-sized pairs.
    pub fn level_forward(
        &self,
        tape: &mut Tape,
        stats: &mut [RunningStats],
        targets: &[Tensor],
        unaligned: &[Tensor],
        k: usize,
        mode: Mode,
    ) -> Result<LevelVars> {
        if targets.len() != unaligned.len() || targets.is_empty() {
            return Err(Error::InvalidArgument(
                "batch needs equal, non-zero numbers of targets and unaligned images".into(),
            ));
        }
        if k == 0 || k > self.cfg.levels {
            return Err(Error::InvalidArgument(format!(
                "level {k} outside 1..={}",
                self.cfg.levels
            )));
        }
        let expect = [3, self.cfg.height, self.cfg.width];
        let mut images = Vec::with_capacity(2 * targets.len());
        for img in targets.iter().chain(unaligned) {
            if img.shape() != expect {
                return Err(Error::shape(format!(
                    "model expects {:?}, got {:?}",
                    expect,
                    img.shape()
                )));
            }
            images.push(tape.constant(img.clone())?);
        }
        let feats = self.encode(tape, stats, &images, k, mode)?;
        let n = targets.len();
        let mut saem_target = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(2 * n);
        for (i, &f) in feats.iter().enumerate() {
            let (phi, map) = self.saem(tape, f, k)?;
            if i < n {
                saem_target.push(map);
            }
            s.push(phi);
        }
        let m_att = (0..n)
            .map(|i| self.tdm(tape, s[i], s[n + i], k))
            .collect::<Result<Vec<_>>>()?;
        let offsets = self.head(tape, stats, &m_att, k, mode)?;
        Ok(LevelVars {
            offsets,
            m_att,
            saem_target,
        })
    }

    /// Full cascade in inference mode for a batch of pairs at model size.
    pub fn predict(&self, targets: &[Tensor], unaligned: &[Tensor]) -> Result<Vec<CascadeOutput>> {
        let n = targets.len();
        let base = self.base();
        let mut acc = vec![Homography::IDENTITY; n];
        let mut current: Vec<Tensor> = unaligned.to_vec();
        let mut levels: Vec<Vec<LevelOutput>> = vec![Vec::new(); n];
        for k in 1..=self.cfg.levels {
            let mut tape = Tape::new();
            let mut stats = self.store.stats_snapshot();
            let vars =
                self.level_forward(&mut tape, &mut stats, targets, &current, k, Mode::Infer)?;
            for i in 0..n {
                let v: Vec<f64> = tape
                    .value(vars.offsets[i])
                    .data()
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                let offsets = CornerOffsets::from_vec8(base, &v);
                let wrap = |e: Error| Error::Cascade {
                    level: k,
                    source: Box::new(e),
                };
                let h = dlt(&base, &offsets.displaced()).map_err(wrap)?;
                acc[i] = acc[i].compose(&h).map_err(wrap)?;
                current[i] = self.warp_input(&unaligned[i], &acc[i]).map_err(wrap)?;
                levels[i].push(LevelOutput {
                    offsets,
                    h,
                    m_att: tape.value(vars.m_att[i]).clone(),
                    warped: current[i].clone(),
                });
            }
        }
        Ok(levels
            .into_iter()
            .zip(acc)
            .map(|(levels, h)| CascadeOutput { levels, h })
            .collect())
    }

    /// Resamples the original unaligned image under the accumulated
    /// estimate; the identity returns the input unchanged.
    pub fn warp_input(&self, unaligned: &Tensor, acc: &Homography) -> Result<Tensor> {
        if acc.is_identity() {
            return Ok(unaligned.clone());
        }
        warp(unaligned, acc, self.cfg.height, self.cfg.width)
    }

    /// Estimates `H` with `target(x) ~ unaligned(H x)` for images of any
    /// (equal) size, resizing to the model input and back.
    pub fn estimate(&self, target: &Tensor, unaligned: &Tensor) -> Result<Homography> {
        use crate::homography::resize_map;
        use crate::tensor::resize::resize_bicubic_to;
        let (_, th, tw) = target.chw()?;
        let (_, uh, uw) = unaligned.chw()?;
        let (mh, mw) = (self.cfg.height, self.cfg.width);
        let t = resize_bicubic_to(target, mh, mw)?;
        let u = resize_bicubic_to(unaligned, mh, mw)?;
        let h = self.predict(&[t], &[u])?.remove(0).h;
        // model coords -> native: x_t = R_t x_m, x_u = R_u y_m
        let rt = resize_map(tw, th, mw, mh)?;
        let ru = resize_map(uw, uh, mw, mh)?;
        if h.is_identity() && (th, tw) == (uh, uw) {
            return Ok(h);
        }
        ru.compose(&h)?.compose(&rt.inverse()?)
    }
}

/// Parameter group of a parameter name: `encoder`, `saem{k}`, `tdm{k}` or
/// `head{k}`.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(2, 4, 32, 32)
    }

    fn image(seed: u64, n: usize) -> Tensor {
        crate::data::procedural_image(seed, n, n)
    }

    #[test]
    fn shape_ladder_small() {
        let model = Model::new(small()).unwrap();
        let mut tape = Tape::new();
        let mut stats = model.store.stats_snapshot();
        for k in 1..=2 {
            let v = model
                .level_forward(
                    &mut tape,
                    &mut stats,
                    &[image(1, 32)],
                    &[image(2, 32)],
                    k,
                    Mode::Train,
                )
                .unwrap();
            let (h, w) = model.cfg.grid(k);
            let s = 2 * (k + 1) + 1;
            assert_eq!(tape.value(v.m_att[0]).shape(), &[h, w, s, s]);
            assert_eq!(tape.value(v.offsets[0]).len(), 8);
        }
    }

    #[test]
    fn zero_init_predicts_identity() {
        let model = Model::new(small()).unwrap();
        let t = image(3, 32);
        let u = image(4, 32);
        let out = model.predict(&[t], &[u.clone()]).unwrap();
        assert_eq!(out[0].h, Homography::IDENTITY);
        assert_eq!(out[0].levels.last().unwrap().warped, u);
    }

    #[test]
    fn identical_inputs_give_identical_features() {
        let model = Model::new(small()).unwrap();
        let mut tape = Tape::new();
        let mut stats = model.store.stats_snapshot();
        let img = image(5, 32);
        let a = tape.constant(img.clone()).unwrap();
        let b = tape.constant(img).unwrap();
        let f = model
            .encode(&mut tape, &mut stats, &[a, b], 1, Mode::Train)
            .unwrap();
        assert_eq!(tape.value(f[0]).max_abs_diff(tape.value(f[1])), 0.0);
    }

    #[test]
    fn every_parameter_has_a_group() {
        let mut cfg = small();
        cfg.shared_encoder = false;
        let model = Model::new(cfg).unwrap();
        let groups = [
            "encoder", "saem1", "saem2", "tdm1", "tdm2", "head1", "head2",
        ];
        for p in model.store.iter() {
            assert!(groups.contains(&param_group(&p.name)), "{}", p.name);
        }
    }

    #[test]
    fn estimate_at_native_size_is_identity_for_zero_model() {
        let model = Model::new(small()).unwrap();
        let h = model.estimate(&image(1, 48), &image(2, 48)).unwrap();
        assert_eq!(h, Homography::IDENTITY);
    }
}
