use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lak::Boundary;

/// How the decoder's correlation map is post-processed before the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionNorm {
    /// Raw inner products.
    #[default]
    Raw,
    /// Inner products divided by `sqrt(C)`.
    Scaled,
    /// Scaled softmax over each window.
    Softmax,
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(AttentionNorm::Raw),
            "scaled" => Ok(AttentionNorm::Scaled),
            "softmax" => Ok(AttentionNorm::Softmax),
            _ => Err(Error::InvalidArgument(format!(
                "attention norm must be raw, scaled or softmax, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for AttentionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionNorm::Raw => "raw",
            AttentionNorm::Scaled => "scaled",
            AttentionNorm::Softmax => "softmax",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of scale levels `K`.
    pub levels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Window radius per level; level `k` (1-based) defaults to `k + 1`.
    pub radii: Vec<usize>,
    pub boundary: Boundary,
    /// One encoder stack truncated per level instead of one stack per level.
    pub shared_encoder: bool,
    pub attention_norm: AttentionNorm,
    /// Multiplier from head output to pixels.
    pub offset_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(3, 32, 128, 128)
    }
}

impl ModelConfig {
    pub fn new(levels: usize, channels: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            levels,
            channels,
            height,
            width,
            radii: default_radii(levels),
            boundary: Boundary::Mask,
            shared_encoder: true,
            attention_norm: AttentionNorm::Raw,
            offset_scale: 16.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 || self.channels == 0 {
            return bad("levels and channels must be positive".into());
        }
        if self.radii.len() != self.levels || self.radii.contains(&0) {
            return bad(format!(
                "need {} positive radii, got {:?}",
                self.levels, self.radii
            ));
        }
        // encoder halves K - k + 1 times, the head k more times
        let div = 1usize << (self.levels + 1);
        if self.height % div != 0 || self.width % div != 0 {
            return bad(format!(
                "input {}x{} must be divisible by 2^(K+1) = {div}",
                self.width, self.height
            ));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return bad(format!(
                "offset_scale must be positive, got {}",
                self.offset_scale
            ));
        }
        Ok(())
    }

    /// Radius at level `k` (1-based).
    pub fn radius(&self, k: usize) -> usize {
        self.radii[k - 1]
    }

    /// Encoder blocks applied at level `k`.
    pub fn encoder_blocks(&self, k: usize) -> usize {
        self.levels - k + 1
    }

    /// Feature grid `(H_k, W_k)` at level `k`.
    pub fn grid(&self, k: usize) -> (usize, usize) {
        let d = 1usize << self.encoder_blocks(k);
        (self.height / d, self.width / d)
    }

    pub fn to_sidecar(&self) -> String {
        let radii: Vec<String> = self.radii.iter().map(|r| r.to_string()).collect();
        format!(
            "levels = {}\nchannels = {}\nheight = {}\nwidth = {}\nradii = {}\nboundary = {}\n\
             shared_encoder = {}\nattention_norm = {}\noffset_scale = {:e}\nseed = {}\nprecision = {}\n",
            self.levels,
            self.channels,
            self.height,
            self.width,
            radii.join(","),
            self.boundary,
            self.shared_encoder,
            self.attention_norm,
            self.offset_scale,
            self.seed,
            precision(),
        )
    }

    pub fn from_sidecar(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut radii = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let offset = text.lines().take(lineno).map(|l| l.len() + 1).sum();
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                offset,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            fn num<T: FromStr>(v: &str, key: &str, err: impl Fn(String) -> Error) -> Result<T> {
                v.parse()
                    .map_err(|_| err(format!("{key}: cannot parse {v:?}")))
            }
            match key {
                "levels" => cfg.levels = num(value, key, err)?,
                "channels" => cfg.channels = num(value, key, err)?,
                "height" => cfg.height = num(value, key, err)?,
                "width" => cfg.width = num(value, key, err)?,
                "radii" => {
                    radii = Some(
                        value
                            .split(',')
                            .map(|r| num(r.trim(), key, &err))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
                "boundary" => {
                    cfg.boundary = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "shared_encoder" => cfg.shared_encoder = num(value, key, err)?,
                "attention_norm" => {
                    cfg.attention_norm = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "offset_scale" => cfg.offset_scale = num(value, key, err)?,
                "seed" => cfg.seed = num(value, key, err)?,
                "precision" => {
                    if value != precision() {
                        return Err(err(format!(
                            "model stored in {value}, this build uses {}",
                            precision()
                        )));
                    }
                }
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.radii = radii.unwrap_or_else(|| default_radii(cfg.levels));
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn default_radii(levels: usize) -> Vec<usize> {
    (1..=levels).map(|k| k + 1).collect()
}

fn precision() -> &'static str {
    if cfg!(feature = "f32") {
        "f32"
    } else {
        "f64"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let mut cfg = ModelConfig::new(2, 8, 32, 64);
        cfg.radii = vec![1, 4];
        cfg.boundary = Boundary::ZeroPad;
        cfg.attention_norm = AttentionNorm::Softmax;
        cfg.offset_scale = 12.5;
        cfg.seed = 99;
        let back = ModelConfig::from_sidecar(&cfg.to_sidecar(), Path::new("m.cfg")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err =
            ModelConfig::from_sidecar("levels = 3\nchanels = 4\n", Path::new("m.cfg")).unwrap_err();
        match err {
            Error::Parse {
                offset, message, ..
            } => {
                assert_eq!(offset, 11);
                assert!(message.contains("chanels"));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn default_ladder() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.radii, vec![2, 3, 4]);
        assert_eq!(
            [cfg.grid(1), cfg.grid(2), cfg.grid(3)],
            [(16, 16), (32, 32), (64, 64)]
        );
        assert!(ModelConfig::new(3, 8, 24, 24).validate().is_err());
    }
}
