//! On-disk dataset: one directory per sample holding `target.ppm`,
//! `unaligned.ppm` and `gt.txt`. `gt.txt` has three LF-terminated lines:
//! the nine homography entries, the eight corner offsets, then the
//! cross-resolution factor and the sample seed.

use std::path::{Path, PathBuf};

use super::SamplePair;
use crate::error::{Error, Result};
use crate::homography::imageio::{read_pnm, write_pnm};
use crate::homography::{corner_error, rect_corners, CornerOffsets, Homography};
use crate::parallel;

pub const TARGET_FILE: &str = "target.ppm";
pub const UNALIGNED_FILE: &str = "unaligned.ppm";
pub const GT_FILE: &str = "gt.txt";

/// Largest corner disagreement tolerated between the stored homography and
/// the one implied by the stored offsets.
const GT_TOLERANCE: f64 = 1e-8;

const H_FIELDS: [&str; 9] = [
    "h11", "h12", "h13", "h21", "h22", "h23", "h31", "h32", "h33",
];
const OFFSET_FIELDS: [&str; 8] = ["dx0", "dy0", "dx1", "dy1", "dx2", "dy2", "dx3", "dy3"];

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("{index:06}"))
}

fn gt_text(s: &SamplePair) -> String {
    let offsets: Vec<String> = s
        .gt_offsets
        .to_vec8()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect();
    format!(
        "{}\n{}\n{} {}\n",
        s.gt_h.to_text(),
        offsets.join(" "),
        s.scale,
        s.seed
    )
}

pub fn write_sample(dir: &Path, s: &SamplePair) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pnm(&dir.join(TARGET_FILE), &s.target)?;
    write_pnm(&dir.join(UNALIGNED_FILE), &s.unaligned)?;
    let gt = dir.join(GT_FILE);
    std::fs::write(&gt, gt_text(s)).map_err(|e| Error::io(&gt, e))
}

/// Writes `pairs` as `root/000000`, `root/000001`, ... starting at `first`.
pub fn write_dataset(root: &Path, pairs: &[SamplePair], first: usize) -> Result<()> {
    parallel::map_indexed(pairs.len(), |i| {
        write_sample(&sample_dir(root, first + i), &pairs[i])
    })
    .into_iter()
    .collect()
}

struct Fields<'a> {
    text: &'a str,
    pos: usize,
    path: &'a Path,
}

impl Fields<'_> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message,
        }
    }

    fn token(&mut self, field: &str) -> Result<&str> {
        let rest = &self.text[self.pos..];
        let skip = rest.len() - rest.trim_start().len();
        self.pos += skip;
        let rest = &self.text[self.pos..];
        let len = rest.find(char::is_whitespace).unwrap_or(rest.len());
        if len == 0 {
            return Err(self.err(format!("missing field {field}")));
        }
        let tok = &self.text[self.pos..self.pos + len];
        Ok(tok)
    }

    fn parse<T: std::str::FromStr>(&mut self, field: &str) -> Result<T> {
        let tok = self.token(field)?.to_string();
        let len = tok.len();
        let v = tok
            .parse()
            .map_err(|_| self.err(format!("field {field}: cannot parse {tok:?}")))?;
        self.pos += len;
        Ok(v)
    }
}

pub fn read_sample(dir: &Path) -> Result<SamplePair> {
    let gt_path = dir.join(GT_FILE);
    let text = std::fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut f = Fields {
        text: &text,
        pos: 0,
        path: &gt_path,
    };
    let mut m = [[0.0; 3]; 3];
    for (i, name) in H_FIELDS.iter().enumerate() {
        m[i / 3][i % 3] = f.parse::<f64>(name)?;
    }
    let mut offsets = [0.0; 8];
    for (i, name) in OFFSET_FIELDS.iter().enumerate() {
        offsets[i] = f.parse::<f64>(name)?;
    }
    let scale = f.parse::<usize>("scale")?;
    let seed = f.parse::<u64>("seed")?;
    if !text[f.pos..].trim().is_empty() {
        return Err(f.err("unexpected trailing content".into()));
    }
    let invariant = |message: String| Error::Invariant {
        path: gt_path.clone(),
        message,
    };
    let gt_h = Homography::new(m).map_err(|e| invariant(e.to_string()))?;

    let target = read_pnm(&dir.join(TARGET_FILE))?;
    let unaligned = read_pnm(&dir.join(UNALIGNED_FILE))?;
    if target.shape() != unaligned.shape() || target.shape()[1] != target.shape()[2] {
        return Err(invariant(format!(
            "image shapes {:?} and {:?} are not equal squares",
            target.shape(),
            unaligned.shape()
        )));
    }
    let p = target.shape()[1];
    let gt_offsets = CornerOffsets::from_vec8(rect_corners(p, p), &offsets);
    let implied = gt_offsets
        .to_homography()
        .map_err(|e| invariant(format!("offsets: {e}")))?;
    let err =
        corner_error(&gt_h, &implied, &gt_offsets.base).map_err(|e| invariant(e.to_string()))?;
    if !(err <= GT_TOLERANCE) {
        return Err(invariant(format!(
            "homography disagrees with corner offsets by {err:e} px"
        )));
    }
    Ok(SamplePair {
        target,
        unaligned,
        gt_offsets,
        gt_h,
        scale,
        seed,
    })
}

/// Reads every sample directory under `root` in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GT_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no samples",
            root.display()
        )));
    }
    parallel::map_indexed(dirs.len(), |i| read_sample(&dirs[i]))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_range, GenConfig};

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("lt-io-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    fn cfg() -> GenConfig {
        GenConfig {
            patch: 32,
            rho: 8.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn write_read_round_trip() {
        let root = tmp("rt");
        let pairs = generate_range(&cfg(), 1, 0, 3).unwrap();
        write_dataset(&root, &pairs, 0).unwrap();
        let back = read_dataset(&root).unwrap();
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.target, b.target);
            assert_eq!(a.unaligned, b.unaligned);
            assert_eq!(a.gt_h, b.gt_h);
            assert_eq!(a.gt_offsets, b.gt_offsets);
            assert_eq!((a.scale, a.seed), (b.scale, b.seed));
        }
        std::fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn truncated_gt_names_missing_field() {
        let root = tmp("trunc");
        let pairs = generate_range(&cfg(), 2, 0, 1).unwrap();
        write_dataset(&root, &pairs, 0).unwrap();
        let gt = sample_dir(&root, 0).join(GT_FILE);
        let text = std::fs::read_to_string(&gt).unwrap();
        let cut: String = text.lines().take(1).collect::<Vec<_>>().join("\n");
        std::fs::write(&gt, &cut).unwrap();
        match read_sample(&sample_dir(&root, 0)) {
            Err(Error::Parse {
                message, offset, ..
            }) => {
                assert!(message.contains("dx0"), "{message}");
                assert_eq!(offset, cut.len());
            }
            other => panic!("{other:?}"),
        }
        std::fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn singular_homography_is_an_invariant_error() {
        let root = tmp("sing");
        let pairs = generate_range(&cfg(), 3, 0, 1).unwrap();
        write_dataset(&root, &pairs, 0).unwrap();
        let gt = sample_dir(&root, 0).join(GT_FILE);
        let text = std::fs::read_to_string(&gt).unwrap();
        let rest: Vec<&str> = text.lines().skip(1).collect();
        std::fs::write(&gt, format!("1 2 3 2 4 6 0 0 1\n{}\n", rest.join("\n"))).unwrap();
        assert!(matches!(
            read_sample(&sample_dir(&root, 0)),
            Err(Error::Invariant { .. })
        ));
        std::fs::remove_dir_all(&root).unwrap();
    }
}
