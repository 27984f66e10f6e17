use std::path::{Path, PathBuf};
use std::time::Instant;

use localtrans::bench::{pyramid_cases, run_bench, run_case, BenchCase, BenchRow};
use localtrans::data::{
    generate_range, read_dataset, write_dataset, GenConfig, SamplePair, Source,
};
use localtrans::homography::imageio::{read_rgb, write_pnm};
use localtrans::homography::stitch::{grid_stitch, LocalTile, StitchOptions};
use localtrans::homography::warp;
use localtrans::lak::{AttentionMode, DEFAULT_GLOBAL_BUDGET};
use localtrans::network::{
    evaluate, load_model, save_model, AttentionNorm, EvalReport, Model, ModelConfig, Trainer,
};
use localtrans::{parallel, Tensor};

use crate::report::{Report, Table};
use crate::settings::Settings;
use crate::{
    AlignArgs, BenchArgs, Cli, Command, EvalArgs, Failure, GenDataArgs, StitchArgs, TrainArgs,
};

pub const LATEST_DIR: &str = "latest";
pub const BEST_DIR: &str = "best";
pub const HOMOGRAPHY_FILE: &str = "homography.txt";
pub const WARPED_FILE: &str = "warped.ppm";
pub const MOSAIC_FILE: &str = "mosaic.ppm";

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = s.get("seed", cli.seed, 0)?;
    if let Some(t) = s.opt("threads", cli.threads)? {
        if t == 0 {
            return Err(Failure::Config("threads must be positive".into()));
        }
        parallel::init_threads(t);
    }
    parallel::set_deterministic(s.flag("deterministic", cli.deterministic)?);
    match cli.command {
        Command::GenData(a) => gen_data(&mut s, seed, a),
        Command::Train(a) => train(&mut s, seed, a),
        Command::Eval(a) => eval(&mut s, a),
        Command::Align(a) => align(&mut s, a),
        Command::Stitch(a) => stitch(&mut s, a),
        Command::Bench(a) => bench(&mut s, seed, a),
    }
}

fn required(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    s.opt(key, flag)?
        .ok_or_else(|| Failure::Config(format!("missing --{key}")))
}

fn gen_data(s: &mut Settings, seed: u64, a: GenDataArgs) -> Outcome {
    let out = required(s, "out", a.out)?;
    let n = s.get("n", a.n, 100)?;
    let first = s.get("first", a.first, 0)?;
    let mut cfg = GenConfig::default();
    cfg.patch = s.get("patch", a.patch, cfg.patch)?;
    cfg.rho = s.get("rho", a.rho, cfg.rho)?;
    cfg.margin = s.get("margin", a.margin, cfg.margin)?;
    cfg.scale = s.get("cross_res", a.cross_res, cfg.scale)?;
    if s.flag("no_augment", a.no_augment)? {
        cfg.augment = None;
    }
    if let Some(dir) = s.opt("source", a.source)? {
        cfg.source = Source::Directory(dir);
    }
    s.finish()?;
    let start = Instant::now();
    let pairs = generate_range(&cfg, seed, first as u64, n)?;
    write_dataset(&out, &pairs, first)?;
    let mut r = Report::default();
    r.put("samples", n);
    r.put("seed", seed);
    r.put("first", first);
    r.put("patch", cfg.patch);
    r.put("rho", cfg.rho);
    r.put("cross_res", cfg.scale);
    r.put("out", out.display());
    r.emit();
    eprintln!(
        "wrote {n} pairs from seed {seed} in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_pairs(dir: &Path) -> Result<Vec<SamplePair>, Failure> {
    let pairs = read_dataset(dir)?;
    if pairs.is_empty() {
        return Err(Failure::Data(format!("{}: no samples", dir.display())));
    }
    Ok(pairs)
}

fn check_sizes(model: &Model, pairs: &[SamplePair]) -> Outcome {
    let (h, w) = (model.cfg.height, model.cfg.width);
    for (i, p) in pairs.iter().enumerate() {
        for t in [&p.target, &p.unaligned] {
            let (_, th, tw) = t.chw()?;
            if (th, tw) != (h, w) {
                return Err(Failure::Data(format!(
                    "sample {i} is {tw}x{th}, model expects {w}x{h}"
                )));
            }
        }
    }
    Ok(())
}

fn eval_keys(r: &mut Report, prefix: &str, e: &EvalReport) {
    r.put(format!("{prefix}samples"), e.samples.len());
    r.put(format!("{prefix}mean_corner_error"), e.mean_corner_error);
    r.put(
        format!("{prefix}median_corner_error"),
        e.median_corner_error,
    );
    r.put(
        format!("{prefix}identity_corner_error"),
        e.mean_identity_error,
    );
    r.put(format!("{prefix}mean_psnr"), e.mean_psnr);
    r.put(format!("{prefix}mean_ssim"), e.mean_ssim);
}

fn train(s: &mut Settings, seed: u64, a: TrainArgs) -> Outcome {
    let data = required(s, "data", a.data)?;
    let out = required(s, "out", a.out)?;
    let val_dir = s.opt("val", a.val)?;
    let steps = s.get("steps", a.steps, 2000)?;
    let overfit = s.opt("overfit", a.overfit)?;
    let resume = s.flag("resume", a.resume)?;
    let lr = s.get("lr", a.lr, 1e-4)?;
    let batch = s.get("batch", a.batch, 8)?;
    let levels = s.get("levels", a.levels, 3)?;
    let channels = s.get("channels", a.channels, 32)?;
    let norm: AttentionNorm = s
        .get("attention_norm", a.attention_norm, "raw".to_string())?
        .parse()
        .map_err(|e: localtrans::Error| Failure::Config(e.to_string()))?;
    let offset_scale = s.get("offset_scale", a.offset_scale, 16.0)?;
    let epoch_steps = s.opt("epoch_steps", a.epoch_steps)?;
    s.finish()?;
    if batch == 0 || lr <= 0.0 || !lr.is_finite() {
        return Err(Failure::Config("batch and lr must be positive".into()));
    }

    let mut pairs = load_pairs(&data)?;
    if let Some(n) = overfit {
        if n == 0 || n > pairs.len() {
            return Err(Failure::Config(format!(
                "--overfit {n} with {} samples available",
                pairs.len()
            )));
        }
        pairs.truncate(n);
    }
    let val = match val_dir {
        Some(d) => load_pairs(&d)?,
        None => pairs.iter().take(32).cloned().collect(),
    };
    let mut trainer = if resume {
        Trainer::resume(&out.join(LATEST_DIR), lr, batch, seed)?
    } else {
        let (_, h, w) = pairs[0].target.chw()?;
        let mut cfg = ModelConfig::new(levels, channels, h, w);
        cfg.attention_norm = norm;
        cfg.offset_scale = offset_scale;
        cfg.seed = seed;
        Trainer::new(Model::new(cfg)?, lr, batch, seed)
    };
    check_sizes(&trainer.model, &pairs)?;
    check_sizes(&trainer.model, &val)?;

    let epoch_len = epoch_steps
        .unwrap_or_else(|| pairs.len().div_ceil(batch) as u64)
        .max(1);
    let mut r = Report::default();
    let mut table = Table::new(&["epoch", "step", "train_loss", "val_corner_px", "secs"]);
    let initial = evaluate(&trainer.model, &val, batch)?;
    r.put("start_step", trainer.adam.step);
    r.put("initial_corner_error", initial.mean_corner_error);
    r.put("identity_corner_error", initial.mean_identity_error);
    let mut best = initial.mean_corner_error;
    save_model(&trainer.model, &out.join(BEST_DIR))?;
    let start = Instant::now();
    let mut epoch = 0;
    while trainer.adam.step < steps {
        epoch += 1;
        let mut total = 0.0;
        let mut count = 0;
        while count < epoch_len && trainer.adam.step < steps {
            let idx = trainer.next_batch(pairs.len());
            let b: Vec<&SamplePair> = idx.iter().map(|&i| &pairs[i]).collect();
            total += trainer.step(&b)?.loss;
            count += 1;
        }
        let loss = total / count as f64;
        let v = evaluate(&trainer.model, &val, batch)?;
        trainer.save(&out.join(LATEST_DIR))?;
        if v.mean_corner_error < best {
            best = v.mean_corner_error;
            save_model(&trainer.model, &out.join(BEST_DIR))?;
        }
        r.put(format!("epoch.{epoch}.step"), trainer.adam.step);
        r.put(format!("epoch.{epoch}.loss"), loss);
        r.put(
            format!("epoch.{epoch}.val_corner_error"),
            v.mean_corner_error,
        );
        table.row(vec![
            epoch.to_string(),
            trainer.adam.step.to_string(),
            format!("{loss:.4}"),
            format!("{:.3}", v.mean_corner_error),
            format!("{:.1}", start.elapsed().as_secs_f64()),
        ]);
        eprintln!("{}", table.render().lines().last().unwrap_or_default());
    }
    if epoch == 0 {
        trainer.save(&out.join(LATEST_DIR))?;
    }
    let last = evaluate(&trainer.model, &pairs, batch)?;
    r.put("steps", trainer.adam.step);
    r.put("epochs", epoch);
    r.put("train_corner_error", last.mean_corner_error);
    r.put("best_val_corner_error", best);
    r.put("checkpoint", out.join(BEST_DIR).display());
    r.emit();
    if epoch > 0 {
        table.print();
    }
    Ok(())
}

fn eval(s: &mut Settings, a: EvalArgs) -> Outcome {
    let ckpt = required(s, "checkpoint", a.checkpoint)?;
    let data = required(s, "data", a.data)?;
    let batch = s.get("batch", a.batch, 8)?;
    s.finish()?;
    let model = load_model(&ckpt)?;
    let pairs = load_pairs(&data)?;
    check_sizes(&model, &pairs)?;
    let e = evaluate(&model, &pairs, batch)?;
    let mut r = Report::default();
    eval_keys(&mut r, "", &e);
    r.emit();
    let mut t = Table::new(&[
        "samples",
        "mean_px",
        "median_px",
        "identity_px",
        "psnr_db",
        "ssim",
    ]);
    t.row(vec![
        e.samples.len().to_string(),
        format!("{:.3}", e.mean_corner_error),
        format!("{:.3}", e.median_corner_error),
        format!("{:.3}", e.mean_identity_error),
        format!("{:.2}", e.mean_psnr),
        format!("{:.4}", e.mean_ssim),
    ]);
    t.print();
    Ok(())
}

/// Red from the target, green and blue from the aligned image.
pub fn channel_mosaic(target: &Tensor, warped: &Tensor) -> Result<Tensor, Failure> {
    let (c, h, w) = target.chw()?;
    if warped.chw()? != (c, h, w) || c != 3 {
        return Err(Failure::Data(
            "mosaic needs two RGB images of equal size".into(),
        ));
    }
    let mut out = warped.clone();
    out.data_mut()[..h * w].copy_from_slice(&target.data()[..h * w]);
    Ok(out)
}

fn align(s: &mut Settings, a: AlignArgs) -> Outcome {
    let ckpt = required(s, "checkpoint", a.checkpoint)?;
    let tp = required(s, "target", a.target)?;
    let up = required(s, "unaligned", a.unaligned)?;
    let out = required(s, "out", a.out)?;
    s.finish()?;
    let model = load_model(&ckpt)?;
    let target = read_rgb(&tp)?;
    let unaligned = read_rgb(&up)?;
    let (_, h, w) = target.chw()?;
    let hom = model.estimate(&target, &unaligned)?;
    let warped = if hom.is_identity() && unaligned.chw()? == target.chw()? {
        unaligned.clone()
    } else {
        warp(&unaligned, &hom, h, w)?
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let hp = out.join(HOMOGRAPHY_FILE);
    std::fs::write(&hp, hom.to_text())
        .map_err(|e| Failure::Data(format!("{}: {e}", hp.display())))?;
    write_pnm(&out.join(WARPED_FILE), &warped)?;
    write_pnm(&out.join(MOSAIC_FILE), &channel_mosaic(&target, &warped)?)?;
    let mut r = Report::default();
    for (i, v) in hom.matrix().iter().flatten().enumerate() {
        r.put(format!("h{}{}", i / 3 + 1, i % 3 + 1), v);
    }
    r.put("out", out.display());
    r.emit();
    Ok(())
}

fn tile_name(row: usize, col: usize) -> String {
    format!("tile_{row}_{col}.ppm")
}

fn stitch(s: &mut Settings, a: StitchArgs) -> Outcome {
    let ckpt = required(s, "checkpoint", a.checkpoint)?;
    let gp = required(s, "global", a.global)?;
    let locals_dir = required(s, "locals", a.locals)?;
    let rows = s.get("rows", a.rows, 3)?;
    let cols = s.get("cols", a.cols, 3)?;
    let scale = s.get("scale", a.scale, 4)?;
    let out = required(s, "out", a.out)?;
    s.finish()?;
    let model = load_model(&ckpt)?;
    let global = read_rgb(&gp)?;
    let mut locals = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            locals.push(LocalTile {
                image: read_rgb(&locals_dir.join(tile_name(row, col)))?,
                row,
                col,
            });
        }
    }
    let (mosaic, layout) = grid_stitch(
        &global,
        &locals,
        StitchOptions { rows, cols, scale },
        |_, t, l| model.estimate(t, l),
    )?;
    write_pnm(&out, &mosaic)?;
    let mut r = Report::default();
    r.put("cells", rows * cols);
    r.put(
        "fallback_cells",
        layout.fallback.iter().filter(|&&f| f).count(),
    );
    r.put("out", out.display());
    r.emit();
    Ok(())
}

fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>, Failure> {
    text.split(',')
        .map(|part| {
            let (h, w) = part.trim().split_once('x').unwrap_or((part, part));
            match (h.trim().parse(), w.trim().parse()) {
                (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
                _ => Err(Failure::Config(format!("bad size `{part}`, expected HxW"))),
            }
        })
        .collect()
}

fn parse_modes(text: &str) -> Result<Vec<AttentionMode>, Failure> {
    text.split(',')
        .map(|m| match m.trim() {
            "local" => Ok(AttentionMode::Local),
            "global" => Ok(AttentionMode::Global),
            other => Err(Failure::Config(format!("unknown mode `{other}`"))),
        })
        .collect()
}

fn mode_name(m: AttentionMode) -> &'static str {
    match m {
        AttentionMode::Local => "local",
        AttentionMode::Global => "global",
    }
}

fn bench(s: &mut Settings, seed: u64, a: BenchArgs) -> Outcome {
    let sizes = s.opt("sizes", a.sizes)?;
    let channels = s.get("channels", a.channels, 32)?;
    let radius = s.get("radius", a.radius, 2)?;
    let levels = s.get("levels", a.levels, 3)?;
    let modes = parse_modes(&s.get("modes", a.modes, "local,global".to_string())?)?;
    let budget = s.get("budget", a.budget, DEFAULT_GLOBAL_BUDGET)?;
    s.finish()?;
    let cases: Vec<BenchCase> = match sizes {
        Some(text) => parse_sizes(&text)?
            .into_iter()
            .map(|(h, w)| BenchCase {
                h,
                w,
                c: channels,
                r: radius,
            })
            .collect(),
        None => pyramid_cases(128, 128, channels, levels),
    };
    if cases
        .iter()
        .any(|c| c.h == 0 || c.w == 0 || c.c == 0 || c.r == 0)
    {
        return Err(Failure::Config(
            "sizes, channels and radius must be positive".into(),
        ));
    }
    let rows: Vec<BenchRow> =
        if modes.contains(&AttentionMode::Local) && modes.contains(&AttentionMode::Global) {
            run_bench(&cases, budget, seed)?
        } else {
            let mut rows = Vec::new();
            for (i, &c) in cases.iter().enumerate() {
                for &m in &modes {
                    rows.push(run_case(c, m, budget, seed + i as u64)?);
                }
            }
            rows
        };
    let mut r = Report::default();
    let mut t = Table::new(&[
        "mode",
        "H",
        "W",
        "C",
        "r",
        "MACs",
        "map_elements",
        "wall_ms",
        "peak_bytes",
    ]);
    for (i, row) in rows.iter().enumerate() {
        let p = format!("row.{i}.");
        let BenchCase { h, w, c, r: rad } = row.case;
        r.put(format!("{p}mode"), mode_name(row.mode));
        r.put(format!("{p}h"), h);
        r.put(format!("{p}w"), w);
        r.put(format!("{p}c"), c);
        r.put(format!("{p}r"), rad);
        r.put(format!("{p}macs"), row.measured.multiply_accumulate_count);
        r.put(
            format!("{p}map_elements"),
            row.measured.attention_map_elements,
        );
        r.put(
            format!("{p}predicted_macs"),
            row.predicted.multiply_accumulate_count,
        );
        r.put(
            format!("{p}predicted_map_elements"),
            row.predicted.attention_map_elements,
        );
        r.put(format!("{p}wall_ms"), row.wall_ms);
        r.put(format!("{p}peak_bytes"), row.peak_bytes);
        if let Some(b) = row.refused {
            r.put(format!("{p}refused_budget"), b);
            eprintln!("global {h}x{w} refused: map exceeds the budget of {b} elements");
        }
        t.row(vec![
            mode_name(row.mode).into(),
            h.to_string(),
            w.to_string(),
            c.to_string(),
            rad.to_string(),
            row.measured.multiply_accumulate_count.to_string(),
            row.measured.attention_map_elements.to_string(),
            format!("{:.2}", row.wall_ms),
            row.peak_bytes.to_string(),
        ]);
    }
    r.put("rows", rows.len());
    r.emit();
    t.print();
    Ok(())
}
