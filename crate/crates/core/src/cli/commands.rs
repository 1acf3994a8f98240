use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    CliError, CurateArgs, EvalArgs, FeatmapArgs, GradcheckArgs, PredictArgs, RunConfig, ScaleInfoArgs, SplitArg,
    SynthArgs, TrainArgs, THREADS_ENV,
};
use crate::error::Error;
use crate::gz2::{
    load_image, read_catalog, select_clean, split_dataset, write_synthetic_set, Combine, Dataset, DatasetManifest,
    DecisionTree, ImageSource, ManifestEntry, PreprocessConfig, RuleSet, Sample, Split, SplitRatio, Target,
    CLASS_NAMES, NUM_CLASSES,
};
use crate::metrics::{confusion, feature_maps, report, rmse, write_submission, FeatureMapConfig};
use crate::nn::{HeadConfig, HeadMode};
use crate::scaling::{build_network, check_constraint, estimate_flops, preset, scale_arch, Network, ScaledArch, ScalingCoefficients};
use crate::suite::gradient_suite;
use crate::tensor::Tensor;
use crate::train::{fit, predict_dataset, Checkpoint, LossKind, TrainConfig};

type CmdResult = Result<(), CliError>;

pub(super) struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set it under [paths])")))
}

/// Worker threads: the configured count (all cores by default), capped by
/// the environment.
fn workers(cfg: &RunConfig) -> Result<usize, CliError> {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = cfg.training.workers.unwrap_or(default).max(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
            Ok(wanted.min(cap))
        }
        Err(_) => Ok(wanted),
    }
}

fn default_preprocess(cfg: &RunConfig, arch: &ScaledArch) -> PreprocessConfig {
    cfg.preprocess.clone().unwrap_or(PreprocessConfig {
        crop: arch.name != "toy",
        target_size: arch.resolution,
        allow_any_size: true,
    })
}

fn print_counts(title: &str, rows: &[(String, [usize; 3])]) {
    println!("{title}");
    println!("{:>5}  {:<24} {:>8} {:>8} {:>8}", "class", "name", "total", "train", "test");
    let mut sum = [0; 3];
    for (c, (name, counts)) in rows.iter().enumerate() {
        println!("{c:>5}  {name:<24} {:>8} {:>8} {:>8}", counts[0], counts[1], counts[2]);
        for k in 0..3 {
            sum[k] += counts[k];
        }
    }
    println!("{:>5}  {:<24} {:>8} {:>8} {:>8}", "", "all", sum[0], sum[1], sum[2]);
}

fn manifest_rows(m: &DatasetManifest) -> Vec<(String, [usize; 3])> {
    m.counts()
        .iter()
        .zip(CLASS_NAMES)
        .map(|(c, name)| (name.to_string(), [c[0] + c[1], c[0], c[1]]))
        .collect()
}

pub(super) fn curate(ctx: &Context, a: CurateArgs) -> CmdResult {
    let catalog = required(a.catalog, &ctx.cfg.paths.catalog, "catalog")?;
    let out = required(a.out_manifest, &ctx.cfg.paths.manifest, "out-manifest")?;
    let tree = DecisionTree::gz2();
    let parsed = read_catalog(&catalog, &tree)?;
    if parsed.rows.is_empty() {
        return Err(Error::Schema(format!("{}: catalog has no rows", catalog.display())).into());
    }
    if !parsed.rejected.is_empty() {
        log::warn!("{} catalog rows rejected; first: {}", parsed.rejected.len(), parsed.rejected[0].reason);
    }
    let rules = match a.rules.or_else(|| ctx.cfg.curation.rules.clone()) {
        Some(path) => RuleSet::load(&path)?,
        None if a.or_mode_class6 || ctx.cfg.curation.class6_any == Some(true) => RuleSet::gz2(Combine::Any),
        None => RuleSet::gz2(Combine::Sum),
    };
    let cur = select_clean(&parsed.rows, &rules)?;
    log::info!(
        "{} of {} rows clean, {} matched several classes",
        cur.samples.len(),
        parsed.rows.len(),
        cur.ambiguous.len()
    );
    let pattern = a
        .image_pattern
        .or_else(|| ctx.cfg.curation.image_pattern.clone())
        .unwrap_or_else(|| "{id}.jpg".into());
    let manifest = split_dataset(&cur.samples, SplitRatio::default(), ctx.seed, |id| pattern.replace("{id}", id))?;
    manifest.save(&out)?;
    print_counts("clean samples", &manifest_rows(&manifest));
    println!("manifest written to {}", out.display());
    Ok(())
}

/// Dataset for one split, failing with the first missing files if any
/// image is absent.
fn manifest_dataset(
    entries: Vec<&ManifestEntry>,
    image_dir: &Path,
    targets: Option<&HashMap<String, Vec<f32>>>,
    preprocess: PreprocessConfig,
) -> Result<Dataset, CliError> {
    let missing: Vec<String> = entries
        .iter()
        .map(|e| image_dir.join(&e.path))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        let first: Vec<&str> = missing.iter().take(5).map(String::as_str).collect();
        return Err(CliError::Usage(format!(
            "{} images missing, first: {}",
            missing.len(),
            first.join(", ")
        )));
    }
    let samples = entries
        .into_iter()
        .map(|e| {
            let target = match targets {
                None => Target::Class(e.label),
                Some(t) => Target::Fractions(
                    t.get(&e.galaxy_id)
                        .cloned()
                        .ok_or_else(|| CliError::Usage(format!("galaxy {} is not in the catalog", e.galaxy_id)))?,
                ),
            };
            Ok(Sample {
                id: e.galaxy_id.clone(),
                image: ImageSource::File(image_dir.join(&e.path)),
                target,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if samples.is_empty() {
        return Err(CliError::Usage("the selected split is empty".into()));
    }
    Ok(Dataset { samples, preprocess })
}

fn catalog_targets(path: &Path) -> Result<HashMap<String, Vec<f32>>, CliError> {
    let parsed = read_catalog(path, &DecisionTree::gz2())?;
    Ok(parsed
        .rows
        .into_iter()
        .map(|r| (r.galaxy_id, r.fractions.iter().map(|&v| v as f32).collect()))
        .collect())
}

fn train_arch(ctx: &Context, variant: &str, mode: HeadMode) -> Result<ScaledArch, CliError> {
    let s = &ctx.cfg.scaling;
    let mut arch = if s.alpha.is_some() || s.beta.is_some() || s.gamma.is_some() || s.phi.is_some() {
        let d = ScalingCoefficients::default();
        let c = ScalingCoefficients {
            alpha: s.alpha.unwrap_or(d.alpha),
            beta: s.beta.unwrap_or(d.beta),
            gamma: s.gamma.unwrap_or(d.gamma),
            phi: s.phi.unwrap_or(d.phi),
        };
        let base = preset(s.base.as_deref().unwrap_or("b0"))?;
        scale_arch(&base, &c)?
    } else {
        preset(variant)?
    };
    let target = HeadConfig::for_mode(mode);
    arch.head = HeadConfig {
        mode,
        outputs: target.outputs,
        ..arch.head
    };
    Ok(arch)
}

fn write_history(path: &Path, history: &[crate::train::EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in history {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(super) fn train(ctx: &Context, a: TrainArgs) -> CmdResult {
    let cfg = &ctx.cfg;
    let manifest_path = required(a.manifest, &cfg.paths.manifest, "manifest")?;
    let image_dir = required(a.image_dir, &cfg.paths.image_dir, "image-dir")?;
    let variant = a
        .variant
        .or_else(|| cfg.preset.clone())
        .ok_or_else(|| CliError::Usage("--variant is required".into()))?;
    super::parse_variant(&variant).map_err(CliError::Usage)?;
    let mode = a.mode.map(HeadMode::from).or(cfg.mode).unwrap_or(HeadMode::Classify);
    let out = a.out.or_else(|| cfg.paths.checkpoint_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));

    let manifest = DatasetManifest::load(&manifest_path)?;
    let targets = match mode {
        HeadMode::Classify => None,
        HeadMode::Regress => {
            let path = required(a.catalog, &cfg.paths.catalog, "catalog")?;
            Some(catalog_targets(&path)?)
        }
    };
    let arch = train_arch(ctx, &variant, mode)?;
    let data = manifest_dataset(
        manifest.split(Split::Train).collect(),
        &image_dir,
        targets.as_ref(),
        default_preprocess(cfg, &arch),
    )?;

    let t = &cfg.training;
    let mut tc = TrainConfig::for_preset(&variant);
    tc.seed = ctx.seed;
    tc.loss = match mode {
        HeadMode::Classify => LossKind::CrossEntropy,
        HeadMode::Regress => LossKind::Rmse,
    };
    tc.epochs = a.epochs.or(t.epochs).unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.or(t.batch_size).or(tc.batch_size);
    tc.learning_rate = a.learning_rate.or(t.learning_rate).unwrap_or(tc.learning_rate);
    tc.validation_fraction = t.validation_fraction.unwrap_or(tc.validation_fraction);
    match t.augment {
        Some(false) => tc.augmentation = None,
        Some(true) => tc.augmentation = Some(cfg.augmentation.clone().unwrap_or_default()),
        None if cfg.augmentation.is_some() => tc.augmentation = cfg.augmentation.clone(),
        None => {}
    }
    if let Some(p) = &t.plateau {
        tc.plateau = p.clone();
    }
    if let Some(e) = &t.early_stop {
        tc.early_stop = e.clone();
    }
    tc.workers = workers(cfg)?;
    tc.prefetch = t.prefetch.unwrap_or(tc.prefetch);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ckpt_path = out.join("best.mnet");
    tc.checkpoint_path = Some(ckpt_path.clone());
    tc.validate()?;

    log::info!(
        "training {} ({}) on {} images for up to {} epochs",
        arch.name,
        variant,
        data.len(),
        tc.epochs
    );
    let mut net = build_network::<f32, _>(&arch, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?;
    let outcome = fit(&mut net, &data, &tc)?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "epochs run {}{}; final train loss {:.5}, val loss {:.5}",
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        last.train_loss,
        last.val_loss
    );
    if let Some(acc) = last.train_accuracy {
        println!("final train accuracy {acc:.4}");
    }
    println!(
        "best epoch {} with val loss {:.5}; checkpoint {}",
        outcome.best.epoch,
        outcome.best.best_val_loss,
        ckpt_path.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, variant: Option<&str>) -> Result<Network<f32>, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(v) = variant {
        let expected = preset(v)?.name;
        if ckpt.arch.name != expected {
            return Err(CliError::Usage(format!(
                "checkpoint holds {} but --variant {v} was requested",
                ckpt.arch.name
            )));
        }
    }
    Ok(ckpt.restore()?.0)
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub(super) fn eval(ctx: &Context, a: EvalArgs) -> CmdResult {
    let cfg = &ctx.cfg;
    let manifest = DatasetManifest::load(&required(a.manifest, &cfg.paths.manifest, "manifest")?)?;
    let image_dir = required(a.image_dir, &cfg.paths.image_dir, "image-dir")?;
    let net = load_checkpoint(&a.checkpoint, a.variant.as_deref())?;
    let mode = net.arch.head.mode;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let targets = match mode {
        HeadMode::Classify => None,
        HeadMode::Regress => Some(catalog_targets(&required(a.catalog, &cfg.paths.catalog, "catalog")?)?),
    };
    let data = manifest_dataset(
        manifest.split(split).collect(),
        &image_dir,
        targets.as_ref(),
        default_preprocess(cfg, &net.arch),
    )?;
    let batch = cfg.training.batch_size.unwrap_or(32);
    let pred = predict_dataset(&net, &data, batch, workers(cfg)?)?;
    let width = pred.shape()[1];
    let structured = match mode {
        HeadMode::Classify => {
            let preds: Vec<usize> = pred.data().chunks(width).map(argmax).collect();
            let labels: Vec<usize> = data.labels().iter().map(|l| l.map_or(0, usize::from)).collect();
            let cm = confusion(&preds, &labels, width)?;
            let r = report(&cm)?;
            println!("{r}\n\nconfusion matrix (rows true, columns predicted)\n{cm}");
            r.to_toml()
        }
        HeadMode::Regress => {
            let t: Vec<f32> = data
                .samples
                .iter()
                .flat_map(|s| match &s.target {
                    Target::Fractions(f) => f.clone(),
                    Target::Class(_) => unreachable!("regression targets are fractions"),
                })
                .collect();
            let target = Tensor::new(vec![data.len(), width], t)?;
            let r = rmse(&pred, &target)?;
            println!("{r} over {} galaxies", data.len());
            toml::to_string(&r).expect("report serializes")
        }
    };
    if let Some(path) = a.report_out {
        std::fs::write(&path, structured).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no png or jpeg images in {}", dir.display())));
    }
    Ok(files)
}

pub(super) fn predict(ctx: &Context, a: PredictArgs) -> CmdResult {
    let cfg = &ctx.cfg;
    let image_dir = required(a.image_dir, &cfg.paths.image_dir, "image-dir")?;
    let net = load_checkpoint(&a.checkpoint, a.variant.as_deref())?;
    let files = list_images(&image_dir)?;
    let ids: Vec<String> = files
        .iter()
        .map(|p| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()))
        .collect();
    let data = Dataset {
        samples: files
            .iter()
            .zip(&ids)
            .map(|(p, id)| Sample {
                id: id.clone(),
                image: ImageSource::File(p.clone()),
                target: Target::Class(0),
            })
            .collect(),
        preprocess: default_preprocess(cfg, &net.arch),
    };
    let pred = predict_dataset(&net, &data, cfg.training.batch_size.unwrap_or(32), workers(cfg)?)?;
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    match net.arch.head.mode {
        HeadMode::Regress => write_submission(std::io::BufWriter::new(file), &ids, &pred)?,
        HeadMode::Classify => {
            let mut w = csv::Writer::from_writer(file);
            let width = pred.shape()[1];
            let mut header = vec!["GalaxyID".to_string()];
            header.extend((0..width).map(|c| format!("p{c}")));
            header.push("predicted".into());
            w.write_record(&header).map_err(Error::from)?;
            for (id, row) in ids.iter().zip(pred.data().chunks(width)) {
                let mut rec = vec![id.clone()];
                rec.extend(row.iter().map(|v| format!("{v:.6}")));
                rec.push(argmax(row).to_string());
                w.write_record(&rec).map_err(Error::from)?;
            }
            w.flush().map_err(|e| Error::io(&a.out, e))?;
        }
    }
    println!("{} predictions written to {}", ids.len(), a.out.display());
    Ok(())
}

pub(super) fn scale_info(ctx: &Context, a: ScaleInfoArgs) -> CmdResult {
    let s = &ctx.cfg.scaling;
    let d = ScalingCoefficients::default();
    let c = ScalingCoefficients {
        alpha: a.alpha.or(s.alpha).unwrap_or(d.alpha),
        beta: a.beta.or(s.beta).unwrap_or(d.beta),
        gamma: a.gamma.or(s.gamma).unwrap_or(d.gamma),
        phi: a.phi.or(s.phi).unwrap_or(d.phi),
    };
    let deviation = check_constraint(&c)?;
    let base = preset(a.base.as_deref().or(s.base.as_deref()).unwrap_or("b0"))?;
    let arch = scale_arch(&base, &c)?;
    let (dm, wm, rm) = c.multipliers();
    println!(
        "alpha {} beta {} gamma {} phi {}",
        c.alpha, c.beta, c.gamma, c.phi
    );
    println!("alpha*beta^2*gamma^2 = {:.4} (deviation from 2: {deviation:+.4})", c.flops_base());
    println!("multipliers: depth {dm:.4} width {wm:.4} resolution {rm:.4}");
    println!("resolution {}", arch.resolution);
    println!("{:<8} {:<9} {:>6} {:>6} {:>8} {:>6} {:>6}", "group", "kind", "kernel", "stride", "channels", "layers", "expand");
    for (name, st) in arch.groups() {
        println!(
            "{name:<8} {:<9} {:>6} {:>6} {:>8} {:>6} {:>6}",
            format!("{:?}", st.kind).to_lowercase(),
            st.kernel,
            st.stride,
            st.channels,
            st.layers,
            st.expansion
        );
    }
    let (f0, f1) = (estimate_flops(&base), estimate_flops(&arch));
    println!(
        "FLOPS {:.4e} (baseline {:.4e}, ratio {:.4}, expected {:.4})",
        f1 as f64,
        f0 as f64,
        f1 as f64 / f0 as f64,
        c.flops_base().powf(c.phi)
    );
    Ok(())
}

pub(super) fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.eps > 0.0) || !(a.tolerance > 0.0) || a.seeds == 0 {
        return Err(CliError::Usage("--eps, --tolerance and --seeds must be positive".into()));
    }
    let r = gradient_suite(a.seeds, a.eps, a.tolerance)?;
    println!("{r}");
    if r.passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("max relative error {:.3e} >= {:e}", r.worst(), a.tolerance)))
    }
}

pub(super) fn featmap(ctx: &Context, a: FeatmapArgs) -> CmdResult {
    let net = load_checkpoint(&a.checkpoint, None)?;
    let names = net.layer_names();
    let layers = if a.layers.is_empty() {
        let k = names.len().min(4);
        (0..k).map(|i| names[(i * (names.len() - 1)) / (k - 1).max(1)].clone()).collect()
    } else {
        a.layers
    };
    let img = default_preprocess(&ctx.cfg, &net.arch).apply(&load_image(&a.image)?)?;
    let cfg = FeatureMapConfig {
        channels: a.channels,
        columns: a.columns,
        seed: ctx.seed,
    };
    let grids = feature_maps(&net, &img, &layers, &cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for g in &grids {
        let path = a.out.join(format!("featmap-{}.png", g.layer));
        g.save_png(&path)?;
        println!(
            "{}: channels {:?} as {}x{} tiles of {}x{} -> {}",
            g.layer,
            g.channels,
            g.rows,
            g.columns,
            g.tile_height,
            g.tile_width,
            path.display()
        );
    }
    Ok(())
}

pub(super) fn synth(ctx: &Context, a: SynthArgs) -> CmdResult {
    if a.count < 2 * NUM_CLASSES || a.size < 8 {
        return Err(CliError::Usage(format!(
            "need --count >= {} and --size >= 8",
            2 * NUM_CLASSES
        )));
    }
    let samples = write_synthetic_set(&a.out, a.count, a.size, ctx.seed)?;
    let manifest = split_dataset(&samples, SplitRatio::default(), ctx.seed, |id| format!("{id}.png"))?;
    let path = a.out.join("manifest.csv");
    manifest.save(&path)?;
    print_counts("synthetic samples", &manifest_rows(&manifest));
    println!("images and manifest written to {}", a.out.display());
    Ok(())
}
