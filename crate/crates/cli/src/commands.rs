use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anatda::anatomy::Anatomy;
use anatda::datagen::{generate_dataset, load_split, BodyTemplate, DatasetManifest, GenConfig, Sample};
use anatda::eval::{correlation_study, predict, EvalReport};
use anatda::model::{ModelState, PointCloud};
use anatda::skeleton::{derive_bounds, AnatomicalBounds, Pose, SkeletonSpec};
use anatda::trainer::{adapt_sfda, adapt_uda, train_source, EpochLog, TrainConfig};
use anatda::{Error, Result};

use crate::manifest::RunManifest;
use crate::{DeriveBoundsArgs, EvalArgs, GenDataArgs, ModelChoice, Overrides, SfdaArgs, TrainArgs, UdaArgs};

pub fn gen_data(args: &GenDataArgs, threads: usize) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => read_gen_config(path)?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let base = args.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(""));
    let field_err = |field: &str, e: Error| Error::Parse {
        path: args.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        msg: format!("field `{field}`: {e}"),
    };
    let spec = match &cfg.skeleton {
        Some(p) => SkeletonSpec::load(&base.join(p)).map_err(|e| field_err("skeleton", e))?,
        None => SkeletonSpec::default_16(),
    };
    let template = match &cfg.template {
        Some(p) => BodyTemplate::load(&base.join(p), spec).map_err(|e| field_err("template", e))?,
        None if cfg.skeleton.is_some() => {
            return Err(field_err(
                "template",
                Error::InvalidArgument("a custom skeleton needs a matching body template".into()),
            ))
        }
        None => BodyTemplate::default_16(),
    };
    generate_dataset(&cfg, &template, &args.out, threads.max(1))?;
    println!("{}", args.out.join("manifest.toml").display());
    Ok(())
}

fn read_gen_config(path: &Path) -> Result<GenConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn derive_bounds_cmd(args: &DeriveBoundsArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let spec = manifest.spec(&args.data)?;
    let poses: Vec<Pose> = load_split(&args.data, &args.split)?.into_iter().map(|s| s.pose).collect();
    let bounds = derive_bounds(&poses, &spec, args.sym_tol)?.with_length_margin(args.margin)?;
    bounds.save(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn resolve_config(base: TrainConfig, file: Option<&Path>, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::load_over(&base, p)?,
        None => base,
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &o.$field {
                cfg.$field = v.clone();
            })*
        };
    }
    set!(
        epochs,
        seed,
        lr,
        lambda1,
        lambda2,
        ramp_epochs,
        ema_momentum,
        filter_mode,
        penalty,
        mask_mode
    );
    if let Some(p) = o.points {
        cfg.subsample_points = p;
    }
    if let Some(d) = &o.replay_dir {
        cfg.replay_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_spec(root: &Path) -> Result<SkeletonSpec> {
    DatasetManifest::load(root)?.spec(root)
}

fn clouds(samples: &[Sample]) -> Vec<PointCloud> {
    samples.iter().map(|s| s.cloud.clone()).collect()
}

fn check_joints(state: &ModelState, spec: &SkeletonSpec, what: &Path) -> Result<()> {
    if state.arch().joints != spec.num_joints() {
        return Err(Error::Checkpoint(format!(
            "{} predicts {} joints, the dataset skeleton has {}",
            what.display(),
            state.arch().joints,
            spec.num_joints()
        )));
    }
    Ok(())
}

fn load_bounds(path: Option<&Path>, spec: &SkeletonSpec, command: &str) -> Result<(PathBuf, AnatomicalBounds)> {
    let Some(path) = path else {
        return Err(Error::InvalidArgument(format!(
            "{command} needs anatomical bounds: pass --bounds <FILE> (see derive-bounds)"
        )));
    };
    let bounds = AnatomicalBounds::load(path)?;
    Anatomy::new(spec, &bounds)?;
    Ok((path.to_path_buf(), bounds))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Output side of a training command: checkpoint, log and run manifest.
struct Run {
    out: PathBuf,
    log_path: PathBuf,
    manifest_path: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, out: &Path, log: Option<&Path>, cfg: &TrainConfig) -> Result<Self> {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let config = toml::Table::try_from(cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Run {
            out: out.to_path_buf(),
            log_path: log.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".log")),
            manifest_path: with_suffix(out, ".run.toml"),
            manifest: RunManifest::new(command, cfg.seed, config),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.manifest.add_input(role, path, &self.manifest_path)
    }

    /// Writes the manifest, then trains with every epoch line appended to the log.
    fn execute(mut self, train: impl FnOnce(&mut dyn FnMut(&EpochLog)) -> Result<ModelState>) -> Result<()> {
        self.manifest.save(&self.manifest_path)?;
        let mut log_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)
            .map_err(|e| Error::io(&self.log_path, e))?;
        let mut write_err = None;
        let state = train(&mut |line: &EpochLog| {
            eprintln!("{line}");
            if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(Error::io(&self.log_path, e));
        }
        state.save(&self.out)?;
        self.manifest.add_output(&self.out, &self.manifest_path)?;
        self.manifest.add_output(&self.log_path, &self.manifest_path)?;
        self.manifest.finish();
        self.manifest.save(&self.manifest_path)?;
        println!("{}", self.out.display());
        Ok(())
    }
}

fn load_resume(path: Option<&Path>, spec: &SkeletonSpec) -> Result<Option<ModelState>> {
    match path {
        Some(p) => {
            let state = ModelState::load(p)?;
            check_joints(&state, spec, p)?;
            Ok(Some(state))
        }
        None => Ok(None),
    }
}

pub fn train_source_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(TrainConfig::source(), args.config.as_deref(), &args.overrides)?;
    let spec = dataset_spec(&args.data)?;
    let samples = load_split(&args.data, &args.split)?;
    let resume = load_resume(args.resume.as_deref(), &spec)?;
    let mut run = Run::new("train-source", &args.out, args.log.as_deref(), &cfg)?;
    run.input("skeleton", &args.data.join("skeleton.toml"))?;
    run.input(&format!("split:{}", args.split), &args.data.join(&args.split))?;
    if let Some(p) = &args.config {
        run.input("config", p)?;
    }
    if let Some(p) = &args.resume {
        run.input("resume", p)?;
    }
    run.execute(|log| train_source(&samples, &spec, &cfg, resume, log))
}

pub fn adapt_uda_cmd(args: &UdaArgs) -> Result<()> {
    let cfg = resolve_config(TrainConfig::uda(), args.config.as_deref(), &args.overrides)?;
    let spec = dataset_spec(&args.data)?;
    let (bounds_path, bounds) = load_bounds(args.bounds.as_deref(), &spec, "adapt-uda")?;
    let source = load_split(&args.data, &args.source_split)?;
    let target = clouds(&load_split(&args.data, &args.target_split)?);
    let resume = load_resume(args.resume.as_deref(), &spec)?;
    let mut run = Run::new("adapt-uda", &args.out, args.log.as_deref(), &cfg)?;
    run.input("skeleton", &args.data.join("skeleton.toml"))?;
    run.input("bounds", &bounds_path)?;
    run.input(&format!("split:{}", args.source_split), &args.data.join(&args.source_split))?;
    run.input(&format!("split:{}", args.target_split), &args.data.join(&args.target_split))?;
    if let Some(p) = &args.config {
        run.input("config", p)?;
    }
    if let Some(p) = &args.resume {
        run.input("resume", p)?;
    }
    run.execute(|log| adapt_uda(&source, &target, &spec, &bounds, &cfg, resume, log))
}

pub fn adapt_sfda_cmd(args: &SfdaArgs) -> Result<()> {
    let cfg = resolve_config(TrainConfig::sfda(), args.config.as_deref(), &args.overrides)?;
    let spec = dataset_spec(&args.data)?;
    let (bounds_path, bounds) = load_bounds(args.bounds.as_deref(), &spec, "adapt-sfda")?;
    let pretrained = ModelState::load(&args.pretrained)?;
    check_joints(&pretrained, &spec, &args.pretrained)?;
    let target = clouds(&load_split(&args.data, &args.target_split)?);
    let mut run = Run::new("adapt-sfda", &args.out, args.log.as_deref(), &cfg)?;
    run.input("skeleton", &args.data.join("skeleton.toml"))?;
    run.input("bounds", &bounds_path)?;
    run.input("pretrained", &args.pretrained)?;
    run.input(&format!("split:{}", args.target_split), &args.data.join(&args.target_split))?;
    if let Some(p) = &args.config {
        run.input("config", p)?;
    }
    run.execute(|log| adapt_sfda(&pretrained, &target, &spec, &bounds, &cfg, log))
}

fn joint_subset(list: Option<&str>, spec: &SkeletonSpec) -> Result<Vec<usize>> {
    let Some(list) = list else {
        return Ok(Vec::new());
    };
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            spec.joint_index(name)
                .or_else(|| name.parse().ok().filter(|&i: &usize| i < spec.num_joints()))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown joint '{name}'")))
        })
        .collect()
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let spec = manifest.spec(&args.data)?;
    let bounds = match &args.bounds {
        Some(p) => AnatomicalBounds::load(p)?,
        None => manifest.bounds(&args.data)?,
    };
    let state = ModelState::load(&args.checkpoint)?;
    check_joints(&state, &spec, &args.checkpoint)?;
    let params = match args.model {
        ModelChoice::Student => &state.student,
        ModelChoice::Teacher => &state.teacher,
    };
    let subset = joint_subset(args.joints.as_deref(), &spec)?;
    let test = load_split(&args.data, &args.split)?;
    let gt: Vec<Pose> = test.iter().map(|s| s.pose.clone()).collect();
    let pred = predict(params, &clouds(&test), args.points)?;
    let mut report = EvalReport::build(&pred, &gt, &spec, Some(&bounds), &subset)?;
    if let Some(val) = &args.val_split {
        let samples = load_split(&args.data, val)?;
        let vgt: Vec<Pose> = samples.iter().map(|s| s.pose.clone()).collect();
        report.correlation = correlation_study(params, &clouds(&samples), &vgt, &spec, &bounds, args.points)?;
    }
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        fs::write(out, report.to_key_values()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}
