use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rebound_core::config::{sim_to_kv, KeyValues, Settings};
use rebound_core::field::{generate_scene_bounces, online_update, train_joint, Regime, SceneSpec, SurfaceField};
use rebound_core::geom::{SurfaceParams, UnitVec3, Vec3};
use rebound_core::io::{read_dataset, write_dataset, Dataset, Format};
use rebound_core::manifest::Manifest;
use rebound_core::metrics::{bin_report, eval_cor, eval_normals, forward_distances, median, MetricsReport};
use rebound_core::pim::{
    build_decoder_db, incoming_axis, invert_params, predict_post, pretrain_pim_with, DecoderDb, PimModel, Which,
};
use rebound_core::sim::generate_dataset;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "rebound", version, about = "Bounce simulation, surface parameter learning and trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root of all randomness in the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate bounces into a dataset file.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Sample bounces on this scene instead of free planes.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        format: Option<String>,
    },
    /// Write a two-region scene description.
    MakeScene {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 0.2)]
        cor_left: f64,
        #[arg(long, default_value_t = 0.8)]
        cor_right: f64,
        /// Tilt of the effective normals from vertical, degrees.
        #[arg(long, default_value_t = 35.0)]
        tilt: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain encoders, core engine and reconstruction net.
    PretrainPim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate and encode a decoder database for a model.
    BuildDb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a surface field on scene bounces.
    TrainField {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Where to save the predictor when it is trained too.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Incremental field estimation over a bounce stream; one snapshot per bounce.
    Online {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output directory for `snapshot_NNNN.bfd` files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict post-bounce trajectories for every sample of a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, value_enum, default_value_t = ParamSource::True)]
        params: ParamSource,
        /// Field and scene, for `--params field`.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search surface parameters from pre and post trajectories.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        /// Defaults to the `--pre` dataset.
        #[arg(long)]
        post: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Parameter estimates (output of `invert`), for normal/COR scores and substitution.
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long, value_enum)]
        subst_normal: Option<Source>,
        #[arg(long, value_enum)]
        subst_cor: Option<Source>,
        /// Model and database, needed to re-predict under substitution.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Frozen,
    All,
    CoreOnly,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Frozen => Regime::Frozen,
            RegimeArg::All => Regime::All,
            RegimeArg::CoreOnly => Regime::CoreOnly,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ParamSource {
    True,
    Field,
    Estimated,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    True,
    Estimated,
}

/// One line of `invert` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Estimate {
    index: usize,
    cor: f64,
    normal: [f64; 3],
    distance: f64,
}

impl Estimate {
    fn params(&self) -> Result<SurfaceParams> {
        Ok(SurfaceParams::new(self.cor, UnitVec3::new(Vec3::from_array(self.normal))?)?)
    }
}

struct Run {
    settings: Settings,
    manifest: Manifest,
}

impl Run {
    /// Settings from the config file and overrides, with `--seed` fed into
    /// every seeded component.
    fn start(command: &str, common: &Common) -> Result<Self> {
        let mut kv = match &common.config {
            Some(p) => KeyValues::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => KeyValues::default(),
        };
        for s in &common.set {
            let Some((k, v)) = s.split_once('=') else { bail!("--set expects key=value, got {s:?}") };
            kv.set(k.trim(), v.trim());
        }
        let mut settings = Settings::from_kv(&kv)?;
        settings.pim.seed = common.seed;
        settings.pretrain.seed = common.seed;
        settings.joint.seed = common.seed;
        let text = settings.to_kv().to_text();
        let args = std::env::args().skip(1).collect();
        let mut manifest = Manifest::new(command, args, common.seed, settings.to_kv().entries().clone(), &text);
        if let Some(p) = &common.config {
            manifest.add_input(p)?;
        }
        Ok(Self { settings, manifest })
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        self.manifest.add_input(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(())
    }

    fn finish(mut self, outputs: &[&Path], manifest_path: &Path) -> Result<()> {
        for o in outputs {
            self.manifest.add_output(o)?;
        }
        self.manifest.write(manifest_path)?;
        Ok(())
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn read_model(p: &Path) -> Result<PimModel> {
    PimModel::read(&mut BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
        .with_context(|| format!("reading model {}", p.display()))
}

fn write_model(model: &PimModel, p: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(p)?);
    model.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_db(p: &Path) -> Result<DecoderDb> {
    DecoderDb::read(&mut BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
        .with_context(|| format!("reading database {}", p.display()))
}

fn read_scene(p: &Path) -> Result<SceneSpec> {
    let s: SceneSpec = serde_json::from_str(&std::fs::read_to_string(p)?)?;
    s.validate()?;
    Ok(s)
}

fn read_field(p: &Path) -> Result<SurfaceField> {
    Ok(SurfaceField::read(&mut BufReader::new(File::open(p)?))?)
}

fn write_field(f: &SurfaceField, p: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(p)?);
    f.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_estimates(p: &Path) -> Result<Vec<Estimate>> {
    std::fs::read_to_string(p)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn sim_kv(settings: &Settings) -> KeyValues {
    let mut kv = KeyValues::default();
    sim_to_kv(&settings.sim, &mut kv);
    kv
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, count, noise_sigma, scene, out, format } => {
            let mut run = Run::start("gen", &common)?;
            if let Some(s) = noise_sigma {
                run.settings.sim.noise_sigma = s;
            }
            let samples = match &scene {
                Some(p) => {
                    run.input(p)?;
                    generate_scene_bounces(&read_scene(p)?, count, &run.settings.sim, common.seed)?
                }
                None => generate_dataset(count, &run.settings.sim, common.seed)?,
            };
            let format = match format {
                Some(f) => f.parse()?,
                None => Format::from_path(&out),
            };
            write_dataset(&out, format, &Dataset::new(common.seed, sim_kv(&run.settings), samples))?;
            run.finish(&[&out], &manifest_path(&out))
        }
        Command::MakeScene { common, height, width, cor_left, cor_right, tilt, out } => {
            let run = Run::start("make-scene", &common)?;
            let scene = SceneSpec::two_region(common.seed, height, width, cor_left, cor_right, tilt)?;
            std::fs::write(&out, serde_json::to_string_pretty(&scene)? + "\n")?;
            run.finish(&[&out], &manifest_path(&out))
        }
        Command::PretrainPim { common, data, out } => {
            let mut run = Run::start("pretrain-pim", &common)?;
            run.input(&data)?;
            let dataset = read_dataset(&data)?;
            let mut model = PimModel::new(run.settings.pim.clone())?;
            let total = run.settings.pretrain.iterations;
            let mut window = 0.0;
            pretrain_pim_with(&mut model, &dataset.samples, &run.settings.pretrain, |i, loss| {
                window += loss;
                if (i + 1) % 100 == 0 || i + 1 == total {
                    let n = if (i + 1) % 100 == 0 { 100 } else { (i + 1) % 100 };
                    eprintln!("iter {:>6}/{total}  loss {:.5}", i + 1, window / n as f64);
                    window = 0.0;
                }
            })?;
            write_model(&model, &out)?;
            run.finish(&[&out], &manifest_path(&out))
        }
        Command::BuildDb { common, model, count, out } => {
            let mut run = Run::start("build-db", &common)?;
            run.input(&model)?;
            let m = read_model(&model)?;
            let count = count.unwrap_or(run.settings.db_count);
            let db = build_decoder_db(&m, &run.settings.sim, count, common.seed)?;
            let mut w = BufWriter::new(File::create(&out)?);
            db.write(&mut w)?;
            w.flush()?;
            drop(w);
            run.finish(&[&out], &manifest_path(&out))
        }
        Command::TrainField { common, scene, data, model, regime, lambda, out, model_out } => {
            let mut run = Run::start("train-field", &common)?;
            for p in [&scene, &data, &model] {
                run.input(p)?;
            }
            if let Some(r) = regime {
                run.settings.joint.regime = r.into();
            }
            if let Some(l) = lambda {
                if !(l >= 0.0) {
                    bail!("--lambda must be non-negative");
                }
                run.settings.joint.lambda = l;
            }
            let scene = read_scene(&scene)?;
            let mut m = read_model(&model)?;
            let bounces = read_dataset(&data)?.samples;
            let mut field = SurfaceField::for_scene(&scene);
            let losses = train_joint(&mut field, &mut m, &bounces, &scene, &run.settings.joint)?;
            if let Some(l) = losses.last() {
                eprintln!("final loss {l:.6}");
            }
            write_field(&field, &out)?;
            let mut outputs = vec![out.as_path()];
            if let Some(p) = &model_out {
                write_model(&m, p)?;
                outputs.push(p);
            } else if run.settings.joint.regime != Regime::Frozen {
                eprintln!("note: predictor was trained but --model-out was not given");
            }
            run.finish(&outputs, &manifest_path(&out))
        }
        Command::Online { common, scene, stream, model, out } => {
            let mut run = Run::start("online", &common)?;
            for p in [&scene, &stream, &model] {
                run.input(p)?;
            }
            let scene = read_scene(&scene)?;
            let m = read_model(&model)?;
            let bounces = read_dataset(&stream)?.samples;
            let mut field = SurfaceField::for_scene(&scene);
            let snaps = online_update(&mut field, &m, &bounces, &scene, &run.settings.online)?;
            std::fs::create_dir_all(&out)?;
            let mut paths = Vec::new();
            for (k, s) in snaps.iter().enumerate() {
                let p = out.join(format!("snapshot_{:04}.bfd", k + 1));
                write_field(s, &p)?;
                paths.push(p);
            }
            let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
            run.finish(&refs, &out.join("manifest.json"))
        }
        Command::Predict { common, model, db, sample, params, field, scene, out } => {
            let mut run = Run::start("predict", &common)?;
            for p in [&model, &db, &sample] {
                run.input(p)?;
            }
            let m = read_model(&model)?;
            let database = read_db(&db)?;
            let mut data = read_dataset(&sample)?;
            let field = match (params, &field, &scene) {
                (ParamSource::Field, Some(f), Some(s)) => {
                    run.input(f)?;
                    run.input(s)?;
                    Some((read_field(f)?, read_scene(s)?))
                }
                (ParamSource::Field, _, _) => bail!("--params field needs --field and --scene"),
                _ => None,
            };
            for s in &mut data.samples {
                let rho = match params {
                    ParamSource::True => s.params,
                    ParamSource::Field => {
                        let (f, sc) = field.as_ref().expect("checked above");
                        let (x, y) = rebound_core::field::bounce_cell(s, sc)?;
                        f.readout(x, y)?
                    }
                    ParamSource::Estimated => {
                        let t_i = m.encode(Which::Pre, &s.pre, s.impact_point)?;
                        let t_o = m.encode(Which::Post, &s.post, s.impact_point)?;
                        m.recon_params(&t_i, &t_o)?
                    }
                };
                let pred = predict_post(&m, &database, &s.pre, rho, (s.impact_time, s.impact_point))?;
                s.post = pred.post;
                s.params = rho;
            }
            write_dataset(&out, Format::from_path(&out), &data)?;
            run.finish(&[&out], &manifest_path(&out))
        }
        Command::Invert { common, model, pre, post, out } => {
            let mut run = Run::start("invert", &common)?;
            run.input(&model)?;
            run.input(&pre)?;
            let m = read_model(&model)?;
            let pre_data = read_dataset(&pre)?;
            let post_data = match &post {
                Some(p) => {
                    run.input(p)?;
                    read_dataset(p)?
                }
                None => pre_data.clone(),
            };
            if pre_data.samples.len() != post_data.samples.len() {
                bail!("pre and post datasets differ in length");
            }
            let mut w = BufWriter::new(File::create(&out)?);
            for (i, (a, b)) in pre_data.samples.iter().zip(&post_data.samples).enumerate() {
                let t_i = m.encode(Which::Pre, &a.pre, a.impact_point)?;
                let t_o = m.encode(Which::Post, &b.post, a.impact_point)?;
                let v_minus = rebound_core::fit::sensor_velocities(a, run.settings.sim.ball_radius, &run.settings.ransac)?.0;
                let inv = invert_params(&m, &t_i, &t_o, &run.settings.grid, incoming_axis(v_minus))?;
                let e = Estimate {
                    index: i,
                    cor: inv.params.cor,
                    normal: inv.params.normal.get().to_array(),
                    distance: inv.distance,
                };
                writeln!(w, "{}", serde_json::to_string(&e)?)?;
            }
            w.flush()?;
            drop(w);
            run.finish(&[&out], &manifest_path(&out))
        }
        Command::Eval { common, pred, truth, report, estimates, subst_normal, subst_cor, model, db } => {
            let started = Instant::now();
            let mut run = Run::start("eval", &common)?;
            run.input(&pred)?;
            run.input(&truth)?;
            let pred_data = read_dataset(&pred)?;
            let truth_data = read_dataset(&truth)?;
            let r = run.settings.sim.ball_radius;
            let ransac = run.settings.ransac;
            let pred_post: Vec<_> = pred_data.samples.iter().map(|s| s.post.clone()).collect();
            let truth_post: Vec<_> = truth_data.samples.iter().map(|s| s.post.clone()).collect();
            let dist = forward_distances(&pred_post, &truth_post, r, &ransac)?;
            let median_cm = median(&dist).context("empty evaluation set")? * 100.0;
            let cors: Vec<f64> = truth_data.samples.iter().map(|s| s.params.cor).collect();
            let mut conditions = BTreeMap::new();
            let mut normals_within_30 = None;
            let mut cor_mae = None;
            let est = match &estimates {
                Some(p) => {
                    run.input(p)?;
                    let e = read_estimates(p)?;
                    if e.len() != truth_data.samples.len() {
                        bail!("{} estimates for {} samples", e.len(), truth_data.samples.len());
                    }
                    let pn: Vec<Vec3> = e.iter().map(|e| Vec3::from_array(e.normal)).collect();
                    let tn: Vec<Vec3> = truth_data.samples.iter().map(|s| s.params.normal.get()).collect();
                    normals_within_30 = Some(eval_normals(&pn, &tn, 30.0)?);
                    let pc: Vec<f64> = e.iter().map(|e| e.cor).collect();
                    cor_mae = Some(eval_cor(&pc, &cors)?);
                    Some(e)
                }
                None => None,
            };
            if subst_normal.is_some() || subst_cor.is_some() {
                let (Some(mp), Some(dp), Some(est)) = (&model, &db, &est) else {
                    bail!("substitution needs --model, --db and --estimates");
                };
                run.input(mp)?;
                run.input(dp)?;
                let m = read_model(mp)?;
                let database = read_db(dp)?;
                let sn = subst_normal.unwrap_or(Source::True);
                let sc = subst_cor.unwrap_or(Source::True);
                let mut preds = Vec::with_capacity(truth_data.samples.len());
                for (s, e) in truth_data.samples.iter().zip(est) {
                    let ep = e.params()?;
                    let normal = if sn == Source::Estimated { ep.normal } else { s.params.normal };
                    let cor = if sc == Source::Estimated { ep.cor } else { s.params.cor };
                    let rho = SurfaceParams { cor, normal };
                    preds.push(predict_post(&m, &database, &s.pre, rho, (s.impact_time, s.impact_point))?.post);
                }
                let d = forward_distances(&preds, &truth_post, r, &ransac)?;
                let name = format!(
                    "normal={},cor={}",
                    if sn == Source::Estimated { "estimated" } else { "true" },
                    if sc == Source::Estimated { "estimated" } else { "true" }
                );
                conditions.insert(name, median(&d).context("empty evaluation set")? * 100.0);
            }
            let report_data = MetricsReport {
                count: dist.len(),
                median_cm,
                conditions,
                normals_within_30,
                cor_mae,
                by_cor_bin: bin_report(&dist, &cors, &[0.0, 0.25, 0.5, 0.75, 1.0])?,
                runtime_s: started.elapsed().as_secs_f64(),
                config: run.settings.to_kv().entries().clone(),
            };
            std::fs::write(&report, serde_json::to_string_pretty(&report_data)? + "\n")?;
            run.finish(&[&report], &manifest_path(&report))
        }
    }
}
