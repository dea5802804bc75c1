mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agrifuse::adm::weather::WeatherAggregation;
use agrifuse::eval::{evaluate_cv, field_report, make_folds, AblationTable, CvOutcome, ModelSpec, RunInfo};
use agrifuse::fgr;
use agrifuse::fusion::{write_cube, ModalitySelection};
use agrifuse::models::{HeadOrder, ModelKind};
use agrifuse::pipeline::{prepare_all, Dataset, PreparedField};
use agrifuse::s2::{composite, read_scene_dir};
use agrifuse::synth::{effective_noise_sd, generate_fields, write_dataset};
use agrifuse::{FieldDescriptor, Raster};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Metadata, RunConfig};

#[derive(Parser)]
#[command(name = "agrifuse", version, about = "Sub-field crop yield prediction from fused satellite, weather, soil and terrain data")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a known latent yield.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        farms: Option<usize>,
        #[arg(long)]
        fields_per_farm: Option<usize>,
        /// Field width and height in 10 m cells.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise_sd: Option<f64>,
        /// Pick the noise level so the pooled Bayes-optimal R² is this value.
        #[arg(long)]
        bayes_r2: Option<f64>,
        #[arg(long)]
        cloud_prob: Option<f64>,
    },
    /// Clean yield points and rasterize them per field.
    Ingest(DataArgs),
    /// Select the monthly scene series per field.
    Composite(DataArgs),
    /// Assemble fused cubes.
    Fuse {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated modalities, s2 required: s2[,weather][,soil][,dem]
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Grouped K-fold cross-validation of one model on one modality set.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        modalities: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Cross-validate the modality subsets of the ablation table.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Render the qualitative panels of one field from a `cv` run directory.
    Report {
        /// Output directory of a previous `cv` run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        field_id: String,
        /// Defaults to `<run>/report/<field_id>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (fields.json, yield.csv, weather.csv, per-field layers).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one field.
    #[arg(long)]
    field_id: Option<String>,
    /// Aggregate weather as per-day means instead of sums.
    #[arg(long)]
    weather_mean: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<String>,
    #[arg(long)]
    country: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Use ReLU before batch-norm in the LSTM head.
    #[arg(long)]
    relu_first: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = &self.crop {
            cfg.crop = c.clone();
        }
        if let Some(c) = &self.country {
            cfg.country = c.clone();
        }
        if let Some(e) = self.epochs {
            cfg.lstm.epochs = e;
        }
        if let Some(h) = self.hidden {
            cfg.lstm.hidden = h;
            cfg.lstm.fc_hidden = h;
        }
        if let Some(b) = self.batch_size {
            cfg.lstm.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            match cfg.model {
                ModelKind::Gbdt => cfg.gbdt.learning_rate = lr,
                ModelKind::Lstm => cfg.lstm.learning_rate = lr,
            }
        }
        if let Some(n) = self.max_iterations {
            cfg.gbdt.max_iterations = n;
        }
        if self.relu_first {
            cfg.lstm.head_order = HeadOrder::ReluBn;
        }
    }
}

fn apply_data(d: &DataArgs, cfg: &mut RunConfig) {
    if d.weather_mean {
        cfg.pipeline.weather = WeatherAggregation::Mean;
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cli: creating {}", p.display()))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    fs::write(p, bytes).with_context(|| format!("cli: writing {}", p.display()))
}

/// Dataset restricted to `--field-id` when given.
fn open_dataset(d: &DataArgs) -> Result<Dataset> {
    let mut ds = Dataset::open(&d.data)?;
    if let Some(id) = &d.field_id {
        let f = ds.field(id).cloned().ok_or_else(|| anyhow!("cli: field '{id}' not in dataset"))?;
        ds.fields = vec![f];
    }
    Ok(ds)
}

fn prepare(ds: &Dataset, cfg: &RunConfig, sel: ModalitySelection, out: &Path) -> Result<Vec<PreparedField>> {
    let (ok, skipped) = prepare_all(ds, &cfg.pipeline, sel)?;
    let skipped: BTreeMap<String, String> = skipped.into_iter().map(|(id, e)| (id, e.to_string())).collect();
    for (id, why) in &skipped {
        eprintln!("skipping {id}: {why}");
    }
    write_file(&out.join("skipped.json"), serde_json::to_vec_pretty(&skipped)?)?;
    if ok.is_empty() {
        bail!("cli: no usable field in {}", ds.root.display());
    }
    Ok(ok)
}

fn run_cv(prepared: &[PreparedField], cfg: &RunConfig, sel: ModalitySelection) -> Result<CvOutcome> {
    let descriptors: Vec<FieldDescriptor> = prepared.iter().map(|p| p.descriptor.clone()).collect();
    let folds = make_folds(&descriptors, cfg.k, cfg.seed)?;
    let spec = ModelSpec {
        kind: cfg.model,
        gbdt: cfg.gbdt,
        lstm: cfg.lstm,
    };
    let info = RunInfo {
        model: cfg.model,
        modalities: sel.label(),
        crop: cfg.crop.clone(),
        country: cfg.country.clone(),
        seed: cfg.seed,
    };
    let cubes: Vec<_> = prepared.iter().map(|p| p.cube.clone()).collect();
    Ok(evaluate_cv(&cubes, &folds, &spec, sel, info)?)
}

fn write_cv_run(out: &Path, prepared: &[PreparedField], outcome: &CvOutcome) -> Result<()> {
    write_file(&out.join("metrics.csv"), outcome.table.to_csv())?;
    write_file(&out.join("metrics.json"), outcome.table.to_json()?)?;
    let descriptors: Vec<&FieldDescriptor> = prepared.iter().map(|p| &p.descriptor).collect();
    write_file(&out.join("fields.json"), serde_json::to_vec_pretty(&descriptors)?)?;
    let folds: BTreeMap<&str, usize> = outcome.predictions.iter().map(|p| (p.field_id.as_str(), p.fold)).collect();
    write_file(&out.join("folds.json"), serde_json::to_vec_pretty(&folds)?)?;
    create_dir(&out.join("predictions"))?;
    create_dir(&out.join("targets"))?;
    for fp in &outcome.predictions {
        let field = prepared
            .iter()
            .find(|p| p.descriptor.field_id == fp.field_id)
            .ok_or_else(|| anyhow!("cli: prediction for unknown field '{}'", fp.field_id))?;
        let (target, prediction) = fp.to_rasters(&field.descriptor.grid)?;
        fgr::write(out.join("targets").join(format!("{}.fgr", fp.field_id)), &target)?;
        fgr::write(out.join("predictions").join(format!("{}.fgr", fp.field_id)), &prediction)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Synth {
            out,
            seed,
            farms,
            fields_per_farm,
            size,
            noise_sd,
            bayes_r2,
            cloud_prob,
        } => {
            let s = &mut cfg.synth;
            if let Some(v) = seed {
                s.seed = v;
                cfg.seed = v;
            } else {
                cfg.seed = s.seed;
            }
            let s = &mut cfg.synth;
            if let Some(v) = farms {
                s.n_farms = v;
            }
            if let Some(v) = fields_per_farm {
                s.fields_per_farm = v;
            }
            if let Some(v) = size {
                s.field_cols = v;
                s.field_rows = v;
            }
            if let Some(v) = noise_sd {
                s.noise_sd = v;
                s.bayes_r2 = None;
            }
            if bayes_r2.is_some() {
                s.bayes_r2 = bayes_r2;
            }
            if let Some(v) = cloud_prob {
                s.cloud_prob = v;
            }
            let fields = generate_fields(&cfg.synth)?;
            write_dataset(&out, &cfg.synth, &fields)?;
            println!(
                "wrote {} fields to {} (noise sd {:.4})",
                fields.len(),
                out.display(),
                effective_noise_sd(&fields)
            );
            Metadata::new("synth", &cfg, vec![]).write(&out)
        }
        Cmd::Ingest(d) => {
            apply_data(&d, &mut cfg);
            let ds = open_dataset(&d)?;
            let mut reports = BTreeMap::new();
            for f in &ds.fields {
                let (raster, report) = ds.ingest(f, &cfg.pipeline)?;
                create_dir(&d.out.join(&f.field_id))?;
                fgr::write(d.out.join(&f.field_id).join("yield.fgr"), raster.raster())?;
                println!("{}: {} of {} points retained", f.field_id, report.retained, report.input);
                reports.insert(f.field_id.clone(), report);
            }
            write_file(&d.out.join("clean_report.json"), serde_json::to_vec_pretty(&reports)?)?;
            Metadata::new("ingest", &cfg, vec![d.data.clone()]).write(&d.out)
        }
        Cmd::Composite(d) => {
            apply_data(&d, &mut cfg);
            let ds = open_dataset(&d)?;
            for f in &ds.fields {
                let scenes = read_scene_dir(ds.field_dir(&f.field_id).join("s2"))?;
                let series = composite(&scenes, &f.season, &cfg.pipeline.composite)?;
                let used = series.timestep_mask.iter().filter(|m| **m).count();
                write_file(&d.out.join(&f.field_id).join("series.json"), serde_json::to_vec_pretty(&series)?)?;
                println!("{}: {used} of {} timesteps usable", f.field_id, series.timestep_mask.len());
            }
            Metadata::new("composite", &cfg, vec![d.data.clone()]).write(&d.out)
        }
        Cmd::Fuse { data: d, modalities } => {
            apply_data(&d, &mut cfg);
            if let Some(m) = modalities {
                cfg.modalities = m;
            }
            let sel = ModalitySelection::parse(&cfg.modalities)?;
            let ds = open_dataset(&d)?;
            create_dir(&d.out)?;
            for p in prepare(&ds, &cfg, sel, &d.out)? {
                write_cube(d.out.join(format!("{}.fcb", p.descriptor.field_id)), &p.cube)?;
                println!(
                    "{}: {} pixels x {} features",
                    p.descriptor.field_id,
                    p.cube.n_pixels(),
                    p.cube.n_features()
                );
            }
            Metadata::new("fuse", &cfg, vec![d.data.clone()]).write(&d.out)
        }
        Cmd::Cv {
            data: d,
            modalities,
            train,
        } => {
            apply_data(&d, &mut cfg);
            train.apply(&mut cfg);
            if let Some(m) = modalities {
                cfg.modalities = m;
            }
            let sel = ModalitySelection::parse(&cfg.modalities)?;
            let ds = open_dataset(&d)?;
            create_dir(&d.out)?;
            let prepared = prepare(&ds, &cfg, sel, &d.out)?;
            let outcome = run_cv(&prepared, &cfg, sel)?;
            write_cv_run(&d.out, &prepared, &outcome)?;
            print!("{}", outcome.table.to_csv());
            Metadata::new("cv", &cfg, vec![d.data.clone()]).write(&d.out)
        }
        Cmd::Ablate { data: d, train } => {
            apply_data(&d, &mut cfg);
            train.apply(&mut cfg);
            cfg.modalities = ModalitySelection::ALL.key();
            let ds = open_dataset(&d)?;
            create_dir(&d.out)?;
            let prepared = prepare(&ds, &cfg, ModalitySelection::ALL, &d.out)?;
            let mut tables = Vec::new();
            for sel in ModalitySelection::ablation_rows() {
                let outcome = run_cv(&prepared, &cfg, sel)?;
                write_file(&d.out.join(sel.key()).join("metrics.csv"), outcome.table.to_csv())?;
                eprintln!("{} done", sel.label());
                tables.push(outcome.table);
            }
            let table = AblationTable::from_tables(cfg.model, &tables);
            write_file(&d.out.join("ablation.csv"), table.to_csv())?;
            write_file(&d.out.join("ablation.txt"), table.to_text())?;
            print!("{}", table.to_text());
            Metadata::new("ablate", &cfg, vec![d.data.clone()]).write(&d.out)
        }
        Cmd::Report { run, field_id, out } => {
            let fp = run.join("fields.json");
            let fields: Vec<FieldDescriptor> =
                serde_json::from_slice(&fs::read(&fp).with_context(|| format!("cli: reading {}", fp.display()))?)?;
            let field = fields
                .iter()
                .find(|f| f.field_id == field_id)
                .ok_or_else(|| anyhow!("cli: field '{field_id}' was not evaluated in {}", run.display()))?;
            let target = fgr::read(run.join("targets").join(format!("{field_id}.fgr")))?;
            let prediction: Raster = fgr::read(run.join("predictions").join(format!("{field_id}.fgr")))?;
            let bundle = field_report(field, &target.try_into()?, &prediction)?;
            let out = out.unwrap_or_else(|| run.join("report").join(&field_id));
            let written = bundle.write(&out)?;
            for p in &written {
                println!("{}", p.display());
            }
            let meta = run.join("metadata.json");
            if let Ok(bytes) = fs::read(&meta) {
                let prev: Metadata = serde_json::from_slice(&bytes)?;
                cfg = prev.config;
            }
            Metadata::new("report", &cfg, vec![run.clone()]).write(&out)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("AGRIFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("cli: AGRIFUSE_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("cli: thread pool: {e}"))
}

/// The error chain on one line; causes already quoted by their parent are skipped.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if msg.contains(&c) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&c);
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: cli: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
