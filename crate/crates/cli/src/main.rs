//! `hfv`: sample, train, encode, classify and analyze with Fisher Vector and
//! Hyper-Fisher Vector encodings.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use hfv_core::analysis::{
    accuracy_spread, best_row, sweep_codebook, sweep_csv, sweep_power, synth_corpus, toy_example,
    write_synthetic_corpus, SynthConfig, ToyConfig,
};
use hfv_core::classify::{evaluate, svm_train_ova};
use hfv_core::corpus::{CorpusItem, LabeledCorpus};
use hfv_core::encoding::{load_encoded, save_encoded};
use hfv_core::kv::KeyValues;
use hfv_core::pipeline::{train_models, Mode, Models, PipelineConfig};
use hfv_core::sampling::sample_files;
use hfv_core::{
    load_descriptors, load_labeled_corpus, load_model, save_descriptors, save_model, Codebook, CountNormalization,
    Error, GmmModel, PcaModel, Result, Split,
};

const PCA_FILE: &str = "pca.model";
const CODEBOOK_FILE: &str = "codebook.model";
const GMM_FILE: &str = "gmm.model";
const ENCODED_MANIFEST: &str = "manifest.txt";

const DEFAULT_POWER_GRID: &[f64] = &[0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];
const DEFAULT_CODEBOOK_GRID: &[usize] = &[500, 1000, 2000, 4000];

#[derive(Parser)]
#[command(name = "hfv", version, about = "Fisher Vector and Hyper-Fisher Vector encoding pipeline")]
struct Cli {
    /// Seed for every randomized stage; overrides `seed` from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Output does not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// key=value settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reservoir-sample descriptors across descriptor files.
    Sample(SampleArgs),
    /// Fit PCA, codebook and GMM on a descriptor sample.
    Train(TrainArgs),
    /// Encode descriptor files as FV or HFV vectors.
    Encode(EncodeArgs),
    /// Train one-vs-all linear SVMs on encoded vectors and report test metrics.
    Classify(ClassifyArgs),
    /// Two-Gaussian toy example of FV and HFV energy distributions.
    Toy(ToyArgs),
    /// FV accuracy as a function of the power-normalization exponent.
    SweepPower(SweepPowerArgs),
    /// HFV accuracy as a function of codebook size.
    SweepCodebook(SweepCodebookArgs),
    /// Write a synthetic labeled corpus.
    Synth(SynthArgs),
}

/// Overrides for the pipeline settings; unset flags fall back to --config, then defaults.
#[derive(Args, Default)]
struct PipelineFlags {
    /// Descriptors sampled for fitting (default 100000).
    #[arg(long)]
    sample_count: Option<usize>,
    /// Codebook size K1 (default 4000).
    #[arg(long)]
    k1: Option<usize>,
    /// Mixture size K2 (default 256).
    #[arg(long)]
    k2: Option<usize>,
    /// PCA output dimension (default: half the input dimension).
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Skip PCA.
    #[arg(long)]
    no_pca: bool,
    /// Final power-normalization exponent p in (0, 1] (default 0.5).
    #[arg(long)]
    power: Option<f64>,
    /// Do not power+l2 normalize local Fisher Vectors before summation.
    #[arg(long)]
    no_local_norm: bool,
    /// Exponent of the local normalization (default: same as --power).
    #[arg(long)]
    local_power: Option<f64>,
    /// Count used for each local Fisher Vector: per-cluster or global.
    #[arg(long)]
    count_norm: Option<CountNormalization>,
    /// SVM regularization constant C (default 100).
    #[arg(long)]
    svm_c: Option<f64>,
    /// SVM training epochs (default 50).
    #[arg(long)]
    svm_epochs: Option<usize>,
}

impl PipelineFlags {
    fn apply(&self, kv: &mut KeyValues) {
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(k, v);
            }
        };
        set("sample_count", self.sample_count.map(|v| v.to_string()));
        set("k1", self.k1.map(|v| v.to_string()));
        set("k2", self.k2.map(|v| v.to_string()));
        set("pca_dim", self.pca_dim.map(|v| v.to_string()));
        set("use_pca", self.no_pca.then(|| "false".into()));
        set("power", self.power.map(|v| v.to_string()));
        set("normalize_local", self.no_local_norm.then(|| "false".into()));
        set("local_power", self.local_power.map(|v| v.to_string()));
        set("count_normalization", self.count_norm.map(|v| v.to_string()));
        set("svm_c", self.svm_c.map(|v| v.to_string()));
        set("svm_epochs", self.svm_epochs.map(|v| v.to_string()));
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Descriptor files to sample from.
    inputs: Vec<PathBuf>,
    /// Sample from the training items of a manifest instead of listed files.
    #[arg(long, conflicts_with = "inputs")]
    manifest: Option<PathBuf>,
    /// Number of descriptors to keep (default: sample_count).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Descriptor sample, typically from `hfv sample`.
    #[arg(long)]
    sample: PathBuf,
    /// Directory receiving pca.model, codebook.model and gmm.model.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EncodeArgs {
    /// Descriptor files to encode.
    inputs: Vec<PathBuf>,
    /// Encode every item of a manifest and write a manifest of the encodings.
    #[arg(long, conflicts_with = "inputs")]
    manifest: Option<PathBuf>,
    /// Directory written by `hfv train`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value = "hfv")]
    mode: Mode,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Manifest of encoded vectors with labels and train/test splits.
    #[arg(long)]
    manifest: PathBuf,
    /// Write the metrics as CSV (metric,class,value).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Save the trained classifiers.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct ToyArgs {
    /// Write the per-vector energy maps as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct SweepPowerArgs {
    /// Manifest of descriptor files with labels and splits.
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated exponents.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Write the table here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct SweepCodebookArgs {
    /// Manifest of descriptor files with labels and splits.
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated codebook sizes.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<usize>,
    /// Write the table here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct SynthArgs {
    /// Recipe file (key=value); missing keys use the standard corpus.
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

struct Globals {
    seed: Option<u64>,
    config: KeyValues,
}

impl Globals {
    fn load(cli: &Cli) -> Result<Self> {
        let config = match &cli.config {
            Some(p) => KeyValues::parse(&read_text(p)?)?,
            None => KeyValues::default(),
        };
        Ok(Self { seed: cli.seed, config })
    }

    fn pipeline(&self, flags: &PipelineFlags) -> Result<PipelineConfig> {
        let mut kv = self.config.clone();
        flags.apply(&mut kv);
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
        }
        let mut cfg = PipelineConfig::default();
        cfg.apply_key_values(&kv)?;
        Ok(cfg)
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn cmd_sample(g: &Globals, args: &SampleArgs) -> Result<()> {
    let cfg = g.pipeline(&PipelineFlags::default())?;
    let count = args.count.unwrap_or(cfg.sample_count);
    if count == 0 {
        return Err(usage("--count must be positive"));
    }
    let paths: Vec<PathBuf> = match &args.manifest {
        Some(m) => load_labeled_corpus(m)?
            .split_items(Split::Train)
            .map(|it| it.path.clone())
            .collect(),
        None => args.inputs.clone(),
    };
    if paths.is_empty() {
        return Err(usage("no input descriptor files"));
    }
    let sample = sample_files(&paths, count, cfg.seeds().sample)?;
    save_descriptors(&sample, &args.output)?;
    eprintln!("sampled {} descriptors of dimension {}", sample.len(), sample.dim());
    Ok(())
}

fn cmd_train(g: &Globals, args: &TrainArgs) -> Result<()> {
    let cfg = g.pipeline(&args.pipeline)?;
    let sample = load_descriptors(&args.sample)?;
    let models = train_models(&sample, &cfg, true)?;
    create_dir(&args.out_dir)?;
    let pca_path = args.out_dir.join(PCA_FILE);
    match &models.pca {
        Some(p) => save_model(p, &pca_path)?,
        // A stale PCA from an earlier run would otherwise be picked up by `encode`.
        None if pca_path.exists() => fs::remove_file(&pca_path).map_err(|e| Error::File {
            path: pca_path.clone(),
            source: e,
        })?,
        None => {}
    }
    if let Some(cb) = &models.codebook {
        save_model(cb, &args.out_dir.join(CODEBOOK_FILE))?;
    }
    save_model(&models.gmm, &args.out_dir.join(GMM_FILE))?;
    eprintln!(
        "trained K1={} K2={} on {} descriptors ({} -> {} dims)",
        cfg.k1,
        cfg.k2,
        sample.len(),
        sample.dim(),
        models.gmm.dim()
    );
    Ok(())
}

fn load_models(dir: &Path, mode: Mode) -> Result<Models> {
    let pca_path = dir.join(PCA_FILE);
    let pca = if pca_path.exists() {
        Some(load_model::<PcaModel>(&pca_path)?)
    } else {
        None
    };
    let codebook = match mode {
        Mode::Hfv => Some(load_model::<Codebook>(&dir.join(CODEBOOK_FILE))?),
        Mode::Fv => None,
    };
    let gmm = load_model::<GmmModel>(&dir.join(GMM_FILE))?;
    let space = pca.as_ref().map_or(gmm.dim(), PcaModel::out_dim);
    if space != gmm.dim() || codebook.as_ref().is_some_and(|c| c.dim() != gmm.dim()) {
        return Err(Error::Format(format!("models in {} have inconsistent dimensions", dir.display())));
    }
    Ok(Models { pca, gmm, codebook })
}

/// Output location of an encoded item: the manifest reference mirrored under
/// `out_dir` when it is a plain relative path, else just the file name.
fn encoded_name(reference: &Path) -> PathBuf {
    let plain = reference.components().all(|c| matches!(c, Component::Normal(_)));
    let rel = if plain {
        reference.to_path_buf()
    } else {
        PathBuf::from(reference.file_name().unwrap_or_default())
    };
    rel.with_extension("fven")
}

fn cmd_encode(g: &Globals, args: &EncodeArgs) -> Result<()> {
    let cfg = g.pipeline(&args.pipeline)?;
    let models = load_models(&args.models, args.mode)?;
    let corpus = match &args.manifest {
        Some(m) => Some(load_labeled_corpus(m)?),
        None => None,
    };
    let jobs: Vec<(String, PathBuf, PathBuf)> = match &corpus {
        Some(c) => c
            .items
            .iter()
            .map(|it| (it.reference.clone(), it.path.clone(), encoded_name(Path::new(&it.reference))))
            .collect(),
        None => args
            .inputs
            .iter()
            .map(|p| (p.display().to_string(), p.clone(), encoded_name(Path::new(p.file_name().unwrap_or_default()))))
            .collect(),
    };
    if jobs.is_empty() {
        return Err(usage("no inputs to encode"));
    }
    let mut names: Vec<&PathBuf> = jobs.iter().map(|j| &j.2).collect();
    names.sort();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("two inputs would both be written to {}", w[0].display())));
    }
    create_dir(&args.out_dir)?;

    let hfv = cfg.hfv_options();
    let encode_one = |src: &Path, dst: &Path| -> Result<()> {
        let set = load_descriptors(src)?;
        let v = models.encode(&set, args.mode, cfg.power, &hfv)?;
        let out = args.out_dir.join(dst);
        if let Some(parent) = out.parent() {
            create_dir(parent)?;
        }
        save_encoded(&v, &out)
    };
    // Items are loaded, encoded and written one at a time per worker.
    let results: Vec<Result<()>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|(_, src, dst)| encode_one(src, dst)).collect()
    };

    let mut failed = 0;
    let mut encoded = LabeledCorpus {
        items: Vec::new(),
        classes: corpus.as_ref().map(|c| c.classes.clone()).unwrap_or_default(),
    };
    for (i, ((name, _, dst), r)) in jobs.iter().zip(&results).enumerate() {
        match r {
            Ok(()) => {
                if let Some(c) = &corpus {
                    encoded.items.push(CorpusItem {
                        reference: dst.to_string_lossy().replace('\\', "/"),
                        path: args.out_dir.join(dst),
                        label: c.items[i].label,
                        split: c.items[i].split,
                    });
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {name}: {e}");
            }
        }
    }
    if corpus.is_some() {
        let mut text = Vec::new();
        encoded.write_manifest(&mut text)?;
        write_file(&args.out_dir.join(ENCODED_MANIFEST), &String::from_utf8_lossy(&text))?;
    }
    eprintln!("encoded {} of {} items ({})", jobs.len() - failed, jobs.len(), args.mode);
    if failed > 0 {
        return Err(Error::Format(format!("{failed} of {} items could not be encoded", jobs.len())));
    }
    Ok(())
}

fn cmd_classify(g: &Globals, args: &ClassifyArgs) -> Result<()> {
    let cfg = g.pipeline(&args.pipeline)?;
    let corpus = load_labeled_corpus(&args.manifest)?;
    let vectors = corpus
        .items
        .iter()
        .map(|it| load_encoded(&it.path))
        .collect::<Result<Vec<_>>>()?;
    let dim = vectors.first().map(|v| v.len()).ok_or_else(|| usage("manifest lists no items"))?;
    if let Some((it, v)) = corpus.items.iter().zip(&vectors).find(|(_, v)| v.len() != dim) {
        return Err(Error::Format(format!(
            "{}: vector length {} differs from {dim}",
            it.reference,
            v.len()
        )));
    }
    let pick = |split: Split| -> (Vec<&[f64]>, Vec<usize>) {
        corpus
            .items
            .iter()
            .zip(&vectors)
            .filter(|(it, _)| it.split == split)
            .map(|(it, v)| (v.values(), it.label))
            .unzip()
    };
    let (train_x, train_y) = pick(Split::Train);
    let (test_x, test_y) = pick(Split::Test);
    if test_x.is_empty() {
        return Err(Error::EmptyInput("manifest has no test items".into()));
    }
    let model = svm_train_ova(&train_x, &train_y, &corpus.classes, &cfg.svm_options())?;
    let metrics = evaluate(&model, &test_x, &test_y)?;
    if let Some(p) = &args.metrics {
        write_file(p, &metrics.to_csv())?;
    }
    if let Some(p) = &args.model_out {
        save_model(&model, p)?;
    }
    stdout(&metrics.to_text())
}

fn cmd_toy(g: &Globals, args: &ToyArgs) -> Result<()> {
    let cfg = g.pipeline(&args.pipeline)?;
    let toy = ToyConfig {
        seed: cfg.seed,
        hfv: cfg.hfv_options(),
        ..ToyConfig::default()
    };
    let report = toy_example(&toy)?;
    if let Some(p) = &args.csv {
        write_file(p, &report.to_csv())?;
    }
    stdout(&report.to_text())
}

fn emit_table(output: Option<&Path>, table: &str) -> Result<()> {
    match output {
        Some(p) => write_file(p, table),
        None => stdout(table),
    }
}

fn cmd_sweep_power(g: &Globals, args: &SweepPowerArgs) -> Result<()> {
    let cfg = g.pipeline(&args.pipeline)?;
    let data = load_labeled_corpus(&args.manifest)?.load_dataset()?;
    let grid = if args.grid.is_empty() { DEFAULT_POWER_GRID.to_vec() } else { args.grid.clone() };
    let rows = sweep_power(&data, &cfg, &grid)?;
    if let Some(b) = best_row(&rows) {
        eprintln!("best p = {} (accuracy {:.4}, mAP {:.4})", b.param, b.accuracy, b.map);
    }
    emit_table(args.output.as_deref(), &sweep_csv(&rows))
}

fn cmd_sweep_codebook(g: &Globals, args: &SweepCodebookArgs) -> Result<()> {
    let cfg = g.pipeline(&args.pipeline)?;
    let data = load_labeled_corpus(&args.manifest)?.load_dataset()?;
    let grid = if args.grid.is_empty() { DEFAULT_CODEBOOK_GRID.to_vec() } else { args.grid.clone() };
    let rows = sweep_codebook(&data, &cfg, &grid)?;
    eprintln!("accuracy spread over K1: {:.4}", accuracy_spread(&rows));
    emit_table(args.output.as_deref(), &sweep_csv(&rows))
}

fn cmd_synth(g: &Globals, args: &SynthArgs) -> Result<()> {
    let mut kv = match &args.recipe {
        Some(p) => KeyValues::parse(&read_text(p)?)?,
        None => KeyValues::default(),
    };
    if let Some(s) = g.seed {
        kv.set("seed", s.to_string());
    }
    let cfg = SynthConfig::from_key_values(&kv)?;
    let corpus = synth_corpus(&cfg)?;
    let written = write_synthetic_corpus(&corpus, &args.out_dir)?;
    eprintln!(
        "wrote {} items in {} classes to {}",
        written.items.len(),
        written.classes.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let g = Globals::load(cli)?;
    match &cli.command {
        Command::Sample(a) => cmd_sample(&g, a),
        Command::Train(a) => cmd_train(&g, a),
        Command::Encode(a) => cmd_encode(&g, a),
        Command::Classify(a) => cmd_classify(&g, a),
        Command::Toy(a) => cmd_toy(&g, a),
        Command::SweepPower(a) => cmd_sweep_power(&g, a),
        Command::SweepCodebook(a) => cmd_sweep_codebook(&g, a),
        Command::Synth(a) => cmd_synth(&g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        Some(n) => pool = pool.num_threads(n),
        None => {}
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
