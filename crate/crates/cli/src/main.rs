mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use vicinity::attn::EncodingKind;
use vicinity::attviz::{
    fit_slide, head_average, render_heatmap_svg, render_slide_svg, write_fits_csv,
};
use vicinity::grid::{format_memory, memory_bytes};
use vicinity::ndiff::snapshot::{read_params, write_params};
use vicinity::segnet::Model;
use vicinity::synth::{
    class_ratio, predominant, write_label_map, Dataset, Split, SplitSizes, SynthSlide,
};
use vicinity::train::{dice_report, fit, predict_slides};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "vicinity",
    version,
    about = "Neighbourhood memory attention for tiled-image segmentation"
)]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, env = "VV_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Predict every patch of a split and write Dice scores.
    Eval(EvalArgs),
    /// Fit and draw attention maps for one slide.
    Attn(AttnArgs),
    /// Size of the embedding memory for a set of slides.
    Memsize(MemsizeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total slide count; a sixth each (at least one) goes to validation and test.
    #[arg(long)]
    slides: Option<usize>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    /// Patch edge length in pixels.
    #[arg(long = "patch-px", visible_alias = "S")]
    patch_px: Option<usize>,
    #[arg(long)]
    marker_rate: Option<f64>,
    #[arg(long)]
    stroma_fraction: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbourhood radius; 0 trains the plain network.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    encoding: Option<EncodingKind>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    slide: String,
    #[arg(long)]
    out: PathBuf,
    /// Draw the neighbourhood heatmap of one patch instead of the slide view.
    #[arg(long, num_args = 2, value_names = ["I", "J"])]
    patch: Option<Vec<usize>>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MemsizeArgs {
    #[arg(long)]
    slides: u64,
    #[arg(long)]
    nx: u64,
    #[arg(long)]
    ny: u64,
    #[arg(long)]
    k: u64,
    #[arg(long, visible_alias = "D")]
    dim: u64,
}

/// Failures split by exit code.
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attn(a) => cmd_attn(a),
        Command::Memsize(a) => cmd_memsize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("data error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let n = match threads {
        Some(0) => return Err(anyhow!("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<(), Failure> {
    let busy = fs::read_dir(dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if busy && !force {
        return Err(Failure::Config(anyhow!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .data()
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref()).config()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.slides {
        if n < 3 {
            return Err(Failure::Config(anyhow!(
                "--slides must be at least 3 to fill train, val and test"
            )));
        }
        let held = (n / 6).max(1);
        cfg.data.splits = SplitSizes {
            train: n - 2 * held,
            val: held,
            test: held,
        };
    }
    if let Some(v) = a.nx {
        cfg.data.n_x = v;
    }
    if let Some(v) = a.ny {
        cfg.data.n_y = v;
    }
    if let Some(v) = a.patch_px {
        cfg.data.patch_px = v;
        cfg.net.patch_px = v;
    }
    if let Some(v) = a.marker_rate {
        cfg.data.synth.marker_rate = v;
    }
    if let Some(v) = a.stroma_fraction {
        cfg.data.synth.stroma_fraction = v;
    }
    cfg.paths.out = Some(a.out.clone());
    cfg.data.synth.validate().config()?;
    prepare_out(&a.out, a.force)?;
    let d = &cfg.data;
    let data =
        Dataset::generate(cfg.seed, d.splits, d.n_x, d.n_y, d.patch_px, &d.synth).config()?;
    data.write(&a.out).data()?;
    cfg.write(&a.out).data()?;
    eprintln!("wrote {} slides to {}", data.slides.len(), a.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::read(dir)
        .with_context(|| format!("reading dataset {}", dir.display()))
        .data()
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref()).config()?;
    let data = load_dataset(&a.data)?;
    cfg.data.patch_px = data.meta.patch_px;
    cfg.net.patch_px = data.meta.patch_px;
    cfg.net.classes = data.meta.classes;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.k {
        cfg.maf.k = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.max_epochs = v;
        cfg.train.patience = cfg.train.patience.min(v);
    }
    if let Some(v) = a.lambda {
        cfg.maf.lambda = v;
    }
    if let Some(v) = a.encoding {
        cfg.maf.encoding = v;
    }
    cfg.paths = config::Paths {
        data: Some(a.data.clone()),
        model: None,
        out: Some(a.out.clone()),
    };
    cfg.validate().config()?;

    let previous = a.out.join("config.json");
    if previous.exists() && !a.force {
        let old = RunConfig::load(Some(&previous)).config()?;
        if old != cfg {
            return Err(Failure::Config(anyhow!(
                "{} holds a run with a different config; pass --force to replace it",
                a.out.display()
            )));
        }
    } else {
        prepare_out(&a.out, a.force)?;
    }
    fs::create_dir_all(&a.out).data()?;
    cfg.write(&a.out).data()?;

    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Failure::Data(anyhow!("dataset needs train and val slides")));
    }
    let mut history = BufWriter::new(fs::File::create(a.out.join("history.jsonl")).data()?);
    let mut write_err = None;
    let res = fit(cfg.model_config(), &cfg.train_config(), &train, &val, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.3e}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        );
        if let Err(e) = serde_json::to_writer(&mut history, r)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(writeln!(history)?))
        {
            write_err.get_or_insert(e);
        }
    })
    .data()?;
    if let Some(e) = write_err {
        return Err(Failure::Data(e));
    }
    history.flush().data()?;
    let mut f = BufWriter::new(fs::File::create(a.out.join("model.vvwt")).data()?);
    write_params(&res.model.store, &mut f).data()?;
    f.flush().data()?;
    eprintln!(
        "best epoch {} of {}; model in {}",
        res.best_epoch,
        res.history.len(),
        a.out.display()
    );
    Ok(())
}

fn load_model(dir: &Path) -> Result<(RunConfig, Model<f32>), Failure> {
    let cfg = RunConfig::load(Some(&dir.join("config.json"))).config()?;
    let mut model = Model::<f32>::new(cfg.model_config()).config()?;
    let path = dir.join("model.vvwt");
    let file = fs::File::open(&path)
        .with_context(|| format!("opening {}", path.display()))
        .data()?;
    let params = read_params(std::io::BufReader::new(file)).data()?;
    model
        .store
        .load_from(&params)
        .with_context(|| format!("loading {}", path.display()))
        .data()?;
    Ok((cfg, model))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Failure::Config(anyhow!("unknown split `{other}`"))),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let split = parse_split(&a.split)?;
    let (mut cfg, model) = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let slides = data.split(split);
    if slides.is_empty() {
        return Err(Failure::Data(anyhow!(
            "no {} slides in {}",
            a.split,
            a.data.display()
        )));
    }
    prepare_out(&a.out, a.force)?;
    let preds = predict_slides(&model, &slides).data()?;
    let labels: Vec<Vec<u8>> = preds.into_iter().map(|p| p.labels).collect();
    let report = dice_report(&slides, &labels).data()?;
    let pred_dir = a.out.join("pred");
    fs::create_dir_all(&pred_dir).data()?;
    for (slide, l) in slides.iter().zip(&labels) {
        let path = pred_dir.join(format!("slide_{}.vvl", slide.grid.slide_id));
        write_label_map(&path, slide.width(), slide.height(), l).data()?;
    }
    let mut f = BufWriter::new(fs::File::create(a.out.join("dice.csv")).data()?);
    report.write_csv(&mut f).data()?;
    f.flush().data()?;
    cfg.paths = config::Paths {
        data: Some(a.data.clone()),
        model: Some(a.model.clone()),
        out: Some(a.out.clone()),
    };
    cfg.write(&a.out).data()?;
    println!("DSC_total {:.4} over {} slides", report.total, slides.len());
    Ok(())
}

fn patch_classes(slide: &SynthSlide, labels: &[u8]) -> Vec<u8> {
    let s = slide.grid.patch_px;
    let w = slide.width();
    slide
        .grid
        .positions()
        .map(|(i, j)| {
            let patch: Vec<u8> = (0..s)
                .flat_map(|y| labels[(j * s + y) * w + i * s..][..s].to_vec())
                .collect();
            predominant(&class_ratio(&patch, slide.grid.classes)) as u8
        })
        .collect()
}

fn cmd_attn(a: AttnArgs) -> Result<(), Failure> {
    let (cfg, model) = load_model(&a.model)?;
    if !cfg.model_config().uses_memory() {
        return Err(Failure::Config(anyhow!(
            "model in {} has no memory attention (k = 0)",
            a.model.display()
        )));
    }
    let data = load_dataset(&a.data)?;
    let slide = data
        .slides
        .iter()
        .find(|s| s.grid.slide_id == a.slide)
        .ok_or_else(|| Failure::Data(anyhow!("no slide `{}` in {}", a.slide, a.data.display())))?;
    let grid = &slide.grid;
    if let Some(p) = &a.patch {
        if !grid.contains(p[0], p[1]) {
            return Err(Failure::Config(anyhow!(
                "patch ({}, {}) outside the {}x{} grid",
                p[0],
                p[1],
                grid.n_x,
                grid.n_y
            )));
        }
    }
    prepare_out(&a.out, a.force)?;
    let pred = predict_slides(&model, &[slide]).data()?.remove(0);
    let (heads, k) = (cfg.maf.heads, cfg.maf.k);
    let id = &grid.slide_id;
    match &a.patch {
        Some(p) => {
            let idx = grid
                .positions()
                .position(|q| q == (p[0], p[1]))
                .expect("checked above");
            let map = head_average(&pred.scores[idx], heads, k).data()?;
            let path = a.out.join(format!("heatmap_{id}_{}_{}.svg", p[0], p[1]));
            render_heatmap_svg(BufWriter::new(fs::File::create(&path).data()?), &map).data()?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let fits = fit_slide(grid, &pred.scores, heads, k).data()?;
            let cells = patch_classes(slide, &pred.labels);
            let svg = a.out.join(format!("attention_{id}.svg"));
            render_slide_svg(
                BufWriter::new(fs::File::create(&svg).data()?),
                grid,
                k,
                &cells,
                &fits,
            )
            .data()?;
            let csv = a.out.join(format!("fits_{id}.csv"));
            write_fits_csv(BufWriter::new(fs::File::create(&csv).data()?), id, &fits).data()?;
            eprintln!(
                "wrote {} and {} ({} fits)",
                svg.display(),
                csv.display(),
                fits.len()
            );
        }
    }
    Ok(())
}

fn cmd_memsize(a: MemsizeArgs) -> Result<(), Failure> {
    let bytes = memory_bytes(a.slides, a.nx, a.ny, a.k, a.dim);
    println!("{}", format_memory(bytes));
    Ok(())
}
