//! Command-line front end: `asa <subcommand> [flags]`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asa_core::asa::{batch_at, pretrain_step, reconstruct_volume, PretrainState};
use asa_core::checkpoint::Checkpoint;
use asa_core::gradcheck::full_suite;
use asa_core::informativeness::{compute_gradient_field, weights_for_patches, DEFAULT_BINS};
use asa_core::metrics::{evaluate, SegMetrics};
use asa_core::optim::AdamState;
use asa_core::patching::{make_mask_plan, MaskPlan, PatchGrid};
use asa_core::phantom::{phantom_set, PhantomSpec};
use asa_core::position::{EncodingKind, EncodingTable};
use asa_core::rng::derive_seed;
use asa_core::seg::{finetune_step, FinetuneState};
use asa_core::volume::{load_volume, save_volume};
use asa_core::{AsaError, AsaModel, Result, RunConfig, SegModel, Volume};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "asa", version, about = "Masked-autoencoder pretraining and segmentation fine-tuning for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step budget.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Masked-autoencoder pretraining; writes checkpoint.asac and loss.csv.
    Pretrain(RunArgs),
    /// Segmentation fine-tuning; writes seg.asac and finetune_loss.csv.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pretrained checkpoint, or `scratch`.
        #[arg(long)]
        init: String,
        /// Keep the pretrained encoder fixed.
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Dice and HD95 of a fine-tuned checkpoint on held-out volumes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of labelled .asav files; held-out phantoms otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of held-out phantoms.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fills masked patches of a volume with the model's reconstruction.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-patch gradient-histogram means and loss weights as CSV.
    Vhog {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Weights cover only a random masked subset when given.
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dumps a position-encoding table as CSV.
    Spe {
        /// Patch grid as `T,H,W`.
        #[arg(long, value_parser = parse_grid)]
        grid: [usize; 3],
        #[arg(long)]
        dim: usize,
        #[arg(long, value_enum, default_value_t = Kind::Spe)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes labelled phantoms as .asav files.
    Phantom {
        /// JSON phantom spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Kind {
    Spe,
    Vanilla,
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok([t, h, w]),
        _ => Err(format!("expected three positive extents T,H,W, got {s:?}")),
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

const TAG_PRETRAIN: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_TEST: u64 = 3;

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "asav"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AsaError::Config(format!("no .asav files in {}", dir.display())));
    }
    paths.iter().map(load_volume).collect()
}

/// Training or evaluation volumes: the data directory if configured,
/// otherwise phantoms seeded by `(seed, tag)`.
fn volumes(cfg: &RunConfig, tag: u64, count: usize) -> Result<Vec<Volume>> {
    match &cfg.data_dir {
        Some(d) => load_dir(Path::new(d)),
        None => phantom_set(&cfg.phantom(derive_seed(cfg.seed, &[tag])), count),
    }
}

fn check_dims(vols: &[Volume], cfg: &RunConfig) -> Result<()> {
    if let Some(v) = vols.iter().find(|v| v.dims != cfg.dims) {
        return Err(AsaError::Config(format!("volume dims {:?} differ from config dims {:?}", v.dims, cfg.dims)));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn save_pretrain(path: &Path, cfg: &RunConfig, model: &AsaModel, st: &PretrainState) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.to_json());
    ck.push_store("param", &model.store)?;
    ck.push_buffers("opt.m", &model.store, &st.adam.m)?;
    ck.push_buffers("opt.v", &model.store, &st.adam.v)?;
    ck.push_u64("meta/step", st.step as u64)?;
    ck.push_u64("rng/seed", st.seed)?;
    ck.save(path)
}

fn load_pretrain(path: &Path) -> Result<(RunConfig, AsaModel, PretrainState)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_json(&ck.config_json)?;
    if ck.get("param/mask_token").is_none() {
        return Err(AsaError::Config(format!("{} is not a pretraining checkpoint", path.display())));
    }
    let mut model = AsaModel::new(cfg.asa(), cfg.seed)?;
    ck.load_store("param", &mut model.store, "")?;
    let adam = AdamState { m: ck.load_buffers("opt.m", &model.store)?, v: ck.load_buffers("opt.v", &model.store)? };
    let state = PretrainState {
        opt: cfg.optimizer(),
        adam,
        step: ck.get_u64("meta/step")? as usize,
        seed: ck.get_u64("rng/seed")?,
    };
    Ok((cfg, model, state))
}

fn save_seg(path: &Path, cfg: &RunConfig, model: &SegModel, st: &FinetuneState) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.to_json());
    ck.push_store("param", &model.store)?;
    ck.push_buffers("sgd.vel", &model.store, &st.velocity)?;
    ck.push_u64("meta/step", st.step as u64)?;
    ck.push_u64("rng/seed", st.seed)?;
    ck.save(path)
}

fn load_seg(path: &Path) -> Result<(RunConfig, SegModel)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_json(&ck.config_json)?;
    if ck.get("param/seg.classify.w").is_none() {
        return Err(AsaError::Config(format!("{} is not a segmentation checkpoint", path.display())));
    }
    let mut model = SegModel::new(cfg.seg(), cfg.seed)?;
    ck.load_store("param", &mut model.store, "")?;
    Ok((cfg, model))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(args) => pretrain(&args),
        Command::Finetune { run, init, freeze_encoder } => finetune(&run, &init, freeze_encoder),
        Command::Eval { ckpt, data, count, out } => eval(&ckpt, data.as_deref(), count, &out),
        Command::Reconstruct { input, ckpt, mask_ratio, seed, out } => reconstruct(&input, &ckpt, mask_ratio, seed, &out),
        Command::Vhog { input, patch, bins, mask_ratio, seed, out } => vhog(&input, patch, bins, mask_ratio, seed, &out),
        Command::Spe { grid, dim, kind, out } => spe(grid, dim, kind, &out),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Phantom { spec, count, seed, out } => phantom(spec.as_deref(), count, seed, &out),
    }
}

fn pretrain(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = args.steps {
        cfg.total_steps = s;
        cfg.validate()?;
    }
    let data = volumes(&cfg, TAG_PRETRAIN, cfg.n_volumes)?;
    check_dims(&data, &cfg)?;
    let mut model = AsaModel::new(cfg.asa(), cfg.seed)?;
    let mut state = PretrainState::new(&model, cfg.optimizer(), cfg.seed)?;
    let mut csv = String::from("step,lr,loss\n");
    for step in 0..cfg.total_steps {
        let r = pretrain_step(&mut model, &mut state, &batch_at(&data, step, cfg.batch_size))?;
        writeln!(csv, "{},{},{}", r.step, r.lr, r.loss).expect("string write");
    }
    fs::create_dir_all(&args.out)?;
    write(&args.out.join("loss.csv"), &csv)?;
    save_pretrain(&args.out.join("checkpoint.asac"), &cfg, &model, &state)?;
    println!("pretrained {} steps; checkpoint in {}", cfg.total_steps, args.out.display());
    Ok(())
}

fn finetune(args: &RunArgs, init: &str, freeze: bool) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = args.steps {
        cfg.ft_steps = s;
        cfg.validate()?;
    }
    let data = volumes(&cfg, TAG_TRAIN, cfg.n_volumes)?;
    check_dims(&data, &cfg)?;
    if data.iter().any(|v| v.labels.is_none()) {
        return Err(AsaError::Config("fine-tuning needs labelled volumes".into()));
    }
    let mut model = SegModel::new(cfg.seg(), derive_seed(cfg.seed, &[TAG_TRAIN]))?;
    if init != "scratch" {
        let (_, pretrained, _) = load_pretrain(Path::new(init))?;
        model.load_encoder(&pretrained.store)?;
    }
    if freeze {
        model.set_encoder_trainable(false);
    }
    let mut state = FinetuneState::new(&model, cfg.sgd(), cfg.seed);
    state.augment = cfg.ft_augment;
    let mut csv = String::from("step,lr,loss\n");
    for step in 0..cfg.ft_steps {
        let lr = state.sgd.lr_at(step);
        let loss = finetune_step(&mut model, &mut state, &batch_at(&data, step, cfg.ft_batch_size))?;
        writeln!(csv, "{step},{lr},{loss}").expect("string write");
    }
    fs::create_dir_all(&args.out)?;
    write(&args.out.join("finetune_loss.csv"), &csv)?;
    save_seg(&args.out.join("seg.asac"), &cfg, &model, &state)?;
    println!("fine-tuned {} steps from {init}; checkpoint in {}", cfg.ft_steps, args.out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: Option<&Path>, count: usize, out: &Path) -> Result<()> {
    let (cfg, model) = load_seg(ckpt)?;
    let vols = match data {
        Some(d) => load_dir(d)?,
        None => phantom_set(&cfg.phantom(derive_seed(cfg.seed, &[TAG_TEST])), count)?,
    };
    check_dims(&vols, &cfg)?;
    let reports = vols
        .iter()
        .map(|v| {
            let labels = v.labels.as_ref().ok_or_else(|| AsaError::Config("evaluation needs labels".into()))?;
            evaluate(&model.predict(v)?, labels, v.dims, cfg.n_classes as u8)
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = SegMetrics::average(&reports)?;
    write(out, &avg.to_csv())?;
    println!("mean dice {:.4}, mean hd95 {:.3} over {} volumes", avg.mean_dice(), avg.mean_hd95(), vols.len());
    Ok(())
}

fn reconstruct(input: &Path, ckpt: &Path, ratio: Option<f64>, seed: Option<u64>, out: &Path) -> Result<()> {
    let (cfg, model, _) = load_pretrain(ckpt)?;
    let v = load_volume(input)?;
    let n = model.grid.n_patches();
    let ratio = ratio.unwrap_or(cfg.mask_ratio);
    let plan = if ratio == 0.0 { MaskPlan::explicit(n, &[])? } else { make_mask_plan(n, ratio, seed.unwrap_or(cfg.seed))? };
    let recon = reconstruct_volume(&model, &v, &plan)?;
    save_volume(&recon, out)?;
    println!("reconstructed {} of {n} patches into {}", plan.masked.len(), out.display());
    Ok(())
}

fn vhog(input: &Path, patch: usize, bins: usize, ratio: Option<f64>, seed: u64, out: &Path) -> Result<()> {
    if bins < 2 {
        return Err(AsaError::Config("bins must be at least 2".into()));
    }
    let v = load_volume(input)?;
    let grid = PatchGrid::for_dims(v.dims, patch)?;
    let field = compute_gradient_field(&v)?;
    let all: Vec<usize> = (0..grid.n_patches()).collect();
    let masked = match ratio {
        Some(r) => make_mask_plan(grid.n_patches(), r, seed)?.masked,
        None => all.clone(),
    };
    let means = weights_for_patches(&field, &grid, &all, bins)?.means;
    let weights = weights_for_patches(&field, &grid, &masked, bins)?.weights;
    let mut p = vec![0.0; grid.n_patches()];
    for (&i, &w) in masked.iter().zip(&weights) {
        p[i] = w;
    }
    let mut csv = String::from("t,h,w,masked,gbar,p\n");
    for i in all {
        let [t, h, w] = grid.coords(i);
        let m = masked.binary_search(&i).is_ok() as u8;
        writeln!(csv, "{t},{h},{w},{m},{},{}", means[i], p[i]).expect("string write");
    }
    write(out, &csv)
}

fn spe(grid: [usize; 3], dim: usize, kind: Kind, out: &Path) -> Result<()> {
    let kind = match kind {
        Kind::Spe => EncodingKind::Spe,
        Kind::Vanilla => EncodingKind::Vanilla,
    };
    let table = EncodingTable::new(kind, grid, dim)?;
    let mut csv = String::from("t,h,w");
    for k in 0..dim {
        write!(csv, ",e_{k}").expect("string write");
    }
    csv.push('\n');
    let pg = PatchGrid { s: 1, grid };
    for i in 0..table.n_rows() {
        let [t, h, w] = pg.coords(i);
        write!(csv, "{t},{h},{w}").expect("string write");
        for x in table.row(i) {
            write!(csv, ",{x}").expect("string write");
        }
        csv.push('\n');
    }
    write(out, &csv)
}

fn gradcheck(seed: u64) -> Result<()> {
    let reports = full_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:>5} entries  max rel err {:.3e}  (tol {:.0e})  {status}", r.name, r.checked, r.max_rel_err, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(AsaError::Contract(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn phantom(spec: Option<&Path>, count: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: PhantomSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| AsaError::Config(e.to_string()))?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let vols = if count == 1 { vec![asa_core::phantom::gen_phantom(&spec)?] } else { phantom_set(&spec, count)? };
    fs::create_dir_all(out)?;
    for (i, v) in vols.iter().enumerate() {
        save_volume(v, out.join(format!("phantom_{i:03}.asav")))?;
    }
    println!("wrote {} phantoms to {}", vols.len(), out.display());
    Ok(())
}
