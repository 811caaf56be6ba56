//! Command-line pipeline: `simulate → holdout-split → knots → train →
//! emulate → evaluate`, plus `margins` for GEV fitting.
//!
//! Every stage writes into an output directory and leaves a
//! `<stage>.manifest.json` with the resolved configuration, its hash, the seed
//! and the hashes of all files read and written. A `--config file.json`
//! supplies any option of the subcommand; flags given explicitly on the
//! command line win, unknown keys are rejected.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure. `EXTVAE_THREADS` caps the worker threads.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::seq::index::sample;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::field::Scale;
use crate::io::{self, Buffer, Manifest, MarginRow};
use crate::marginal_models::{
    cut_points, fit_sites, gev_to_frechet, gof_statistic, to_uniform, UniformMode, GEV_FITTED,
};
use crate::maxid_process::{ModelDesign, ModelKind};
use crate::seed::{child_rng, derive_seed};
use crate::spatial_basis::{build_basis, select_knots, KnotConfig, KnotSelection, SiteSet};
use crate::tail_metrics::{
    are_curve, climatology_crps, crps_table, empirical_chi_h, qq_pairs_at, ChiCurve, GridSpec, CHI_TOL,
};
use crate::vae::{emulate, emulate_prior, init_params_with, predict_holdout, train_with_log, InitOptions, TrainConfig, VaeState};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Side length of the square study region used by the simulation designs.
const DOMAIN: (f64, f64) = (0.0, 10.0);

#[derive(Debug, Parser)]
#[command(name = "extvae", version, about = "Spatial extremes simulation and VAE emulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one of the five designs at random sites.
    Simulate(Staged<SimulateArgs>),
    /// Split a field into training and holdout sites.
    HoldoutSplit(Staged<HoldoutArgs>),
    /// Choose knots from exceedance clusters.
    Knots(Staged<KnotsArgs>),
    /// Fit GEV margins per site and transform to the uniform or Fréchet scale.
    Margins(Staged<MarginsArgs>),
    /// Initialize and train the emulator.
    Train(Staged<TrainArgs>),
    /// Draw emulated replicates from a trained model.
    Emulate(Staged<EmulateArgs>),
    /// Compare an emulation with its training field and score holdout sites.
    Evaluate(Staged<EvaluateArgs>),
}

#[derive(Debug, Args)]
struct Staged<T: Args> {
    /// JSON file with any of this subcommand's options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    args: T,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateArgs {
    /// Design I-V.
    #[arg(long, value_parser = parse_model, default_value = "III")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 2000)]
    pub ns: usize,
    #[arg(long, default_value_t = 100)]
    pub nt: usize,
    /// Stability parameter of the latent variables.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutArgs {
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_holdout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotsArgs {
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub u_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    pub merge_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Reduce pooled centroids to exactly this many knots.
    #[arg(long)]
    pub target_k: Option<usize>,
    /// Use a regular n x n knot grid with this radius instead of clustering.
    #[arg(long)]
    pub regular: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    None,
    Uniform,
    Frechet,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginsArgs {
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub n_bins: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    pub transform: Transform,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub knots: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Let the basis weights be trained as well.
    #[arg(long)]
    pub train_basis: bool,
    /// Full optimizer settings; config file only.
    #[arg(skip)]
    pub train: Option<TrainConfig>,
    /// Starting-value search settings; config file only.
    #[arg(skip)]
    pub init: Option<InitOptions>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulateArgs {
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Field the model was trained on; its replicates are encoded.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    /// Redraw the latent variables from the decoded prior.
    #[arg(long)]
    pub prior: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y] => Ok([x, y]),
        _ => Err("expected x,y".into()),
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Observed (or simulated) field.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub emulation: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 2.0, 5.0])]
    pub chi_h: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.95])]
    pub u: Vec<f64>,
    #[arg(long, default_value_t = CHI_TOL)]
    pub chi_tol: f64,
    #[arg(long, default_value_t = 100)]
    pub qq_quantiles: usize,
    /// Trained model for holdout scoring.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Held-out observations at sites the model did not see.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Simulate this design on the evaluation grid for an ARE curve.
    #[arg(long, value_parser = parse_model)]
    pub are_model: Option<ModelKind>,
    #[arg(long, default_value_t = 2000)]
    pub are_replicates: usize,
    #[arg(long, value_parser = parse_point, default_value = "5,5")]
    pub are_reference: [f64; 2],
    #[arg(long, default_value_t = 0.1)]
    pub grid_spacing: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.95, 0.99])]
    pub are_u: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Failure of a stage, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if matches!(e, Error::Unsupported(_)) {
            EXIT_USAGE
        } else {
            EXIT_DATA
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// A path option that may come from the flags or the config file.
fn need<'a>(p: &'a Option<PathBuf>, name: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| usage(format!("--{} is required", name.replace('_', "-"))))
}

/// Overlays the keys of a JSON config onto the parsed flags. Flags typed on
/// the command line keep their value; keys that are not options of the
/// subcommand are rejected.
fn resolve<T: Serialize + DeserializeOwned + Clone>(
    parsed: &T,
    matches: &ArgMatches,
    flag_ids: &BTreeSet<String>,
    config: Option<&Path>,
) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(parsed.clone());
    };
    let text = io::read_string(path).map_err(|e| usage(e.to_string()))?;
    let given: serde_json::Value = io::from_json_str(path, &text).map_err(|e| usage(e.to_string()))?;
    let serde_json::Value::Object(given) = given else {
        return Err(usage(format!("{}: configuration must be a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(parsed).expect("serializable");
    let obj = merged.as_object_mut().expect("struct");
    for (k, v) in given {
        if !obj.contains_key(&k) {
            return Err(usage(format!("{}: unknown key '{k}'", path.display())));
        }
        let typed = flag_ids.contains(&k) && matches.value_source(&k) == Some(ValueSource::CommandLine);
        if !typed {
            obj.insert(k, v);
        }
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("EXTVAE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("EXTVAE_THREADS must be a positive integer, got '{v}'")))?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the command line `args` (including the program name) and returns the
/// exit code. Messages go to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(matches: &ArgMatches) -> CliResult<()> {
    configure_threads()?;
    let cli = Cli::from_arg_matches(matches).map_err(|e| usage(e.to_string()))?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let ids: BTreeSet<String> = Cli::command()
        .find_subcommand(name)
        .expect("known subcommand")
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .collect();
    macro_rules! go {
        ($s:expr, $f:ident) => {{
            let a = resolve(&$s.args, sub, &ids, $s.config.as_deref())?;
            $f(&a)
        }};
    }
    match cli.command {
        Command::Simulate(s) => go!(s, simulate),
        Command::HoldoutSplit(s) => go!(s, holdout_split),
        Command::Knots(s) => go!(s, knots),
        Command::Margins(s) => go!(s, margins),
        Command::Train(s) => go!(s, train),
        Command::Emulate(s) => go!(s, emulate_cmd),
        Command::Evaluate(s) => go!(s, evaluate),
    }
}

fn manifest<T: Serialize>(stage: &str, seed: Option<u64>, args: &T) -> Manifest {
    Manifest::new(stage, seed, serde_json::to_value(args).expect("serializable"))
}

fn finish(mut m: Manifest, out: &Path, outputs: &[PathBuf]) -> CliResult<()> {
    for p in outputs {
        m.output(p)?;
    }
    io::write_json(&out.join(format!("{}.manifest.json", m.stage)), &m)?;
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    if a.ns == 0 || a.nt == 0 {
        return Err(usage("--ns and --nt must be positive"));
    }
    let design = ModelDesign::with_alpha(a.model, a.alpha)?;
    let mut rng = child_rng(a.seed, "sites", 0);
    let sites = SiteSet::uniform_random(a.ns, DOMAIN.0, DOMAIN.1, &mut rng)?;
    let field = design.simulate(&sites, a.nt, derive_seed(a.seed, "simulate", 0))?;
    let path = a.out.join("field.csv");
    io::write_field(&path, &field)?;
    let mut m = manifest("simulate", Some(a.seed), a);
    m.details = serde_json::to_value(&design).expect("serializable");
    finish(m, &a.out, &[path])
}

pub fn holdout_split(a: &HoldoutArgs) -> CliResult<()> {
    let fp = need(&a.field, "field")?;
    let field = io::read_field(fp, Scale::Raw)?;
    let n = field.n_s();
    if a.n_holdout == 0 || a.n_holdout >= n {
        return Err(usage(format!("--n-holdout must lie in 1..{n}")));
    }
    let mut rng = child_rng(a.seed, "holdout", 0);
    let mut hold: Vec<usize> = sample(&mut rng, n, a.n_holdout).into_vec();
    hold.sort_unstable();
    let held: BTreeSet<usize> = hold.iter().copied().collect();
    let keep: Vec<usize> = (0..n).filter(|j| !held.contains(j)).collect();
    let (tp, hp) = (a.out.join("train.csv"), a.out.join("holdout.csv"));
    io::write_field(&tp, &field.select_sites(&keep)?)?;
    io::write_field(&hp, &field.select_sites(&hold)?)?;
    let mut m = manifest("holdout-split", Some(a.seed), a);
    m.input(fp)?;
    m.details = serde_json::json!({ "train_sites": keep, "holdout_sites": hold });
    finish(m, &a.out, &[tp, hp])
}

pub fn knots(a: &KnotsArgs) -> CliResult<()> {
    let fp = need(&a.field, "field")?;
    let field = io::read_field(fp, Scale::Raw)?;
    let cfg = match (a.regular, a.radius) {
        (Some(n), Some(r)) => KnotConfig::regular(n, DOMAIN.0, DOMAIN.1, r)?,
        (Some(_), None) => return Err(usage("--regular needs --radius")),
        (None, _) => {
            let uniform = to_uniform(&field, &UniformMode::Empirical)?;
            let opts = KnotSelection {
                u_threshold: a.u_threshold,
                merge_fraction: a.merge_fraction,
                k_max: a.k_max,
                target_k: a.target_k,
                seed: a.seed,
            };
            let mut k = select_knots(&uniform, &opts)?;
            if let Some(r) = a.radius {
                k = KnotConfig::new(k.knots().to_vec(), r)?;
            }
            k
        }
    };
    // every training site must be covered
    build_basis(field.sites(), &cfg)?;
    let path = a.out.join("knots.json");
    io::write_json(&path, &cfg)?;
    let mut m = manifest("knots", Some(a.seed), a);
    m.input(fp)?;
    m.details = serde_json::json!({ "n_knots": cfg.len(), "radius": cfg.radius() });
    finish(m, &a.out, &[path])
}

pub fn margins(a: &MarginsArgs) -> CliResult<()> {
    let fp = need(&a.field, "field")?;
    let field = io::read_field(fp, Scale::Raw)?;
    let cuts = cut_points(field.values(), a.n_bins)?;
    let fits = fit_sites(&field);
    let mut rows = Vec::with_capacity(fits.len());
    let mut params = Vec::with_capacity(fits.len());
    for (j, fit) in fits.into_iter().enumerate() {
        let fit = fit.map_err(|e| CliError::from(e).with_context(&format!("site {j}")))?;
        let series = field.site_series(j);
        let gof = gof_statistic(&series, |y| fit.params.cdf(y), &cuts)?;
        rows.push(MarginRow::new(j, &fit.params, &gof));
        params.push(fit.params);
    }
    let table = a.out.join("margins.csv");
    io::write_rows(&table, &rows)?;
    let mut outputs = vec![table];
    match a.transform {
        Transform::None => {}
        Transform::Uniform => {
            let u = to_uniform(&field, &UniformMode::Parametric(params))?;
            let p = a.out.join("uniform.csv");
            io::write_field(&p, &u)?;
            outputs.push(p);
        }
        Transform::Frechet => {
            let mut v = vec![0.0; field.values().len()];
            for (j, p) in params.iter().enumerate() {
                let y = gev_to_frechet(&field.site_series(j), p)
                    .map_err(|e| CliError::from(e).with_context(&format!("site {j}")))?;
                for (t, yt) in y.into_iter().enumerate() {
                    v[t * field.n_s() + j] = yt;
                }
            }
            let p = a.out.join("frechet.csv");
            io::write_field(&p, &field.with_values(v, Scale::Frechet)?)?;
            outputs.push(p);
        }
    }
    let mut m = manifest("margins", None, a);
    m.input(fp)?;
    m.details = serde_json::json!({ "n_bins": a.n_bins, "df": a.n_bins.saturating_sub(GEV_FITTED + 1) });
    finish(m, &a.out, &outputs)
}

impl CliError {
    fn with_context(mut self, ctx: &str) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let (fp, kp) = (need(&a.field, "field")?, need(&a.knots, "knots")?);
    let field = io::read_field(fp, Scale::Raw)?;
    let knots: KnotConfig = io::read_json(kp)?;
    let basis = build_basis(field.sites(), &knots)?;
    let mut cfg = a.train.clone().unwrap_or_default();
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate(field.n_t())?;
    let mut init = a.init.clone().unwrap_or_default();
    init.train_basis |= a.train_basis;
    let state = init_params_with(&field, &basis, &init)?;
    let mut log = Buffer::default();
    let state = train_with_log(&field, &cfg, state, Some(&mut log))?;
    let (sp, lp) = (a.out.join("state.json"), a.out.join("train_log.csv"));
    io::write_bytes(&sp, format!("{}\n", state.to_json()?).as_bytes())?;
    io::write_bytes(&lp, &log.0)?;
    let mut m = manifest("train", Some(cfg.seed), a);
    m.input(fp)?;
    m.input(kp)?;
    m.details = serde_json::json!({
        "train": cfg,
        "init": init,
        "iterations": state.iterations,
        "final_elbo": state.elbo_log.last(),
        "init_report": state.init_report,
    });
    finish(m, &a.out, &[sp, lp])
}

fn read_state(path: &Path) -> CliResult<VaeState> {
    Ok(VaeState::from_json(&io::read_string(path)?).map_err(|e| CliError::from(e).with_context(&path.display().to_string()))?)
}

pub fn emulate_cmd(a: &EmulateArgs) -> CliResult<()> {
    if a.draws == 0 {
        return Err(usage("--draws must be positive"));
    }
    let (sp, fp) = (need(&a.state, "state")?, need(&a.field, "field")?);
    let state = read_state(sp)?;
    let field = io::read_field(fp, Scale::Raw)?;
    let seed = derive_seed(a.seed, "emulate", 0);
    let e = if a.prior {
        emulate_prior(&state, &field, a.draws, seed)?
    } else {
        emulate(&state, &field, a.draws, seed)?
    };
    let path = a.out.join("emulation.csv");
    io::write_field(&path, &e)?;
    let mut m = manifest("emulate", Some(a.seed), a);
    m.input(sp)?;
    m.input(fp)?;
    finish(m, &a.out, &[path])
}

#[derive(Debug, Serialize)]
struct ChiRow {
    source: &'static str,
    h: f64,
    u: f64,
    estimate: f64,
    lower: f64,
    upper: f64,
    trials: u64,
}

fn chi_rows(source: &'static str, c: &ChiCurve) -> Vec<ChiRow> {
    (0..c.u_grid.len())
        .map(|i| ChiRow {
            source,
            h: c.h,
            u: c.u_grid[i],
            estimate: c.estimate[i],
            lower: c.lower[i],
            upper: c.upper[i],
            trials: c.trials[i],
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ChiSummary {
    h: f64,
    u: f64,
    overlap: bool,
}

#[derive(Debug, Serialize)]
struct QqRow {
    p: f64,
    field: f64,
    emulation: f64,
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    site_id: usize,
    crps: f64,
    climatology_crps: f64,
}

#[derive(Debug, Serialize)]
struct MspeRow {
    t: usize,
    mspe: f64,
}

#[derive(Debug, Serialize)]
struct AreRow {
    u: f64,
    are_mean: f64,
    lower: f64,
    upper: f64,
    retained: usize,
}

#[derive(Debug, Default, Serialize)]
struct EvalSummary {
    chi: Vec<ChiSummary>,
    /// Largest |emulation / field - 1| over the QQ probabilities in [0.05, 0.995].
    qq_max_relative_deviation: Option<f64>,
    crps_beats_climatology_fraction: Option<f64>,
    mean_mspe: Option<f64>,
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    if a.qq_quantiles == 0 {
        return Err(usage("--qq-quantiles must be positive"));
    }
    let (fp, ep) = (need(&a.field, "field")?, need(&a.emulation, "emulation")?);
    let field = io::read_field(fp, Scale::Raw)?;
    let emu = io::read_field(ep, Scale::Raw)?;
    if emu.sites() != field.sites() {
        return Err(usage("emulation and field must share their sites"));
    }
    let mut m = manifest("evaluate", Some(a.seed), a);
    m.input(fp)?;
    m.input(ep)?;
    let mut summary = EvalSummary::default();
    let mut outputs = Vec::new();

    let fu = to_uniform(&field, &UniformMode::Empirical)?;
    let eu = to_uniform(&emu, &UniformMode::Empirical)?;
    let mut rows = Vec::new();
    for &h in &a.chi_h {
        let cf = empirical_chi_h(&fu, h, a.chi_tol, &a.u)?;
        let ce = empirical_chi_h(&eu, h, a.chi_tol, &a.u)?;
        for i in 0..a.u.len() {
            summary.chi.push(ChiSummary {
                h,
                u: a.u[i],
                overlap: cf.lower[i] <= ce.upper[i] && ce.lower[i] <= cf.upper[i],
            });
        }
        rows.extend(chi_rows("field", &cf));
        rows.extend(chi_rows("emulation", &ce));
    }
    let p = a.out.join("chi.csv");
    io::write_rows(&p, &rows)?;
    outputs.push(p);

    let n = a.qq_quantiles;
    let probs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let qq = qq_pairs_at(field.values(), emu.values(), &probs)?;
    summary.qq_max_relative_deviation = probs
        .iter()
        .zip(&qq)
        .filter(|(p, _)| (0.05..=0.995).contains(*p))
        .map(|(_, (f, e))| (e / f - 1.0).abs())
        .reduce(f64::max);
    let rows: Vec<QqRow> = probs
        .iter()
        .zip(qq)
        .map(|(&p, (f, e))| QqRow { p, field: f, emulation: e })
        .collect();
    let p = a.out.join("qq.csv");
    io::write_rows(&p, &rows)?;
    outputs.push(p);

    match (&a.state, &a.holdout) {
        (Some(sp), Some(hp)) => {
            let state = read_state(sp)?;
            let truth = io::read_field(hp, Scale::Raw)?;
            m.input(sp)?;
            m.input(hp)?;
            let pred = predict_holdout(&state, truth.sites(), &field, derive_seed(a.seed, "holdout", 0))?;
            let scores = crps_table(&pred, &truth)?;
            let clim = climatology_crps(&truth)?;
            let wins = scores.crps.iter().zip(&clim).filter(|(c, b)| c < b).count();
            summary.crps_beats_climatology_fraction = Some(wins as f64 / clim.len() as f64);
            summary.mean_mspe = Some(scores.mspe.iter().sum::<f64>() / scores.mspe.len() as f64);
            let rows: Vec<ScoreRow> = (0..clim.len())
                .map(|i| ScoreRow {
                    site_id: i,
                    crps: scores.crps[i],
                    climatology_crps: clim[i],
                })
                .collect();
            let p = a.out.join("scores.csv");
            io::write_rows(&p, &rows)?;
            outputs.push(p);
            let rows: Vec<MspeRow> = scores.mspe.iter().enumerate().map(|(t, &mspe)| MspeRow { t, mspe }).collect();
            let p = a.out.join("mspe.csv");
            io::write_rows(&p, &rows)?;
            outputs.push(p);
        }
        (None, None) => {}
        _ => return Err(usage("--state and --holdout go together")),
    }

    if let Some(kind) = a.are_model {
        let grid = GridSpec {
            lo: DOMAIN.0,
            hi: DOMAIN.1,
            spacing: a.grid_spacing,
        };
        let design = ModelDesign::new(kind)?;
        let seed = derive_seed(a.seed, "are", 0);
        let c = are_curve(|s| design.simulate(s, a.are_replicates, seed), a.are_reference, &a.are_u, &grid)?;
        let rows: Vec<AreRow> = (0..c.u_grid.len())
            .map(|i| AreRow {
                u: c.u_grid[i],
                are_mean: c.are_mean[i],
                lower: c.lower[i],
                upper: c.upper[i],
                retained: c.retained[i],
            })
            .collect();
        let p = a.out.join("are.csv");
        io::write_rows(&p, &rows)?;
        outputs.push(p);
    }

    let p = a.out.join("summary.json");
    io::write_json(&p, &summary)?;
    outputs.push(p);
    finish(m, &a.out, &outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["extvae", "simulate", "--model", "VI"]), EXIT_USAGE);
        assert_eq!(run(["extvae", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["extvae", "simulate", "--ns", "0"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("nope.csv");
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["extvae", "knots", "--field", f.to_str().unwrap(), "--out", out]), EXIT_DATA);
    }

    fn sim_args(out: &Path) -> SimulateArgs {
        SimulateArgs {
            model: ModelKind::II,
            ns: 10,
            nt: 3,
            alpha: 0.5,
            seed: 1,
            out: out.into(),
        }
    }

    #[test]
    fn config_overlays_defaults_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        let out = dir.path().join("o");
        io::write_bytes(&cfg, format!("{{\"ns\": 12, \"nt\": 2, \"model\": \"IV\", \"out\": {:?}}}", out).as_bytes()).unwrap();
        let code = run(["extvae", "simulate", "--config", cfg.to_str().unwrap(), "--nt", "4"]);
        assert_eq!(code, 0);
        let f = io::read_field(&out.join("field.csv"), Scale::Raw).unwrap();
        // ns from the file, nt from the flag
        assert_eq!((f.n_s(), f.n_t()), (12, 4));
        let m: Manifest = io::read_json(&out.join("simulate.manifest.json")).unwrap();
        assert_eq!(m.config["model"], "IV");

        io::write_bytes(&cfg, b"{\"ns\": 12, \"bogus\": 1}").unwrap();
        assert_eq!(run(["extvae", "simulate", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
        io::write_bytes(&cfg, b"{\"ns\": \"many\"}").unwrap();
        assert_eq!(run(["extvae", "simulate", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
    }

    #[test]
    fn train_config_accepts_nested_optimizer_settings() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        io::write_bytes(&cfg, b"{\"field\": \"f.csv\", \"knots\": \"k.json\", \"train\": {\"max_iters\": 3, \"oops\": 1}}").unwrap();
        assert_eq!(run(["extvae", "train", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
        // well-formed config: paths come from the file, so the failure is the missing data
        io::write_bytes(&cfg, b"{\"field\": \"/nonexistent/f.csv\", \"knots\": \"k.json\", \"train\": {\"max_iters\": 3}}").unwrap();
        assert_eq!(run(["extvae", "train", "--config", cfg.to_str().unwrap()]), EXIT_DATA);
        assert_eq!(run(["extvae", "train"]), EXIT_USAGE);
    }

    #[test]
    fn simulate_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        simulate(&sim_args(&a)).unwrap();
        simulate(&sim_args(&b)).unwrap();
        let read = |p: &Path| std::fs::read(p.join("field.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        let m: Manifest = io::read_json(&a.join("simulate.manifest.json")).unwrap();
        assert_eq!(m.outputs[0].sha256, io::sha256_file(&a.join("field.csv")).unwrap());
        assert_eq!(m.details["kind"], "II");
    }

    #[test]
    fn holdout_split_partitions_sites() {
        let dir = tempfile::tempdir().unwrap();
        simulate(&sim_args(dir.path())).unwrap();
        let args = HoldoutArgs {
            field: Some(dir.path().join("field.csv")),
            n_holdout: 4,
            seed: 2,
            out: dir.path().into(),
        };
        holdout_split(&args).unwrap();
        let t = io::read_field(&dir.path().join("train.csv"), Scale::Raw).unwrap();
        let h = io::read_field(&dir.path().join("holdout.csv"), Scale::Raw).unwrap();
        assert_eq!((t.n_s(), h.n_s(), t.n_t()), (6, 4, 3));
        let all = io::read_field(args.field.as_deref().unwrap(), Scale::Raw).unwrap();
        let mut coords: Vec<_> = t.sites().coords().iter().chain(h.sites().coords()).copied().collect();
        let mut want = all.sites().coords().to_vec();
        coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(coords, want);
        assert_eq!(holdout_split(&HoldoutArgs { n_holdout: 10, ..args }).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn error_codes_follow_error_kind() {
        assert_eq!(CliError::from(Error::Numerical("x".into())).code, EXIT_NUMERICAL);
        assert_eq!(CliError::from(Error::Fit("x".into())).code, EXIT_NUMERICAL);
        assert_eq!(CliError::from(Error::Shape("x".into())).code, EXIT_DATA);
        assert_eq!(CliError::from(Error::Unsupported("x".into())).code, EXIT_USAGE);
    }
}
