//! Subcommand bodies and output bookkeeping.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ttdioc_core::experiments::{
    benchmark_dataset, fig1_csv, fig2_csv, fig3_csv, fig3_row, revalidate, sweep_csv, sweep_e,
    sweep_n, sweep_ts, Method,
};
use ttdioc_core::focp::{self, FocpProblem};
use ttdioc_core::kktioc::{sp_ioc, ttd_ioc};
use ttdioc_core::slidingwindow::{kf_estimate, nonlinearity_sweep};
use ttdioc_core::{
    ConstraintSet, Dataset, FeatureVector, IocContext, IocSolution, TruthTheta,
};

use crate::config::{ConfigError, RunConfig};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Ts,
    N,
    E,
    Order,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: ttdioc_core::Error,
    },
    #[error(transparent)]
    Solver(#[from] ttdioc_core::Error),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Input { .. } => 1,
            CliError::Solver(_) | CliError::Output { .. } => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Resolved configuration plus the output directory of one run.
pub struct Context {
    command: &'static str,
    pub cfg: RunConfig,
    pub out: PathBuf,
    started: Instant,
    outputs: RefCell<Vec<String>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    succeeded: bool,
    outputs: Vec<String>,
    duration_seconds: f64,
    config: &'a RunConfig,
}

impl Context {
    pub fn open(
        command: &'static str,
        config: &Path,
        out: Option<PathBuf>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut cfg = RunConfig::load(config)?;
        if let Some(seed) = seed {
            cfg.data.seed = seed;
        }
        let out = out
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        cfg.out_dir = Some(out.clone());
        fs::create_dir_all(&out).map_err(|source| CliError::Output {
            path: out.clone(),
            source,
        })?;
        log::info!("{command}: writing to {}", out.display());
        Ok(Self {
            command,
            cfg,
            out,
            started: Instant::now(),
            outputs: RefCell::new(Vec::new()),
        })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Output { path, source })?;
        self.outputs.borrow_mut().push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(ttdioc_core::Error::from)?;
        self.write(name, &text)
    }

    /// Writes the manifest and the resolved config. Called after success and
    /// failure alike.
    pub fn finish(&self, succeeded: bool) -> Result<()> {
        let manifest = Manifest {
            command: self.command,
            version: env!("TTDIOC_VERSION"),
            succeeded,
            outputs: self.outputs.borrow().clone(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            config: &self.cfg,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(ttdioc_core::Error::from)?;
        let path = self.out.join("manifest.json");
        fs::write(&path, text).map_err(|source| CliError::Output { path, source })?;
        let path = self.out.join("config.toml");
        fs::write(&path, self.cfg.to_toml()?).map_err(|source| CliError::Output { path, source })
    }

    fn context(&self) -> Result<IocContext> {
        Ok(self.cfg.plan().context()?)
    }

    fn dataset(&self) -> Result<Dataset> {
        match &self.cfg.dataset {
            Some(path) => Dataset::load(path).map_err(|source| CliError::Input {
                path: path.clone(),
                source,
            }),
            None => Ok(benchmark_dataset(
                &self.cfg.plan(),
                self.cfg.profile,
                &self.cfg.forward,
            )?),
        }
    }

    fn fig3(&self, method: Method, e_v: f64) -> Result<()> {
        let row = fig3_row(self.cfg.system, self.cfg.profile, method, e_v);
        self.write("fig3.csv", &fig3_csv(&[row]))
    }
}

pub fn generate(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset()?;
    ctx.write("dataset.json", &ds.to_json()?)
}

pub fn solve_forward(ctx: &Context) -> Result<()> {
    let plan = ctx.cfg.plan();
    let model = plan.model()?;
    let ic = plan
        .initial_conditions()
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Usage("the plan has no initial states".into()))?;
    let truth = TruthTheta::new(ctx.cfg.system, ctx.cfg.profile);
    let problem = FocpProblem {
        features: FeatureVector::for_system(ctx.cfg.system),
        theta: &truth,
        constraints: ConstraintSet::none(),
        xn: vec![0.0; model.state_dim()],
        x0: ic.state,
        t0: ic.start_step as f64 * plan.ts,
        horizon: plan.horizon,
        model,
    };
    let sol = focp::solve_forward(&problem, &ctx.cfg.forward)?;
    ctx.write_json("forward.json", &sol)
}

pub fn spioc(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset()?;
    let anchor = ctx.cfg.ttd.anchor_column()[0];
    let sol = sp_ioc(&ctx.context()?, &ds, anchor, ctx.cfg.ttd.nonneg_theta, &ctx.cfg.forward)?;
    ctx.write("iocsolution.json", &sol.to_json()?)?;
    ctx.fig3(Method::Spioc, sol.validation_error)
}

pub fn ttd(ctx: &Context) -> Result<()> {
    let sol = train(ctx)?;
    ctx.fig3(Method::Ttd, sol.validation_error)
}

fn train(ctx: &Context) -> Result<IocSolution> {
    let ds = ctx.dataset()?;
    let sol = ttd_ioc(&ctx.context()?, &ds, &ctx.cfg.ttd, &ctx.cfg.forward)?;
    ctx.write("iocsolution.json", &sol.to_json()?)?;
    Ok(sol)
}

pub fn kf(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset()?;
    let context = ctx.context()?;
    let est = kf_estimate(&context, &ds.train, &ctx.cfg.kf)?;
    ctx.write_json("kf_estimate.json", &est)?;
    let (_, report) = revalidate(&est, &context, &ds.validation, &ctx.cfg.forward)?;
    ctx.write_json("validation.json", &report)
}

/// The training value joins the targets so each sweep file carries its
/// reference point.
fn with_reference<T: PartialOrd + Copy>(targets: &[T], reference: T) -> Vec<T> {
    let mut all = targets.to_vec();
    if !all.contains(&reference) {
        all.push(reference);
    }
    all.sort_by(|a, b| a.partial_cmp(b).expect("sweep targets are comparable"));
    all
}

pub fn sweep(ctx: &Context, kind: SweepKind) -> Result<()> {
    let cfg = &ctx.cfg;
    let plan = cfg.plan();
    match kind {
        SweepKind::Ts => {
            let sol = train(ctx)?;
            let targets = with_reference(&cfg.sweep.ts, plan.ts);
            let points = sweep_ts(&sol.model, &plan, cfg.profile, &targets, &cfg.forward)?;
            ctx.write("fig4.csv", &sweep_csv("Ts", cfg.profile, &points))
        }
        SweepKind::N => {
            let sol = train(ctx)?;
            let targets = with_reference(&cfg.sweep.horizons, plan.horizon);
            let points = sweep_n(&sol.model, &plan, cfg.profile, &targets, &cfg.forward)?;
            ctx.write("fig5.csv", &sweep_csv("N", cfg.profile, &points))
        }
        SweepKind::E => {
            let ds = ctx.dataset()?;
            let points = sweep_e(&ds, &ctx.context()?, &cfg.ttd, &cfg.sweep.basis_counts, &cfg.forward)?;
            ctx.write_json("basis_sweep.json", &points)?;
            ctx.write("fig2.csv", &fig2_csv(&points))
        }
        SweepKind::Order => {
            let points = nonlinearity_sweep(&cfg.sweep.orders, &plan, &cfg.kf, &cfg.forward)?;
            ctx.write_json("order_sweep.json", &points)?;
            let pairs: Vec<(u32, f64)> = points.iter().map(|p| (p.order, p.report.e_v)).collect();
            ctx.write("fig1.csv", &fig1_csv(&pairs))
        }
    }
}

pub fn validate(ctx: &Context, model: &Path) -> Result<()> {
    let sol = IocSolution::load(model).map_err(|source| CliError::Input {
        path: model.to_path_buf(),
        source,
    })?;
    let ds = ctx.dataset()?;
    let (_, report) = revalidate(&sol.model, &ctx.context()?, &ds.validation, &ctx.cfg.forward)?;
    ctx.write_json("validation.json", &report)
}
