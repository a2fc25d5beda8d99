use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use chaosrough::kernels::{brownian_kernel, brownian_product, dyadic_grid, fbm_kernel, linear_kernel, KernelPath};
use chaosrough::SymTensor;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LiftConverge,
    KlConverge,
    Assumptions,
    RdeVerify,
    MalliavinVerify,
    GreedyTail,
    Translation,
    Rate,
    Scaling,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::LiftConverge => "lift-converge",
            Self::KlConverge => "kl-converge",
            Self::Assumptions => "assumptions",
            Self::RdeVerify => "rde-verify",
            Self::MalliavinVerify => "malliavin-verify",
            Self::GreedyTail => "greedy-tail",
            Self::Translation => "translation",
            Self::Rate => "rate",
            Self::Scaling => "scaling",
        }
    }

    /// Experiments whose statistics are built on `p`-variation of a level-2 lift.
    fn uses_p(self) -> bool {
        matches!(self, Self::LiftConverge | Self::GreedyTail | Self::Translation | Self::Scaling)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KernelName {
    /// Brownian motion on the dyadic grid, `f_t = 1_{[0,t]}`.
    Brownian,
    /// Symmetrized product of `order` independent Brownian factors.
    Product,
    /// Fractional Brownian motion via a Cholesky factor.
    Fbm,
    /// `t·e₀⊗e₀`, a second-chaos kernel with a one-sided range.
    Square,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub name: KernelName,
    /// Chaos order; 2 for `square`, 1 otherwise unless set.
    pub order: Option<usize>,
    /// Dyadic grid level; the grid has `2^level + 1` nodes.
    pub level: u32,
    /// Cameron–Martin dimension; `square` only (default 1), the grid fixes it otherwise.
    pub dim: Option<usize>,
    pub hurst: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { name: KernelName::Brownian, order: None, level: 4, dim: None, hurst: 0.7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Process,
    Enhanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    Covariance,
    ProductFactors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fields {
    Linear,
    Tanh,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSpec {
    /// Target `x_t = scale · t^power`.
    pub scale: f64,
    /// Defaults to the kernel order for `product`, 1 otherwise.
    pub power: Option<f64>,
    pub starts: usize,
    pub tolerance: f64,
}

impl Default for RateSpec {
    fn default() -> Self {
        Self { scale: 1.0, power: None, starts: 32, tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdeSpec {
    pub fields: Fields,
    pub state_dim: usize,
    pub driver_dim: usize,
    pub width: usize,
    pub field_scale: f64,
    pub field_seed: u64,
    /// Initial condition; zeros padded to `state_dim` when shorter.
    pub y0: Vec<f64>,
    /// Scheme substeps per grid cell for the Jacobian and Malliavin checks.
    pub substeps: usize,
    /// Substeps for the scalar exponential check, which is cheap.
    pub exp_substeps: usize,
    pub fd_eps: f64,
    /// Also check the second Malliavin layer against second differences.
    pub second: bool,
    pub exp_tolerance: f64,
    pub jacobian_tolerance: f64,
    pub malliavin_tolerance: f64,
}

impl Default for RdeSpec {
    fn default() -> Self {
        Self {
            fields: Fields::Tanh,
            state_dim: 2,
            driver_dim: 2,
            width: 3,
            field_scale: 1.0,
            field_seed: 3,
            y0: vec![0.5, -0.2],
            substeps: 1,
            exp_substeps: 1024,
            fd_eps: 1e-4,
            second: false,
            exp_tolerance: 1e-5,
            jacobian_tolerance: 1e-3,
            malliavin_tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: Option<Experiment>,
    pub kernel: KernelSpec,
    pub p: f64,
    pub rho: f64,
    pub alpha: f64,
    /// Dilation factors for `scaling`.
    pub eps: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Independent copies of the process driving the lift.
    pub components: usize,
    /// Coarse dyadic levels for `lift-converge`; default `1..level`.
    pub levels: Vec<u32>,
    /// Translation sizes for `translation`.
    pub r: Vec<f64>,
    /// Largest threshold in the `greedy-tail` survival table.
    pub m_max: usize,
    pub target: Target,
    pub control: Control,
    /// SE multiple for Monte Carlo comparisons.
    pub se_margin: f64,
    /// Slack added to the translation growth slope limit.
    pub slope_slack: f64,
    pub rate: RateSpec,
    pub rde: RdeSpec,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: None,
            kernel: KernelSpec::default(),
            p: 2.5,
            rho: 1.0,
            alpha: 0.25,
            eps: vec![1.0, 0.5, 0.25],
            samples: 200,
            seed: 0,
            components: 1,
            levels: Vec::new(),
            r: vec![2.0, 4.0, 8.0, 16.0],
            m_max: 40,
            target: Target::Enhanced,
            control: Control::Covariance,
            se_margin: 2.0,
            slope_slack: 0.3,
            rate: RateSpec::default(),
            rde: RdeSpec::default(),
            out: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fills derived defaults and rejects parameters outside their domains.
    pub fn resolve(mut self, experiment: Experiment) -> Result<Self> {
        if let Some(e) = self.experiment {
            ensure!(e == experiment, "config is for `{}` but `{}` was requested", e.name(), experiment.name());
        }
        self.experiment = Some(experiment);
        let k = &mut self.kernel;
        ensure!((1..=12).contains(&k.level), "kernel.level must be in 1..=12");
        let order = *k.order.get_or_insert(if k.name == KernelName::Square { 2 } else { 1 });
        match k.name {
            KernelName::Brownian | KernelName::Fbm => ensure!(order == 1, "{:?} kernels have order 1", k.name),
            KernelName::Square => ensure!(order == 2, "the square kernel has order 2"),
            KernelName::Product => ensure!((1..=3).contains(&order), "product order must be 1, 2 or 3"),
        }
        if k.name == KernelName::Fbm {
            ensure!(k.hurst > 0.0 && k.hurst < 1.0, "hurst must be in (0, 1)");
        }
        if let Some(d) = k.dim {
            ensure!(k.name == KernelName::Square, "kernel.dim applies to the square kernel only");
            ensure!(d >= 1, "kernel.dim must be positive");
        }
        ensure!(self.rho >= 1.0 && self.rho < 1.5, "rho must be in [1, 3/2), got {}", self.rho);
        if experiment.uses_p() {
            ensure!(
                self.p > 2.0 * self.rho && self.p < 3.0,
                "p must satisfy 2·rho < p < 3, got p = {} with rho = {}",
                self.p,
                self.rho
            );
        }
        ensure!(self.samples >= 1, "samples must be positive");
        ensure!(self.components >= 1, "components must be positive");
        ensure!(self.alpha > 0.0, "alpha must be positive");
        ensure!(self.se_margin > 0.0, "se_margin must be positive");
        ensure!(!self.eps.is_empty() && self.eps.iter().all(|e| *e > 0.0), "eps must be positive");
        ensure!(self.r.len() >= 2 && self.r.iter().all(|r| *r > 0.0), "r needs at least two positive sizes");
        if self.levels.is_empty() {
            self.levels = (1..self.kernel.level).collect();
        }
        ensure!(self.levels.iter().all(|l| *l >= 1 && *l < self.kernel.level), "levels must lie in 1..kernel.level");
        if experiment == Experiment::LiftConverge {
            ensure!(self.levels.len() >= 2, "lift-converge needs at least two coarse levels");
            ensure!(self.samples >= 2, "lift-converge needs at least two samples");
        }
        let rde = &mut self.rde;
        ensure!(
            rde.substeps >= 1 && rde.exp_substeps >= 1 && rde.fd_eps > 0.0,
            "rde substeps and rde.fd_eps must be positive"
        );
        ensure!(rde.state_dim >= 1 && rde.driver_dim >= 1 && rde.width >= 1, "rde dimensions must be positive");
        ensure!(rde.y0.len() <= rde.state_dim, "rde.y0 is longer than rde.state_dim");
        rde.y0.resize(rde.state_dim, 0.0);
        if rde.fields == Fields::Linear {
            ensure!(rde.state_dim == 1 && rde.driver_dim == 1, "linear fields are the scalar dY = Y dX");
        }
        ensure!(self.rate.starts >= 1 && self.rate.tolerance > 0.0, "rate.starts and rate.tolerance must be positive");
        if self.rate.power.is_none() {
            self.rate.power = Some(if self.kernel.name == KernelName::Product { order as f64 } else { 1.0 });
        }
        if let Some(t) = self.threads {
            ensure!(t >= 1, "threads must be positive");
        }
        Ok(self)
    }

    pub fn build_kernel(&self) -> Result<KernelPath> {
        let k = &self.kernel;
        let grid = dyadic_grid(k.level);
        let cells = grid.len() - 1;
        let path = match k.name {
            KernelName::Brownian => brownian_kernel(cells, &grid)?,
            KernelName::Product => brownian_product(k.order.unwrap_or(1), &grid)?,
            KernelName::Fbm => fbm_kernel(k.hurst, &grid)?,
            KernelName::Square => linear_kernel(&SymTensor::basis(&[0, 0], k.dim.unwrap_or(1))?, &grid)?,
        };
        Ok(path)
    }
}
