//! Simulation configuration: presets, a flat `key = value` file format and
//! overrides.
//!
//! ```text
//! # comments start with '#'
//! preset = standard-2d
//! grid.extents = 64, 64
//! scheme.eps = 1e-3
//! ```
//!
//! Keys are applied on top of the chosen preset in file order. Unknown keys
//! are errors.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::forcing::{Forcing, SpaceProfile, TimeProfile};
use crate::grid::Grid;
use crate::mixture::MixtureSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    HeatReduction,
    TernaryDuncanToor,
    Standard2d,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::HeatReduction, Preset::TernaryDuncanToor, Preset::Standard2d];

    pub fn name(self) -> &'static str {
        match self {
            Preset::HeatReduction => "heat-reduction",
            Preset::TernaryDuncanToor => "ternary-duncan-toor",
            Preset::Standard2d => "standard-2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// Initial densities, as full N+1 vectors before the α⁰ lift.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialDensity {
    /// `ρ₁ = 1/(N+1) + A cos(πx)`, `ρ_{N+1} = 1/(N+1) − A cos(πx)`, others uniform.
    Cosine { amplitude: f64 },
    /// Two ternary reservoirs joined by a `tanh` layer of the given width at
    /// `x = 1/2`: molar fractions (½, ½, 0) on the left, (0, ½, ½) on the right.
    Layers { width: f64 },
    /// Uniform plus a Gaussian bump moving mass from the other species into
    /// the first.
    Bump { amplitude: f64, center: [f64; 2], width: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialVelocity {
    Zero,
    /// `u = A (∂_y ψ, −∂_x ψ)` with `ψ = sin²(πx) sin²(πy)/π`, differentiated
    /// with the discrete Dirichlet derivative so that `div u = 0` exactly.
    Vortex { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub preset: Preset,
    pub masses: Vec<f64>,
    /// Upper triangle of `D`, row by row.
    pub diffusivities: Vec<f64>,
    pub extents: Vec<usize>,
    pub lengths: Vec<f64>,
    pub t_final: f64,
    pub steps: usize,
    pub eps: f64,
    /// `None` means `λ = τ`.
    pub lambda: Option<f64>,
    pub alpha0: f64,
    pub density: InitialDensity,
    pub velocity: InitialVelocity,
    pub forcing: Forcing,
    pub flow_tol: f64,
    pub newton_tol: f64,
    pub max_picard: usize,
    pub max_newton: usize,
    pub output_dir: Option<PathBuf>,
    /// Snapshot cadence in steps; 0 disables snapshots.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            masses: vec![1.0, 1.0],
            diffusivities: vec![1.0],
            extents: vec![64],
            lengths: vec![1.0],
            t_final: 0.1,
            steps: 100,
            eps: 1e-2,
            lambda: None,
            alpha0: 1e-6,
            density: InitialDensity::Cosine { amplitude: 0.1 },
            velocity: InitialVelocity::Zero,
            forcing: Forcing::Zero,
            flow_tol: 1e-10,
            newton_tol: 1e-11,
            max_picard: 50,
            max_newton: 50,
            output_dir: None,
            snapshot_every: 0,
            seed: 0,
        };
        match preset {
            Preset::HeatReduction => base,
            Preset::TernaryDuncanToor => Self {
                // H₂, N₂, CO₂
                masses: vec![2.016, 28.014, 44.01],
                diffusivities: vec![0.833, 0.680, 0.168],
                t_final: 0.05,
                steps: 200,
                density: InitialDensity::Layers { width: 0.05 },
                ..base
            },
            Preset::Standard2d => Self {
                masses: vec![1.0, 2.0, 3.0],
                diffusivities: vec![0.5, 0.3, 0.2],
                extents: vec![64, 64],
                lengths: vec![1.0, 1.0],
                density: InitialDensity::Bump {
                    amplitude: 0.2,
                    center: [0.35, 0.5],
                    width: 0.1,
                },
                velocity: InitialVelocity::Vortex { amplitude: 1.0 },
                ..base
            },
        }
    }

    pub fn tau(&self) -> f64 {
        self.t_final / self.steps.max(1) as f64
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.tau())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.extents, &self.lengths)
    }

    pub fn mixture(&self) -> Result<MixtureSpec> {
        MixtureSpec::from_upper_triangle(self.masses.clone(), &self.diffusivities)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.mixture()?;
        let positive = [
            ("scheme.t_final", self.t_final),
            ("scheme.eps", self.eps),
            ("scheme.alpha0", self.alpha0),
            ("scheme.flow_tol", self.flow_tol),
            ("scheme.newton_tol", self.newton_tol),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{key} = {v} must be positive")));
            }
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("scheme.lambda = {l} must be nonnegative")));
            }
        }
        if matches!(self.density, InitialDensity::Layers { .. }) && self.masses.len() != 3 {
            return Err(Error::Config("layered initial data needs three species".into()));
        }
        Ok(())
    }

    /// Parses a config file on top of its preset (`preset = ...`, default
    /// `standard-2d`).
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => Preset::parse(v)?,
            None => Preset::Standard2d,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "preset" {
            return Err(Error::Config("the preset cannot be overridden".into()));
        }
        self.set(k, v)?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || parse_f64(key, value);
        match key {
            "mixture.masses" => self.masses = parse_list(key, value)?,
            "mixture.diffusivities" => self.diffusivities = parse_list(key, value)?,
            "grid.extents" => self.extents = parse_list(key, value)?,
            "grid.lengths" => self.lengths = parse_list(key, value)?,
            "scheme.t_final" => self.t_final = num()?,
            "scheme.steps" => self.steps = parse_int(key, value)?,
            "scheme.eps" => self.eps = num()?,
            "scheme.lambda" => self.lambda = if value == "tau" { None } else { Some(num()?) },
            "scheme.alpha0" => self.alpha0 = num()?,
            "scheme.flow_tol" => self.flow_tol = num()?,
            "scheme.newton_tol" => self.newton_tol = num()?,
            "scheme.max_picard" => self.max_picard = parse_int(key, value)?,
            "scheme.max_newton" => self.max_newton = parse_int(key, value)?,
            "initial.density" => {
                self.density = match value {
                    "cosine" => InitialDensity::Cosine { amplitude: 0.1 },
                    "layers" => InitialDensity::Layers { width: 0.05 },
                    "bump" => InitialDensity::Bump { amplitude: 0.2, center: [0.35, 0.5], width: 0.1 },
                    _ => return Err(bad(key, value)),
                }
            }
            "initial.amplitude" => match &mut self.density {
                InitialDensity::Cosine { amplitude } | InitialDensity::Bump { amplitude, .. } => *amplitude = num()?,
                InitialDensity::Layers { .. } => return Err(Error::Config("layers have no amplitude".into())),
            },
            "initial.width" => match &mut self.density {
                InitialDensity::Layers { width } | InitialDensity::Bump { width, .. } => *width = num()?,
                InitialDensity::Cosine { .. } => return Err(Error::Config("cosine data has no width".into())),
            },
            "initial.center" => match &mut self.density {
                InitialDensity::Bump { center, .. } => {
                    let c: Vec<f64> = parse_list(key, value)?;
                    *center = match c[..] {
                        [x] => [x, 0.0],
                        [x, y] => [x, y],
                        _ => return Err(bad(key, value)),
                    };
                }
                _ => return Err(Error::Config("only bump data has a center".into())),
            },
            "initial.velocity" => {
                self.velocity = match value {
                    "zero" => InitialVelocity::Zero,
                    "vortex" => InitialVelocity::Vortex { amplitude: 1.0 },
                    _ => return Err(bad(key, value)),
                }
            }
            "initial.velocity_amplitude" => match &mut self.velocity {
                InitialVelocity::Vortex { amplitude } => *amplitude = num()?,
                InitialVelocity::Zero => return Err(Error::Config("zero velocity has no amplitude".into())),
            },
            "forcing.kind" => {
                let space = SpaceProfile::Vortex { amplitude: 1.0 };
                self.forcing = match value {
                    "zero" => Forcing::Zero,
                    "vortex" => Forcing::Constant(space),
                    "sine-vortex" => Forcing::Separable { time: TimeProfile::Sine { omega: 2.0 * PI }, space },
                    "pulse-vortex" => Forcing::Separable {
                        time: TimeProfile::Gaussian { center: 0.05, width: 0.02 },
                        space,
                    },
                    "ramp-vortex" => Forcing::Separable { time: TimeProfile::Linear, space },
                    _ => return Err(bad(key, value)),
                }
            }
            "forcing.amplitude" => match &mut self.forcing {
                Forcing::Constant(SpaceProfile::Vortex { amplitude })
                | Forcing::Separable { space: SpaceProfile::Vortex { amplitude }, .. } => *amplitude = num()?,
                _ => return Err(Error::Config("forcing.amplitude needs a vortex forcing".into())),
            },
            "forcing.omega" => match &mut self.forcing {
                Forcing::Separable { time: TimeProfile::Sine { omega }, .. } => *omega = num()?,
                _ => return Err(Error::Config("forcing.omega needs sine-vortex".into())),
            },
            "forcing.center" | "forcing.width" => match &mut self.forcing {
                Forcing::Separable { time: TimeProfile::Gaussian { center, width }, .. } => {
                    *(if key == "forcing.center" { center } else { width }) = num()?
                }
                _ => return Err(Error::Config(format!("{key} needs pulse-vortex"))),
            },
            "output.dir" => self.output_dir = Some(PathBuf::from(value)),
            "output.snapshot_every" => self.snapshot_every = parse_int(key, value)?,
            "seed" => self.seed = parse_int(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Full config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.name().into());
        kv("seed", self.seed.to_string());
        kv("mixture.masses", list(&self.masses));
        kv("mixture.diffusivities", list(&self.diffusivities));
        kv(
            "grid.extents",
            self.extents.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", "),
        );
        kv("grid.lengths", list(&self.lengths));
        kv("scheme.t_final", self.t_final.to_string());
        kv("scheme.steps", self.steps.to_string());
        kv("scheme.eps", self.eps.to_string());
        kv("scheme.lambda", self.lambda.map_or("tau".into(), |l| l.to_string()));
        kv("scheme.alpha0", self.alpha0.to_string());
        kv("scheme.flow_tol", self.flow_tol.to_string());
        kv("scheme.newton_tol", self.newton_tol.to_string());
        kv("scheme.max_picard", self.max_picard.to_string());
        kv("scheme.max_newton", self.max_newton.to_string());
        match &self.density {
            InitialDensity::Cosine { amplitude } => {
                kv("initial.density", "cosine".into());
                kv("initial.amplitude", amplitude.to_string());
            }
            InitialDensity::Layers { width } => {
                kv("initial.density", "layers".into());
                kv("initial.width", width.to_string());
            }
            InitialDensity::Bump { amplitude, center, width } => {
                kv("initial.density", "bump".into());
                kv("initial.amplitude", amplitude.to_string());
                kv("initial.center", list(center));
                kv("initial.width", width.to_string());
            }
        }
        match &self.velocity {
            InitialVelocity::Zero => kv("initial.velocity", "zero".into()),
            InitialVelocity::Vortex { amplitude } => {
                kv("initial.velocity", "vortex".into());
                kv("initial.velocity_amplitude", amplitude.to_string());
            }
        }
        match &self.forcing {
            Forcing::Zero => kv("forcing.kind", "zero".into()),
            Forcing::Constant(SpaceProfile::Vortex { amplitude }) => {
                kv("forcing.kind", "vortex".into());
                kv("forcing.amplitude", amplitude.to_string());
            }
            Forcing::Separable { time, space: SpaceProfile::Vortex { amplitude } } => {
                match time {
                    TimeProfile::Linear => kv("forcing.kind", "ramp-vortex".into()),
                    TimeProfile::Sine { omega } => {
                        kv("forcing.kind", "sine-vortex".into());
                        kv("forcing.omega", omega.to_string());
                    }
                    TimeProfile::Gaussian { center, width } => {
                        kv("forcing.kind", "pulse-vortex".into());
                        kv("forcing.center", center.to_string());
                        kv("forcing.width", width.to_string());
                    }
                }
                kv("forcing.amplitude", amplitude.to_string());
            }
            // uniform forces are only built programmatically
            Forcing::Constant(SpaceProfile::Uniform { .. })
            | Forcing::Separable { space: SpaceProfile::Uniform { .. }, .. } => {}
        }
        if let Some(dir) = &self.output_dir {
            kv("output.dir", dir.display().to_string());
        }
        kv("output.snapshot_every", self.snapshot_every.to_string());
        s
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_int<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad(key, value)))
        .collect::<Result<_>>()?;
    Ok(items)
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_roundtrip() {
        for p in Preset::ALL {
            let cfg = SimConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(SimConfig::parse(&cfg.to_text()).unwrap(), cfg, "{}", p.name());
        }
    }

    #[test]
    fn file_keys_override_preset() {
        let cfg = SimConfig::parse(
            "# heat\npreset = heat-reduction\ngrid.extents = 32\nscheme.steps = 10 # inline\nscheme.lambda = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::HeatReduction);
        assert_eq!(cfg.extents, vec![32]);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.lambda(), 0.0);
        assert_eq!(cfg.tau(), 0.01);
    }

    #[test]
    fn lambda_defaults_to_tau() {
        let cfg = SimConfig::preset(Preset::Standard2d);
        assert_eq!(cfg.lambda(), cfg.tau());
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(SimConfig::parse("grid.nope = 3").is_err());
        assert!(SimConfig::parse("scheme.eps").is_err());
        assert!(SimConfig::parse("scheme.eps = abc").is_err());
        assert!(SimConfig::parse("scheme.eps = -1").is_err());
        assert!(SimConfig::parse("scheme.eps = 1\nscheme.eps = 2").is_err());
        assert!(SimConfig::parse("preset = nope").is_err());
        assert!(SimConfig::parse("preset = heat-reduction\ninitial.density = layers").is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let mut cfg = SimConfig::parse("preset = standard-2d\nscheme.eps = 0.1").unwrap();
        cfg.apply_override("scheme.eps=1e-4").unwrap();
        cfg.apply_override(" forcing.kind = sine-vortex ").unwrap();
        cfg.apply_override("forcing.omega=3").unwrap();
        assert_eq!(cfg.eps, 1e-4);
        assert!(matches!(
            cfg.forcing,
            Forcing::Separable { time: TimeProfile::Sine { omega }, .. } if omega == 3.0
        ));
        assert!(cfg.apply_override("scheme.eps").is_err());
        assert!(cfg.apply_override("preset=heat-reduction").is_err());
    }
}
