//! Run configuration: line-oriented `section.key = value` files.
//!
//! Unknown keys and malformed lines are reported with their line number;
//! all cross-field invariants (temperature ordering, eps = 1/N, inclusion
//! margins) are validated at parse time so the solvers can assume a
//! consistent configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{build_unit_cell, Inclusion, PerforatedGrid, UnitCell};
use crate::micro::{BodyForce, ForceSign, MicroConfig, ScalarIc, VelocityIc};
use crate::potential::{PotentialMode, PotentialParams};
use crate::report::config_hash_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyMode {
    Manufactured,
    StokesDarcy,
    Diffusion,
    Full,
}

#[derive(Clone, Debug)]
pub struct GeometryBlock {
    pub dim: usize,
    pub n_cell: usize,
    pub inclusion: Inclusion,
}

#[derive(Clone, Debug)]
pub struct PhysicsBlock {
    pub theta: f64,
    pub theta0: f64,
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
    pub potential_mode: PotentialMode,
    pub force_sign: ForceSign,
    pub body_force: Option<BodyForce>,
}

#[derive(Clone, Debug)]
pub struct DiscretizationBlock {
    pub dt: f64,
    pub t_end: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub cg_tol: f64,
    pub div_tol: f64,
}

#[derive(Clone, Debug)]
pub struct InitialBlock {
    pub c0: ScalarIc,
    pub u0: VelocityIc,
}

#[derive(Clone, Debug)]
pub struct StudyBlock {
    /// Strictly decreasing list of scale parameters, each 1/N.
    pub eps: Vec<f64>,
    pub mode: StudyMode,
    pub macro_n: usize,
    /// Diffusive-time horizon and step for the homogenization studies.
    pub t_star: f64,
    pub dt_tau: f64,
    pub out_dir: String,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    pub physics: PhysicsBlock,
    pub discretization: DiscretizationBlock,
    pub initial: InitialBlock,
    pub study: StudyBlock,
    pub seed: u64,
    /// Hash of the source text; stamped into every emitted table.
    pub hash: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: GeometryBlock {
                dim: 2,
                n_cell: 16,
                inclusion: Inclusion::Disc { radius: 0.25 },
            },
            physics: PhysicsBlock {
                theta: 0.5,
                theta0: 1.0,
                lambda: 1.0,
                mu: 1.0,
                delta: 0.01,
                potential_mode: PotentialMode::Regularized,
                force_sign: ForceSign::Negative,
                body_force: None,
            },
            discretization: DiscretizationBlock {
                dt: 1e-3,
                t_end: 0.1,
                newton_tol: 1e-10,
                newton_max_iter: 50,
                cg_tol: 1e-10,
                div_tol: 1e-11,
            },
            initial: InitialBlock {
                c0: ScalarIc::Cosine { mean: 0.0, amp: 0.1 },
                u0: VelocityIc::Zero,
            },
            study: StudyBlock {
                eps: vec![0.25, 0.125, 0.0625],
                mode: StudyMode::Diffusion,
                macro_n: 64,
                t_star: 2e-3,
                dt_tau: 1e-4,
                out_dir: "out".into(),
            },
            seed: 0,
            hash: config_hash_hex(""),
        }
    }
}

fn parse_f64(v: &str, line: usize) -> Result<f64> {
    v.parse::<f64>().map_err(|_| Error::ParseError {
        line,
        msg: format!("expected a number, got '{v}'"),
    })
}

fn parse_usize(v: &str, line: usize) -> Result<usize> {
    v.parse::<usize>().map_err(|_| Error::ParseError {
        line,
        msg: format!("expected an integer, got '{v}'"),
    })
}

/// Accepts "1/8" or a decimal like "0.125".
fn parse_eps(v: &str, line: usize) -> Result<f64> {
    if let Some((num, den)) = v.split_once('/') {
        let n = parse_f64(num.trim(), line)?;
        let d = parse_f64(den.trim(), line)?;
        if d == 0.0 {
            return Err(Error::ParseError {
                line,
                msg: "division by zero in eps".into(),
            });
        }
        Ok(n / d)
    } else {
        parse_f64(v, line)
    }
}

/// "name:arg1,arg2" splitter.
fn split_spec(v: &str) -> (&str, Vec<&str>) {
    match v.split_once(':') {
        Some((name, args)) => (name.trim(), args.split(',').map(str::trim).collect()),
        None => (v.trim(), Vec::new()),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig {
            hash: config_hash_hex(text),
            ..RunConfig::default()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ParseError {
                line,
                msg: "expected 'section.key = value'".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "geometry.dim" => cfg.geometry.dim = parse_usize(value, line)?,
                "geometry.n_cell" => cfg.geometry.n_cell = parse_usize(value, line)?,
                "geometry.inclusion" => {
                    let (name, args) = split_spec(value);
                    cfg.geometry.inclusion = match name {
                        "none" => Inclusion::None,
                        "disc" => Inclusion::Disc {
                            radius: parse_f64(args.first().copied().unwrap_or("0.25"), line)?,
                        },
                        "square" => Inclusion::Square {
                            half_width: parse_f64(args.first().copied().unwrap_or("0.25"), line)?,
                        },
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown inclusion '{other}'"),
                            })
                        }
                    };
                }
                "geometry.radius" => {
                    cfg.geometry.inclusion = Inclusion::Disc {
                        radius: parse_f64(value, line)?,
                    }
                }
                "geometry.half_width" => {
                    cfg.geometry.inclusion = Inclusion::Square {
                        half_width: parse_f64(value, line)?,
                    }
                }
                "physics.theta" => cfg.physics.theta = parse_f64(value, line)?,
                "physics.theta0" => cfg.physics.theta0 = parse_f64(value, line)?,
                "physics.lambda" => cfg.physics.lambda = parse_f64(value, line)?,
                "physics.mu" => cfg.physics.mu = parse_f64(value, line)?,
                "physics.delta" => cfg.physics.delta = parse_f64(value, line)?,
                "physics.potential_mode" => {
                    cfg.physics.potential_mode = match value {
                        "singular" => PotentialMode::Singular,
                        "regularized" => PotentialMode::Regularized,
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown potential mode '{other}'"),
                            })
                        }
                    }
                }
                "physics.force_sign" => {
                    cfg.physics.force_sign = match value {
                        "negative" => ForceSign::Negative,
                        "positive" => ForceSign::Positive,
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown force sign '{other}' (negative|positive)"),
                            })
                        }
                    }
                }
                "physics.body_force" => {
                    let (name, args) = split_spec(value);
                    cfg.physics.body_force = match name {
                        "none" => None,
                        "vortex" => Some(BodyForce::RotationalBump {
                            amp: parse_f64(args.first().copied().unwrap_or("1.0"), line)?,
                        }),
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown body force '{other}'"),
                            })
                        }
                    };
                }
                "discretization.dt" => cfg.discretization.dt = parse_f64(value, line)?,
                "discretization.t_end" => cfg.discretization.t_end = parse_f64(value, line)?,
                "discretization.newton_tol" => cfg.discretization.newton_tol = parse_f64(value, line)?,
                "discretization.newton_max_iter" => {
                    cfg.discretization.newton_max_iter = parse_usize(value, line)?
                }
                "discretization.cg_tol" => cfg.discretization.cg_tol = parse_f64(value, line)?,
                "discretization.div_tol" => cfg.discretization.div_tol = parse_f64(value, line)?,
                "initial.c0" => {
                    let (name, args) = split_spec(value);
                    cfg.initial.c0 = match name {
                        "uniform" => ScalarIc::Uniform(parse_f64(args.first().copied().unwrap_or("0"), line)?),
                        "cosine" => ScalarIc::Cosine {
                            mean: parse_f64(args.first().copied().unwrap_or("0"), line)?,
                            amp: parse_f64(args.get(1).copied().unwrap_or("0.1"), line)?,
                        },
                        "cosine_mix" => ScalarIc::CosineMix {
                            mean: parse_f64(args.first().copied().unwrap_or("0"), line)?,
                            amp: parse_f64(args.get(1).copied().unwrap_or("0.1"), line)?,
                        },
                        "random" => ScalarIc::Random {
                            mean: parse_f64(args.first().copied().unwrap_or("0"), line)?,
                            amp: parse_f64(args.get(1).copied().unwrap_or("0.05"), line)?,
                        },
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown initial c0 '{other}'"),
                            })
                        }
                    };
                }
                "initial.u0" => {
                    let (name, args) = split_spec(value);
                    cfg.initial.u0 = match name {
                        "zero" => VelocityIc::Zero,
                        "bump" => VelocityIc::StreamBump {
                            amp: parse_f64(args.first().copied().unwrap_or("1.0"), line)?,
                        },
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown initial u0 '{other}'"),
                            })
                        }
                    };
                }
                "study.eps" => {
                    let mut eps = Vec::new();
                    for part in value.split(',') {
                        eps.push(parse_eps(part.trim(), line)?);
                    }
                    cfg.study.eps = eps;
                }
                "study.mode" => {
                    cfg.study.mode = match value {
                        "manufactured" => StudyMode::Manufactured,
                        "stokes_darcy" => StudyMode::StokesDarcy,
                        "diffusion" => StudyMode::Diffusion,
                        "full" => StudyMode::Full,
                        other => {
                            return Err(Error::ParseError {
                                line,
                                msg: format!("unknown study mode '{other}'"),
                            })
                        }
                    }
                }
                "study.macro_n" => cfg.study.macro_n = parse_usize(value, line)?,
                "study.t_star" => cfg.study.t_star = parse_f64(value, line)?,
                "study.dt_tau" => cfg.study.dt_tau = parse_f64(value, line)?,
                "study.out_dir" => cfg.study.out_dir = value.to_string(),
                "run.seed" => {
                    cfg.seed = value.parse::<u64>().map_err(|_| Error::ParseError {
                        line,
                        msg: format!("expected an unsigned integer, got '{value}'"),
                    })?
                }
                other => {
                    return Err(Error::ParseError {
                        line,
                        msg: format!("unknown key '{other}'"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        // Parameter invariants come first so messages name the constraint.
        if !(self.physics.theta > 0.0 && self.physics.theta < self.physics.theta0) {
            return Err(Error::ValidationError(format!(
                "physics requires 0 < theta < theta0, got theta = {}, theta0 = {}",
                self.physics.theta, self.physics.theta0
            )));
        }
        PotentialParams::new(
            self.physics.theta,
            self.physics.theta0,
            self.physics.lambda,
            self.physics.mu,
            self.physics.delta,
        )
        .map_err(|e| Error::ValidationError(e.to_string()))?;
        if self.geometry.dim != 2 && self.geometry.dim != 3 {
            return Err(Error::ValidationError("geometry.dim must be 2 or 3".into()));
        }
        if self.geometry.n_cell < 8 {
            return Err(Error::ValidationError("geometry.n_cell must be >= 8".into()));
        }
        if !(self.discretization.dt > 0.0) || !(self.discretization.t_end >= 0.0) {
            return Err(Error::ValidationError("time step and horizon must be positive".into()));
        }
        if self.study.eps.is_empty() {
            return Err(Error::ValidationError("study.eps must be nonempty".into()));
        }
        for &e in &self.study.eps {
            let n = (1.0 / e).round();
            if !(e > 0.0) || n < 1.0 || (e * n - 1.0).abs() > 1e-12 {
                return Err(Error::ValidationError(format!(
                    "every eps must equal 1/N for integer N >= 1; {e} is not"
                )));
            }
        }
        for pair in self.study.eps.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::ValidationError(
                    "study.eps must be strictly decreasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> PotentialParams {
        PotentialParams::new(
            self.physics.theta,
            self.physics.theta0,
            self.physics.lambda,
            self.physics.mu,
            self.physics.delta,
        )
        .expect("validated at parse time")
    }

    pub fn build_cell(&self) -> Result<UnitCell> {
        build_unit_cell(self.geometry.dim, self.geometry.n_cell, self.geometry.inclusion)
    }

    pub fn tile(&self, eps: f64) -> Result<PerforatedGrid> {
        let n = (1.0 / eps).round() as usize;
        crate::geometry::tile_domain(&self.build_cell()?, eps, n)
    }

    /// Micro solver configuration at the configured raw time scale.
    pub fn micro_config(&self) -> MicroConfig {
        let mut m = MicroConfig::new(self.params(), self.physics.potential_mode);
        m.dt = self.discretization.dt;
        m.t_end = self.discretization.t_end;
        m.c0 = self.initial.c0;
        m.u0 = self.initial.u0;
        m.force_sign = self.physics.force_sign;
        m.body_force = self.physics.body_force;
        m.newton_tol = self.discretization.newton_tol;
        m.newton_max_iter = self.discretization.newton_max_iter;
        m.cg_tol = self.discretization.cg_tol;
        m.div_tol = self.discretization.div_tol;
        m.seed = self.seed;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::parse_str("geometry.n_cell = 32\n").unwrap();
        assert_eq!(cfg.geometry.n_cell, 32);
        assert_eq!(cfg.physics.theta0, 1.0);
        assert_eq!(cfg.study.macro_n, 64);
        assert!(matches!(cfg.initial.u0, VelocityIc::Zero));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# a comment\n\nphysics.theta = 0.4 # trailing\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.physics.theta, 0.4);
    }

    #[test]
    fn inverted_temperatures_name_the_constraint() {
        let err = RunConfig::parse_str("physics.theta = 2.0\n").unwrap_err();
        match err {
            Error::ValidationError(msg) => assert!(msg.contains("0 < theta < theta0"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_unit_fraction_eps_rejected() {
        let err = RunConfig::parse_str("study.eps = 0.3\n").unwrap_err();
        match err {
            Error::ValidationError(msg) => assert!(msg.contains("1/N"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fraction_eps_accepted() {
        let cfg = RunConfig::parse_str("study.eps = 1/2, 1/4, 1/8\n").unwrap();
        assert_eq!(cfg.study.eps, vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse_str("physics.theta = 0.5\nbogus.key = 1\n").unwrap_err();
        match err {
            Error::ParseError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn increasing_eps_rejected() {
        let err = RunConfig::parse_str("study.eps = 1/8, 1/4\n").unwrap_err();
        assert!(matches!(err, Error::ValidationError(_)));
    }
}
