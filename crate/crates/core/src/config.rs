//! JSON run configuration: ensemble, initial state, grid and sampling.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distributions::ScalarDistribution;
use crate::ensembles::{haar_unitary, DisorderEnsemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::extraction::TimeGrid;
use crate::operators::{c, CMatrix, CVector, DensityMatrix};
use crate::propagation::{IntegratorOptions, Tolerance};
use crate::rng::SeedStream;

/// Complex number as `[re, im]`.
pub type ComplexPair = [f64; 2];

fn matrix_from_pairs(rows: &[Vec<ComplexPair>], field: &str) -> Result<CMatrix> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{field}: expected a square matrix of [re, im] pairs")));
    }
    Ok(CMatrix::from_fn(n, n, |j, k| c(rows[j][k][0], rows[j][k][1])))
}

pub fn matrix_to_pairs(m: &CMatrix) -> Vec<Vec<ComplexPair>> {
    (0..m.nrows()).map(|j| (0..m.ncols()).map(|k| [m[(j, k)].re, m[(j, k)].im]).collect()).collect()
}

/// Shared eigenbasis of a spectral ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenbasisSpec {
    /// Computational basis.
    Identity,
    /// Haar-random basis drawn from the ensemble seed.
    Haar,
    /// Explicit unitary; columns are the eigenvectors.
    Matrix(Vec<Vec<ComplexPair>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub hamiltonian: Vec<Vec<ComplexPair>>,
    pub weight: f64,
}

/// Ensemble description. Which optional fields are required depends on `kind`:
///
/// | kind | fields |
/// |---|---|
/// | `qubit` | `law` (dim is 2, `H = λω₀σ_z/2`) |
/// | `spectral-global` | `law`, `reference` |
/// | `spectral-uncorrelated` | `laws` |
/// | `spectral-general` | `mean`, `covariance` |
/// | `unitarily-invariant-pe` | `sigma`, optional `location` |
/// | `unitarily-invariant-gue` | none |
/// | `finite-list` | `members` |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub omega0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<ScalarDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laws: Option<Vec<ScalarDistribution>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<MemberSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenbasis: Option<EigenbasisSpec>,
    /// Seed for a Haar eigenbasis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn need<T: Clone>(v: &Option<T>, field: &str, kind: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("ensemble.{field} is required for kind \"{kind}\"")))
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<DisorderEnsemble> {
        let k = self.kind.as_str();
        let dim = |fallback: usize| self.dim.unwrap_or(fallback);
        let ens = match k {
            "qubit" => {
                if self.dim.is_some_and(|d| d != 2) {
                    return Err(Error::Config("ensemble.dim must be 2 for kind \"qubit\"".into()));
                }
                DisorderEnsemble::qubit(need(&self.law, "law", k)?, self.omega0)?
            }
            "spectral-global" => {
                let reference = need(&self.reference, "reference", k)?;
                DisorderEnsemble::new(
                    dim(reference.len()),
                    self.omega0,
                    EnsembleKind::SpectralGlobal { law: need(&self.law, "law", k)?, reference },
                )?
            }
            "spectral-uncorrelated" => {
                let laws = need(&self.laws, "laws", k)?;
                DisorderEnsemble::new(dim(laws.len()), self.omega0, EnsembleKind::SpectralUncorrelated { laws })?
            }
            "spectral-general" => {
                let mean = need(&self.mean, "mean", k)?;
                let rows = need(&self.covariance, "covariance", k)?;
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config("ensemble.covariance must be square".into()));
                }
                let covariance = DMatrix::from_fn(n, n, |j, l| rows[j][l]);
                DisorderEnsemble::new(dim(mean.len()), self.omega0, EnsembleKind::SpectralGeneral { mean, covariance })?
            }
            "unitarily-invariant-pe" => DisorderEnsemble::poissonian(
                need(&self.dim, "dim", k)?,
                self.omega0,
                need(&self.sigma, "sigma", k)?,
                self.location.unwrap_or(0.0),
            )?,
            "unitarily-invariant-gue" => DisorderEnsemble::gue(need(&self.dim, "dim", k)?, self.omega0)?,
            "finite-list" => {
                let members = need(&self.members, "members", k)?;
                let parsed = members
                    .iter()
                    .enumerate()
                    .map(|(i, m)| Ok((matrix_from_pairs(&m.hamiltonian, &format!("ensemble.members[{i}].hamiltonian"))?, m.weight)))
                    .collect::<Result<Vec<_>>>()?;
                let d = dim(parsed[0].0.nrows());
                DisorderEnsemble::finite_list(d, self.omega0, parsed)?
            }
            other => {
                return Err(Error::Config(format!(
                    "ensemble.kind \"{other}\" is not one of qubit, spectral-global, spectral-uncorrelated, \
                     spectral-general, unitarily-invariant-pe, unitarily-invariant-gue, finite-list"
                )))
            }
        };
        match &self.eigenbasis {
            None | Some(EigenbasisSpec::Identity) => Ok(ens),
            Some(EigenbasisSpec::Haar) => {
                let d = ens.dim();
                ens.with_eigenbasis(haar_unitary(d, SeedStream::new(self.seed.unwrap_or(0))))
            }
            Some(EigenbasisSpec::Matrix(rows)) => ens.with_eigenbasis(matrix_from_pairs(rows, "ensemble.eigenbasis")?),
        }
    }

    /// Time scale `σω₀` used for the default grid (1·ω₀ when the law has no width).
    pub fn rate_scale(&self) -> f64 {
        let width = match self.kind.as_str() {
            "qubit" | "spectral-global" => self.law.map(|l| l.scale()),
            "unitarily-invariant-pe" => self.sigma,
            _ => None,
        };
        width.filter(|w| *w > 0.0).unwrap_or(1.0) * self.omega0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateSpec {
    Bloch([f64; 3]),
    Matrix(Vec<Vec<ComplexPair>>),
    Pure(Vec<ComplexPair>),
    MaximallyMixed,
}

impl StateSpec {
    pub fn build(&self, dim: usize) -> Result<DensityMatrix> {
        let rho = match self {
            Self::Bloch(b) => DensityMatrix::from_bloch(*b)?,
            Self::Matrix(rows) => DensityMatrix::new(matrix_from_pairs(rows, "initial_state.matrix")?)?,
            Self::Pure(v) => DensityMatrix::pure(&CVector::from_iterator(v.len(), v.iter().map(|z| c(z[0], z[1]))))?,
            Self::MaximallyMixed => DensityMatrix::maximally_mixed(dim),
        };
        if rho.dim() != dim {
            return Err(Error::Config(format!("initial_state has dimension {}, ensemble has {dim}", rho.dim())));
        }
        Ok(rho)
    }

    /// `|0⟩⟨0|` in dimension `d`.
    pub fn ground(d: usize) -> Self {
        let mut v = vec![[0.0, 0.0]; d];
        v[0] = [1.0, 0.0];
        Self::Pure(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t_max: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.t_max, self.n_points)
    }

    /// Parse `t_max:n`.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s.split_once(':').ok_or_else(|| Error::Config(format!("--grid expects t_max:n, got \"{s}\"")))?;
        let t_max = a.trim().parse().map_err(|_| Error::Config(format!("--grid: bad t_max \"{a}\"")))?;
        let n_points = b.trim().parse().map_err(|_| Error::Config(format!("--grid: bad point count \"{b}\"")))?;
        Ok(Self { t_max, n_points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        Self { n_samples: 100_000, seed: 0 }
    }
}

/// Everything needed to re-run a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub ensemble: EnsembleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<StateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub mc: McSpec,
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<Tolerance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorOptions>,
}

fn default_output() -> String {
    "out".into()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Grid from the config, or the default 400 points on `[0, 3π/(σω₀)]`.
    pub fn time_grid(&self) -> Result<TimeGrid> {
        match &self.grid {
            Some(g) => g.build(),
            None => TimeGrid::default_for(self.ensemble.rate_scale() / self.ensemble.omega0, self.ensemble.omega0),
        }
    }

    pub fn initial_state(&self, dim: usize) -> Result<DensityMatrix> {
        self.initial_state.clone().unwrap_or_else(|| StateSpec::ground(dim)).build(dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::max_abs_diff;

    #[test]
    fn parses_every_kind() {
        let cases = [
            r#"{"kind":"qubit","omega0":1,"law":{"kind":"gaussian","location":0,"scale":1}}"#,
            r#"{"kind":"spectral-global","omega0":1,"law":{"kind":"uniform-box","location":0,"scale":2},"reference":[1,2,4]}"#,
            r#"{"kind":"spectral-uncorrelated","omega0":1,"laws":[{"kind":"gaussian","location":0,"scale":1},{"kind":"levy","location":0,"scale":1}],"eigenbasis":"haar","seed":3}"#,
            r#"{"kind":"spectral-general","omega0":1,"mean":[0,1],"covariance":[[1,0.5],[0.5,1]]}"#,
            r#"{"kind":"unitarily-invariant-pe","dim":4,"omega0":1,"sigma":4}"#,
            r#"{"kind":"unitarily-invariant-gue","dim":3,"omega0":2}"#,
            r#"{"kind":"finite-list","omega0":1,"members":[{"hamiltonian":[[[0.5,0],[0,0]],[[0,0],[-0.5,0]]],"weight":0.5},{"hamiltonian":[[[-0.5,0],[0,0]],[[0,0],[0.5,0]]],"weight":0.5}]}"#,
        ];
        let names = ["spectral-global", "spectral-global", "spectral-uncorrelated", "spectral-general", "unitarily-invariant-pe", "unitarily-invariant-gue", "finite-list"];
        for (text, name) in cases.iter().zip(names) {
            let spec: EnsembleSpec = serde_json::from_str(text).unwrap();
            let ens = spec.build().unwrap();
            assert_eq!(ens.kind().name(), name);
            let back: EnsembleSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = EnsembleSpec { kind: "spectral-global".into(), ..serde_json::from_str(r#"{"kind":"x","omega0":1}"#).unwrap() }
            .build()
            .unwrap_err()
            .to_string();
        assert!(err.contains("ensemble.reference"), "{err}");
        let bad = RunConfig::from_json("{\n  \"ensemble\": {\"kind\": \"qubit\", \"omega0\": 1, \"lw\": 3}\n}").unwrap_err().to_string();
        assert!(bad.contains("line 2") && bad.contains("lw"), "{bad}");
        let kind = serde_json::from_str::<EnsembleSpec>(r#"{"kind":"goe","dim":2,"omega0":1}"#).unwrap().build().unwrap_err();
        assert!(kind.to_string().contains("goe"));
    }

    #[test]
    fn states_and_grids() {
        let b = StateSpec::Bloch([0.4, 0.8, 1.0 / 3.0]).build(2).unwrap();
        assert!((b.matrix()[(0, 1)].norm() - 0.2f64.sqrt()).abs() < 1e-15);
        assert!(StateSpec::Bloch([1.0, 1.0, 0.0]).build(2).is_err());
        assert!(StateSpec::Bloch([0.0, 0.0, 1.0]).build(3).is_err());
        let g = StateSpec::ground(3).build(3).unwrap();
        assert_eq!(g.purity(), 1.0);
        let m = StateSpec::Matrix(matrix_to_pairs(b.matrix())).build(2).unwrap();
        assert!(max_abs_diff(m.matrix(), b.matrix()) == 0.0);
        assert_eq!(GridSpec::parse("9.5:400").unwrap(), GridSpec { t_max: 9.5, n_points: 400 });
        assert!(GridSpec::parse("9.5").is_err());
        let cfg = RunConfig::from_json(r#"{"ensemble":{"kind":"unitarily-invariant-pe","dim":2,"omega0":1,"sigma":4}}"#).unwrap();
        let grid = cfg.time_grid().unwrap();
        assert_eq!(grid.len(), 400);
        assert!((grid.t_max() - 3.0 * std::f64::consts::PI / 4.0).abs() < 1e-15);
        assert_eq!(cfg.output, "out");
    }
}
