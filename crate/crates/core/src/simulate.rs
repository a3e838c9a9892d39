//! Seeded data generation from the hierarchical model.
//!
//! Each subject draws from its own ChaCha stream derived from the master
//! seed, so the output does not depend on how subjects are scheduled across
//! threads.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::FamilyKind;
use crate::model::{build_designs, Dataset, ModelSpec, Overdispersion, Params, Row, ThetaParams};

/// How a covariate column is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateGenerator {
    Constant { value: f64 },
    /// The occasion number.
    Time,
    /// Subject-level indicator, e.g. a treatment arm.
    Bernoulli { p: f64 },
    /// Independent normal draw per occasion.
    Normal { mean: f64, sd: f64 },
    /// Values indexed by occasion (first value for occasion 1).
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Occasions {
    Fixed(u32),
    PerSubject(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub occasions: Occasions,
    #[serde(default)]
    pub covariates: Vec<(String, CovariateGenerator)>,
    #[serde(default)]
    pub seed: u64,
}

impl SimDesign {
    pub fn new(n_subjects: usize, occasions: u32, seed: u64) -> Self {
        Self { n_subjects, occasions: Occasions::Fixed(occasions), covariates: Vec::new(), seed }
    }

    pub fn covariate(mut self, name: &str, gen: CovariateGenerator) -> Self {
        self.covariates.push((name.to_string(), gen));
        self
    }

    fn occasions_for(&self, i: usize) -> Result<u32> {
        match &self.occasions {
            Occasions::Fixed(n) => Ok(*n),
            Occasions::PerSubject(v) => v.get(i).copied().ok_or_else(|| {
                Error::Validation(format!("occasion schedule has {} entries for {} subjects", v.len(), self.n_subjects))
            }),
        }
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_design(design: &SimDesign) -> Result<()> {
    for (name, gen) in &design.covariates {
        let ok = match gen {
            CovariateGenerator::Constant { value } => value.is_finite(),
            CovariateGenerator::Time => true,
            CovariateGenerator::Bernoulli { p } => (0.0..=1.0).contains(p),
            CovariateGenerator::Normal { mean, sd } => mean.is_finite() && *sd >= 0.0 && sd.is_finite(),
            CovariateGenerator::Custom { values } => values.iter().all(|v| v.is_finite()),
        };
        if !ok {
            return Err(Error::Validation(format!("covariate `{name}`: invalid generator {gen:?}")));
        }
    }
    Ok(())
}

/// Draw a dataset from the model. Subject ids are `1..=N`.
pub fn simulate(spec: &ModelSpec, params: &Params, design: &SimDesign) -> Result<Dataset> {
    check_design(design)?;
    let mut columns: Vec<String> = design.covariates.iter().map(|(n, _)| n.clone()).collect();
    let weibull_status = spec.family == FamilyKind::Weibull && !columns.iter().any(|c| c == "status");
    if weibull_status {
        columns.push("status".into());
    }

    // covariates first (stream 2i), outcomes afterwards (stream 2i + 1)
    let covariate_rows: Vec<Vec<Row>> = (0..design.n_subjects)
        .into_par_iter()
        .map(|i| {
            let n = design.occasions_for(i)?;
            let mut rng = stream(design.seed, 2 * i as u64);
            let subject_level: Vec<f64> = design
                .covariates
                .iter()
                .map(|(_, g)| match g {
                    CovariateGenerator::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < *p)),
                    _ => 0.0,
                })
                .collect();
            let mut rows = Vec::with_capacity(n as usize);
            for occ in 1..=n {
                let mut values = Vec::with_capacity(columns.len());
                for (k, (name, g)) in design.covariates.iter().enumerate() {
                    values.push(match g {
                        CovariateGenerator::Constant { value } => *value,
                        CovariateGenerator::Time => occ as f64,
                        CovariateGenerator::Bernoulli { .. } => subject_level[k],
                        CovariateGenerator::Normal { mean, sd } => {
                            mean + sd * rng.sample::<f64, _>(StandardNormal)
                        }
                        CovariateGenerator::Custom { values } => {
                            *values.get(occ as usize - 1).ok_or_else(|| {
                                Error::Validation(format!("covariate `{name}` has no value for occasion {occ}"))
                            })?
                        }
                    });
                }
                if weibull_status {
                    values.push(1.0);
                }
                rows.push(Row { id: (i + 1).to_string(), occasion: occ, y: 0.0, values });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Row> = covariate_rows.into_iter().flatten().collect();
    let skeleton = Dataset::new(columns.clone(), rows)?;
    let designs = build_designs(spec, &skeleton)?;

    if params.xi.len() != spec.p() {
        return Err(Error::Dimension { expected: spec.p(), got: params.xi.len() });
    }
    if params.q() != spec.q() {
        return Err(Error::Dimension { expected: spec.q(), got: params.q() });
    }
    let theta = if spec.overdispersion == Overdispersion::None { ThetaParams::None } else { params.theta };
    let theta_dist = ThetaSampler::new(spec, theta)?;
    let xi = DVector::from_column_slice(&params.xi);
    let q = spec.q();

    let outcomes: Vec<Vec<f64>> = designs
        .par_iter()
        .map(|d| {
            let i: usize = d.id.parse::<usize>().expect("simulated ids are integers") - 1;
            let mut rng = stream(design.seed, 2 * i as u64 + 1);
            let u = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let b = &params.d_chol * u;
            let eta = &d.x * &xi + &d.z * b;
            let shared = theta_dist.draw(&mut rng);
            eta.iter()
                .map(|&e| {
                    let th = if spec.overdispersion == Overdispersion::SharedConjugate {
                        shared
                    } else {
                        theta_dist.draw(&mut rng)
                    };
                    draw_outcome(spec.family, e, th, params, &mut rng)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = skeleton.rows().to_vec();
    let mut k = 0;
    for ys in outcomes {
        for y in ys {
            rows[k].y = y;
            k += 1;
        }
    }
    Dataset::new(columns, rows)
}

enum ThetaSampler {
    One,
    Gamma(Gamma<f64>),
    Beta(Beta<f64>),
}

impl ThetaSampler {
    fn new(spec: &ModelSpec, theta: ThetaParams) -> Result<Self> {
        match (spec.family, theta) {
            (_, ThetaParams::None) => Ok(ThetaSampler::One),
            (FamilyKind::Poisson | FamilyKind::Weibull, ThetaParams::Gamma { alpha, beta }) => Gamma::new(alpha, beta)
                .map(ThetaSampler::Gamma)
                .map_err(|e| Error::domain(format!("gamma effect: {e}"))),
            (FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit, t @ ThetaParams::Beta { .. }) => {
                let (a, b) = t.beta_shapes().ok_or_else(|| {
                    Error::Validation("simulating beta effects needs their precision (α + β)".into())
                })?;
                Beta::new(a, b).map(ThetaSampler::Beta).map_err(|e| Error::domain(format!("beta effect: {e}")))
            }
            (family, t) => Err(Error::Validation(format!("{} model does not accept {t:?}", family.name()))),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ThetaSampler::One => 1.0,
            ThetaSampler::Gamma(g) => g.sample(rng),
            ThetaSampler::Beta(b) => b.sample(rng),
        }
    }
}

fn draw_outcome<R: Rng>(family: FamilyKind, eta: f64, theta: f64, params: &Params, rng: &mut R) -> Result<f64> {
    let kappa = family.inverse_link(eta);
    match family {
        FamilyKind::Normal => Ok(eta + params.sigma * rng.sample::<f64, _>(StandardNormal)),
        FamilyKind::Poisson => {
            let mu = theta * kappa;
            if mu == 0.0 {
                return Ok(0.0);
            }
            Poisson::new(mu)
                .map(|p| p.sample(rng))
                .map_err(|e| Error::Overflow(format!("Poisson mean {mu}: {e}")))
        }
        FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => {
            let p = theta * kappa;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!("success probability θκ = {p} outside [0, 1]")));
            }
            Ok(f64::from(u8::from(rng.random::<f64>() < p)))
        }
        FamilyKind::Weibull => {
            // inverse CDF on the y^ρ scale: y^ρ ~ Exp(θκ)
            let rate = theta * kappa;
            let e: f64 = rng.sample(Exp1);
            let y = (e / rate).powf(1.0 / params.shape);
            if y > 0.0 && y.is_finite() {
                Ok(y)
            } else {
                Err(Error::Numeric(format!("Weibull draw {y} at rate {rate}")))
            }
        }
    }
}
