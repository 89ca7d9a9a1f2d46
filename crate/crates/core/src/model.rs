//! Problem data: coefficient fields sampled on the phenotype grid, scalar
//! coefficients, constraint thresholds, initial densities and the
//! continuation map that deforms the full problem into the simplified one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PhenotypeGrid, TimeGrid};

/// A non-negative rate sampled at the `N_x + 1` phenotype nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoefficientField(Vec<f64>);

impl CoefficientField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coefficient entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn sample(grid: &PhenotypeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid.nodes().into_iter().map(f).collect())
    }

    pub fn constant(grid: &PhenotypeGrid, value: f64) -> Result<Self> {
        Self::new(vec![value; grid.num_nodes()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_positive(&self) -> bool {
        self.0.iter().all(|v| *v > 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

impl std::ops::Index<usize> for CoefficientField {
    type Output = f64;

    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// The closed-form coefficient profiles accepted by name in configuration
/// files. Anything else must be given as explicit node values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// `3/(1+x^2)`
    CancerGrowth,
    /// `1.5/(1+x^2)`
    HealthyGrowth,
    /// `0.5*(1-0.3*x)`
    CancerDeath,
    /// `0.5*(1-0.1*x)`
    HealthyDeath,
    /// `0.2/(0.7^2+x^2)`
    HealthyDrugDeath,
    /// `max(0.9/(0.7^2+0.6*x^2)-1,0)`
    CancerDrugDeath,
    Zero,
}

impl Profile {
    const TABLE: [(&'static str, Profile); 7] = [
        ("3/(1+x^2)", Profile::CancerGrowth),
        ("1.5/(1+x^2)", Profile::HealthyGrowth),
        ("0.5*(1-0.3*x)", Profile::CancerDeath),
        ("0.5*(1-0.1*x)", Profile::HealthyDeath),
        ("0.2/(0.7^2+x^2)", Profile::HealthyDrugDeath),
        ("max(0.9/(0.7^2+0.6*x^2)-1,0)", Profile::CancerDrugDeath),
        ("0", Profile::Zero),
    ];

    /// Looks up a profile by its formula; whitespace is ignored.
    pub fn parse(formula: &str) -> Option<Self> {
        let key: String = formula.chars().filter(|c| !c.is_whitespace()).collect();
        Self::TABLE
            .iter()
            .find(|(name, _)| *name == key)
            .map(|(_, p)| *p)
    }

    pub fn formula(self) -> &'static str {
        Self::TABLE.iter().find(|(_, p)| *p == self).unwrap().0
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Profile::CancerGrowth => 3.0 / (1.0 + x * x),
            Profile::HealthyGrowth => 1.5 / (1.0 + x * x),
            Profile::CancerDeath => 0.5 * (1.0 - 0.3 * x),
            Profile::HealthyDeath => 0.5 * (1.0 - 0.1 * x),
            Profile::HealthyDrugDeath => 0.2 / (0.7 * 0.7 + x * x),
            Profile::CancerDrugDeath => (0.9 / (0.7 * 0.7 + 0.6 * x * x) - 1.0).max(0.0),
            Profile::Zero => 0.0,
        }
    }

    pub fn sample(self, grid: &PhenotypeGrid) -> CoefficientField {
        // Every whitelisted profile is finite and non-negative on [0, 1].
        CoefficientField::sample(grid, |x| self.eval(x)).expect("profile is non-negative")
    }
}

/// All coefficients of the two-population model.
///
/// The same type carries both the target data and the effective data of an
/// intermediate problem (see [`apply_continuation`]); in the latter case
/// `u1_max`/`u2_max` hold the effective dose bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub r_h: CoefficientField,
    pub r_c: CoefficientField,
    pub d_h: CoefficientField,
    pub d_c: CoefficientField,
    pub mu_h: CoefficientField,
    pub mu_c: CoefficientField,
    pub alpha_h: f64,
    pub alpha_c: f64,
    pub a_hh: f64,
    pub a_hc: f64,
    pub a_ch: f64,
    pub a_cc: f64,
    pub beta_h: f64,
    pub beta_c: f64,
    pub u1_max: f64,
    pub u2_max: f64,
    pub u1_max0: f64,
    pub u2_max0: f64,
    pub theta_hc: f64,
    pub theta_h: f64,
    pub lambda0: f64,
}

/// Default model on `grid`: the reference coefficient profiles and rates,
/// with the diffusion rates, thresholds and reduced dose bounds of the
/// `T = 60` reference case.
pub fn sample_default_coefficients(grid: &PhenotypeGrid) -> ModelParameters {
    ModelParameters {
        r_h: Profile::HealthyGrowth.sample(grid),
        r_c: Profile::CancerGrowth.sample(grid),
        d_h: Profile::HealthyDeath.sample(grid),
        d_c: Profile::CancerDeath.sample(grid),
        mu_h: Profile::HealthyDrugDeath.sample(grid),
        mu_c: Profile::CancerDrugDeath.sample(grid),
        alpha_h: 0.01,
        alpha_c: 1.0,
        a_hh: 1.0,
        a_hc: 0.07,
        a_ch: 0.01,
        a_cc: 1.0,
        beta_h: 0.001,
        beta_c: 0.0001,
        u1_max: 2.0,
        u2_max: 5.0,
        u1_max0: 1.0,
        u2_max0: 4.0,
        theta_hc: 0.4,
        theta_h: 0.6,
        lambda0: 0.0,
    }
}

impl ModelParameters {
    /// Checks the structural assumptions of the model. `beta_h < beta_c` is
    /// deliberately not required: the reference data violate it.
    pub fn validate(&self, grid: &PhenotypeGrid) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let fields = [
            ("r_h", &self.r_h),
            ("r_c", &self.r_c),
            ("d_h", &self.d_h),
            ("d_c", &self.d_c),
            ("mu_h", &self.mu_h),
            ("mu_c", &self.mu_c),
        ];
        for (name, f) in fields {
            if f.len() != grid.num_nodes() {
                return Err(Error::Dimension(format!(
                    "{name} has {} entries, grid has {} nodes",
                    f.len(),
                    grid.num_nodes()
                )));
            }
            CoefficientField::new(f.values().to_vec())?;
        }
        for (name, f) in [("r_h", &self.r_h), ("r_c", &self.r_c), ("d_h", &self.d_h), ("d_c", &self.d_c)] {
            if !f.is_positive() {
                return bad(format!("{name} must be positive on [0, 1]"));
            }
        }
        let scalars = [
            ("alpha_h", self.alpha_h),
            ("alpha_c", self.alpha_c),
            ("a_hh", self.a_hh),
            ("a_hc", self.a_hc),
            ("a_ch", self.a_ch),
            ("a_cc", self.a_cc),
            ("beta_h", self.beta_h),
            ("beta_c", self.beta_c),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.alpha_h >= self.alpha_c {
            return bad(format!("alpha_h ({}) must be < alpha_c ({})", self.alpha_h, self.alpha_c));
        }
        if self.a_hc >= self.a_hh {
            return bad(format!("a_hc ({}) must be < a_hh ({})", self.a_hc, self.a_hh));
        }
        if self.a_ch >= self.a_cc {
            return bad(format!("a_ch ({}) must be < a_cc ({})", self.a_ch, self.a_cc));
        }
        for (name, v) in [("theta_hc", self.theta_hc), ("theta_h", self.theta_h)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("u1_max", self.u1_max),
            ("u2_max", self.u2_max),
            ("u1_max0", self.u1_max0),
            ("u2_max0", self.u2_max0),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.u1_max0 > self.u1_max || self.u2_max0 > self.u2_max {
            return bad("reduced dose bounds must not exceed the target bounds".into());
        }
        if !(0.0..=1.0).contains(&self.lambda0) {
            return bad(format!("lambda0 must lie in [0, 1], got {}", self.lambda0));
        }
        Ok(())
    }

    /// The larger of the two diffusion rates.
    pub fn max_diffusion(&self) -> f64 {
        self.beta_h.max(self.beta_c)
    }
}

/// Continuation vector: diffusion, interaction `a_CH`, ratio threshold,
/// healthy threshold, and the two dose-bound lifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct ContinuationVector([f64; 6]);

impl ContinuationVector {
    pub const DIFFUSION: usize = 0;
    pub const INTERACTION: usize = 1;
    pub const RATIO_CONSTRAINT: usize = 2;
    pub const HEALTHY_CONSTRAINT: usize = 3;
    pub const U1_LIFT: usize = 4;
    pub const U2_LIFT: usize = 5;

    pub fn new(lambda: [f64; 6]) -> Result<Self> {
        for (i, l) in lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(l) {
                return Err(Error::InvalidParameter(format!(
                    "continuation component l{} = {l} outside [0, 1]",
                    i + 1
                )));
            }
        }
        Ok(Self(lambda))
    }

    pub fn zeros() -> Self {
        Self([0.0; 6])
    }

    pub fn ones() -> Self {
        Self([1.0; 6])
    }

    pub fn components(&self) -> [f64; 6] {
        self.0
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn with(mut self, index: usize, value: f64) -> Result<Self> {
        self.0[index] = value;
        Self::new(self.0)
    }

    pub fn is_ones(&self) -> bool {
        self.0.iter().all(|l| *l == 1.0)
    }
}

impl TryFrom<[f64; 6]> for ContinuationVector {
    type Error = Error;

    fn try_from(value: [f64; 6]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ContinuationVector> for [f64; 6] {
    fn from(v: ContinuationVector) -> Self {
        v.0
    }
}

/// Effective parameters of the intermediate problem selected by `lambda`.
pub fn apply_continuation(params: &ModelParameters, lambda: &ContinuationVector) -> ModelParameters {
    let [l1, l2, l3, l4, l5, l6] = lambda.components();
    ModelParameters {
        beta_h: l1 * params.beta_h,
        beta_c: l1 * params.beta_c,
        a_ch: l2 * params.a_ch,
        theta_hc: l3 * params.theta_hc,
        theta_h: l4 * params.theta_h,
        u1_max: (1.0 - l5) * params.u1_max0 + l5 * params.u1_max,
        u2_max: (1.0 - l6) * params.u2_max0 + l6 * params.u2_max,
        ..params.clone()
    }
}

/// Outcome of the explicit-diffusion stability test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CflCheck {
    /// `beta * T * N_x^2 / N_t` with `beta = max(beta_h, beta_c)`.
    pub number: f64,
    pub passed: bool,
}

impl CflCheck {
    pub fn into_result(self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::Cfl { number: self.number })
        }
    }
}

pub fn check_cfl(params: &ModelParameters, grid: &PhenotypeGrid, time: &TimeGrid) -> CflCheck {
    let nx = grid.num_cells() as f64;
    let number = params.max_diffusion() * time.horizon() * nx * nx / time.num_steps() as f64;
    CflCheck {
        number,
        passed: number < 0.5,
    }
}

/// Gaussian profile `K exp(-(x - 1/2)^2 / epsilon)` scaled so that its
/// rectangle-rule mass equals `rho_target`. Returns `(K, density)`.
pub fn normalize_initial_density(
    grid: &PhenotypeGrid,
    epsilon: f64,
    rho_target: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(rho_target.is_finite() && rho_target > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target mass must be positive, got {rho_target}"
        )));
    }
    let profile: Vec<f64> = grid
        .nodes()
        .into_iter()
        .map(|x| (-(x - 0.5) * (x - 0.5) / epsilon).exp())
        .collect();
    let k = rho_target / grid.rectangle(&profile);
    Ok((k, profile.into_iter().map(|p| k * p).collect()))
}

/// Initial densities of both populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    /// Gaussian width, `None` when densities were given explicitly.
    pub epsilon: Option<f64>,
    pub rho_h0_target: f64,
    pub rho_c0_target: f64,
    pub k_h0: Option<f64>,
    pub k_c0: Option<f64>,
    pub n_h0: Vec<f64>,
    pub n_c0: Vec<f64>,
}

impl InitialData {
    pub fn gaussian(grid: &PhenotypeGrid, epsilon: f64, rho_h0: f64, rho_c0: f64) -> Result<Self> {
        let (k_h0, n_h0) = normalize_initial_density(grid, epsilon, rho_h0)?;
        let (k_c0, n_c0) = normalize_initial_density(grid, epsilon, rho_c0)?;
        Ok(Self {
            epsilon: Some(epsilon),
            rho_h0_target: rho_h0,
            rho_c0_target: rho_c0,
            k_h0: Some(k_h0),
            k_c0: Some(k_c0),
            n_h0,
            n_c0,
        })
    }

    /// Reference initial data: `epsilon = 0.1`, masses 2.7 (healthy) and 0.5.
    pub fn reference(grid: &PhenotypeGrid) -> Self {
        Self::gaussian(grid, 0.1, 2.7, 0.5).expect("reference initial data is valid")
    }

    /// Explicit node values; the targets are set to their rectangle masses.
    pub fn from_densities(grid: &PhenotypeGrid, n_h0: Vec<f64>, n_c0: Vec<f64>) -> Result<Self> {
        for (name, v) in [("n_H0", &n_h0), ("n_C0", &n_c0)] {
            if v.len() != grid.num_nodes() {
                return Err(Error::Dimension(format!(
                    "{name} has {} entries, grid has {} nodes",
                    v.len(),
                    grid.num_nodes()
                )));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(Self {
            epsilon: None,
            rho_h0_target: grid.rectangle(&n_h0),
            rho_c0_target: grid.rectangle(&n_c0),
            k_h0: None,
            k_c0: None,
            n_h0,
            n_c0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(nx: usize) -> PhenotypeGrid {
        PhenotypeGrid::new(nx).unwrap()
    }

    #[test]
    fn default_coefficients_at_endpoints() {
        let g = grid(20);
        let p = sample_default_coefficients(&g);
        assert_eq!(p.r_c[0], 3.0);
        assert_eq!(p.r_h[0], 1.5);
        assert_eq!(p.d_c[0], 0.5);
        assert_eq!(p.d_h[0], 0.5);
        assert!((p.d_c[20] - 0.35).abs() < 1e-15);
        // 0.9 / 1.09 < 1, so the cancer drug sensitivity vanishes at x = 1.
        assert_eq!(p.mu_c[20], 0.0);
        p.validate(&g).unwrap();
    }

    #[test]
    fn default_coefficients_non_negative_and_mu_c_cutoff() {
        let g = grid(200);
        let p = sample_default_coefficients(&g);
        for f in [&p.r_h, &p.r_c, &p.d_h, &p.d_c, &p.mu_h, &p.mu_c] {
            assert!(f.values().iter().all(|v| *v >= 0.0));
        }
        for (j, x) in g.nodes().into_iter().enumerate() {
            if 0.9 / (0.49 + 0.6 * x * x) <= 1.0 {
                assert_eq!(p.mu_c[j], 0.0, "x = {x}");
            }
        }
    }

    #[test]
    fn profile_whitelist_round_trips() {
        for (name, p) in Profile::TABLE {
            assert_eq!(Profile::parse(name), Some(p));
            assert_eq!(p.formula(), name);
        }
        assert_eq!(Profile::parse(" 3 / (1 + x^2) "), Some(Profile::CancerGrowth));
        assert_eq!(Profile::parse("sin(x)"), None);
    }

    #[test]
    fn normalization_hits_reference_masses() {
        let g = grid(20);
        let (_, n) = normalize_initial_density(&g, 0.1, 2.7).unwrap();
        assert!((g.rectangle(&n) - 2.7).abs() <= 2.7 * 1e-12);
        assert!(normalize_initial_density(&g, 0.1, 0.0).is_err());
        assert!(normalize_initial_density(&g, 0.0, 1.0).is_err());
    }

    #[test]
    fn normalization_constant_matches_quadrature() {
        // Rectangle mass of exp(-(x-0.5)^2/0.1) on N_x = 20, and the
        // continuous integral sqrt(0.1 pi) erf(0.5/sqrt(0.1)), both computed
        // offline with scipy.
        let rect20 = 0.5459505243936865;
        let continuous = 0.546291971785148;
        let (k, _) = normalize_initial_density(&grid(20), 0.1, 0.5).unwrap();
        assert!((k - 0.5 / rect20).abs() < 1e-13);
        assert!((k - 0.5 / continuous).abs() / k < 1e-3);
    }

    #[test]
    fn continuation_at_zero_is_simplified_problem() {
        let g = grid(10);
        let p = sample_default_coefficients(&g);
        let e = apply_continuation(&p, &ContinuationVector::zeros());
        assert_eq!(e.beta_h, 0.0);
        assert_eq!(e.beta_c, 0.0);
        assert_eq!(e.a_ch, 0.0);
        assert_eq!(e.theta_hc, 0.0);
        assert_eq!(e.theta_h, 0.0);
        assert_eq!(e.u1_max, p.u1_max0);
        assert_eq!(e.u2_max, p.u2_max0);
        let restored = ModelParameters {
            beta_h: p.beta_h,
            beta_c: p.beta_c,
            a_ch: p.a_ch,
            theta_hc: p.theta_hc,
            theta_h: p.theta_h,
            u1_max: p.u1_max,
            u2_max: p.u2_max,
            ..e
        };
        assert_eq!(restored, p);
    }

    #[test]
    fn continuation_at_one_is_identity() {
        let g = grid(10);
        let p = sample_default_coefficients(&g);
        let e = apply_continuation(&p, &ContinuationVector::ones());
        assert_eq!(e, p);
        assert_eq!(e.beta_c, 0.0001);
        assert_eq!(e.theta_hc, 0.4);
    }

    #[test]
    fn dose_bound_lift_is_affine() {
        let g = grid(10);
        let p = sample_default_coefficients(&g);
        let lam = ContinuationVector::zeros().with(ContinuationVector::U1_LIFT, 0.5).unwrap();
        assert_eq!(apply_continuation(&p, &lam).u1_max, 1.5);
        assert!(ContinuationVector::new([0.0, 0.0, 1.1, 0.0, 0.0, 0.0]).is_err());
        assert!(ContinuationVector::new([0.0, -0.1, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cfl_examples() {
        let mut p = sample_default_coefficients(&grid(20));
        p.beta_h = 0.0;
        let c = check_cfl(&p, &grid(20), &TimeGrid::new(60.0, 500).unwrap());
        assert!((c.number - 0.0048).abs() < 1e-15 && c.passed);
        let c = check_cfl(&p, &grid(12), &TimeGrid::new(80.0, 250).unwrap());
        assert!((c.number - 0.004608).abs() < 1e-15 && c.passed);
        p.beta_c = 0.0;
        let c = check_cfl(&p, &grid(12), &TimeGrid::new(80.0, 250).unwrap());
        assert_eq!(c.number, 0.0);
        assert!(c.passed);
    }

    #[test]
    fn cfl_uses_larger_diffusion_rate() {
        let p = sample_default_coefficients(&grid(20));
        let c = check_cfl(&p, &grid(20), &TimeGrid::new(60.0, 500).unwrap());
        assert!((c.number - 0.048).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_broken_orderings() {
        let g = grid(10);
        let mut p = sample_default_coefficients(&g);
        p.alpha_h = 2.0;
        assert!(p.validate(&g).is_err());
        let mut p = sample_default_coefficients(&g);
        p.a_ch = 1.5;
        assert!(p.validate(&g).is_err());
        let mut p = sample_default_coefficients(&g);
        p.theta_h = 1.0;
        assert!(p.validate(&g).is_err());
        let mut p = sample_default_coefficients(&g);
        p.u1_max0 = 3.0;
        assert!(p.validate(&g).is_err());
        // beta_h > beta_c is accepted.
        let p = sample_default_coefficients(&g);
        assert!(p.beta_h > p.beta_c);
        p.validate(&g).unwrap();
    }

    proptest! {
        #[test]
        fn normalized_mass_matches_target(eps in 1e-3f64..10.0, rho in 1e-3f64..100.0, nx in 2usize..80) {
            let g = grid(nx);
            let (k, n) = normalize_initial_density(&g, eps, rho).unwrap();
            prop_assert!(k > 0.0);
            prop_assert!(((g.rectangle(&n) - rho) / rho).abs() <= 1e-12);
        }

        #[test]
        fn continuation_only_touches_lambda_fields(l in proptest::array::uniform6(0.0f64..=1.0)) {
            let g = grid(8);
            let p = sample_default_coefficients(&g);
            let e = apply_continuation(&p, &ContinuationVector::new(l).unwrap());
            prop_assert_eq!(&e.r_c, &p.r_c);
            prop_assert_eq!(e.a_hc, p.a_hc);
            prop_assert_eq!(e.alpha_c, p.alpha_c);
            prop_assert!(e.u1_max >= p.u1_max0 && e.u1_max <= p.u1_max);
            prop_assert!(e.u2_max >= p.u2_max0 && e.u2_max <= p.u2_max);
        }
    }
}
