//! Noise schedules for the masked (discrete) and Gaussian (continuous)
//! channels, and every coefficient derived from them.
//!
//! Schedules are dense `T + 1` arrays built once; callers index by integer
//! step and never re-evaluate the closed forms.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, invalid, LddmError, Result};

/// Loss weighting for either channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// ELBO-derived per-step weights.
    Elbo,
    /// Unit weights (`-1` on the discrete log-likelihood, `1` on the latent error).
    Unit,
}

impl FromStr for WeightMode {
    type Err = LddmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(WeightMode::Elbo),
            "unit" => Ok(WeightMode::Unit),
            _ => Err(invalid!("unknown weight mode `{s}`")),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Elbo => "elbo",
            WeightMode::Unit => "unit",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskScheduleKind {
    Linear,
}

impl FromStr for MaskScheduleKind {
    type Err = LddmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MaskScheduleKind::Linear),
            _ => Err(invalid!("unknown mask schedule `{s}`")),
        }
    }
}

/// Survival probabilities `gamma_bar[t]` of an unmasked token after `t` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSchedule {
    steps: usize,
    gamma_bar: Vec<f64>,
}

impl MaskSchedule {
    pub fn new(steps: usize, kind: MaskScheduleKind) -> Result<Self> {
        ensure!(steps >= 1, invalid!("mask schedule needs T >= 1, got {steps}"));
        let gamma_bar = match kind {
            MaskScheduleKind::Linear => (0..=steps)
                .map(|t| 1.0 - t as f64 / steps as f64)
                .collect(),
        };
        Ok(MaskSchedule { steps, gamma_bar })
    }

    /// Build from explicit survival values; must start at 1, end at 0 and be
    /// non-increasing.
    pub fn from_values(gamma_bar: Vec<f64>) -> Result<Self> {
        ensure!(gamma_bar.len() >= 2, invalid!("need at least two schedule entries"));
        ensure!(gamma_bar[0] == 1.0, invalid!("gamma_bar[0] must be 1"));
        ensure!(*gamma_bar.last().unwrap() == 0.0, invalid!("gamma_bar[T] must be 0"));
        ensure!(
            gamma_bar.windows(2).all(|w| w[1] <= w[0]),
            invalid!("gamma_bar must be non-increasing")
        );
        Ok(MaskSchedule { steps: gamma_bar.len() - 1, gamma_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.gamma_bar[t]
    }

    pub fn gamma_bars(&self) -> &[f64] {
        &self.gamma_bar
    }

    /// Single-step keep probability `gamma_bar[t] / gamma_bar[t-1]`.
    pub fn step_keep(&self, t: usize) -> f64 {
        let prev = self.gamma_bar[t - 1];
        if prev == 0.0 {
            0.0
        } else {
            self.gamma_bar[t] / prev
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure!(t <= self.steps, invalid!("step {t} outside [0, {}]", self.steps));
        Ok(())
    }
}

/// ELBO weight of the discrete term at step `t`; negative for decreasing
/// schedules.
pub fn elbo_weight_discrete(ms: &MaskSchedule, t: usize) -> Result<f64> {
    ensure!(t >= 1, invalid!("discrete ELBO weight needs t >= 1"));
    ms.check_step(t)?;
    let g = ms.gamma_bar(t);
    if g >= 1.0 {
        return Err(LddmError::DegenerateSchedule(format!(
            "gamma_bar[{t}] = 1 makes the discrete ELBO weight undefined"
        )));
    }
    Ok((g - ms.gamma_bar(t - 1)) / (1.0 - g))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContinuousKind {
    VpLinear,
    VpCosine { s_offset: f64 },
}

impl ContinuousKind {
    pub const COSINE_OFFSET: f64 = 0.008;

    pub fn parse(name: &str, s_offset: f64) -> Result<Self> {
        match name {
            "vp_linear" => Ok(ContinuousKind::VpLinear),
            "vp_cosine" => Ok(ContinuousKind::VpCosine { s_offset }),
            _ => Err(invalid!("unknown continuous schedule `{name}`")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContinuousKind::VpLinear => "vp_linear",
            ContinuousKind::VpCosine { .. } => "vp_cosine",
        }
    }
}

/// Variance-preserving Gaussian schedule: signal scale `alpha_bar[t]` and
/// noise scale `sigma_bar[t]` of `q(y_t | y_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSchedule {
    steps: usize,
    kind: ContinuousKind,
    alpha_bar: Vec<f64>,
    sigma_bar: Vec<f64>,
}

const COSINE_ALPHA_FLOOR: f64 = 1e-12;

impl ContinuousSchedule {
    pub fn new(steps: usize, kind: ContinuousKind) -> Result<Self> {
        ensure!(steps >= 1, invalid!("continuous schedule needs T >= 1, got {steps}"));
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut sigma_bar = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let tau = t as f64 / steps as f64;
            let a2 = match kind {
                ContinuousKind::VpLinear => 1.0 - tau,
                ContinuousKind::VpCosine { s_offset } => {
                    ensure!(
                        s_offset > 0.0 && s_offset.is_finite(),
                        invalid!("cosine offset must be positive, got {s_offset}")
                    );
                    let a = (((tau + s_offset) / (1.0 + s_offset)) * std::f64::consts::FRAC_PI_2).cos();
                    let a = a.clamp(COSINE_ALPHA_FLOOR, 1.0);
                    a * a
                }
            };
            let a2 = a2.clamp(0.0, 1.0);
            alpha_bar.push(a2.sqrt());
            sigma_bar.push((1.0 - a2).max(0.0).sqrt());
        }
        // exact endpoint
        alpha_bar[0] = 1.0;
        sigma_bar[0] = 0.0;
        Ok(ContinuousSchedule { steps, kind, alpha_bar, sigma_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ContinuousKind {
        self.kind
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    #[inline]
    pub fn sigma_bar(&self, t: usize) -> f64 {
        self.sigma_bar[t]
    }

    /// Per-step signal scale `alpha_bar[t] / alpha_bar[t-1]`.
    pub fn step_alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }
}

/// Coefficients of the Gaussian bridge `q(y_s | y_t, y_0)`:
/// mean `mu_coef_yt * y_t + mu_coef_y0 * y_0`, isotropic variance `var`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeCoefficients {
    pub mu_coef_yt: f64,
    pub mu_coef_y0: f64,
    pub var: f64,
}

pub fn bridge_coefficients(cs: &ContinuousSchedule, s: usize, t: usize) -> Result<BridgeCoefficients> {
    ensure!(s < t, invalid!("bridge needs s < t, got s={s}, t={t}"));
    ensure!(t <= cs.steps, invalid!("step {t} outside [0, {}]", cs.steps));
    let (a_s, a_t) = (cs.alpha_bar(s), cs.alpha_bar(t));
    let (sig_s, sig_t) = (cs.sigma_bar(s), cs.sigma_bar(t));
    if a_s == 0.0 {
        return Err(LddmError::DegenerateSchedule(format!("alpha_bar[{s}] = 0")));
    }
    if sig_t == 0.0 {
        return Err(LddmError::DegenerateSchedule(format!("sigma_bar[{t}] = 0")));
    }
    let a_ts = a_t / a_s;
    let var_ts = (sig_t * sig_t - a_ts * a_ts * sig_s * sig_s).max(0.0);
    let st2 = sig_t * sig_t;
    Ok(BridgeCoefficients {
        mu_coef_yt: a_ts * sig_s * sig_s / st2,
        mu_coef_y0: a_s * var_ts / st2,
        var: (var_ts * sig_s * sig_s / st2).max(0.0),
    })
}

/// ELBO weight of the continuous reconstruction term at step `t >= 2`.
pub fn elbo_weight_continuous(cs: &ContinuousSchedule, t: usize) -> Result<f64> {
    ensure!(t >= 1 && t <= cs.steps, invalid!("step {t} outside [1, {}]", cs.steps));
    let sig_prev = cs.sigma_bar(t - 1);
    if sig_prev == 0.0 {
        return Err(LddmError::DegenerateSchedule(format!(
            "sigma_bar[{}] = 0 makes the continuous ELBO weight undefined",
            t - 1
        )));
    }
    let a_prev = cs.alpha_bar(t - 1);
    let a_step = cs.step_alpha(t);
    let sig_t = cs.sigma_bar(t);
    let step_var = sig_t * sig_t - a_step * a_step * sig_prev * sig_prev;
    Ok(a_prev * a_prev * step_var / (2.0 * sig_prev * sig_prev * sig_t * sig_t))
}

pub fn continuous_weight(cs: &ContinuousSchedule, t: usize, mode: WeightMode) -> Result<f64> {
    match mode {
        WeightMode::Elbo => elbo_weight_continuous(cs, t),
        WeightMode::Unit => Ok(1.0),
    }
}

pub fn discrete_weight(ms: &MaskSchedule, t: usize, mode: WeightMode) -> Result<f64> {
    match mode {
        WeightMode::Elbo => elbo_weight_discrete(ms, t),
        WeightMode::Unit => Ok(-1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cosine() -> ContinuousKind {
        ContinuousKind::VpCosine { s_offset: 0.008 }
    }

    #[test]
    fn linear_mask_schedule_values() {
        let ms = MaskSchedule::new(4, MaskScheduleKind::Linear).unwrap();
        assert_eq!(ms.gamma_bars(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        let big = MaskSchedule::new(4000, MaskScheduleKind::Linear).unwrap();
        assert_eq!(big.gamma_bar(0), 1.0);
        assert_eq!(big.gamma_bar(4000), 0.0);
        assert!(matches!(
            MaskSchedule::new(0, MaskScheduleKind::Linear),
            Err(LddmError::InvalidArgument(_))
        ));
    }

    #[test]
    fn continuous_schedule_examples() {
        let lin = ContinuousSchedule::new(2, ContinuousKind::VpLinear).unwrap();
        let a2: Vec<f64> = (0..=2).map(|t| lin.alpha_bar(t).powi(2)).collect();
        let s2: Vec<f64> = (0..=2).map(|t| lin.sigma_bar(t).powi(2)).collect();
        for (x, y) in a2.iter().zip([1.0, 0.5, 0.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in s2.iter().zip([0.0, 0.5, 1.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        let cos = ContinuousSchedule::new(1000, cosine()).unwrap();
        assert!((cos.sigma_bar(1000) - 1.0).abs() < 1e-12);
        assert!(cos.alpha_bar(1000) <= 1e-12);
        // tau = 0 of the raw formula; the schedule pins alpha_bar[0] = 1 exactly
        let raw = ((0.008f64 / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        assert!((raw - 0.999845).abs() < 1e-6);
        assert!((cos.alpha_bar(1).powi(2) - 0.99984).abs() < 1e-4);
        assert!(ContinuousSchedule::new(10, ContinuousKind::VpCosine { s_offset: 0.0 }).is_err());
        assert!(ContinuousSchedule::new(0, ContinuousKind::VpLinear).is_err());
    }

    #[test]
    fn bridge_at_origin_is_clean_point() {
        let cs = ContinuousSchedule::new(50, cosine()).unwrap();
        let b = bridge_coefficients(&cs, 0, 1).unwrap();
        assert_eq!(b.mu_coef_yt, 0.0);
        assert!((b.mu_coef_y0 - 1.0).abs() < 1e-15);
        assert_eq!(b.var, 0.0);
        assert!(bridge_coefficients(&cs, 3, 3).is_err());
        assert!(bridge_coefficients(&cs, 4, 3).is_err());
    }

    /// Exact conditional of Y_s given (Y_t, Y_0) for scalar Y_0 = y0, built
    /// from the joint covariance of (Y_s, Y_t) given Y_0.
    fn brute_force_bridge(cs: &ContinuousSchedule, s: usize, t: usize) -> (f64, f64, f64) {
        let (a_s, a_t) = (cs.alpha_bar(s), cs.alpha_bar(t));
        let (sig_s, sig_t) = (cs.sigma_bar(s), cs.sigma_bar(t));
        // Y_s = a_s y0 + sig_s e1 ; Y_t = (a_t/a_s) (Y_s - a_s y0) + a_t y0 + sqrt(v) e2
        let a_ts = a_t / a_s;
        let v_ts = sig_t * sig_t - a_ts * a_ts * sig_s * sig_s;
        let cov_ss = sig_s * sig_s;
        let cov_st = a_ts * sig_s * sig_s;
        let cov_tt = a_ts * a_ts * sig_s * sig_s + v_ts;
        // E[Y_s | Y_t, y0] = a_s y0 + cov_st / cov_tt (Y_t - a_t y0)
        let k = cov_st / cov_tt;
        let coef_yt = k;
        let coef_y0 = a_s - k * a_t;
        let var = cov_ss - cov_st * cov_st / cov_tt;
        (coef_yt, coef_y0, var)
    }

    #[test]
    fn bridge_matches_gaussian_conditioning() {
        let lin = ContinuousSchedule::new(2, ContinuousKind::VpLinear).unwrap();
        let b = bridge_coefficients(&lin, 1, 2).unwrap();
        let (cy, c0, v) = brute_force_bridge(&lin, 1, 2);
        assert!(b.mu_coef_yt.abs() < 1e-15);
        assert!((b.mu_coef_yt - cy).abs() < 1e-12);
        assert!((b.mu_coef_y0 - c0).abs() < 1e-12);
        assert!((b.var - v).abs() < 1e-12);
        // frozen oracle values: sqrt(0.5) and 0.5
        assert!((b.mu_coef_y0 - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((b.var - 0.5).abs() < 1e-12);

        let cos = ContinuousSchedule::new(40, cosine()).unwrap();
        for (s, t) in [(1, 2), (3, 17), (10, 39), (0, 40), (20, 40)] {
            if s == 0 {
                continue;
            }
            let b = bridge_coefficients(&cos, s, t).unwrap();
            let (cy, c0, v) = brute_force_bridge(&cos, s, t);
            assert!((b.mu_coef_yt - cy).abs() < 1e-10);
            assert!((b.mu_coef_y0 - c0).abs() < 1e-10);
            assert!((b.var - v).abs() < 1e-10);
        }
    }

    #[test]
    fn discrete_weight_linear() {
        let ms = MaskSchedule::new(4000, MaskScheduleKind::Linear).unwrap();
        assert!((elbo_weight_discrete(&ms, 2).unwrap() + 0.5).abs() < 1e-15);
        let flat = MaskSchedule::from_values(vec![1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(elbo_weight_discrete(&flat, 1), Err(LddmError::DegenerateSchedule(_))));
        assert_eq!(discrete_weight(&ms, 7, WeightMode::Unit).unwrap(), -1.0);
    }

    #[test]
    fn continuous_weight_examples() {
        let lin = ContinuousSchedule::new(2, ContinuousKind::VpLinear).unwrap();
        assert!(matches!(elbo_weight_continuous(&lin, 1), Err(LddmError::DegenerateSchedule(_))));
        assert!((elbo_weight_continuous(&lin, 2).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(continuous_weight(&lin, 1, WeightMode::Unit).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn bridge_variance_nonnegative_and_consistent(steps in 2usize..300, s_frac in 0.0f64..1.0, gap in 0.0f64..1.0, cosine_kind: bool) {
            let kind = if cosine_kind { cosine() } else { ContinuousKind::VpLinear };
            let cs = ContinuousSchedule::new(steps, kind).unwrap();
            let s = ((steps - 1) as f64 * s_frac) as usize;
            let t = (s + 1 + ((steps - s - 1) as f64 * gap) as usize).min(steps);
            let b = bridge_coefficients(&cs, s, t).unwrap();
            prop_assert!(b.var >= 0.0);
            let lhs = b.mu_coef_yt * cs.alpha_bar(t) + b.mu_coef_y0;
            prop_assert!((lhs - cs.alpha_bar(s)).abs() < 1e-10);
        }

        #[test]
        fn variance_preserving_and_recursive(steps in 1usize..2000, cosine_kind: bool) {
            let kind = if cosine_kind { cosine() } else { ContinuousKind::VpLinear };
            let cs = ContinuousSchedule::new(steps, kind).unwrap();
            for t in 0..=steps {
                let (a, s) = (cs.alpha_bar(t), cs.sigma_bar(t));
                prop_assert!((a * a + s * s - 1.0).abs() < 1e-10);
            }
            for t in 1..=steps {
                if cs.alpha_bar(t - 1) == 0.0 {
                    continue;
                }
                let r = cs.step_alpha(t);
                let rec = r * r * cs.sigma_bar(t - 1).powi(2) + (1.0 - r * r);
                prop_assert!((rec - cs.sigma_bar(t).powi(2)).abs() < 1e-10);
            }
        }

        #[test]
        fn bridge_composes_to_forward_marginal(steps in 2usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0, cosine_kind: bool) {
            let kind = if cosine_kind { cosine() } else { ContinuousKind::VpLinear };
            let cs = ContinuousSchedule::new(steps, kind).unwrap();
            let t = 1 + ((steps - 1) as f64 * a) as usize;
            let s = ((t - 1) as f64 * b) as usize;
            prop_assume!(cs.alpha_bar(s) > 0.0);
            let br = bridge_coefficients(&cs, s, t).unwrap();
            // Pushing q(y_t | y_0) through the bridge gives q(y_s | y_0).
            let var = br.mu_coef_yt.powi(2) * cs.sigma_bar(t).powi(2) + br.var;
            prop_assert!((var - cs.sigma_bar(s).powi(2)).abs() < 1e-10);
        }

        #[test]
        fn mask_survival_is_product_of_step_keeps(steps in 1usize..2000) {
            let ms = MaskSchedule::new(steps, MaskScheduleKind::Linear).unwrap();
            let mut prod = 1.0;
            for t in 1..=steps {
                prod *= ms.step_keep(t);
                prop_assert!((prod - ms.gamma_bar(t)).abs() < 1e-10);
                let w = elbo_weight_discrete(&ms, t).unwrap();
                prop_assert!((w + 1.0 / t as f64).abs() < 1e-10);
            }
        }
    }
}
