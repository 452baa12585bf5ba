use super::DspError;

/// Relative diagonal loading applied to `r0` before the recursion.
const DIAGONAL_LOADING: f64 = 1e-9;

/// `r_k = Σ_n frame[n]·frame[n+k]` for `k = 0..=max_lag`.
pub fn autocorrelate(frame: &[f64], max_lag: usize) -> Result<Vec<f64>, DspError> {
    if frame.is_empty() {
        return Err(DspError::EmptyFrame);
    }
    if max_lag >= frame.len() {
        return Err(DspError::LagTooLarge {
            max_lag,
            len: frame.len(),
        });
    }
    Ok((0..=max_lag)
        .map(|k| frame[..frame.len() - k].iter().zip(&frame[k..]).map(|(a, b)| a * b).sum())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpAnalysis {
    /// Predictor coefficients: `p_n = Σ coeffs[i-1]·x[n-i]`.
    pub coeffs: Vec<f64>,
    pub reflection: Vec<f64>,
    /// Final prediction error power.
    pub error: f64,
}

/// Levinson-Durbin recursion for the order-`order` predictor.
pub fn levinson_durbin(r: &[f64], order: usize) -> Result<LpAnalysis, DspError> {
    if r.len() < order + 1 {
        return Err(DspError::TooFewLags {
            order,
            needed: order + 1,
            got: r.len(),
        });
    }
    let r0 = r[0];
    if !(r0 > 0.0) {
        return Err(DspError::DegenerateFrame { r0 });
    }
    let mut a = vec![0.0; order];
    let mut prev = vec![0.0; order];
    let mut reflection = Vec::with_capacity(order);
    let mut err = r0 * (1.0 + DIAGONAL_LOADING);
    for i in 0..order {
        let acc = r[i + 1] - (0..i).map(|j| a[j] * r[i - j]).sum::<f64>();
        let k = acc / err;
        prev[..i].copy_from_slice(&a[..i]);
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        a[i] = k;
        reflection.push(k);
        err *= 1.0 - k * k;
    }
    Ok(LpAnalysis {
        coeffs: a,
        reflection,
        error: err,
    })
}

/// Step-down recursion: predictor coefficients back to reflection
/// coefficients. Fails as soon as one has magnitude ≥ 1.
pub fn reflection_coefficients(coeffs: &[f64]) -> Result<Vec<f64>, DspError> {
    let mut a = coeffs.to_vec();
    let mut ks = vec![0.0; a.len()];
    for m in (1..=a.len()).rev() {
        let k = a[m - 1];
        if !(k.abs() < 1.0) {
            return Err(DspError::UnstableFilter { index: m - 1, value: k });
        }
        ks[m - 1] = k;
        let d = 1.0 - k * k;
        let next: Vec<f64> = (0..m - 1).map(|j| (a[j] + k * a[m - 2 - j]) / d).collect();
        a.truncate(m - 1);
        a.copy_from_slice(&next);
    }
    Ok(ks)
}

/// True when every root of `1 − Σ αᵢ z⁻ⁱ` lies inside the unit circle.
pub fn is_stable(coeffs: &[f64]) -> bool {
    reflection_coefficients(coeffs).is_ok()
}

/// LP coefficients plus the most recent emitted samples (newest first).
#[derive(Clone, Debug, PartialEq)]
pub struct LpFilter {
    coeffs: Vec<f64>,
    history: Vec<f64>,
}

impl LpFilter {
    /// Filter with zeroed history.
    pub fn new(coeffs: Vec<f64>) -> Self {
        let history = vec![0.0; coeffs.len()];
        Self { coeffs, history }
    }

    pub fn with_history(coeffs: Vec<f64>, history: Vec<f64>) -> Result<Self, DspError> {
        if history.len() != coeffs.len() {
            return Err(DspError::InvalidConfig(format!(
                "history length {} != order {}",
                history.len(),
                coeffs.len()
            )));
        }
        Ok(Self { coeffs, history })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Swaps in a new frame's coefficients; history is kept.
    pub fn set_coeffs(&mut self, coeffs: &[f64]) {
        assert_eq!(coeffs.len(), self.coeffs.len(), "LP order is fixed per filter");
        self.coeffs.copy_from_slice(coeffs);
    }

    /// `p_n = Σ αᵢ·x[n−i]`.
    pub fn predict(&self) -> f64 {
        self.coeffs.iter().zip(&self.history).map(|(a, x)| a * x).sum()
    }

    /// Records an emitted sample as the newest history entry.
    pub fn push(&mut self, x: f64) {
        if self.history.is_empty() {
            return;
        }
        self.history.rotate_right(1);
        self.history[0] = x;
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|h| *h = 0.0);
    }
}
