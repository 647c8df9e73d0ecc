//! Frame/prompt contrastive loss, frame-ordering triplet loss and their
//! weighted sum, with closed-form gradients.
//!
//! Rows of `v1`, `v2` and `p` are per-video embeddings of the earlier frame,
//! the later frame and the action-injected prompt.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::round_sig;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("zero-norm embedding in {which} row {row}")]
    ZeroNormEmbedding { which: &'static str, row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature τ.
    pub temperature: f64,
    /// Triplet margin ε.
    pub margin: f64,
    /// Weight λ on the contrastive term.
    pub lambda: f64,
    pub contrastive: bool,
    pub triplet: bool,
    /// Adds the prompt→frame direction and averages the two.
    pub symmetric_infonce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            margin: 0.2,
            lambda: 0.1,
            contrastive: true,
            triplet: true,
            symmetric_infonce: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Config("temperature must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.lambda >= 0.0) {
            return Err(LossError::Config("margin and lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cosine similarity between every row of `v` and every row of `p`.
pub fn correlation_matrix(v: &Array2<f64>, p: &Array2<f64>) -> Result<Array2<f64>, LossError> {
    let (vn, _) = normalize_rows(v, "frames")?;
    let (pn, _) = normalize_rows(p, "prompts")?;
    Ok(vn.dot(&pn.t()))
}

fn normalize_rows(
    x: &Array2<f64>,
    which: &'static str,
) -> Result<(Array2<f64>, Array1<f64>), LossError> {
    let mut out = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() {
            return Err(LossError::NonFinite(which));
        }
        if n == 0.0 {
            return Err(LossError::ZeroNormEmbedding { which, row: i });
        }
        row /= n;
        norms[i] = n;
    }
    Ok((out, norms))
}

fn softmax(row: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let scaled = row.mapv(|f| f / temperature);
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = scaled.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// `S_i = exp(F_ii/τ) / Σ_j exp(F_ij/τ)`.
pub fn alignment_scores(f: &Array2<f64>, temperature: f64) -> Result<Array1<f64>, LossError> {
    if f.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite("correlations"));
    }
    Ok(f.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| softmax(row, temperature)[i])
        .collect())
}

/// `−(1/B) Σ_i (log S¹_i + log S²_i)`.
pub fn contrastive_loss(s1: &Array1<f64>, s2: &Array1<f64>) -> f64 {
    let b = s1.len() as f64;
    -(s1.iter().zip(s2).map(|(a, c)| a.ln() + c.ln()).sum::<f64>()) / b
}

/// `(1/B) Σ_i max(‖v2_i − p_i‖ − ‖v1_i − p_i‖ + ε, 0)`: the later frame is
/// the positive.
pub fn triplet_loss(v1: &Array2<f64>, v2: &Array2<f64>, p: &Array2<f64>, margin: f64) -> f64 {
    let b = p.nrows() as f64;
    (0..p.nrows())
        .map(|i| triplet_gap(v1.row(i), v2.row(i), p.row(i), margin).max(0.0))
        .sum::<f64>()
        / b
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hinge argument for one sample.
pub fn triplet_gap(v1: ArrayView1<f64>, v2: ArrayView1<f64>, p: ArrayView1<f64>, margin: f64) -> f64 {
    distance(v2, p) - distance(v1, p) + margin
}

/// `λ · L_contrastive + L_triplet`.
pub fn total_loss(contrastive: f64, triplet: f64, lambda: f64) -> f64 {
    lambda * contrastive + triplet
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub f1: Array2<f64>,
    pub f2: Array2<f64>,
    pub s1: Array1<f64>,
    pub s2: Array1<f64>,
    pub contrastive: f64,
    pub triplet: f64,
    pub total: f64,
}

impl LossReport {
    /// JSON with every float rounded to 6 significant digits.
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &Array2<f64>| -> Vec<Vec<f64>> {
            m.rows()
                .into_iter()
                .map(|r| r.iter().map(|&x| round_sig(x)).collect())
                .collect()
        };
        let vec = |v: &Array1<f64>| -> Vec<f64> { v.iter().map(|&x| round_sig(x)).collect() };
        serde_json::json!({
            "f1": mat(&self.f1),
            "f2": mat(&self.f2),
            "s1": vec(&self.s1),
            "s2": vec(&self.s2),
            "l_contrastive": round_sig(self.contrastive),
            "l_triplet": round_sig(self.triplet),
            "l_total": round_sig(self.total),
        })
    }
}

/// Gradients of `L_total` with respect to the three embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub v1: Array2<f64>,
    pub v2: Array2<f64>,
    pub p: Array2<f64>,
}

fn check_shapes(v1: &Array2<f64>, v2: &Array2<f64>, p: &Array2<f64>) -> Result<(), LossError> {
    if v1.dim() != p.dim() || v2.dim() != p.dim() || p.nrows() == 0 {
        return Err(LossError::Shape(format!(
            "v1 {:?}, v2 {:?}, p {:?}",
            v1.dim(),
            v2.dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// Forward pass only.
pub fn evaluate(
    v1: &Array2<f64>,
    v2: &Array2<f64>,
    p: &Array2<f64>,
    config: &LossConfig,
) -> Result<LossReport, LossError> {
    evaluate_with_grads(v1, v2, p, config).map(|(r, _)| r)
}

/// Loss report plus closed-form gradients.
pub fn evaluate_with_grads(
    v1: &Array2<f64>,
    v2: &Array2<f64>,
    p: &Array2<f64>,
    config: &LossConfig,
) -> Result<(LossReport, LossGrads), LossError> {
    config.validate()?;
    check_shapes(v1, v2, p)?;
    let b = p.nrows();
    let (u1, n1) = normalize_rows(v1, "v1")?;
    let (u2, n2) = normalize_rows(v2, "v2")?;
    let (q, np) = normalize_rows(p, "p")?;
    let f1 = u1.dot(&q.t());
    let f2 = u2.dot(&q.t());
    let s1 = alignment_scores(&f1, config.temperature)?;
    let s2 = alignment_scores(&f2, config.temperature)?;

    let mut grad_v1 = Array2::zeros(v1.dim());
    let mut grad_v2 = Array2::zeros(v2.dim());
    let mut grad_p = Array2::zeros(p.dim());

    let contrastive = if config.contrastive {
        let (l1, g1) = infonce(&f1, config);
        let (l2, g2) = infonce(&f2, config);
        let weight = config.lambda;
        cosine_backward(&g1, &f1, &u1, &n1, &q, &np, weight, &mut grad_v1, &mut grad_p);
        cosine_backward(&g2, &f2, &u2, &n2, &q, &np, weight, &mut grad_v2, &mut grad_p);
        l1 + l2
    } else {
        0.0
    };

    let triplet = if config.triplet {
        let mut sum = 0.0;
        for i in 0..b {
            let gap = triplet_gap(v1.row(i), v2.row(i), p.row(i), config.margin);
            if gap <= 0.0 {
                continue;
            }
            sum += gap;
            let d2 = &v2.row(i) - &p.row(i);
            let d1 = &v1.row(i) - &p.row(i);
            let (l2, l1) = (d2.dot(&d2).sqrt(), d1.dot(&d1).sqrt());
            let scale = 1.0 / b as f64;
            if l2 > 0.0 {
                let unit = &d2 / l2 * scale;
                grad_v2.row_mut(i).scaled_add(1.0, &unit);
                grad_p.row_mut(i).scaled_add(-1.0, &unit);
            }
            if l1 > 0.0 {
                let unit = &d1 / l1 * scale;
                grad_v1.row_mut(i).scaled_add(-1.0, &unit);
                grad_p.row_mut(i).scaled_add(1.0, &unit);
            }
        }
        sum / b as f64
    } else {
        0.0
    };

    let total = total_loss(contrastive, triplet, config.lambda);
    if !total.is_finite() {
        return Err(LossError::NonFinite("loss"));
    }
    Ok((
        LossReport {
            f1,
            f2,
            s1,
            s2,
            contrastive,
            triplet,
            total,
        },
        LossGrads {
            v1: grad_v1,
            v2: grad_v2,
            p: grad_p,
        },
    ))
}

/// One frame set's contrastive term and `∂/∂F`.
fn infonce(f: &Array2<f64>, config: &LossConfig) -> (f64, Array2<f64>) {
    let b = f.nrows();
    let bt = b as f64 * config.temperature;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(f.dim());
    let directions: &[Axis] = if config.symmetric_infonce {
        &[Axis(0), Axis(1)]
    } else {
        &[Axis(0)]
    };
    let share = 1.0 / directions.len() as f64;
    for &axis in directions {
        // Axis(0) iterates rows: softmax over prompts j for each frame i.
        for (i, lane) in f.lanes(if axis == Axis(0) { Axis(1) } else { Axis(0) }).into_iter().enumerate() {
            let probs = softmax(lane, config.temperature);
            loss -= share * probs[i].ln() / b as f64;
            for (j, pj) in probs.iter().enumerate() {
                let delta = if i == j { 1.0 } else { 0.0 };
                let (r, c) = if axis == Axis(0) { (i, j) } else { (j, i) };
                grad[[r, c]] += share * (pj - delta) / bt;
            }
        }
    }
    (loss, grad)
}

/// Chains `∂L/∂F` (scaled by `weight`) through `F_ij = cos(v_i, p_j)`.
#[allow(clippy::too_many_arguments)]
fn cosine_backward(
    grad_f: &Array2<f64>,
    f: &Array2<f64>,
    u: &Array2<f64>,
    v_norms: &Array1<f64>,
    q: &Array2<f64>,
    p_norms: &Array1<f64>,
    weight: f64,
    grad_v: &mut Array2<f64>,
    grad_p: &mut Array2<f64>,
) {
    let b = f.nrows();
    for i in 0..b {
        for j in 0..b {
            let g = weight * grad_f[[i, j]];
            if g == 0.0 {
                continue;
            }
            let fij = f[[i, j]];
            let dv = (&q.row(j) - &(&u.row(i) * fij)) / v_norms[i];
            grad_v.row_mut(i).scaled_add(g, &dv);
            let dp = (&u.row(i) - &(&q.row(j) * fij)) / p_norms[j];
            grad_p.row_mut(j).scaled_add(g, &dp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_rows_have_unit_diagonal() {
        let v = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let f = correlation_matrix(&v, &v).unwrap();
        for i in 0..3 {
            assert!((f[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_of_axis_and_diagonal() {
        let f = correlation_matrix(&array![[1.0, 0.0]], &array![[1.0, 1.0]]).unwrap();
        assert!((f[[0, 0]] - 0.707_107).abs() < 1e-6);
        let f = correlation_matrix(&array![[1.0, 0.0]], &array![[0.0, 3.0]]).unwrap();
        assert_eq!(f[[0, 0]], 0.0);
    }

    #[test]
    fn zero_norm_row_is_an_error() {
        let err = correlation_matrix(&array![[0.0, 0.0]], &array![[1.0, 0.0]]).unwrap_err();
        assert_eq!(err, LossError::ZeroNormEmbedding { which: "frames", row: 0 });
    }

    #[test]
    fn single_sample_scores_are_one() {
        assert_eq!(alignment_scores(&array![[0.3]], 0.07).unwrap(), array![1.0]);
    }

    #[test]
    fn uniform_correlations_give_uniform_scores() {
        let s = alignment_scores(&Array2::from_elem((4, 4), 0.2), 0.07).unwrap();
        assert!(s.iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn two_way_softmax_matches_scalar_formula() {
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let s = alignment_scores(&f, 0.07).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((s[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(&array![1.0], &array![1.0]), 0.0);
        let u = Array1::from_elem(4, 0.25);
        assert!((contrastive_loss(&u, &u) - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((contrastive_loss(&u, &u) - 2.772_589).abs() < 1e-6);
    }

    #[test]
    fn triplet_examples() {
        let p = array![[0.0, 0.0]];
        let same = array![[1.0, 2.0]];
        assert!((triplet_loss(&same, &same, &p, 0.2) - 0.2).abs() < 1e-15);
        // v2 = p, |v1 - p| = sqrt(2)
        assert_eq!(triplet_loss(&array![[1.0, 1.0]], &p, &p, 0.2), 0.0);
        // v1 = p, |v2 - p| = 1
        assert!((triplet_loss(&p, &array![[0.0, 1.0]], &p, 0.2) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.1), 0.0);
        assert!((total_loss(2.0, 0.5, 0.1) - 0.7).abs() < 1e-12);
        assert_eq!(LossConfig::default().lambda, 0.1);
    }

    #[test]
    fn report_json_has_six_significant_digits() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let p = array![[1.0, 1.0], [0.0, 1.0]];
        let r = evaluate(&v, &v, &p, &LossConfig::default()).unwrap();
        let j = r.to_json();
        assert_eq!(j["f1"][0][0].as_f64().unwrap(), 0.707107);
    }

    #[test]
    fn disabled_terms_contribute_nothing() {
        let v1 = array![[1.0, 0.2], [0.1, 1.0]];
        let v2 = array![[0.9, 0.4], [0.3, 1.0]];
        let p = array![[1.0, 1.0], [0.5, 1.0]];
        let cfg = LossConfig { triplet: false, ..Default::default() };
        let (r, _) = evaluate_with_grads(&v1, &v2, &p, &cfg).unwrap();
        assert_eq!(r.triplet, 0.0);
        assert!((r.total - 0.1 * r.contrastive).abs() < 1e-15);
        let cfg = LossConfig { contrastive: false, ..Default::default() };
        let (r, g) = evaluate_with_grads(&v1, &v2, &p, &cfg).unwrap();
        assert_eq!(r.total, r.triplet);
        // contrastive-free gradient on v1 only comes from the hinge
        assert!(g.v1.iter().all(|x| x.is_finite()));
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn check_gradients(cfg: &LossConfig, seed: u64) {
        let v1 = random_matrix(4, 5, seed);
        let v2 = random_matrix(4, 5, seed + 1);
        let p = random_matrix(4, 5, seed + 2);
        let (_, g) = evaluate_with_grads(&v1, &v2, &p, cfg).unwrap();
        let h = 1e-6;
        let mats = [(&v1, &g.v1, 0), (&v2, &g.v2, 1), (&p, &g.p, 2)];
        for (m, grad, which) in mats {
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let bump = |d: f64| {
                    let mut x = [v1.clone(), v2.clone(), p.clone()];
                    x[which][[r, c]] += d;
                    evaluate(&x[0], &x[1], &x[2], cfg).unwrap().total
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = grad[[r, c]];
                assert!(
                    (numeric - analytic).abs() < 1e-5 * (1.0 + numeric.abs()),
                    "{which} [{r},{c}] numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(&LossConfig { margin: 2.0, ..Default::default() }, 10);
        check_gradients(&LossConfig::default(), 20);
        check_gradients(&LossConfig { symmetric_infonce: true, margin: 2.0, ..Default::default() }, 30);
        check_gradients(&LossConfig { triplet: false, temperature: 0.5, ..Default::default() }, 40);
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let p = array![[0.0, 1.0]];
        let v2 = array![[0.0, 1.1]];
        let v1 = array![[5.0, 0.0]];
        let cfg = LossConfig { contrastive: false, ..Default::default() };
        let (r, g) = evaluate_with_grads(&v1, &v2, &p, &cfg).unwrap();
        assert_eq!(r.triplet, 0.0);
        assert!(g.v1.iter().chain(g.v2.iter()).chain(g.p.iter()).all(|&x| x == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn contrastive_is_scale_invariant(seed in 0u64..500, k in 0.1f64..10.0) {
            let v1 = random_matrix(3, 4, seed);
            let v2 = random_matrix(3, 4, seed + 7);
            let p = random_matrix(3, 4, seed + 13);
            let cfg = LossConfig { triplet: false, ..Default::default() };
            let a = evaluate(&v1, &v2, &p, &cfg).unwrap();
            let b = evaluate(&(&v1 * k), &(&v2 * k), &(&p * k), &cfg).unwrap();
            proptest::prop_assert!((a.contrastive - b.contrastive).abs() < 1e-9);
        }

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..500) {
            let v1 = random_matrix(4, 3, seed);
            let v2 = random_matrix(4, 3, seed + 1);
            let p = random_matrix(4, 3, seed + 2);
            let order = [2usize, 0, 3, 1];
            let perm = |m: &Array2<f64>| m.select(Axis(0), &order);
            let cfg = LossConfig::default();
            let a = evaluate(&v1, &v2, &p, &cfg).unwrap();
            let b = evaluate(&perm(&v1), &perm(&v2), &perm(&p), &cfg).unwrap();
            proptest::prop_assert!((a.total - b.total).abs() < 1e-9);
        }

        #[test]
        fn triplet_is_translation_invariant(seed in 0u64..500, shift in -5.0f64..5.0) {
            let v1 = random_matrix(3, 4, seed);
            let v2 = random_matrix(3, 4, seed + 1);
            let p = random_matrix(3, 4, seed + 2);
            let a = triplet_loss(&v1, &v2, &p, 0.2);
            let b = triplet_loss(&(&v1 + shift), &(&v2 + shift), &(&p + shift), 0.2);
            proptest::prop_assert!((a - b).abs() < 1e-9);
            proptest::prop_assert!(a >= 0.0);
        }

        #[test]
        fn scores_are_probabilities(seed in 0u64..500) {
            let f = correlation_matrix(&random_matrix(5, 3, seed), &random_matrix(5, 3, seed + 9)).unwrap();
            let s = alignment_scores(&f, 0.07).unwrap();
            proptest::prop_assert!(s.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
    }
}
