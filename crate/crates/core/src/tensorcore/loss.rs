//! Loss functions with analytic gradients.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Weight of the direction term in [`offset_loss`].
pub const OFFSET_DIRECTION_WEIGHT: f64 = 1.0;

/// Offsets shorter than this carry no direction and are skipped by the
/// cosine term.
const MIN_DIRECTION_NORM: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient w.r.t. the first input.
    pub grad: Matrix,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

fn normalize_rows(z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let n = norm(z.row(i));
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Normalization(i));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Back-propagates through `u = z / |z|` row-wise.
fn normalize_backward(u: &Matrix, norms: &[f64], du: &Matrix) -> Matrix {
    let mut dz = du.clone();
    for i in 0..u.rows() {
        let ur = u.row(i);
        let proj = dot(ur, du.row(i));
        for (d, (&uu, &g)) in dz.row_mut(i).iter_mut().zip(ur.iter().zip(du.row(i))) {
            *d = (g - uu * proj) / norms[i];
        }
    }
    dz
}

/// InfoNCE with cosine similarity and in-batch negatives: row `i` of `z_a`
/// is the anchor, row `i` of `z_b` its positive, every other row of `z_b` a
/// negative.
pub fn infonce_loss(z_a: &Matrix, z_b: &Matrix, tau: f64) -> Result<ContrastiveOutput> {
    if z_a.shape() != z_b.shape() {
        return Err(Error::Dimension(format!(
            "views have shapes {:?} and {:?}",
            z_a.shape(),
            z_b.shape()
        )));
    }
    let n = z_a.rows();
    if n < 2 {
        return Err(Error::NeedNegatives(n));
    }
    if !(tau > 0.0) {
        return Err(Error::Range(format!("temperature must be positive, got {tau}")));
    }
    let (a, na) = normalize_rows(z_a)?;
    let (b, nb) = normalize_rows(z_b)?;
    let logits = a.matmul_t(&b)?.map(|s| s / tau);

    let mut loss = 0.0;
    // dL/dlogits
    let mut dl = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        let d = dl.row_mut(i);
        for k in 0..n {
            d[k] = (row[k] - lse).exp() / n as f64;
        }
        d[i] -= 1.0 / n as f64;
    }
    loss /= n as f64;

    let da = dl.matmul(&b)?.map(|v| v / tau);
    let db = dl.t_matmul(&a)?.map(|v| v / tau);
    Ok(ContrastiveOutput {
        loss,
        grad_a: normalize_backward(&a, &na, &da),
        grad_b: normalize_backward(&b, &nb, &db),
    })
}

/// Class-weighted softmax cross-entropy over the rows selected by `mask`,
/// normalized by the summed weight of those rows.
pub fn weighted_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
    mask: &[bool],
) -> Result<LossOutput> {
    let (n, k) = logits.shape();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "{n} logit rows, {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    if class_weights.len() != k {
        return Err(Error::Dimension(format!(
            "{} class weights for {k} classes",
            class_weights.len()
        )));
    }
    let mut total_w = 0.0;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for i in (0..n).filter(|&i| mask[i]) {
        let y = labels[i];
        if y >= k {
            return Err(Error::Range(format!("label {y} with {k} classes")));
        }
        let w = class_weights[y];
        if w == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        loss += w * (lse - row[y]);
        total_w += w;
        let g = grad.row_mut(i);
        for c in 0..k {
            g[c] = w * (row[c] - lse).exp();
        }
        g[y] -= w;
    }
    if total_w == 0.0 {
        return Err(Error::NoLabels);
    }
    grad.as_mut_slice().iter_mut().for_each(|g| *g /= total_w);
    Ok(LossOutput {
        loss: loss / total_w,
        grad,
    })
}

/// Offset regression loss: mean L1 distance plus
/// [`OFFSET_DIRECTION_WEIGHT`] × mean (1 − cosine) over masked rows.
pub fn offset_loss(pred: &Matrix, gt: &Matrix, mask: &[bool]) -> Result<LossOutput> {
    if pred.shape() != gt.shape() || pred.cols() != 3 || mask.len() != pred.rows() {
        return Err(Error::Dimension(format!(
            "offset loss on {:?} vs {:?} with {} mask entries",
            pred.shape(),
            gt.shape(),
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..pred.rows()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoLabels);
    }
    let mut grad = Matrix::zeros(pred.rows(), 3);
    let m = rows.len() as f64;
    let mut l1 = 0.0;
    for &i in &rows {
        for c in 0..3 {
            let d = pred[(i, c)] - gt[(i, c)];
            l1 += d.abs();
            if d != 0.0 {
                grad[(i, c)] += d.signum() / m;
            }
        }
    }
    l1 /= m;

    let dir_rows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&i| norm(gt.row(i)) >= MIN_DIRECTION_NORM)
        .collect();
    let mut dir = 0.0;
    if !dir_rows.is_empty() {
        let md = dir_rows.len() as f64;
        for &i in &dir_rows {
            let p = pred.row(i);
            let g = gt.row(i);
            let pn = norm(p).max(MIN_DIRECTION_NORM);
            let gn = norm(g);
            let cos = dot(p, g) / (pn * gn);
            dir += 1.0 - cos;
            // d(1 - cos)/dp = -(g/(|p||g|) - cos p/|p|²)
            let scale = OFFSET_DIRECTION_WEIGHT / md;
            for c in 0..3 {
                let dcos = g[c] / (pn * gn) - cos * p[c] / (pn * pn);
                grad[(i, c)] -= scale * dcos;
            }
        }
        dir /= md;
    }
    Ok(LossOutput {
        loss: l1 + OFFSET_DIRECTION_WEIGHT * dir,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn infonce_uniform_similarity_is_log_n() {
        // Identical rows: every similarity equals 1.
        let n = 100;
        let z = Matrix::from_vec(n, 4, vec![0.5; n * 4]).unwrap();
        let out = infonce_loss(&z, &z, 0.4).unwrap();
        assert!(close(out.loss, (n as f64).ln(), 1e-12), "{}", out.loss);
    }

    #[test]
    fn infonce_two_rows_direct_evaluation() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t1 = infonce_loss(&a, &a, 1.0).unwrap().loss;
        assert!(close(t1, (1.0 + (-1.0f64).exp()).ln(), 1e-12));
        assert!(close(t1, 0.3133, 5e-5));
        let t01 = infonce_loss(&a, &a, 0.1).unwrap().loss;
        assert!(close(t01, (1.0 + (-10.0f64).exp()).ln(), 1e-15));
        assert!(close(t01, 4.54e-5, 1e-7));
    }

    #[test]
    fn infonce_errors() {
        let one = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(infonce_loss(&one, &one, 1.0), Err(Error::NeedNegatives(1))));
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(infonce_loss(&z, &z, 1.0), Err(Error::Normalization(1))));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let big = Matrix::from_rows(&[[60.0, -60.0], [-60.0, 60.0]]).unwrap();
        let l = weighted_cross_entropy(&big, &[0, 1], &[1.0, 1.0], &[true, true]).unwrap();
        assert!(l.loss < 1e-40);

        let uniform = Matrix::zeros(2, 2);
        let l = weighted_cross_entropy(&uniform, &[0, 1], &[1.0, 1.0], &[true, true]).unwrap();
        assert!(close(l.loss, 2f64.ln(), 1e-15));
        // (1·ln2 + 3·ln2) / (1 + 3)
        let l = weighted_cross_entropy(&uniform, &[0, 1], &[1.0, 3.0], &[true, true]).unwrap();
        assert!(close(l.loss, 2f64.ln(), 1e-15));

        let err = weighted_cross_entropy(&uniform, &[0, 1], &[1.0, 1.0], &[false, false]);
        assert!(matches!(err, Err(Error::NoLabels)));
    }

    #[test]
    fn offset_loss_reference_values() {
        let p = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert!(close(offset_loss(&p, &g, &[true]).unwrap().loss, 3.0, 1e-15));
        let p = Matrix::from_rows(&[[2.0, 0.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(close(offset_loss(&p, &g, &[true]).unwrap().loss, 1.0, 1e-15));
        assert!(close(offset_loss(&g, &g, &[true]).unwrap().loss, 0.0, 1e-15));
        assert!(matches!(offset_loss(&p, &g, &[false]), Err(Error::NoLabels)));
    }
}
