use rand_distr::{Distribution, StandardNormal};

use super::{Batch, Optimizee, ParamLayout};
use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `f(theta) = 0.5 theta^T A theta` with symmetric positive definite `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    layout: ParamLayout,
    matrix: Tensor,
    eigenvalues: Vec<f64>,
}

impl Quadratic {
    /// Quadratic with a given symmetric matrix.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let shape = matrix.shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::InvalidArgument(format!("quadratic needs a square matrix, got {shape:?}")));
        }
        Ok(Self {
            layout: ParamLayout::new([("theta", vec![shape[0]])]),
            matrix,
            eigenvalues: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.total()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Spectrum the matrix was built from (empty for `from_matrix`).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    fn times_matrix(&self, tape: &mut Tape, theta: Var) -> Result<(Var, Var)> {
        let d = self.dim();
        let row = tape.reshape(theta, &[1, d])?;
        let a = tape.leaf(self.matrix.clone());
        Ok((row, tape.matmul(row, a)?))
    }
}

/// Log-spaced spectrum in `[1, conditioning]`, rotated by a random orthogonal
/// basis when `rotate` is set (axis-aligned otherwise).
pub fn make_quadratic_with(dim: usize, conditioning: f64, rotate: bool, seed: u64) -> Result<Quadratic> {
    if dim == 0 || !(conditioning >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quadratic needs dim >= 1 and conditioning >= 1 (got {dim}, {conditioning})"
        )));
    }
    let eigenvalues: Vec<f64> = (0..dim)
        .map(|i| if dim == 1 { 1.0 } else { conditioning.powf(i as f64 / (dim - 1) as f64) })
        .collect();
    let mut rng = seed::rng(seed);
    let basis: Vec<Vec<f64>> = if rotate {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for u in &basis {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        basis
    } else {
        (0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    };
    // A = sum_k lambda_k u_k u_k^T
    let mut a = vec![0.0; dim * dim];
    for (lambda, u) in eigenvalues.iter().zip(&basis) {
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] += lambda * u[i] * u[j];
            }
        }
    }
    // exact symmetry
    for i in 0..dim {
        for j in 0..i {
            let s = 0.5 * (a[i * dim + j] + a[j * dim + i]);
            a[i * dim + j] = s;
            a[j * dim + i] = s;
        }
    }
    let mut q = Quadratic::from_matrix(Tensor::matrix(dim, dim, a)?)?;
    q.eigenvalues = eigenvalues;
    Ok(q)
}

/// Rotated quadratic with eigenvalues log-spaced in `[1, conditioning]`.
pub fn make_quadratic(dim: usize, conditioning: f64, seed: u64) -> Result<Quadratic> {
    make_quadratic_with(dim, conditioning, true, seed)
}

impl Optimizee for Quadratic {
    fn name(&self) -> String {
        format!("quadratic{}", self.dim())
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn init(&self, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        Tensor::vector((0..self.dim()).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn loss(&self, tape: &mut Tape, theta: Var, _batch: &Batch) -> Result<Var> {
        let (row, a_theta) = self.times_matrix(tape, theta)?;
        let prod = tape.mul(row, a_theta)?;
        let s = tape.sum(prod)?;
        tape.scale(s, 0.5)
    }

    fn taped_gradient(&self, tape: &mut Tape, theta: Var, _batch: &Batch) -> Option<Result<Var>> {
        let d = self.dim();
        Some(self.times_matrix(tape, theta).and_then(|(_, g)| tape.reshape(g, &[d])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizee::{loss_and_grad, loss_value};
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_dimensional_unit_quadratic() {
        let q = make_quadratic(1, 1.0, 0).unwrap();
        let (loss, g) = loss_and_grad(&q, &Tensor::vector(vec![1.0]), &Batch::empty()).unwrap();
        assert_abs_diff_eq!(loss, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.data()[0], 1.0, epsilon = 1e-15);
        assert_eq!(loss_value(&q, &Tensor::zeros(&[1]), &Batch::empty()).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_dense_matrix_vector_product() {
        let q = make_quadratic(6, 50.0, 3).unwrap();
        let theta = q.init(9);
        let (_, g) = loss_and_grad(&q, &theta, &Batch::empty()).unwrap();
        let a = q.matrix().data();
        for i in 0..6 {
            let expected: f64 = (0..6).map(|j| a[i * 6 + j] * theta.data()[j]).sum();
            assert_abs_diff_eq!(g.data()[i], expected, epsilon = 1e-12);
        }
        let mut tape = Tape::new();
        let th = tape.leaf(theta.clone());
        let tg = q.taped_gradient(&mut tape, th, &Batch::empty()).unwrap().unwrap();
        for (x, y) in tape.value(tg).data().iter().zip(g.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn spectrum_spans_conditioning() {
        let q = make_quadratic(5, 100.0, 1).unwrap();
        assert_abs_diff_eq!(q.eigenvalues()[0], 1.0);
        assert_abs_diff_eq!(q.eigenvalues()[4], 100.0, epsilon = 1e-9);
        // Rayleigh quotients stay inside the spectrum
        for s in 0..20 {
            let v = q.init(s);
            let l = loss_value(&q, &v, &Batch::empty()).unwrap() * 2.0;
            let r = l / v.data().iter().map(|x| x * x).sum::<f64>();
            assert!((1.0 - 1e-9..=100.0 + 1e-9).contains(&r), "{r}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_quadratic(0, 1.0, 0).is_err());
        assert!(make_quadratic(2, 0.5, 0).is_err());
    }
}
