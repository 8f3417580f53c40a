//! Spherical convolution with zonal kernels, computed in the SH domain.
//!
//! Convolving a field with coefficients `alpha_nm` against a zonal kernel with
//! coefficients `beta_n0` gives
//!
//! ```text
//! gamma_nm = 2 pi sqrt(4 pi / (2n + 1)) alpha_nm beta_n0
//! ```
//!
//! so a kernel is one real number per order, broadcast over the modes of that
//! order.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::sh::{
    cached_sh_matrix, isht, num_coeffs, ShCoefficients, ShtConfig, ShtOperator, SphericalGrid,
};

/// `Y_00` on the unit sphere.
pub const Y00: f64 = 0.282_094_791_773_878_14;

/// Per-order factor `2 pi sqrt(4 pi / (2n + 1))` of the convolution theorem.
pub fn order_scale(n: usize) -> f64 {
    2.0 * PI * (4.0 * PI / (2 * n + 1) as f64).sqrt()
}

/// Replicates `beta[n]` across the `2n + 1` modes of order `n`.
pub fn zonal_expand(beta: &[f64]) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .flat_map(|(n, &b)| std::iter::repeat_n(b, 2 * n + 1))
        .collect()
}

/// Convolves a single-channel coefficient vector with one zonal kernel.
pub fn spectral_convolve(a: &ShCoefficients, beta: &[f64]) -> Result<ShCoefficients> {
    if a.channels() != 1 {
        return Err(Error::mismatch(
            "spectral_convolve channels",
            1,
            a.channels(),
        ));
    }
    if beta.len() != a.order() + 1 {
        return Err(Error::mismatch(
            "spectral_convolve kernel order",
            a.order() + 1,
            beta.len(),
        ));
    }
    let expanded = zonal_expand(beta);
    let scales: Vec<f64> = (0..=a.order())
        .flat_map(|n| std::iter::repeat_n(order_scale(n), 2 * n + 1))
        .collect();
    let out = DMatrix::from_fn(num_coeffs(a.order()), 1, |i, _| {
        scales[i] * a.values()[(i, 0)] * expanded[i]
    });
    ShCoefficients::new(out, a.order())
}

/// Learnable zonal kernels of one convolutional layer.
///
/// `betas` is laid out as `[kernel][input channel][order]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonalKernelBank {
    betas: Vec<f64>,
    kernels: usize,
    in_channels: usize,
    order: usize,
    bias: Option<Vec<f64>>,
}

impl ZonalKernelBank {
    pub fn new(
        betas: Vec<f64>,
        kernels: usize,
        in_channels: usize,
        order: usize,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let expected = kernels * in_channels * (order + 1);
        if betas.len() != expected {
            return Err(Error::mismatch("kernel bank betas", expected, betas.len()));
        }
        if kernels == 0 || in_channels == 0 {
            return Err(Error::Domain(
                "kernel bank needs at least one kernel and one input channel".into(),
            ));
        }
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("kernel betas"));
        }
        if let Some(b) = &bias {
            if b.len() != kernels {
                return Err(Error::mismatch("kernel bank bias", kernels, b.len()));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("kernel bias"));
            }
        }
        Ok(Self {
            betas,
            kernels,
            in_channels,
            order,
            bias,
        })
    }

    pub fn zeros(kernels: usize, in_channels: usize, order: usize, with_bias: bool) -> Self {
        Self {
            betas: vec![0.0; kernels * in_channels * (order + 1)],
            kernels,
            in_channels,
            order,
            bias: with_bias.then(|| vec![0.0; kernels]),
        }
    }

    /// Fan-in scaled uniform initialisation,
    /// `beta_n ~ U(-s_n, s_n)` with `s_n = sqrt(1 / (C_in (N + 1))) / order_scale(n)`,
    /// so the conv path starts at roughly the input's scale. Biases start at zero.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        kernels: usize,
        in_channels: usize,
        order: usize,
        with_bias: bool,
    ) -> Self {
        let s = (1.0 / (in_channels * (order + 1)) as f64).sqrt();
        let mut bank = Self::zeros(kernels, in_channels, order, with_bias);
        for (i, b) in bank.betas.iter_mut().enumerate() {
            let limit = s / order_scale(i % (order + 1));
            *b = rng.random_range(-limit..limit);
        }
        bank
    }

    pub fn kernels(&self) -> usize {
        self.kernels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn betas_mut(&mut self) -> &mut [f64] {
        &mut self.betas
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    /// `beta_n0` of kernel `j` applied to input channel `c`.
    pub fn beta(&self, j: usize, c: usize, n: usize) -> f64 {
        self.betas[self.beta_index(j, c, n)]
    }

    pub fn beta_index(&self, j: usize, c: usize, n: usize) -> usize {
        (j * self.in_channels + c) * (self.order + 1) + n
    }

    /// The `(N + 1)` coefficients of kernel `j` on channel `c`.
    pub fn kernel(&self, j: usize, c: usize) -> &[f64] {
        let start = self.beta_index(j, c, 0);
        &self.betas[start..start + self.order + 1]
    }

    /// Number of learnable scalars (betas plus biases).
    pub fn num_params(&self) -> usize {
        self.betas.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// `C_in x u` mixing matrix for order `n`.
    fn order_matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.in_channels, self.kernels, |c, j| self.beta(j, c, n))
    }
}

/// One convolutional block: SHT, zonal convolution layer, ISHT, optional ReLU
/// and identity skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub kernels: ZonalKernelBank,
    pub conv_order: usize,
    pub uses_skip: bool,
    pub uses_relu: bool,
}

impl ConvBlockParams {
    pub fn new(kernels: ZonalKernelBank, uses_skip: bool, uses_relu: bool) -> Result<Self> {
        if uses_skip && kernels.kernels() != kernels.in_channels() {
            return Err(Error::mismatch(
                "identity skip channels",
                kernels.in_channels(),
                kernels.kernels(),
            ));
        }
        Ok(Self {
            conv_order: kernels.order(),
            kernels,
            uses_skip,
            uses_relu,
        })
    }
}

/// Multi-channel zonal convolution layer.
///
/// Output column `j` is `sum_c conv(a[:, c], kernel[j, c])`, plus `bias[j]` as a
/// constant offset on the sphere.
pub fn conv_layer_forward(a: &ShCoefficients, bank: &ZonalKernelBank) -> Result<ShCoefficients> {
    if a.order() != bank.order() {
        return Err(Error::mismatch("conv layer order", bank.order(), a.order()));
    }
    if a.channels() != bank.in_channels() {
        return Err(Error::mismatch(
            "conv layer input channels",
            bank.in_channels(),
            a.channels(),
        ));
    }
    let mut out = DMatrix::zeros(num_coeffs(bank.order()), bank.kernels());
    for n in 0..=bank.order() {
        let rows = 2 * n + 1;
        let a_n = a.values().rows(n * n, rows);
        let mixed = (a_n * bank.order_matrix(n)) * order_scale(n);
        out.rows_mut(n * n, rows).copy_from(&mixed);
    }
    if let Some(bias) = bank.bias() {
        for (j, b) in bias.iter().enumerate() {
            out[(0, j)] += b / Y00;
        }
    }
    ShCoefficients::new(out, bank.order())
}

/// Gradients of a convolution layer given the gradient of its output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerGrad {
    pub input: DMatrix<f64>,
    pub betas: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Reverse-mode pass through [`conv_layer_forward`].
pub fn conv_layer_backward(
    a: &ShCoefficients,
    bank: &ZonalKernelBank,
    grad_out: &DMatrix<f64>,
) -> Result<ConvLayerGrad> {
    let k = num_coeffs(bank.order());
    if grad_out.shape() != (k, bank.kernels()) {
        return Err(Error::mismatch(
            "conv layer output gradient",
            format!("{k}x{}", bank.kernels()),
            format!("{}x{}", grad_out.nrows(), grad_out.ncols()),
        ));
    }
    if a.values().shape() != (k, bank.in_channels()) {
        return Err(Error::mismatch(
            "conv layer cached input",
            format!("{k}x{}", bank.in_channels()),
            format!("{}x{}", a.values().nrows(), a.values().ncols()),
        ));
    }
    let mut grad_input = DMatrix::zeros(k, bank.in_channels());
    let mut grad_betas = vec![0.0; bank.betas().len()];
    for n in 0..=bank.order() {
        let rows = 2 * n + 1;
        let s = order_scale(n);
        let g_n = grad_out.rows(n * n, rows);
        let a_n = a.values().rows(n * n, rows);
        let gi = (g_n * bank.order_matrix(n).transpose()) * s;
        grad_input.rows_mut(n * n, rows).copy_from(&gi);
        let gb = (a_n.transpose() * g_n) * s;
        for j in 0..bank.kernels() {
            for c in 0..bank.in_channels() {
                grad_betas[bank.beta_index(j, c, n)] = gb[(c, j)];
            }
        }
    }
    let grad_bias = bank
        .bias()
        .map(|b| (0..b.len()).map(|j| grad_out[(0, j)] / Y00).collect());
    Ok(ConvLayerGrad {
        input: grad_input,
        betas: grad_betas,
        bias: grad_bias,
    })
}

/// Parameter-free resampling `Y_out (Y_in^+ H)` between two grids.
#[derive(Debug, Clone)]
pub struct MappingOperator {
    matrix: DMatrix<f64>,
    order: usize,
}

impl MappingOperator {
    pub fn new(
        grid_in: &SphericalGrid,
        grid_out: &SphericalGrid,
        order: usize,
        cfg: &ShtConfig,
    ) -> Result<Self> {
        let y_in = cached_sh_matrix(grid_in, order);
        let y_out = cached_sh_matrix(grid_out, order);
        let sht = ShtOperator::new(&y_in, cfg)?;
        Ok(Self {
            matrix: y_out.values() * sht.matrix(),
            order,
        })
    }

    /// `P_out x P_in` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn apply(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.nrows() != self.matrix.ncols() {
            return Err(Error::mismatch(
                "mapping block input rows",
                self.matrix.ncols(),
                h.nrows(),
            ));
        }
        Ok(&self.matrix * h)
    }
}

/// Bandlimited resampling of `h` from `grid_in` to `grid_out` at SH order `order`.
pub fn mapping_block(
    h: &DMatrix<f64>,
    grid_in: &SphericalGrid,
    grid_out: &SphericalGrid,
    order: usize,
) -> Result<DMatrix<f64>> {
    if h.nrows() != grid_in.len() {
        return Err(Error::mismatch(
            "mapping block input rows",
            grid_in.len(),
            h.nrows(),
        ));
    }
    let y_in = cached_sh_matrix(grid_in, order);
    let y_out = cached_sh_matrix(grid_out, order);
    let a = ShtOperator::new(&y_in, &ShtConfig::default())?.apply(h)?;
    isht(&a, &y_out)
}

/// Rotates a field about the vertical axis by `angle`: the output at
/// `(theta, phi)` is the input's order-`order` expansion evaluated at
/// `(theta, phi - angle)`.
pub fn rotate_z(
    h: &DMatrix<f64>,
    grid: &SphericalGrid,
    angle: f64,
    order: usize,
) -> Result<DMatrix<f64>> {
    if h.nrows() != grid.len() {
        return Err(Error::mismatch(
            "rotate_z input rows",
            grid.len(),
            h.nrows(),
        ));
    }
    let y = cached_sh_matrix(grid, order);
    let a = ShtOperator::new(&y, &ShtConfig::default())?.apply(h)?;
    let rotated = crate::sh::build_sh_matrix(&grid.rotated_z(-angle), order);
    isht(&a, &rotated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fibonacci_grid;
    use crate::sh::{build_sh_matrix, real_sh, sh_index, sht_least_squares};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_coeff(order: usize, n: usize, m: i64) -> ShCoefficients {
        let mut a = ShCoefficients::zeros(order, 1);
        a.values_mut()[(sh_index(n, m), 0)] = 1.0;
        a
    }

    fn random_coeffs(rng: &mut impl Rng, order: usize, channels: usize) -> ShCoefficients {
        let v = DMatrix::from_fn(num_coeffs(order), channels, |_, _| {
            rng.random_range(-1.0..1.0)
        });
        ShCoefficients::new(v, order).unwrap()
    }

    fn random_bank(
        rng: &mut impl Rng,
        u: usize,
        c: usize,
        order: usize,
        bias: bool,
    ) -> ZonalKernelBank {
        let betas = (0..u * c * (order + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias = bias.then(|| (0..u).map(|_| rng.random_range(-1.0..1.0)).collect());
        ZonalKernelBank::new(betas, u, c, order, bias).unwrap()
    }

    #[test]
    fn zonal_expand_examples() {
        assert_eq!(zonal_expand(&[2.0]), vec![2.0]);
        assert_eq!(zonal_expand(&[1.0, 3.0]), vec![1.0, 3.0, 3.0, 3.0]);
        assert_eq!(
            zonal_expand(&[0.0, 0.0, 5.0]),
            vec![0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 5.0]
        );
    }

    #[test]
    fn order_scale_values() {
        // 2 pi sqrt(4 pi / 3) evaluated independently
        assert!((order_scale(1) - 12.859_502_671_627_665).abs() < 1e-12);
        assert!((order_scale(0) - 2.0 * PI * 2.0 * PI.sqrt()).abs() < 1e-12);
        assert!((Y00 - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-17);
    }

    #[test]
    fn spectral_convolve_examples() {
        let a = unit_coeff(2, 1, 1);
        let zero = spectral_convolve(&a, &[0.0; 3]).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));

        let out = spectral_convolve(&a, &[0.0, 1.0, 0.0]).unwrap();
        let got = out.values()[(sh_index(1, 1), 0)];
        assert!((got - 12.859_502_671_627_665).abs() < 1e-12);
        assert_eq!(out.values().iter().filter(|v| **v != 0.0).count(), 1);

        let a = unit_coeff(1, 0, 0);
        let beta0 = 1.0 / (2.0 * PI * (4.0 * PI).sqrt());
        let out = spectral_convolve(&a, &[beta0, 7.0]).unwrap();
        assert!((out.values()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(out.values().rows(1, 3).iter().all(|v| *v == 0.0));

        assert!(matches!(
            spectral_convolve(&a, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bank_validation() {
        assert!(ZonalKernelBank::new(vec![0.0; 5], 1, 1, 3, None).is_err());
        assert!(ZonalKernelBank::new(vec![f64::NAN; 4], 1, 1, 3, None).is_err());
        assert!(ZonalKernelBank::new(vec![0.0; 4], 1, 1, 3, Some(vec![0.0; 2])).is_err());
        let bank = ZonalKernelBank::new((0..12).map(f64::from).collect(), 2, 2, 2, None).unwrap();
        assert_eq!(bank.beta(1, 0, 2), 8.0);
        assert_eq!(bank.kernel(0, 1), &[3.0, 4.0, 5.0]);
        assert_eq!(bank.num_params(), 12);
        assert!(ConvBlockParams::new(ZonalKernelBank::zeros(3, 2, 1, false), true, true).is_err());
        assert!(ConvBlockParams::new(ZonalKernelBank::zeros(3, 2, 1, false), false, true).is_ok());
    }

    #[test]
    fn random_bank_is_bounded_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b1 = ZonalKernelBank::random(&mut r1, 3, 4, 5, true);
        let b2 = ZonalKernelBank::random(&mut r2, 3, 4, 5, true);
        assert_eq!(b1, b2);
        let s = (1.0 / 24.0f64).sqrt();
        for j in 0..3 {
            for c in 0..4 {
                for n in 0..=5 {
                    assert!(b1.beta(j, c, n).abs() <= s / order_scale(n));
                }
            }
        }
        assert_eq!(b1.bias(), Some(&[0.0; 3][..]));
    }

    #[test]
    fn conv_layer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_coeffs(&mut rng, 3, 1);
        let out = conv_layer_forward(&a, &ZonalKernelBank::zeros(1, 1, 3, true)).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));

        let k1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let betas: Vec<f64> = k1
            .iter()
            .chain(k1.iter().map(|b| b * 2.0).collect::<Vec<_>>().iter())
            .copied()
            .collect();
        let bank = ZonalKernelBank::new(betas, 2, 1, 3, None).unwrap();
        let out = conv_layer_forward(&a, &bank).unwrap();
        let diff = out.values().column(1) - out.values().column(0) * 2.0;
        assert!(diff.amax() < 1e-14);

        // additivity over channels: a zero second channel contributes nothing
        let mut two = DMatrix::zeros(16, 2);
        two.column_mut(0).copy_from(&a.values().column(0));
        let a2 = ShCoefficients::new(two, 3).unwrap();
        let bank2 = random_bank(&mut rng, 2, 2, 3, false);
        let only_first: Vec<f64> = (0..2).flat_map(|j| bank2.kernel(j, 0).to_vec()).collect();
        let bank1 = ZonalKernelBank::new(only_first, 2, 1, 3, None).unwrap();
        let lhs = conv_layer_forward(&a2, &bank2).unwrap();
        let rhs = conv_layer_forward(&a, &bank1).unwrap();
        assert!((lhs.values() - rhs.values()).amax() < 1e-14);
    }

    #[test]
    fn conv_layer_matches_sum_of_spectral_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_coeffs(&mut rng, 4, 3);
        let bank = random_bank(&mut rng, 2, 3, 4, true);
        let out = conv_layer_forward(&a, &bank).unwrap();
        for j in 0..2 {
            let mut expect = DMatrix::zeros(25, 1);
            for c in 0..3 {
                let col = ShCoefficients::new(a.values().columns(c, 1).into_owned(), 4).unwrap();
                expect += spectral_convolve(&col, bank.kernel(j, c)).unwrap().values();
            }
            expect[(0, 0)] += bank.bias().unwrap()[j] / Y00;
            assert!((out.values().column(j) - expect.column(0)).amax() < 1e-12);
        }
    }

    #[test]
    fn bias_is_constant_offset_on_sphere() {
        let bank = ZonalKernelBank::new(vec![0.0; 3], 1, 1, 2, Some(vec![1.5])).unwrap();
        let out = conv_layer_forward(&ShCoefficients::zeros(2, 1), &bank).unwrap();
        let g = fibonacci_grid(30).unwrap();
        let field = isht(&out, &build_sh_matrix(&g, 2)).unwrap();
        assert!(field.iter().all(|v| (v - 1.5).abs() < 1e-14));
    }

    #[test]
    fn conv_backward_matches_adjoint() {
        // <grad_out, d forward> equals <grad, d params> for a linear layer
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_coeffs(&mut rng, 3, 2);
        let bank = random_bank(&mut rng, 3, 2, 3, true);
        let g = DMatrix::from_fn(16, 3, |_, _| rng.random_range(-1.0..1.0));
        let grads = conv_layer_backward(&a, &bank, &g).unwrap();
        let da = random_coeffs(&mut rng, 3, 2);
        let lin = |x: &ShCoefficients| {
            let zero_bias = ZonalKernelBank::new(bank.betas().to_vec(), 3, 2, 3, None).unwrap();
            conv_layer_forward(x, &zero_bias).unwrap().into_values()
        };
        let lhs = g.dot(&lin(&da));
        let rhs = grads.input.dot(da.values());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        let eps = 1e-6;
        for idx in [0, 5, 17, 23] {
            let mut b = bank.clone();
            b.betas_mut()[idx] += eps;
            let up = conv_layer_forward(&a, &b).unwrap().into_values();
            let base = conv_layer_forward(&a, &bank).unwrap().into_values();
            let fd = g.dot(&((up - base) / eps));
            assert!((fd - grads.betas[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let bias_grad = grads.bias.unwrap();
        assert!((bias_grad[1] - g[(0, 1)] / Y00).abs() < 1e-15);
    }

    #[test]
    fn mapping_block_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = fibonacci_grid(72).unwrap();
        let y = build_sh_matrix(&g, 4);
        let a = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-1.0..1.0));
        let h = y.values() * &a;
        let same = mapping_block(&h, &g, &g, 4).unwrap();
        assert!((same - &h).amax() < 1e-9);

        let dense = fibonacci_grid(200).unwrap();
        let c = DMatrix::from_element(72, 3, 3.0);
        for order in [0, 2, 5] {
            let out = mapping_block(&c, &g, &dense, order).unwrap();
            assert_eq!(out.shape(), (200, 3));
            assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-9));
        }
        assert!(matches!(
            mapping_block(&DMatrix::zeros(71, 1), &g, &dense, 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mapping_sparse_to_dense_is_exact_for_in_band_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dense = fibonacci_grid(480).unwrap();
        let split = crate::data::split_known(&dense, 120, 3, 7, &ShtConfig::default()).unwrap();
        let a = DMatrix::from_fn(64, 2, |_, _| rng.random_range(-1.0..1.0));
        let h_known = build_sh_matrix(&split.known, 7).values() * &a;
        let expect = build_sh_matrix(&dense, 7).values() * &a;
        let got = mapping_block(&h_known, &split.known, &dense, 7).unwrap();
        assert!((got - expect).amax() < 1e-6);
        let op = MappingOperator::new(&split.known, &dense, 7, &ShtConfig::default()).unwrap();
        assert_eq!(op.matrix().shape(), (480, 120));
    }

    #[test]
    fn rotate_z_examples() {
        let g = fibonacci_grid(100).unwrap();
        let y11 = DMatrix::from_iterator(
            100,
            1,
            g.directions().iter().map(|d| real_sh(1, 1, d).unwrap()),
        );
        let y1m1 = DMatrix::from_iterator(
            100,
            1,
            g.directions().iter().map(|d| real_sh(1, -1, d).unwrap()),
        );
        let id = rotate_z(&y11, &g, 0.0, 3).unwrap();
        assert!((id - &y11).amax() < 1e-9);
        let rot = rotate_z(&y11, &g, PI / 2.0, 3).unwrap();
        assert!((rot - &y1m1).amax() < 1e-9);
        let back = rotate_z(&rotate_z(&y1m1, &g, 0.7, 3).unwrap(), &g, -0.7, 3).unwrap();
        assert!((back - &y1m1).amax() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn convolution_commutes_with_z_rotation(seed in any::<u64>(), angle in -6.3f64..6.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let order = 4;
            let g = fibonacci_grid(2 * num_coeffs(order)).unwrap();
            let y = cached_sh_matrix(&g, order);
            let a = random_coeffs(&mut rng, order, 1);
            let h = isht(&a, &y).unwrap();
            let beta: Vec<f64> = (0..=order).map(|_| rng.random_range(-1.0..1.0)).collect();
            let conv = |f: &DMatrix<f64>| {
                let c = sht_least_squares(f, &y).unwrap();
                isht(&spectral_convolve(&c, &beta).unwrap(), &y).unwrap()
            };
            let lhs = conv(&rotate_z(&h, &g, angle, order).unwrap());
            let rhs = rotate_z(&conv(&h), &g, angle, order).unwrap();
            let scale = rhs.amax().max(1e-12);
            prop_assert!((lhs - &rhs).amax() / scale < 1e-9);
        }

        #[test]
        fn conv_layer_is_linear_in_input(seed in any::<u64>(), s in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng, 2, 2, 3, false);
            let x = random_coeffs(&mut rng, 3, 2);
            let z = random_coeffs(&mut rng, 3, 2);
            let sum = ShCoefficients::new(x.values() * s + z.values(), 3).unwrap();
            let lhs = conv_layer_forward(&sum, &bank).unwrap().into_values();
            let rhs = conv_layer_forward(&x, &bank).unwrap().into_values() * s
                + conv_layer_forward(&z, &bank).unwrap().into_values();
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }
    }
}
