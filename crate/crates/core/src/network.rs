//! The interpolation model: sparse-to-dense mapping block, two convolutional
//! blocks, dense mapping block. Gradients are derived by hand for this fixed
//! topology.
//!
//! Each convolutional block computes
//!
//! ```text
//! a = SHT(x)            (order n_conv, dense grid)
//! c = conv(a)           (zonal kernel bank, optional bias)
//! y = ISHT(c)
//! x' = relu(y) + x      (relu and skip are per-block switches)
//! ```

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::{
    cached_sh_matrix, num_coeffs, ShBasisMatrix, ShtConfig, ShtOperator, SphericalGrid,
};
use crate::sphconv::{
    conv_layer_backward, conv_layer_forward, ConvBlockParams, MappingOperator, ZonalKernelBank,
};

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient of [`relu`]; zero at the kink.
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Floor used by [`magnitude_db`] when clamping is requested.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// `20 log10(|H|)`. Non-positive magnitudes are an error unless `clamp` is set,
/// in which case they are raised to [`MAGNITUDE_FLOOR`].
pub fn magnitude_db(magnitude: f64, clamp: bool) -> Result<f64> {
    if magnitude.is_nan() {
        return Err(Error::Domain("magnitude is NaN".into()));
    }
    let m = if magnitude > 0.0 {
        magnitude
    } else if clamp {
        MAGNITUDE_FLOOR
    } else {
        return Err(Error::Domain(format!(
            "magnitude must be positive, got {magnitude}"
        )));
    };
    let m = if clamp { m.max(MAGNITUDE_FLOOR) } else { m };
    Ok(20.0 * m.log10())
}

/// Log-spectral distortion between two dB fields of equal shape.
pub fn lsd(h: &DMatrix<f64>, h_hat: &DMatrix<f64>) -> Result<f64> {
    check_same_shape("lsd", h, h_hat)?;
    let n = h.len() as f64;
    let sum: f64 = h
        .iter()
        .zip(h_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / n).sqrt())
}

/// LSD and its gradient with respect to `h_hat`. The gradient is defined as
/// zero when the loss is exactly zero.
pub fn lsd_with_grad(h: &DMatrix<f64>, h_hat: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let loss = lsd(h, h_hat)?;
    if loss == 0.0 {
        return Ok((0.0, DMatrix::zeros(h.nrows(), h.ncols())));
    }
    let denom = h.len() as f64 * loss;
    Ok((loss, (h_hat - h) / denom))
}

pub(crate) fn check_same_shape(
    ctx: &'static str,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(
            ctx,
            format!("{}x{}", a.nrows(), a.ncols()),
            format!("{}x{}", b.nrows(), b.ncols()),
        ));
    }
    Ok(())
}

/// Shape of the model, independent of the learned values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// SH order of the sparse-to-dense mapping block.
    pub n_map_in: usize,
    /// SH order inside both convolutional blocks.
    pub n_conv: usize,
    /// SH order of the final mapping block.
    pub n_map_out: usize,
    /// Input/output channels (frequency bins).
    pub channels: usize,
    /// Kernels in the first block; the second block always emits `channels`.
    pub width: usize,
    pub bias: bool,
    pub skip: bool,
    pub relu: [bool; 2],
}

impl Architecture {
    pub fn new(channels: usize) -> Self {
        Self {
            n_map_in: 7,
            n_conv: 16,
            n_map_out: 16,
            channels,
            width: channels,
            bias: true,
            skip: true,
            relu: [true, false],
        }
    }

    pub fn validate(&self, sparse_points: usize, dense_points: usize) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("model.channels", "must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::config("model.width", "must be >= 1"));
        }
        if self.skip && self.width != self.channels {
            return Err(Error::config(
                "model.width",
                format!(
                    "identity skips need width == channels ({} != {})",
                    self.width, self.channels
                ),
            ));
        }
        let checks = [
            ("model.n_map_in", self.n_map_in, sparse_points, "sparse"),
            ("model.n_conv", self.n_conv, dense_points, "dense"),
            ("model.n_map_out", self.n_map_out, dense_points, "dense"),
        ];
        for (field, order, points, which) in checks {
            if num_coeffs(order) > points {
                return Err(Error::config(
                    field,
                    format!(
                        "order {order} needs {} points but the {which} grid has {points}",
                        num_coeffs(order)
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Learnable state plus the grids it is bound to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub block1: ConvBlockParams,
    pub block2: ConvBlockParams,
    pub n_map_in: usize,
    pub n_conv: usize,
    pub n_map_out: usize,
    pub sparse_grid: Arc<SphericalGrid>,
    pub dense_grid: Arc<SphericalGrid>,
    pub channels: usize,
}

impl ModelParams {
    /// All kernels and biases zero: the model reduces to the two mapping blocks.
    pub fn zeros(
        arch: &Architecture,
        sparse_grid: Arc<SphericalGrid>,
        dense_grid: Arc<SphericalGrid>,
    ) -> Result<Self> {
        let b1 = ZonalKernelBank::zeros(arch.width, arch.channels, arch.n_conv, arch.bias);
        let b2 = ZonalKernelBank::zeros(arch.channels, arch.width, arch.n_conv, arch.bias);
        Self::from_banks(arch, sparse_grid, dense_grid, b1, b2)
    }

    /// Random fan-in scaled kernels, zero biases.
    pub fn initialize<R: Rng + ?Sized>(
        arch: &Architecture,
        sparse_grid: Arc<SphericalGrid>,
        dense_grid: Arc<SphericalGrid>,
        rng: &mut R,
    ) -> Result<Self> {
        let b1 = ZonalKernelBank::random(rng, arch.width, arch.channels, arch.n_conv, arch.bias);
        let b2 = ZonalKernelBank::random(rng, arch.channels, arch.width, arch.n_conv, arch.bias);
        Self::from_banks(arch, sparse_grid, dense_grid, b1, b2)
    }

    pub fn from_banks(
        arch: &Architecture,
        sparse_grid: Arc<SphericalGrid>,
        dense_grid: Arc<SphericalGrid>,
        bank1: ZonalKernelBank,
        bank2: ZonalKernelBank,
    ) -> Result<Self> {
        arch.validate(sparse_grid.len(), dense_grid.len())?;
        let params = Self {
            block1: ConvBlockParams::new(bank1, arch.skip, arch.relu[0])?,
            block2: ConvBlockParams::new(bank2, arch.skip, arch.relu[1])?,
            n_map_in: arch.n_map_in,
            n_conv: arch.n_conv,
            n_map_out: arch.n_map_out,
            sparse_grid,
            dense_grid,
            channels: arch.channels,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let b1 = &self.block1.kernels;
        let b2 = &self.block2.kernels;
        if b1.in_channels() != self.channels {
            return Err(Error::mismatch(
                "block 1 input channels",
                self.channels,
                b1.in_channels(),
            ));
        }
        if b2.in_channels() != b1.kernels() {
            return Err(Error::mismatch(
                "block 2 input channels",
                b1.kernels(),
                b2.in_channels(),
            ));
        }
        if b2.kernels() != self.channels {
            return Err(Error::mismatch(
                "block 2 output channels",
                self.channels,
                b2.kernels(),
            ));
        }
        for (i, block) in [&self.block1, &self.block2].into_iter().enumerate() {
            if block.conv_order != self.n_conv || block.kernels.order() != self.n_conv {
                return Err(Error::mismatch(
                    if i == 0 {
                        "block 1 order"
                    } else {
                        "block 2 order"
                    },
                    self.n_conv,
                    block.kernels.order(),
                ));
            }
        }
        self.architecture()
            .validate(self.sparse_grid.len(), self.dense_grid.len())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_map_in: self.n_map_in,
            n_conv: self.n_conv,
            n_map_out: self.n_map_out,
            channels: self.channels,
            width: self.block1.kernels.kernels(),
            bias: self.block1.kernels.bias().is_some(),
            skip: self.block1.uses_skip,
            relu: [self.block1.uses_relu, self.block2.uses_relu],
        }
    }

    pub fn num_params(&self) -> usize {
        self.block1.kernels.num_params() + self.block2.kernels.num_params()
    }

    /// Learnable values in declaration order: block 1 betas, block 1 bias,
    /// block 2 betas, block 2 bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for bank in [&self.block1.kernels, &self.block2.kernels] {
            out.extend_from_slice(bank.betas());
            if let Some(b) = bank.bias() {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::mismatch(
                "flat parameter vector",
                self.num_params(),
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        let mut offset = 0;
        for bank in [&mut self.block1.kernels, &mut self.block2.kernels] {
            let n = bank.betas().len();
            bank.betas_mut()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
            if let Some(b) = bank.bias_mut() {
                let n = b.len();
                b.copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }
}

/// Gradient of one block's kernel bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub betas: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients shaped like the learnable tensors of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub block1: BlockGrad,
    pub block2: BlockGrad,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z = |bank: &ZonalKernelBank| BlockGrad {
            betas: vec![0.0; bank.betas().len()],
            bias: bank.bias().map(|b| vec![0.0; b.len()]),
        };
        Self {
            block1: z(&params.block1.kernels),
            block2: z(&params.block2.kernels),
        }
    }

    /// Same ordering as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [&self.block1, &self.block2] {
            out.extend_from_slice(&g.betas);
            if let Some(b) = &g.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for g in [&mut self.block1, &mut self.block2] {
            g.betas.iter_mut().for_each(&mut f);
            if let Some(b) = &mut g.bias {
                b.iter_mut().for_each(&mut f);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        let rhs = other.to_flat();
        if rhs.len() != self.to_flat().len() {
            return Err(Error::mismatch(
                "gradient accumulation",
                self.to_flat().len(),
                rhs.len(),
            ));
        }
        let mut it = rhs.into_iter();
        self.for_each_mut(|v| *v += it.next().expect("length checked"));
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: DMatrix<f64>,
    coeffs: crate::sh::ShCoefficients,
    pre_activation: DMatrix<f64>,
}

/// Intermediates of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: [BlockCache; 2],
    output_rows: usize,
    channels: usize,
}

impl ForwardCache {
    /// Signs of the pre-activations of the blocks listed in `relu`.
    pub fn activation_pattern(&self, relu: [bool; 2]) -> Vec<bool> {
        self.blocks
            .iter()
            .zip(relu)
            .filter(|(_, on)| *on)
            .flat_map(|(b, _)| b.pre_activation.iter().map(|v| *v > 0.0))
            .collect()
    }
}

/// One coordinate of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs()
            / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares [`Network::loss_and_grad`] with central differences of step `eps`
/// at the flat parameter coordinates `coords`. Coordinates whose ReLU
/// activation pattern differs between the two probes are skipped, since the
/// loss has a kink between them.
pub fn finite_difference_check(
    network: &Network,
    params: &ModelParams,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
    coords: &[usize],
    eps: f64,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = network.loss_and_grad(params, input, target)?;
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let relu = params.architecture().relu;
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= base.len() {
            return Err(Error::mismatch(
                "gradient check coordinate",
                format!("< {}", base.len()),
                i,
            ));
        }
        let mut eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut flat = base.clone();
            flat[i] += delta;
            probe.set_flat(&flat)?;
            let (pred, cache) = network.forward_with_cache(&probe, input)?;
            Ok((lsd(target, &pred)?, cache.activation_pattern(relu)))
        };
        let (up, pattern_up) = eval(eps)?;
        let (down, pattern_down) = eval(-eps)?;
        if pattern_up != pattern_down {
            continue;
        }
        out.push(GradCheck {
            index: i,
            analytic: analytic[i],
            numeric: (up - down) / (2.0 * eps),
        });
    }
    Ok(out)
}

/// Fixed linear operators of a model (mapping blocks and the conv-block
/// SHT/ISHT pair), precomputed once per grid pair and order set.
#[derive(Debug, Clone)]
pub struct Network {
    map_in: MappingOperator,
    map_out: MappingOperator,
    conv_sht: ShtOperator,
    conv_basis: Arc<ShBasisMatrix>,
    arch: Architecture,
    sparse_points: usize,
    dense_points: usize,
}

impl Network {
    pub fn new(params: &ModelParams, cfg: &ShtConfig) -> Result<Self> {
        params.validate()?;
        let sparse = &params.sparse_grid;
        let dense = &params.dense_grid;
        let conv_basis = cached_sh_matrix(dense, params.n_conv);
        Ok(Self {
            map_in: MappingOperator::new(sparse, dense, params.n_map_in, cfg)?,
            map_out: MappingOperator::new(dense, dense, params.n_map_out, cfg)?,
            conv_sht: ShtOperator::new(&conv_basis, cfg)?,
            conv_basis,
            arch: params.architecture(),
            sparse_points: sparse.len(),
            dense_points: dense.len(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.architecture() != self.arch
            || params.sparse_grid.len() != self.sparse_points
            || params.dense_grid.len() != self.dense_points
        {
            return Err(Error::mismatch(
                "network/params",
                format!("{:?}", self.arch),
                format!("{:?}", params.architecture()),
            ));
        }
        Ok(())
    }

    /// Dense prediction for a sparse field.
    pub fn forward(&self, params: &ModelParams, h_sparse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_with_cache(params, h_sparse)?.0)
    }

    pub fn forward_with_cache(
        &self,
        params: &ModelParams,
        h_sparse: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_params(params)?;
        if h_sparse.shape() != (self.sparse_points, params.channels) {
            return Err(Error::mismatch(
                "model input",
                format!("{}x{}", self.sparse_points, params.channels),
                format!("{}x{}", h_sparse.nrows(), h_sparse.ncols()),
            ));
        }
        let x0 = self.map_in.apply(h_sparse)?;
        let (x1, c1) = self.block_forward(&params.block1, x0)?;
        let (x2, c2) = self.block_forward(&params.block2, x1)?;
        let out = self.map_out.apply(&x2)?;
        let cache = ForwardCache {
            blocks: [c1, c2],
            output_rows: out.nrows(),
            channels: out.ncols(),
        };
        Ok((out, cache))
    }

    fn block_forward(
        &self,
        block: &ConvBlockParams,
        x: DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, BlockCache)> {
        let a = self.conv_sht.apply(&x)?;
        let c = conv_layer_forward(&a, &block.kernels)?;
        let y = self.conv_basis.values() * c.values();
        let mut out = if block.uses_relu {
            y.map(relu)
        } else {
            y.clone()
        };
        if block.uses_skip {
            out += &x;
        }
        Ok((
            out,
            BlockCache {
                input: x,
                coeffs: a,
                pre_activation: y,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every kernel beta and bias,
    /// given `d loss / d output`.
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        grad_output: &DMatrix<f64>,
    ) -> Result<GradientBundle> {
        self.check_params(params)?;
        if grad_output.shape() != (cache.output_rows, cache.channels) {
            return Err(Error::mismatch(
                "output gradient",
                format!("{}x{}", cache.output_rows, cache.channels),
                format!("{}x{}", grad_output.nrows(), grad_output.ncols()),
            ));
        }
        if cache.blocks[0].input.nrows() != self.dense_points {
            return Err(Error::Training(
                "forward cache does not match this network".into(),
            ));
        }
        let g_x2 = self.map_out.matrix().tr_mul(grad_output);
        let (g_x1, grad2) = self.block_backward(&params.block2, &cache.blocks[1], g_x2)?;
        let (_, grad1) = self.block_backward(&params.block1, &cache.blocks[0], g_x1)?;
        Ok(GradientBundle {
            block1: grad1,
            block2: grad2,
        })
    }

    fn block_backward(
        &self,
        block: &ConvBlockParams,
        cache: &BlockCache,
        g_out: DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, BlockGrad)> {
        let g_y = if block.uses_relu {
            g_out.zip_map(&cache.pre_activation, |g, y| g * relu_grad(y))
        } else {
            g_out.clone()
        };
        let g_c = self.conv_basis.values().tr_mul(&g_y);
        let layer = conv_layer_backward(&cache.coeffs, &block.kernels, &g_c)?;
        let mut g_x = self.conv_sht.matrix().tr_mul(&layer.input);
        if block.uses_skip {
            g_x += &g_out;
        }
        Ok((
            g_x,
            BlockGrad {
                betas: layer.betas,
                bias: layer.bias,
            },
        ))
    }

    /// LSD of the dense prediction against `target`, with its parameter gradient.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        h_sparse: &DMatrix<f64>,
        target: &DMatrix<f64>,
    ) -> Result<(f64, GradientBundle)> {
        let (pred, cache) = self.forward_with_cache(params, h_sparse)?;
        let (loss, g) = lsd_with_grad(target, &pred)?;
        let grads = self.backward(params, &cache, &g)?;
        Ok((loss, grads))
    }

    /// Mapping-only prediction, i.e. the model with every kernel and bias at zero.
    pub fn mapping_only(&self, h_sparse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x0 = self.map_in.apply(h_sparse)?;
        self.map_out.apply(&x0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fibonacci_grid, split_known};
    use crate::sh::{build_sh_matrix, isht, sht_least_squares};
    use crate::sphconv::mapping_block;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// P_sparse = 20, P_dense = 48, L = 3, N = 2, u = 3.
    fn tiny(relu: [bool; 2], seed: u64) -> (ModelParams, Network, DMatrix<f64>, DMatrix<f64>) {
        let dense = fibonacci_grid(48).unwrap();
        let split = split_known(&dense, 20, 1, 2, &ShtConfig::default()).unwrap();
        let mut arch = Architecture::new(3);
        arch.n_map_in = 2;
        arch.n_conv = 2;
        arch.n_map_out = 2;
        arch.relu = relu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params =
            ModelParams::initialize(&arch, split.known.clone(), split.dense.clone(), &mut rng)
                .unwrap();
        let flat: Vec<f64> = params
            .to_flat()
            .iter()
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        params.set_flat(&flat).unwrap();
        let net = Network::new(&params, &ShtConfig::default()).unwrap();
        let input = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-10.0..10.0));
        let target = DMatrix::from_fn(48, 3, |_, _| rng.random_range(-10.0..10.0));
        (params, net, input, target)
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(-2.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        assert_eq!(relu_grad(0.0), 0.0);
        assert_eq!(relu_grad(0.5), 1.0);
        assert_eq!(relu_grad(-0.5), 0.0);
    }

    #[test]
    fn magnitude_db_examples() {
        assert_eq!(magnitude_db(1.0, false).unwrap(), 0.0);
        assert!((magnitude_db(10.0, false).unwrap() - 20.0).abs() < 1e-12);
        let half = magnitude_db(0.5, false).unwrap();
        assert!((half - 20.0 * 0.5f64.log10()).abs() < 1e-15);
        assert!((half + 6.0206).abs() < 1e-4);
        assert!(matches!(magnitude_db(0.0, false), Err(Error::Domain(_))));
        assert!(matches!(magnitude_db(-1.0, false), Err(Error::Domain(_))));
        assert!((magnitude_db(0.0, true).unwrap() + 120.0).abs() < 1e-9);
        assert!((magnitude_db(1e-9, true).unwrap() + 120.0).abs() < 1e-9);
        assert!(magnitude_db(f64::NAN, true).is_err());
    }

    #[test]
    fn lsd_examples() {
        let h = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0);
        assert_eq!(lsd(&h, &h).unwrap(), 0.0);
        assert_eq!(lsd(&h, &h.add_scalar(3.0)).unwrap(), 3.0);
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let v = lsd(&a, &b).unwrap();
        assert!((v - (12.5f64).sqrt()).abs() < 1e-15);
        assert!((v - 3.5355).abs() < 1e-4);
        assert!(matches!(lsd(&a, &h), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lsd_gradient_matches_formula() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[4.0, 6.0]);
        let (l, g) = lsd_with_grad(&a, &b).unwrap();
        assert!((l - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((g[(0, 0)] - 3.0 / (2.0 * l)).abs() < 1e-15);
        assert!((g[(0, 1)] - 4.0 / (2.0 * l)).abs() < 1e-15);
        let (l, g) = lsd_with_grad(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn architecture_validation_names_fields() {
        let mut a = Architecture::new(3);
        a.n_map_in = 5;
        let err = a.validate(20, 480).unwrap_err();
        assert!(
            matches!(&err, Error::Config { field, .. } if field == "model.n_map_in"),
            "{err}"
        );
        let mut a = Architecture::new(3);
        a.width = 4;
        assert!(
            matches!(a.validate(100, 480), Err(Error::Config { field, .. }) if field == "model.width")
        );
        a.skip = false;
        assert!(a.validate(100, 480).is_ok());
        let mut a = Architecture::new(3);
        a.n_conv = 22;
        assert!(
            matches!(a.validate(100, 480), Err(Error::Config { field, .. }) if field == "model.n_conv")
        );
    }

    #[test]
    fn flat_roundtrip_and_counts() {
        let (mut p, _, _, _) = tiny([true, false], 1);
        // 2 blocks x (3 x 3 x 3 betas + 3 biases)
        assert_eq!(p.num_params(), 60);
        let flat: Vec<f64> = (0..60).map(f64::from).collect();
        p.set_flat(&flat).unwrap();
        assert_eq!(p.to_flat(), flat);
        assert_eq!(p.block1.kernels.bias().unwrap(), &[27.0, 28.0, 29.0]);
        assert!(p.set_flat(&flat[..59]).is_err());
        let mut bad = flat.clone();
        bad[3] = f64::NAN;
        assert!(matches!(p.set_flat(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_kernels_reduce_to_mapping_blocks() {
        let (p, _, input, _) = tiny([true, true], 2);
        let zero = ModelParams::zeros(
            &p.architecture(),
            p.sparse_grid.clone(),
            p.dense_grid.clone(),
        )
        .unwrap();
        let net = Network::new(&zero, &ShtConfig::default()).unwrap();
        let out = net.forward(&zero, &input).unwrap();
        let x0 = mapping_block(&input, &p.sparse_grid, &p.dense_grid, 2).unwrap();
        let expect = mapping_block(&x0, &p.dense_grid, &p.dense_grid, 2).unwrap();
        assert!((&out - expect).amax() < 1e-10);
        assert!((out - net.mapping_only(&input).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn zero_input_without_bias_gives_zero_output() {
        let (p, net, _, _) = tiny([true, false], 3);
        let mut nb = p.architecture();
        nb.bias = false;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = ModelParams::initialize(&nb, p.sparse_grid.clone(), p.dense_grid.clone(), &mut rng)
            .unwrap();
        let net_q = Network::new(&q, &ShtConfig::default()).unwrap();
        let out = net_q.forward(&q, &DMatrix::zeros(20, 3)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        // with biases, a zero input gives a deterministic bias-only response
        let a = net.forward(&p, &DMatrix::zeros(20, 3)).unwrap();
        let b = net.forward(&p, &DMatrix::zeros(20, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_is_bandlimited_at_map_out_order() {
        let dense = fibonacci_grid(120).unwrap();
        let split = split_known(&dense, 40, 2, 3, &ShtConfig::default()).unwrap();
        let mut arch = Architecture::new(2);
        arch.n_map_in = 3;
        arch.n_conv = 6;
        arch.n_map_out = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::initialize(&arch, split.known.clone(), split.dense.clone(), &mut rng)
            .unwrap();
        let net = Network::new(&p, &ShtConfig::default()).unwrap();
        let input = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-5.0..5.0));
        let out = net.forward(&p, &input).unwrap();
        let y = build_sh_matrix(&split.dense, 4);
        let back = isht(&sht_least_squares(&out, &y).unwrap(), &y).unwrap();
        assert!((back - out).amax() < 1e-7);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let (p, net, _, _) = tiny([true, false], 4);
        assert!(matches!(
            net.forward(&p, &DMatrix::zeros(19, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut other = p.architecture();
        other.relu = [false, false];
        let q = ModelParams::zeros(&other, p.sparse_grid.clone(), p.dense_grid.clone()).unwrap();
        assert!(net.forward(&q, &DMatrix::zeros(20, 3)).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (p, net, input, _) = tiny([true, false], 5);
        let target = net.forward(&p, &input).unwrap();
        let (loss, g) = net.loss_and_grad(&p, &input, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for relu in [[true, false], [true, true], [false, false]] {
            let (p, net, input, target) = tiny(relu, 6);
            let coords: Vec<usize> = (0..p.num_params()).collect();
            let checks = finite_difference_check(&net, &p, &input, &target, &coords, 1e-5).unwrap();
            assert!(checks.len() > coords.len() / 2);
            for c in &checks {
                assert!(c.relative_error(1e-7) < 1e-4, "{relu:?} {c:?}");
            }
        }
    }

    #[test]
    fn linear_path_scales_with_kernels() {
        // block 2 zeroed and ReLU off: the conv contribution is linear in block 1
        let (mut p, _, input, target) = tiny([false, false], 7);
        let n2 = p.block2.kernels.num_params();
        let n1 = p.block1.kernels.num_params();
        let mut flat = p.to_flat();
        flat[n1..n1 + n2].iter_mut().for_each(|v| *v = 0.0);
        p.set_flat(&flat).unwrap();
        let net = Network::new(&p, &ShtConfig::default()).unwrap();
        let base = net.mapping_only(&input).unwrap();
        let one = net.forward(&p, &input).unwrap() - &base;
        let mut doubled = flat.clone();
        doubled[..n1].iter_mut().for_each(|v| *v *= 2.0);
        let mut p2 = p.clone();
        p2.set_flat(&doubled).unwrap();
        let two = net.forward(&p2, &input).unwrap() - &base;
        assert!((two - &one * 2.0).amax() < 1e-10 * one.amax().max(1.0));

        // directional derivative along the block 1 parameters
        let (_, g) = net.loss_and_grad(&p, &input, &target).unwrap();
        let g = g.to_flat();
        let analytic: f64 = (0..n1).map(|i| g[i] * flat[i]).sum();
        let at = |t: f64| {
            let mut f = flat.clone();
            f[..n1].iter_mut().for_each(|v| *v *= t);
            let mut q = p.clone();
            q.set_flat(&f).unwrap();
            lsd(&target, &net.forward(&q, &input).unwrap()).unwrap()
        };
        let h = 1e-5;
        let numeric = (at(1.0 + h) - at(1.0 - h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6 * analytic.abs().max(1e-3));
    }

    #[test]
    fn gradient_bundle_helpers() {
        let (p, net, input, target) = tiny([true, false], 8);
        let (_, g) = net.loss_and_grad(&p, &input, &target).unwrap();
        assert!(g.is_finite());
        let mut sum = GradientBundle::zeros_like(&p);
        sum.add_assign(&g).unwrap();
        sum.add_assign(&g).unwrap();
        sum.scale(0.5);
        let (a, b) = (sum.to_flat(), g.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }
}
