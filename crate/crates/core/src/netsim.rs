//! Toy residual networks with exact manual backpropagation.
//!
//! ```text
//! h_0     = α_0 φ(W_0 x + b_0)
//! h_l     = h_{l-1} + α_l a_k,   a_i = φ(W_l^(i) a_{i-1} + b_l^(i)),   a_0 = h_{l-1}
//! h_{L+1} = α_{L+1} W_{L+1} h_L
//! ```
//!
//! With `φ = id` and no biases this is the linear residual MLP; with ReLU it
//! is the nonlinear variant used for the assumption checks. Samples are the
//! rows of a batch matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gaussian_matrix, rms_vec, LinalgError, Matrix, RandomSource, Vector};
use crate::scaling::{LayerKind, LayerRole, Parameterization, ScalingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input dimension {got} does not match d0 = {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("target shape {got:?} does not match output shape {expected:?}")]
    TargetShape { expected: (usize, usize), got: (usize, usize) },
    #[error("trace does not belong to this network: {0}")]
    TraceMismatch(String),
    #[error("networks do not share an architecture")]
    ArchMismatch,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no parameter with role {0}")]
    NoSuchParam(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply_matrix(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Linear => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    /// `½‖y − t‖²`, averaged over the batch.
    SquaredError,
    /// Logistic loss on a single logit with labels in {0, 1}, averaged over the batch.
    BinaryCrossEntropy,
}

impl Loss {
    /// Mean loss and its gradient with respect to the outputs.
    pub fn evaluate(self, y: &Matrix, t: &Matrix) -> Result<(f64, Matrix)> {
        if y.shape() != t.shape() {
            return Err(NetError::TargetShape { expected: y.shape(), got: t.shape() });
        }
        let b = y.rows() as f64;
        let mut grad = Matrix::zeros(y.rows(), y.cols());
        let mut total = 0.0;
        for (k, (&yi, &ti)) in y.as_slice().iter().zip(t.as_slice()).enumerate() {
            let (l, g) = match self {
                Loss::SquaredError => (0.5 * (yi - ti) * (yi - ti), yi - ti),
                Loss::BinaryCrossEntropy => {
                    let softplus = yi.max(0.0) + (-yi.abs()).exp().ln_1p();
                    (softplus - ti * yi, sigmoid(yi) - ti)
                }
            };
            total += l;
            grad.as_mut_slice()[k] = g / b;
        }
        Ok((total / b, grad))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Structure of every residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Layers per block (`k`).
    pub depth: usize,
    /// Inner width `n_l` of blocks with `k ≥ 2`.
    pub hidden_width: usize,
    pub activation: Activation,
    pub use_bias: bool,
}

/// Full architecture of a residual MLP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub d0: usize,
    pub width: usize,
    pub d_out: usize,
    /// Number of residual blocks `L`.
    pub depth: usize,
    pub block: BlockSpec,
}

impl ArchSpec {
    /// Linear two-layer blocks with `n_l = n` and no biases.
    pub fn linear(d0: usize, width: usize, d_out: usize, depth: usize) -> Self {
        ArchSpec {
            d0,
            width,
            d_out,
            depth,
            block: BlockSpec { depth: 2, hidden_width: width, activation: Activation::Linear, use_bias: false },
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.block.activation = activation;
        self
    }

    pub fn with_block_depth(mut self, k: usize) -> Self {
        self.block.depth = k;
        self
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.block.use_bias = use_bias;
        self
    }

    pub fn with_hidden_width(mut self, n_l: usize) -> Self {
        self.block.hidden_width = n_l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.block;
        if self.d0 == 0 || self.width == 0 || self.d_out == 0 {
            return Err(NetError::InvalidArch("dimensions must be positive".into()));
        }
        if b.depth == 0 {
            return Err(NetError::InvalidArch("blocks need at least one layer".into()));
        }
        if b.depth >= 2 && (b.hidden_width * 8 < self.width || b.hidden_width > 8 * self.width) {
            return Err(NetError::InvalidArch(format!(
                "block width {} outside [n/8, 8n] for n = {}",
                b.hidden_width, self.width
            )));
        }
        Ok(())
    }

    /// `(n_in, n_out)` of sublayer `i` (1-based).
    pub fn sublayer_dims(&self, i: usize) -> (usize, usize) {
        let k = self.block.depth;
        let (n, nl) = (self.width, self.block.hidden_width);
        if k == 1 {
            return (n, n);
        }
        let n_in = if i == 1 { n } else { nl };
        let n_out = if i == k { n } else { nl };
        (n_in, n_out)
    }

    /// Roles of every parameter, in canonical order.
    pub fn roles(&self) -> Vec<LayerRole> {
        let mut roles = vec![LayerRole::input(self.d0, self.width)];
        if self.block.use_bias {
            roles.push(LayerRole::input_bias(self.width));
        }
        for l in 1..=self.depth {
            for i in 1..=self.block.depth {
                let (n_in, n_out) = self.sublayer_dims(i);
                roles.push(LayerRole::hidden(l, i, n_in, n_out));
                if self.block.use_bias {
                    roles.push(LayerRole::hidden_bias(l, i, n_out));
                }
            }
        }
        roles.push(LayerRole::output(self.width, self.d_out));
        roles
    }
}

/// Weights and biases of one block; biases are stored as column matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

/// A tensor per parameter, shaped like a network. Used for weights,
/// gradients, updates and optimizer buffers alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub input: Matrix,
    pub input_bias: Option<Matrix>,
    pub blocks: Vec<BlockParams>,
    pub output: Matrix,
}

impl ParamSet {
    pub fn zeros(arch: &ArchSpec) -> Self {
        let bias = |n: usize| arch.block.use_bias.then(|| Matrix::zeros(n, 1));
        let blocks = (0..arch.depth)
            .map(|_| {
                let mut weights = Vec::with_capacity(arch.block.depth);
                let mut biases = Vec::new();
                for i in 1..=arch.block.depth {
                    let (n_in, n_out) = arch.sublayer_dims(i);
                    weights.push(Matrix::zeros(n_out, n_in));
                    if let Some(b) = bias(n_out) {
                        biases.push(b);
                    }
                }
                BlockParams { weights, biases }
            })
            .collect();
        ParamSet {
            input: Matrix::zeros(arch.width, arch.d0),
            input_bias: bias(arch.width),
            blocks,
            output: Matrix::zeros(arch.d_out, arch.width),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> Self {
        ParamSet {
            input: f(&self.input),
            input_bias: self.input_bias.as_ref().map(&f),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    weights: b.weights.iter().map(&f).collect(),
                    biases: b.biases.iter().map(&f).collect(),
                })
                .collect(),
            output: f(&self.output),
        }
    }

    /// `(role, tensor)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(LayerRole, &Matrix)> {
        let mut out = vec![(LayerRole::input(self.input.cols(), self.input.rows()), &self.input)];
        if let Some(b) = &self.input_bias {
            out.push((LayerRole::input_bias(b.rows()), b));
        }
        for (l, blk) in self.blocks.iter().enumerate() {
            for (i, w) in blk.weights.iter().enumerate() {
                out.push((LayerRole::hidden(l + 1, i + 1, w.cols(), w.rows()), w));
                if let Some(b) = blk.biases.get(i) {
                    out.push((LayerRole::hidden_bias(l + 1, i + 1, b.rows()), b));
                }
            }
        }
        out.push((LayerRole::output(self.output.cols(), self.output.rows()), &self.output));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(LayerRole, &mut Matrix)> {
        let mut out = Vec::new();
        let (r, c) = self.input.shape();
        out.push((LayerRole::input(c, r), &mut self.input));
        if let Some(b) = &mut self.input_bias {
            let n = b.rows();
            out.push((LayerRole::input_bias(n), b));
        }
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            let mut biases = blk.biases.iter_mut();
            for (i, w) in blk.weights.iter_mut().enumerate() {
                let (r, c) = w.shape();
                out.push((LayerRole::hidden(l + 1, i + 1, c, r), w));
                if let Some(b) = biases.next() {
                    let n = b.rows();
                    out.push((LayerRole::hidden_bias(l + 1, i + 1, n), b));
                }
            }
        }
        let (r, c) = self.output.shape();
        out.push((LayerRole::output(c, r), &mut self.output));
        out
    }

    pub fn get(&self, role: &LayerRole) -> Option<&Matrix> {
        match role.kind {
            LayerKind::Input => Some(&self.input),
            LayerKind::InputBias => self.input_bias.as_ref(),
            LayerKind::Output => Some(&self.output),
            LayerKind::Hidden => self.blocks.get(role.block.checked_sub(1)?)?.weights.get(role.sublayer.checked_sub(1)?),
            LayerKind::HiddenBias => self.blocks.get(role.block.checked_sub(1)?)?.biases.get(role.sublayer.checked_sub(1)?),
        }
    }

    pub fn get_mut(&mut self, role: &LayerRole) -> Option<&mut Matrix> {
        match role.kind {
            LayerKind::Input => Some(&mut self.input),
            LayerKind::InputBias => self.input_bias.as_mut(),
            LayerKind::Output => Some(&mut self.output),
            LayerKind::Hidden => {
                self.blocks.get_mut(role.block.checked_sub(1)?)?.weights.get_mut(role.sublayer.checked_sub(1)?)
            }
            LayerKind::HiddenBias => {
                self.blocks.get_mut(role.block.checked_sub(1)?)?.biases.get_mut(role.sublayer.checked_sub(1)?)
            }
        }
    }

    /// `self += alpha · other` for every tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        let theirs = other.entries();
        let mut mine = self.entries_mut();
        if mine.len() != theirs.len() {
            return Err(NetError::ArchMismatch);
        }
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs) {
            a.add_scaled(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, m) in self.entries_mut() {
            m.scale_in_place(alpha);
        }
    }

    /// Euclidean norm over all entries of all tensors.
    pub fn global_norm(&self) -> f64 {
        self.entries().iter().map(|(_, m)| m.frobenius_norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, m)| m.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Gradients of the loss with respect to every parameter.
pub type GradientSet = ParamSet;

/// Residual MLP: architecture, block multipliers and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    pub arch: ArchSpec,
    pub alpha_in: f64,
    /// `α_l` for `l = 1..=L`.
    pub alphas: Vec<f64>,
    pub alpha_out: f64,
    pub params: ParamSet,
}

/// Every intermediate of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub x: Matrix,
    /// Input-layer pre-activation `W_0 x + b_0`.
    pub z_in: Matrix,
    /// `h_0 ..= h_L`, one row per sample.
    pub h: Vec<Matrix>,
    /// Per block, per sublayer pre-activations.
    pub z: Vec<Vec<Matrix>>,
    /// `h_{L+1}`.
    pub output: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }

    /// Feature `h_l` (`l ≤ L`) or output (`l = L+1`) of sample `s`.
    pub fn feature(&self, l: usize, s: usize) -> &[f64] {
        if l < self.h.len() {
            self.h[l].row(s)
        } else {
            self.output.row(s)
        }
    }
}

impl ResidualNet {
    /// Samples weights from `N(0, σ²)` with σ² and α from the parameterization.
    pub fn initialize(arch: ArchSpec, p: &Parameterization, rng: &mut RandomSource) -> Result<Self> {
        arch.validate()?;
        if p.block_depth != arch.block.depth {
            return Err(NetError::InvalidArch(format!(
                "parameterization assumes {}-layer blocks, architecture has {}",
                p.block_depth, arch.block.depth
            )));
        }
        let mut params = ParamSet::zeros(&arch);
        for (role, m) in params.entries_mut() {
            let sigma = p.variance(&role).sqrt();
            if sigma > 0.0 {
                *m = gaussian_matrix(m.rows(), m.cols(), sigma, rng);
            }
        }
        let alpha = |role: &LayerRole| p.multiplier(role);
        let (n_in1, n_out1) = arch.sublayer_dims(1);
        let alphas =
            (1..=arch.depth).map(|l| alpha(&LayerRole::hidden(l, 1, n_in1, n_out1))).collect();
        Ok(ResidualNet {
            arch,
            alpha_in: alpha(&LayerRole::input(arch.d0, arch.width)),
            alphas,
            alpha_out: alpha(&LayerRole::output(arch.width, arch.d_out)),
            params,
        })
    }

    /// All-zero parameters with the given multipliers.
    pub fn zeros(arch: ArchSpec, alpha_in: f64, alpha_hidden: f64, alpha_out: f64) -> Result<Self> {
        arch.validate()?;
        Ok(ResidualNet {
            arch,
            alpha_in,
            alphas: vec![alpha_hidden; arch.depth],
            alpha_out,
            params: ParamSet::zeros(&arch),
        })
    }

    pub fn activation(&self) -> Activation {
        self.arch.block.activation
    }

    pub fn roles(&self) -> Vec<LayerRole> {
        self.arch.roles()
    }

    pub fn param(&self, role: &LayerRole) -> Result<&Matrix> {
        self.params.get(role).ok_or_else(|| NetError::NoSuchParam(role.label()))
    }

    pub fn param_mut(&mut self, role: &LayerRole) -> Result<&mut Matrix> {
        self.params.get_mut(role).ok_or_else(|| NetError::NoSuchParam(role.label()))
    }

    /// Multiplier applied to the parameter with this role.
    pub fn multiplier(&self, role: &LayerRole) -> f64 {
        match role.kind {
            LayerKind::Input | LayerKind::InputBias => self.alpha_in,
            LayerKind::Output => self.alpha_out,
            LayerKind::Hidden | LayerKind::HiddenBias => self.alphas[role.block - 1],
        }
    }

    /// Forward pass of a single sample.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward_batch(&Matrix::new(1, x.len(), x.to_vec())?)
    }

    /// Forward pass of a batch (one sample per row).
    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.arch.d0 {
            return Err(NetError::InputDim { expected: self.arch.d0, got: x.cols() });
        }
        let act = self.activation();
        let mut z_in = x.matmul_nt(&self.params.input)?;
        if let Some(b) = &self.params.input_bias {
            add_bias_rows(&mut z_in, b);
        }
        let mut h0 = act.apply_matrix(&z_in);
        h0.scale_in_place(self.alpha_in);
        let mut h = Vec::with_capacity(self.arch.depth + 1);
        h.push(h0);
        let mut z = Vec::with_capacity(self.arch.depth);
        for (l, blk) in self.params.blocks.iter().enumerate() {
            let prev = &h[l];
            let mut zs: Vec<Matrix> = Vec::with_capacity(blk.weights.len());
            let mut a = prev.clone();
            for (i, w) in blk.weights.iter().enumerate() {
                let mut zi = a.matmul_nt(w)?;
                if let Some(b) = blk.biases.get(i) {
                    add_bias_rows(&mut zi, b);
                }
                a = act.apply_matrix(&zi);
                zs.push(zi);
            }
            let mut next = prev.clone();
            next.add_scaled(self.alphas[l], &a)?;
            h.push(next);
            z.push(zs);
        }
        let mut output = h[self.arch.depth].matmul_nt(&self.params.output)?;
        output.scale_in_place(self.alpha_out);
        Ok(ForwardTrace { x: x.clone(), z_in, h, z, output })
    }

    /// Network outputs without retaining intermediates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.arch.d0 {
            return Err(NetError::InputDim { expected: self.arch.d0, got: x.cols() });
        }
        let act = self.activation();
        let mut z_in = x.matmul_nt(&self.params.input)?;
        if let Some(b) = &self.params.input_bias {
            add_bias_rows(&mut z_in, b);
        }
        let mut h = act.apply_matrix(&z_in);
        h.scale_in_place(self.alpha_in);
        for (l, blk) in self.params.blocks.iter().enumerate() {
            let mut a = h.clone();
            for (i, w) in blk.weights.iter().enumerate() {
                let mut zi = a.matmul_nt(w)?;
                if let Some(b) = blk.biases.get(i) {
                    add_bias_rows(&mut zi, b);
                }
                a = act.apply_matrix(&zi);
            }
            h.add_scaled(self.alphas[l], &a)?;
        }
        let mut out = h.matmul_nt(&self.params.output)?;
        out.scale_in_place(self.alpha_out);
        Ok(out)
    }

    pub fn loss(&self, x: &Matrix, targets: &Matrix, loss: Loss) -> Result<f64> {
        Ok(loss.evaluate(&self.predict(x)?, targets)?.0)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.h.len() != self.arch.depth + 1 || trace.z.len() != self.arch.depth {
            return Err(NetError::TraceMismatch(format!(
                "trace has {} features for depth {}",
                trace.h.len(),
                self.arch.depth
            )));
        }
        if trace.x.cols() != self.arch.d0 || trace.h[0].cols() != self.arch.width {
            return Err(NetError::TraceMismatch("feature widths differ".into()));
        }
        if trace.z.iter().any(|zs| zs.len() != self.arch.block.depth) {
            return Err(NetError::TraceMismatch("block depth differs".into()));
        }
        Ok(())
    }

    /// Gradient of the batch-mean loss.
    pub fn backward(&self, trace: &ForwardTrace, loss: Loss, targets: &Matrix) -> Result<GradientSet> {
        Ok(self.backward_full(trace, loss, targets, false)?.0)
    }

    /// Gradient plus, when `keep_signals`, the per-layer `(input, δ)` pairs:
    /// the batch gradient of a weight is `δᵀ·input`, and the gradient of
    /// sample `s`'s own loss is `B·δ_s ⊗ input_s`.
    pub fn backward_full(
        &self,
        trace: &ForwardTrace,
        loss: Loss,
        targets: &Matrix,
        keep_signals: bool,
    ) -> Result<(GradientSet, Vec<LayerSignal>)> {
        self.check_trace(trace)?;
        let (_, gy) = loss.evaluate(&trace.output, targets)?;
        self.backward_from_output_grad(trace, &gy, keep_signals)
    }

    /// Backpropagates a given gradient with respect to the outputs.
    pub fn backward_from_output_grad(
        &self,
        trace: &ForwardTrace,
        gy: &Matrix,
        keep_signals: bool,
    ) -> Result<(GradientSet, Vec<LayerSignal>)> {
        self.check_trace(trace)?;
        let act = self.activation();
        let mut grads = self.params.zeros_like();
        let mut signals = Vec::new();
        let depth = self.arch.depth;

        // Output layer: y = α_out h_L W_outᵀ.
        let mut g_out = gy.clone();
        g_out.scale_in_place(self.alpha_out);
        grads.output = g_out.matmul_tn(&trace.h[depth])?;
        if keep_signals {
            signals.push(LayerSignal {
                role: LayerRole::output(self.arch.width, self.arch.d_out),
                input: trace.h[depth].clone(),
                delta: g_out.clone(),
            });
        }
        let mut dh = g_out.matmul(&self.params.output)?;

        for l in (0..depth).rev() {
            let blk = &self.params.blocks[l];
            let zs = &trace.z[l];
            let k = blk.weights.len();
            let mut da = dh.scaled(self.alphas[l]);
            for i in (0..k).rev() {
                let dz = masked(&da, &zs[i], act);
                let a_prev = if i == 0 { trace.h[l].clone() } else { act.apply_matrix(&zs[i - 1]) };
                let bg = &mut grads.blocks[l];
                bg.weights[i] = dz.matmul_tn(&a_prev)?;
                if let Some(b) = bg.biases.get_mut(i) {
                    *b = column_sums(&dz);
                }
                da = dz.matmul(&blk.weights[i])?;
                if keep_signals {
                    let (n_in, n_out) = self.arch.sublayer_dims(i + 1);
                    signals.push(LayerSignal { role: LayerRole::hidden(l + 1, i + 1, n_in, n_out), input: a_prev, delta: dz });
                }
            }
            dh.add_scaled(1.0, &da)?;
        }

        let mut dz_in = masked(&dh, &trace.z_in, act);
        dz_in.scale_in_place(self.alpha_in);
        grads.input = dz_in.matmul_tn(&trace.x)?;
        if let Some(b) = &mut grads.input_bias {
            *b = column_sums(&dz_in);
        }
        if keep_signals {
            signals.push(LayerSignal { role: LayerRole::input(self.arch.d0, self.arch.width), input: trace.x.clone(), delta: dz_in });
            signals.reverse();
        }
        Ok((grads, signals))
    }

    /// Gradient of each sample's own loss; their mean is the batch gradient.
    pub fn per_sample_gradients(&self, x: &Matrix, loss: Loss, targets: &Matrix) -> Result<Vec<GradientSet>> {
        if targets.rows() != x.rows() {
            return Err(NetError::TargetShape { expected: (x.rows(), self.arch.d_out), got: targets.shape() });
        }
        (0..x.rows())
            .map(|s| {
                let xs = Matrix::new(1, x.cols(), x.row(s).to_vec())?;
                let ts = Matrix::new(1, targets.cols(), targets.row(s).to_vec())?;
                let trace = self.forward_batch(&xs)?;
                self.backward(&trace, loss, &ts)
            })
            .collect()
    }

    /// Splits the change of `h_L(x)` between `self` and `after` into
    /// `Δh_0 + ε₀ + ε₁⁽¹⁾ + ε₁⁽²⁾ + ε₂` for linear, bias-free two-layer blocks.
    pub fn decompose_feature_update(&self, after: &ResidualNet, x: &[f64]) -> Result<UpdateDecomposition> {
        if self.arch != after.arch || self.alphas != after.alphas {
            return Err(NetError::ArchMismatch);
        }
        if self.arch.block.depth != 2 {
            return Err(NetError::Unsupported(format!(
                "feature-update decomposition needs two-layer blocks, got k = {}",
                self.arch.block.depth
            )));
        }
        if self.activation() != Activation::Linear || self.arch.block.use_bias {
            return Err(NetError::Unsupported("feature-update decomposition needs linear, bias-free blocks".into()));
        }
        let before = self.forward(x)?;
        let post = after.forward(x)?;
        let n = self.arch.width;
        let dh0: Vector = crate::linalg::sub_vec(post.feature(0, 0), before.feature(0, 0));
        let mut eps0 = vec![0.0; n];
        let mut eps1_w1 = vec![0.0; n];
        let mut eps1_w2 = vec![0.0; n];
        let mut eps2 = vec![0.0; n];
        for l in 0..self.arch.depth {
            let alpha = self.alphas[l];
            let (w1, w2) = (&self.params.blocks[l].weights[0], &self.params.blocks[l].weights[1]);
            let dw1 = after.params.blocks[l].weights[0].sub(w1)?;
            let dw2 = after.params.blocks[l].weights[1].sub(w2)?;
            let h = before.feature(l, 0);
            let h_new = post.feature(l, 0);
            let dh = crate::linalg::sub_vec(h_new, h);
            let add = |acc: &mut Vector, v: Vector| crate::linalg::axpy(alpha, &v, acc);
            add(&mut eps0, w2.matvec(&w1.matvec(&dh)?)?);
            add(&mut eps1_w1, w2.matvec(&dw1.matvec(h_new)?)?);
            add(&mut eps1_w2, dw2.matvec(&w1.matvec(h_new)?)?);
            add(&mut eps2, dw2.matvec(&dw1.matvec(h_new)?)?);
        }
        let dh_l = crate::linalg::sub_vec(post.feature(self.arch.depth, 0), before.feature(self.arch.depth, 0));
        Ok(UpdateDecomposition { dh0, eps0, eps1_w1, eps1_w2, eps2, dh_l })
    }
}

/// Input activations and backpropagated pre-activation gradients of a layer.
#[derive(Debug, Clone)]
pub struct LayerSignal {
    pub role: LayerRole,
    /// Layer input, one row per sample.
    pub input: Matrix,
    /// `∂𝓛/∂z` of the batch-mean loss, one row per sample.
    pub delta: Matrix,
}

/// Vector terms of a one-step change of `h_L(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDecomposition {
    pub dh0: Vector,
    /// `Σ α W⁽²⁾W⁽¹⁾ Δh_{l-1}`.
    pub eps0: Vector,
    /// `Σ α W⁽²⁾ ΔW⁽¹⁾ (h_{l-1} + Δh_{l-1})`.
    pub eps1_w1: Vector,
    /// `Σ α ΔW⁽²⁾ W⁽¹⁾ (h_{l-1} + Δh_{l-1})`.
    pub eps1_w2: Vector,
    /// `Σ α ΔW⁽²⁾ ΔW⁽¹⁾ (h_{l-1} + Δh_{l-1})`.
    pub eps2: Vector,
    /// Directly measured `Δh_L`.
    pub dh_l: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionNorms {
    pub dh0: f64,
    pub eps0: f64,
    pub eps1_w1: f64,
    pub eps1_w2: f64,
    pub eps2: f64,
    pub dh_l: f64,
}

impl UpdateDecomposition {
    pub fn component_sum(&self) -> Vector {
        let mut s = self.dh0.clone();
        for v in [&self.eps0, &self.eps1_w1, &self.eps1_w2, &self.eps2] {
            crate::linalg::axpy(1.0, v, &mut s);
        }
        s
    }

    /// Largest absolute gap between the component sum and the measured `Δh_L`.
    pub fn residual(&self) -> f64 {
        self.component_sum().iter().zip(&self.dh_l).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn norms(&self) -> DecompositionNorms {
        DecompositionNorms {
            dh0: rms_vec(&self.dh0),
            eps0: rms_vec(&self.eps0),
            eps1_w1: rms_vec(&self.eps1_w1),
            eps1_w2: rms_vec(&self.eps1_w2),
            eps2: rms_vec(&self.eps2),
            dh_l: rms_vec(&self.dh_l),
        }
    }
}

fn add_bias_rows(z: &mut Matrix, b: &Matrix) {
    let bias = b.as_slice();
    for r in 0..z.rows() {
        crate::linalg::axpy(1.0, bias, z.row_mut(r));
    }
}

fn masked(da: &Matrix, z: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::Linear => da.clone(),
        Activation::Relu => da.hadamard(&z.map(|v| act.derivative(v))).expect("same shape"),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols(), 1);
    for r in 0..m.rows() {
        crate::linalg::axpy(1.0, m.row(r), out.as_mut_slice());
    }
    out
}
