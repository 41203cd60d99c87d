//! Piecewise-linear classifiers f(x) = βᵀΦ(x).
//!
//! Φ is a stack of linear layers with ReLU activations (dense, or a small
//! conv net with global average pooling); β is a bias-free linear head. ReLU
//! is the only nonlinearity, so f is continuous and piecewise linear in x,
//! and within an activation region Φ(x) = Φ_x·x + B_x exactly. That local
//! affine form is extracted by [`local_linearization`] by propagating a
//! basis batch through the layer stack with the anchor's 0/1 activation
//! masks frozen and biases dropped, then recovering B_x = Φ(x) − Φ_x·x.
//!
//! Inputs travel flat ([batch × input_dim]); the conv path reshapes
//! internally. Parameters live in plain arrays on the model and are bound to
//! a tape per computation via [`Model::bind`], which keeps model snapshots
//! immutable and shareable across threads.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{im2col, ConvGeom, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum NetsError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} features, model expects {want}")]
    InputDim { got: usize, want: usize },
    #[error("operation requires the binary head (head_dim 1), model has head_dim {0}")]
    NotBinaryHead(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Specification ───────────────────────────────────────────────────────

/// Architecture of the feature map Φ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Arch {
    /// Dense stack: input → hidden_dims… → rep_dim, ReLU after every layer.
    /// With empty hidden_dims and rep_dim == input_dim, Φ is the identity
    /// (pure linear model βᵀx).
    #[default]
    Mlp,
    /// Conv stack with 3×3-style square kernels (padding kernel/2), ReLU
    /// after each conv, global average pooling to rep_dim == last channels.
    ConvNet {
        in_ch: usize,
        img_h: usize,
        img_w: usize,
        channels: Vec<usize>,
        kernel: usize,
        strides: Vec<usize>,
    },
}

/// Everything needed to deterministically construct a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Feature dimension d of Φ.
    pub rep_dim: usize,
    pub bias_enabled: bool,
    /// 1 for the binary ±1 head; C for a multiclass CE head.
    pub head_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub arch: Arch,
}

impl ModelSpec {
    /// Dense spec with the binary head.
    pub fn mlp(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        rep_dim: usize,
        bias_enabled: bool,
        seed: u64,
    ) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims,
            rep_dim,
            bias_enabled,
            head_dim: 1,
            seed,
            arch: Arch::Mlp,
        }
    }

    /// Four-conv-layer net for 2-channel 28×28 colored-digit images.
    pub fn mnist_cnn(seed: u64) -> Self {
        Self::conv_default(2, 28, seed)
    }

    /// Four-conv-layer variant for square images: channels [16, 32, 32, 64],
    /// strides [1, 2, 1, 2], global average pooling.
    pub fn conv_default(in_ch: usize, img: usize, seed: u64) -> Self {
        ModelSpec {
            input_dim: in_ch * img * img,
            hidden_dims: vec![],
            rep_dim: 64,
            bias_enabled: true,
            head_dim: 1,
            seed,
            arch: Arch::ConvNet {
                in_ch,
                img_h: img,
                img_w: img,
                channels: vec![16, 32, 32, 64],
                kernel: 3,
                strides: vec![1, 2, 1, 2],
            },
        }
    }

    pub fn validate(&self) -> Result<(), NetsError> {
        let bad = |m: String| Err(NetsError::InvalidSpec(m));
        if self.input_dim == 0 || self.rep_dim == 0 || self.head_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return bad("hidden dimensions must be positive".into());
        }
        match &self.arch {
            Arch::Mlp => Ok(()),
            Arch::ConvNet {
                in_ch,
                img_h,
                img_w,
                channels,
                kernel,
                strides,
            } => {
                if !self.hidden_dims.is_empty() {
                    return bad("conv specs use `channels`, not hidden_dims".into());
                }
                if *in_ch == 0 || *img_h == 0 || *img_w == 0 || *kernel == 0 {
                    return bad("conv dimensions must be positive".into());
                }
                if channels.is_empty() || channels.len() != strides.len() {
                    return bad("need one stride per conv layer".into());
                }
                if in_ch * img_h * img_w != self.input_dim {
                    return bad(format!(
                        "input_dim {} != in_ch*img_h*img_w = {}",
                        self.input_dim,
                        in_ch * img_h * img_w
                    ));
                }
                if self.rep_dim != *channels.last().unwrap() {
                    return bad("rep_dim must equal the last conv channel count".into());
                }
                // every layer must keep a positive spatial extent
                for g in conv_geoms(self, 1)? {
                    if g.out_h() == 0 || g.out_w() == 0 {
                        return bad("conv stack shrinks the image to nothing".into());
                    }
                }
                Ok(())
            }
        }
    }

    /// Dense layer dimensions [input, …hidden…, rep]; empty layer list when
    /// Φ is the identity.
    fn dense_dims(&self) -> Vec<usize> {
        if self.hidden_dims.is_empty() && self.rep_dim == self.input_dim {
            return vec![self.input_dim]; // identity Φ: zero layers
        }
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.rep_dim);
        dims
    }
}

/// Conv geometries per layer for a given batch size.
fn conv_geoms(spec: &ModelSpec, batch: usize) -> Result<Vec<ConvGeom>, NetsError> {
    let Arch::ConvNet {
        in_ch,
        img_h,
        img_w,
        channels,
        kernel,
        strides,
        ..
    } = &spec.arch
    else {
        return Err(NetsError::InvalidSpec("not a conv spec".into()));
    };
    let mut geoms = Vec::with_capacity(channels.len());
    let (mut c, mut h, mut w) = (*in_ch, *img_h, *img_w);
    for (i, &out_c) in channels.iter().enumerate() {
        let g = ConvGeom {
            batch,
            in_ch: c,
            in_h: h,
            in_w: w,
            k_h: *kernel,
            k_w: *kernel,
            stride: strides[i],
            pad: kernel / 2,
        };
        if !g.valid() {
            return Err(NetsError::InvalidSpec(format!(
                "conv layer {i} has invalid geometry"
            )));
        }
        (c, h, w) = (out_c, g.out_h(), g.out_w());
        geoms.push(g);
    }
    Ok(geoms)
}

// ── Model ───────────────────────────────────────────────────────────────

/// A concrete parameterization of Φ and β.
///
/// `weights[i]` is the i-th layer's matrix shaped [fan_in × fan_out]
/// (conv layers store [in_ch·k² × out_ch]); `biases[i]` is `None` when
/// bias_enabled is false, so disabled biases are structurally zero and can
/// never drift. `head` is [rep_dim × head_dim], always bias-free.
#[derive(Debug, Clone)]
pub struct Model<E: Scalar> {
    pub spec: ModelSpec,
    pub weights: Vec<Array2<E>>,
    pub biases: Vec<Option<Array1<E>>>,
    pub head: Array2<E>,
}

/// Deterministically initialize a model: every weight is drawn uniformly
/// from (−1/√fan_in, 1/√fan_in) in declaration order from one seeded
/// stream; biases start at zero. Draws happen in f64 and are cast, so the
/// stream is identical across precisions.
pub fn init<E: Scalar>(spec: &ModelSpec) -> Result<Model<E>, NetsError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut draw = |fan_in: usize, rows: usize, cols: usize| -> Array2<E> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| {
            E::from_f64(rng.gen_range(-scale..scale))
        })
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    match &spec.arch {
        Arch::Mlp => {
            let dims = spec.dense_dims();
            for win in dims.windows(2) {
                weights.push(draw(win[0], win[0], win[1]));
                biases.push(spec.bias_enabled.then(|| Array1::zeros(win[1])));
            }
        }
        Arch::ConvNet { channels, .. } => {
            let geoms = conv_geoms(spec, 1)?;
            for (g, &out_c) in geoms.iter().zip(channels.iter()) {
                let fan_in = g.in_ch * g.k_h * g.k_w;
                weights.push(draw(fan_in, fan_in, out_c));
                biases.push(spec.bias_enabled.then(|| Array1::zeros(out_c)));
            }
        }
    }
    let head = draw(spec.rep_dim, spec.rep_dim, spec.head_dim);
    Ok(Model {
        spec: spec.clone(),
        weights,
        biases,
        head,
    })
}

impl<E: Scalar> Model<E> {
    /// Parameter slices in declaration order (layer weights/biases, head).
    pub fn param_slices(&self) -> Vec<&[E]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.as_slice().unwrap());
            if let Some(b) = b {
                out.push(b.as_slice().unwrap());
            }
        }
        out.push(self.head.as_slice().unwrap());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [E]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().unwrap());
            if let Some(b) = b {
                out.push(b.as_slice_mut().unwrap());
            }
        }
        out.push(self.head.as_slice_mut().unwrap());
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Register all parameters on a tape. With `trainable`, gradients
    /// accumulate on the returned leaves during backward.
    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> Result<BoundModel<E>, NetsError> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            weights.push(tape.leaf(w.clone().into_dyn(), trainable)?);
            biases.push(match b {
                Some(b) => Some(tape.leaf(b.clone().into_dyn(), trainable)?),
                None => None,
            });
        }
        let head = tape.leaf(self.head.clone().into_dyn(), trainable)?;
        Ok(BoundModel {
            spec: self.spec.clone(),
            weights,
            biases,
            head,
        })
    }

    /// Tape-free forward of Φ for evaluation; same operation order as the
    /// tape path.
    pub fn features_plain(&self, x: &Array2<E>) -> Result<Array2<E>, NetsError> {
        check_input_dim(&self.spec, x.ncols())?;
        match &self.spec.arch {
            Arch::Mlp => {
                let mut h = x.clone();
                for (w, b) in self.weights.iter().zip(self.biases.iter()) {
                    let mut z = h.dot(w);
                    if let Some(b) = b {
                        for mut row in z.rows_mut() {
                            row += b;
                        }
                    }
                    z.mapv_inplace(|v| v.max(E::zero()));
                    h = z;
                }
                Ok(h)
            }
            Arch::ConvNet { channels, .. } => {
                let geoms = conv_geoms(&self.spec, x.nrows())?;
                let mut img = x
                    .clone()
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[
                        x.nrows(),
                        geoms[0].in_ch,
                        geoms[0].in_h,
                        geoms[0].in_w,
                    ]))
                    .unwrap();
                for ((g, w), (b, &out_c)) in geoms
                    .iter()
                    .zip(self.weights.iter())
                    .zip(self.biases.iter().zip(channels.iter()))
                {
                    let cols = im2col(&img, g);
                    let cols2 = cols.view().into_dimensionality::<Ix2>().unwrap();
                    let mut z = cols2.dot(w);
                    if let Some(b) = b {
                        for mut row in z.rows_mut() {
                            row += b;
                        }
                    }
                    z.mapv_inplace(|v| v.max(E::zero()));
                    // rows are ordered (batch, oh, ow) → channel-first image
                    let blocked = z
                        .into_dyn()
                        .into_shape_with_order(IxDyn(&[g.batch, g.out_h(), g.out_w(), out_c]))
                        .unwrap();
                    img = blocked
                        .view()
                        .permuted_axes(IxDyn(&[0, 3, 1, 2]))
                        .as_standard_layout()
                        .to_owned();
                }
                // global average pool to [batch × channels]
                let shape = img.shape().to_vec();
                let spatial = shape[2] * shape[3];
                let pooled = img
                    .into_shape_with_order(IxDyn(&[shape[0], shape[1], spatial]))
                    .unwrap()
                    .sum_axis(Axis(2))
                    .mapv(|v| v / E::from_f64(spatial as f64));
                Ok(pooled.into_dimensionality::<Ix2>().unwrap())
            }
        }
    }

    /// Tape-free logits βᵀΦ(x) for evaluation.
    pub fn logits_plain(&self, x: &Array2<E>) -> Result<Array2<E>, NetsError> {
        Ok(self.features_plain(x)?.dot(&self.head))
    }
}

fn check_input_dim(spec: &ModelSpec, got: usize) -> Result<(), NetsError> {
    if got != spec.input_dim {
        return Err(NetsError::InputDim {
            got,
            want: spec.input_dim,
        });
    }
    Ok(())
}

// ── Tape-bound forward ──────────────────────────────────────────────────

/// Model parameters registered as leaves on one tape.
pub struct BoundModel<E: Scalar> {
    pub spec: ModelSpec,
    pub weights: Vec<Tensor<E>>,
    pub biases: Vec<Option<Tensor<E>>>,
    pub head: Tensor<E>,
}

impl<E: Scalar> BoundModel<E> {
    /// Φ(x) for a flat batch [B × input_dim], recording on the tape.
    pub fn features(&self, x: &Tensor<E>) -> Result<Tensor<E>, NetsError> {
        Ok(self.features_with_masks(x)?.0)
    }

    /// Φ(x) plus each ReLU layer's 0/1 activation mask (strict positivity
    /// of the preactivation), as plain arrays for later frozen-mask passes.
    pub fn features_with_masks(
        &self,
        x: &Tensor<E>,
    ) -> Result<(Tensor<E>, Vec<ArrayD<E>>), NetsError> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(NetsError::Tensor(TensorError::BadShape {
                op: "features",
                expected: "2-d [batch × input_dim] tensor",
                got: shape,
            }));
        }
        check_input_dim(&self.spec, shape[1])?;
        let batch = shape[0];
        let mut masks = Vec::new();
        match &self.spec.arch {
            Arch::Mlp => {
                let mut h = x.clone();
                for (w, b) in self.weights.iter().zip(self.biases.iter()) {
                    let mut z = h.matmul(w)?;
                    if let Some(b) = b {
                        z = z.add_row(b)?;
                    }
                    masks.push(z.value().mapv(|v| {
                        if v > E::zero() {
                            E::one()
                        } else {
                            E::zero()
                        }
                    }));
                    h = z.relu();
                }
                Ok((h, masks))
            }
            Arch::ConvNet { channels, .. } => {
                let geoms = conv_geoms(&self.spec, batch)?;
                let mut img = x.reshape(&[
                    batch,
                    geoms[0].in_ch,
                    geoms[0].in_h,
                    geoms[0].in_w,
                ])?;
                for ((g, w), (b, &out_c)) in geoms
                    .iter()
                    .zip(self.weights.iter())
                    .zip(self.biases.iter().zip(channels.iter()))
                {
                    let mut z = img.im2col_op(g)?.matmul(w)?;
                    if let Some(b) = b {
                        z = z.add_row(b)?;
                    }
                    masks.push(z.value().mapv(|v| {
                        if v > E::zero() {
                            E::one()
                        } else {
                            E::zero()
                        }
                    }));
                    img = z
                        .relu()
                        .reshape(&[g.batch, g.out_h(), g.out_w(), out_c])?
                        .permute(&[0, 3, 1, 2])?;
                }
                let shape = img.shape();
                let pooled = img
                    .reshape(&[shape[0], shape[1], shape[2] * shape[3]])?
                    .mean_last_axis()?;
                Ok((pooled, masks))
            }
        }
    }

    /// Logits βᵀΦ(x) as [B × head_dim].
    pub fn logits(&self, x: &Tensor<E>) -> Result<Tensor<E>, NetsError> {
        Ok(self.features(x)?.matmul(&self.head)?)
    }

    /// Gradients of all parameters after a backward pass, in declaration
    /// order (matching [`Model::param_slices`]). Missing gradients (layers
    /// the loss does not reach) come back as zeros.
    pub fn param_grads(&self) -> Vec<ArrayD<E>> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor<E>| {
            out.push(
                t.grad()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(&t.shape()))),
            );
        };
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            push(w);
            if let Some(b) = b {
                push(b);
            }
        }
        push(&self.head);
        out
    }
}

// ── Input gradients ─────────────────────────────────────────────────────

/// ∇ₓ of the summed logistic loss for a batch: row i is ∇ₓℓ(βᵀΦ(xᵢ), yᵢ).
/// Parameters are bound as constants, so they cannot accumulate gradients.
pub fn batch_input_grads<E: Scalar>(
    model: &Model<E>,
    xs: &Array2<E>,
    ys: &[i8],
) -> Result<Array2<E>, NetsError> {
    if model.spec.head_dim != 1 {
        return Err(NetsError::NotBinaryHead(model.spec.head_dim));
    }
    let tape = Tape::new();
    let x = tape.leaf(xs.clone().into_dyn(), true)?;
    let bound = model.bind(&tape, false)?;
    let logits = bound.logits(&x)?.reshape(&[xs.nrows()])?;
    let total = logits.logistic_loss(ys)?.sum_all();
    tape.backward(&total)?;
    let g = x.grad().expect("input leaf requires grad");
    Ok(g.into_dimensionality::<Ix2>().unwrap())
}

/// ∇ₓ ℓ(βᵀΦ(x), y) for one sample.
pub fn grad_wrt_input<E: Scalar>(
    model: &Model<E>,
    x: &Array1<E>,
    y: i8,
) -> Result<Array1<E>, NetsError> {
    let xs = x
        .clone()
        .into_shape_with_order((1, x.len()))
        .unwrap();
    let g = batch_input_grads(model, &xs, &[y])?;
    Ok(g.row(0).to_owned())
}

// ── Local linearization ─────────────────────────────────────────────────

/// The affine map Φ(x) = Φ_x·x + B_x valid on the anchor's activation
/// region.
#[derive(Debug, Clone)]
pub struct LocalLinearization<E: Scalar> {
    /// Φ_x, shaped [rep_dim × input_dim].
    pub jacobian: Array2<E>,
    /// B_x, length rep_dim. Exactly zero (to rounding) for bias-free nets.
    pub bias: Array1<E>,
}

/// Exact local linearization of Φ at `x`: runs the anchor forward to freeze
/// each ReLU's activation mask, pushes the identity basis through the
/// resulting purely-linear stack (biases dropped), and recovers the offset
/// as B_x = Φ(x) − Φ_x·x.
pub fn local_linearization<E: Scalar>(
    model: &Model<E>,
    x: &Array1<E>,
) -> Result<LocalLinearization<E>, NetsError> {
    check_input_dim(&model.spec, x.len())?;
    let n = x.len();
    let anchor = x.clone().into_shape_with_order((1, n)).unwrap();

    // Anchor pass, recording strict-positivity masks per ReLU layer.
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xt = tape.leaf(anchor.clone().into_dyn(), false)?;
    let (feats, masks) = bound.features_with_masks(&xt)?;
    let phi_x: Array1<E> = feats
        .value()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .row(0)
        .to_owned();

    // Basis pass: identity matrix as a batch of n inputs through the
    // frozen-mask linear stack (no biases).
    let basis = Array2::<E>::eye(n);
    let propagated = propagate_frozen(model, &masks, basis.into_dyn())?;
    // rows index basis vectors → Φ_x is the transpose
    let jacobian = propagated.t().as_standard_layout().to_owned();

    let bias = &phi_x - &jacobian.dot(x);
    Ok(LocalLinearization { jacobian, bias })
}

/// Apply the anchor-frozen linear part of Φ to a batch of inputs:
/// each layer multiplies by its weights, applies the anchor's mask for that
/// layer (broadcast over the batch), and skips biases.
fn propagate_frozen<E: Scalar>(
    model: &Model<E>,
    masks: &[ArrayD<E>],
    batch: ArrayD<E>,
) -> Result<Array2<E>, NetsError> {
    let b = batch.shape()[0];
    match &model.spec.arch {
        Arch::Mlp => {
            let mut h = batch.into_dimensionality::<Ix2>().unwrap();
            for (w, mask) in model.weights.iter().zip(masks.iter()) {
                let mut z = h.dot(w);
                let mask1 = mask
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .row(0)
                    .to_owned();
                for mut row in z.rows_mut() {
                    row *= &mask1;
                }
                h = z;
            }
            Ok(h)
        }
        Arch::ConvNet { channels, .. } => {
            let geoms = conv_geoms(&model.spec, b)?;
            let first = &geoms[0];
            let mut img = batch
                .into_shape_with_order(IxDyn(&[b, first.in_ch, first.in_h, first.in_w]))
                .unwrap();
            for ((g, w), (mask, &out_c)) in geoms
                .iter()
                .zip(model.weights.iter())
                .zip(masks.iter().zip(channels.iter()))
            {
                let cols = im2col(&img, g);
                let mut z = cols.view().into_dimensionality::<Ix2>().unwrap().dot(w);
                // anchor mask rows are ordered (anchor-batch=1, oh, ow) ×
                // out_c; broadcast that pattern over the basis batch.
                let mask2 = mask.view().into_dimensionality::<Ix2>().unwrap();
                let spatial = g.out_h() * g.out_w();
                for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                    let anchor_row = r % spatial;
                    row *= &mask2.row(anchor_row);
                }
                let blocked = z
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[b, g.out_h(), g.out_w(), out_c]))
                    .unwrap();
                img = blocked
                    .view()
                    .permuted_axes(IxDyn(&[0, 3, 1, 2]))
                    .as_standard_layout()
                    .to_owned();
            }
            let shape = img.shape().to_vec();
            let spatial = shape[2] * shape[3];
            let pooled = img
                .into_shape_with_order(IxDyn(&[shape[0], shape[1], spatial]))
                .unwrap()
                .sum_axis(Axis(2))
                .mapv(|v| v / E::from_f64(spatial as f64));
            Ok(pooled.into_dimensionality::<Ix2>().unwrap())
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ParamEntry<E> {
    name: String,
    shape: Vec<usize>,
    data: Vec<E>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc<E> {
    spec: ModelSpec,
    seed: u64,
    precision: String,
    params: Vec<ParamEntry<E>>,
}

impl<E: Scalar> Model<E> {
    /// Serialize to the single-document JSON checkpoint format. 64-bit
    /// round-trips are bit-exact (shortest-roundtrip float formatting).
    pub fn to_checkpoint_json(&self) -> String {
        let mut params = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            params.push(ParamEntry {
                name: format!("layer{i}.weight"),
                shape: w.shape().to_vec(),
                data: w.iter().copied().collect(),
            });
            if let Some(b) = b {
                params.push(ParamEntry {
                    name: format!("layer{i}.bias"),
                    shape: b.shape().to_vec(),
                    data: b.iter().copied().collect(),
                });
            }
        }
        params.push(ParamEntry {
            name: "head.weight".into(),
            shape: self.head.shape().to_vec(),
            data: self.head.iter().copied().collect(),
        });
        let doc = CheckpointDoc {
            spec: self.spec.clone(),
            seed: self.spec.seed,
            precision: E::TAG.into(),
            params,
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Model<E>, NetsError> {
        let doc: CheckpointDoc<E> =
            serde_json::from_str(text).map_err(|e| NetsError::Checkpoint(e.to_string()))?;
        if doc.precision != E::TAG {
            return Err(NetsError::Checkpoint(format!(
                "precision tag {} does not match requested {}",
                doc.precision,
                E::TAG
            )));
        }
        // template model pins the expected parameter count and shapes
        let mut model = init::<E>(&doc.spec)?;
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, (w, b)) in model.weights.iter().zip(model.biases.iter()).enumerate() {
            expected.push((format!("layer{i}.weight"), w.shape().to_vec()));
            if let Some(b) = b {
                expected.push((format!("layer{i}.bias"), b.shape().to_vec()));
            }
        }
        expected.push(("head.weight".into(), model.head.shape().to_vec()));
        if doc.params.len() != expected.len() {
            return Err(NetsError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                doc.params.len()
            )));
        }
        let mut arrays = Vec::new();
        for (entry, (name, shape)) in doc.params.into_iter().zip(expected.iter()) {
            if &entry.name != name || &entry.shape != shape {
                return Err(NetsError::Checkpoint(format!(
                    "parameter {} (shape {:?}) does not match expected {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            if entry.data.len() != shape.iter().product::<usize>() {
                return Err(NetsError::Checkpoint(format!(
                    "parameter {}: data length {} does not match shape {:?}",
                    entry.name,
                    entry.data.len(),
                    shape
                )));
            }
            if !entry.data.iter().all(|v| v.is_finite()) {
                return Err(NetsError::Checkpoint(format!(
                    "parameter {} contains non-finite values",
                    entry.name
                )));
            }
            arrays.push(entry.data);
        }
        let mut it = arrays.into_iter();
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            *w = Array2::from_shape_vec(w.raw_dim(), it.next().unwrap()).unwrap();
            if let Some(b) = b {
                *b = Array1::from_shape_vec(b.raw_dim(), it.next().unwrap()).unwrap();
            }
        }
        model.head = Array2::from_shape_vec(model.head.raw_dim(), it.next().unwrap()).unwrap();
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), NetsError> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Model<E>, NetsError> {
        let text = std::fs::read_to_string(path)?;
        Model::from_checkpoint_json(&text)
    }
}
