//! The all-convolutional CIFAR-10 classifier with a pluggable normalization
//! layer after every ReLU convolution, per `x_l = relu(norm(conv(x_{l-1})))`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::norm::{
    build_stat_nets, BatchNormState, DwckNormState, LearnedStatsState, NormOptions,
};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Real, Shape4, Tape, TensorId};

/// Which normalization follows each ReLU convolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NormKind {
    None,
    Batch,
    Dwck,
    Learned,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [NormKind::None, NormKind::Batch, NormKind::Dwck, NormKind::Learned];

    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
            NormKind::Dwck => "dwck",
            NormKind::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Option<NormKind> {
        match s {
            "none" => Some(NormKind::None),
            "batch" => Some(NormKind::Batch),
            "dwck" => Some(NormKind::Dwck),
            "learned" => Some(NormKind::Learned),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierConfig {
    pub norm: NormKind,
    /// Multiplies the 96/192 base filter counts, rounding down (min 1).
    pub width_scale: f64,
    /// Input (channels, height, width).
    pub input_dims: (usize, usize, usize),
    pub n_classes: usize,
}

impl ClassifierConfig {
    pub fn cifar10(norm: NormKind, width_scale: f64) -> Self {
        ClassifierConfig { norm, width_scale, input_dims: (3, 32, 32), n_classes: 10 }
    }
}

#[derive(Clone, Debug)]
pub enum NormLayer<R: Real> {
    Batch(BatchNormState<R>),
    Dwck(DwckNormState<R>),
    Learned(LearnedStatsState<R>),
}

#[derive(Clone, Debug)]
pub struct ConvBlock<R: Real> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub relu: bool,
    pub norm: Option<NormLayer<R>>,
    /// Spatial dims of this block's output.
    pub out_dims: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Model<R: Real> {
    pub cfg: ClassifierConfig,
    pub blocks: Vec<ConvBlock<R>>,
}

/// Filter counts after width scaling.
pub fn scaled_filters(width_scale: f64) -> (usize, usize) {
    let scale = |base: usize| ((base as f64 * width_scale) as usize).max(1);
    (scale(96), scale(192))
}

/// Build the classifier: three width-96 3x3 convolutions (the third strided),
/// four width-192 3x3 convolutions (the third strided), a width-192 1x1, a
/// 1x1 projection to the classes, global average pooling, and softmax. Every
/// ReLU convolution is followed by the configured normalization before the
/// activation.
pub fn build_allcnn<R: Real>(
    store: &mut ParamStore<R>,
    cfg: ClassifierConfig,
    opts: &NormOptions,
    rng: &mut Rng,
) -> Result<Model<R>> {
    let (c_in, h, w) = cfg.input_dims;
    if h < 8 || w < 8 {
        return Err(Error::InputTooSmall { h, w });
    }
    let (c1, c2) = scaled_filters(cfg.width_scale);
    // (out channels, kernel, stride, normalized+relu)
    let layout: [(usize, usize, usize, bool); 9] = [
        (c1, 3, 1, true),
        (c1, 3, 1, true),
        (c1, 3, 2, true),
        (c2, 3, 1, true),
        (c2, 3, 1, true),
        (c2, 3, 2, true),
        (c2, 3, 1, true),
        (c2, 1, 1, true),
        (cfg.n_classes, 1, 1, false),
    ];

    let mut blocks = Vec::with_capacity(layout.len());
    let mut prev_c = c_in;
    let mut dims = (h, w);
    for (i, &(c_out, k, stride, normed)) in layout.iter().enumerate() {
        let block_no = i + 1;
        let padding = if k == 3 { 1 } else { 0 };
        let weight_shape = Shape4::new(c_out, prev_c, k, k);
        let bound = (6.0 / ((prev_c * k * k) as f64 + (c_out * k * k) as f64)).sqrt();
        let weight = store.register(
            format!("block{block_no}.conv.weight"),
            weight_shape,
            (0..weight_shape.count()).map(|_| R::from_f64(rng.range(-bound, bound))).collect(),
        );
        let bias = store.register(
            format!("block{block_no}.conv.bias"),
            Shape4::new(1, c_out, 1, 1),
            vec![R::zero(); c_out],
        );
        dims = ((dims.0 + 2 * padding - k) / stride + 1, (dims.1 + 2 * padding - k) / stride + 1);
        let prefix = format!("block{block_no}.norm");
        let norm = if normed {
            Some(match cfg.norm {
                NormKind::None => None,
                NormKind::Batch => Some(NormLayer::Batch(BatchNormState::new(
                    store,
                    &prefix,
                    c_out,
                    R::from_f64(opts.momentum),
                    R::from_f64(opts.eps),
                ))),
                NormKind::Dwck => Some(NormLayer::Dwck(DwckNormState::new(
                    store, &prefix, c_out, dims, opts, rng,
                )?)),
                NormKind::Learned => Some(NormLayer::Learned(build_stat_nets(
                    store, &prefix, block_no, c_out, opts, rng,
                ))),
            })
        } else {
            None
        }
        .flatten();
        blocks.push(ConvBlock {
            weight,
            bias,
            stride: (stride, stride),
            padding: (padding, padding),
            relu: normed,
            norm,
            out_dims: dims,
        });
        prev_c = c_out;
    }
    Ok(Model { cfg, blocks })
}

impl<R: Real> Model<R> {
    /// Full forward pass to class probabilities of shape (n, classes, 1, 1).
    pub fn forward(
        &mut self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let xs = tape.shape(x);
        let (c, h, w) = self.cfg.input_dims;
        if (xs.c, xs.h, xs.w) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                lhs: xs,
                rhs: Shape4::new(xs.n, c, h, w),
            });
        }
        let mut cur = x;
        for block in &mut self.blocks {
            let weight = tape.param(store, block.weight);
            let bias = tape.param(store, block.bias);
            cur = tape.conv2d(cur, weight, Some(bias), block.stride, block.padding)?;
            if let Some(norm) = &mut block.norm {
                cur = match norm {
                    NormLayer::Batch(s) => s.forward(tape, store, cur, training)?,
                    NormLayer::Dwck(s) => s.forward(tape, store, cur, training)?,
                    NormLayer::Learned(s) => s.forward(tape, store, cur, training)?,
                };
            }
            if block.relu {
                cur = tape.relu(cur);
            }
        }
        let pooled = tape.global_avg_pool(cur)?;
        tape.softmax(pooled)
    }

    /// Class index per row (argmax, ties broken by the lowest index).
    pub fn predict(
        &mut self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: TensorId,
    ) -> Result<Vec<usize>> {
        let probs = self.forward(tape, store, x, false)?;
        let ps = tape.shape(probs);
        Ok(argmax_rows(tape.values(probs), ps.n, ps.c))
    }

    /// Clamp all depthwise stack weights to be nonnegative.
    pub fn project_nonneg(&self, store: &mut ParamStore<R>) {
        for block in &self.blocks {
            if let Some(NormLayer::Dwck(s)) = &block.norm {
                s.project_nonneg(store);
            }
        }
    }

    /// Worst weight-sum drift across all depthwise normalization layers;
    /// zero when the model has none.
    pub fn weight_sum_drift(&self, store: &ParamStore<R>) -> R {
        let mut worst = R::zero();
        for block in &self.blocks {
            if let Some(NormLayer::Dwck(s)) = &block.norm {
                let d = s.weight_sum_drift(store);
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Scalar count of normalization parameters (everything except the
    /// convolution weights and biases).
    pub fn norm_param_count(&self, store: &ParamStore<R>) -> usize {
        store
            .ids()
            .filter(|&id| store.name(id).contains(".norm."))
            .map(|id| store.value(id).len())
            .sum()
    }

    /// Scalar count of depthwise stack weights only (no affine).
    pub fn dwck_stack_weight_count(&self, store: &ParamStore<R>) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| match &b.norm {
                Some(NormLayer::Dwck(s)) => {
                    Some(s.stage_weights.iter().map(|&p| store.value(p).len()).sum::<usize>())
                }
                _ => None,
            })
            .sum()
    }
}

/// Row-wise argmax with ties broken by the lowest index.
pub fn argmax_rows<R: Real>(values: &[R], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::plan_dwck;

    fn build<R: Real>(
        norm: NormKind,
        width: f64,
        affine: bool,
        seed: u64,
    ) -> (ParamStore<R>, Model<R>) {
        let mut store = ParamStore::new();
        let opts = NormOptions { jitter: 0.0, affine, ..NormOptions::default() };
        let cfg = ClassifierConfig::cifar10(norm, width);
        let model = build_allcnn(&mut store, cfg, &opts, &mut Rng::new(seed)).unwrap();
        (store, model)
    }

    fn random_batch(n: usize, seed: u64) -> (Shape4, Vec<f32>) {
        let mut rng = Rng::new(seed);
        let shape = Shape4::new(n, 3, 32, 32);
        let values = (0..shape.count()).map(|_| rng.uniform() as f32).collect();
        (shape, values)
    }

    #[test]
    fn full_width_batch_norm_forward_has_probability_rows() {
        let (store, mut model) = build::<f32>(NormKind::Batch, 1.0, true, 1);
        let (shape, values) = random_batch(4, 2);
        let mut tape = Tape::new();
        let x = tape.constant(shape, values);
        let probs = model.forward(&mut tape, &store, x, true).unwrap();
        assert_eq!(tape.shape(probs), Shape4::new(4, 10, 1, 1));
        for n in 0..4 {
            let row = &tape.values(probs)[n * 10..(n + 1) * 10];
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "row {n} sums to {sum}");
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn plain_model_has_no_normalization_parameters() {
        let (store, model) = build::<f32>(NormKind::None, 1.0, true, 1);
        assert_eq!(model.norm_param_count(&store), 0);
        assert!(model.blocks.iter().all(|b| b.norm.is_none()));
        assert_eq!(model.blocks.len(), 9);
    }

    #[test]
    fn batch_norm_parameter_count_closed_form() {
        let (store, model) = build::<f32>(NormKind::Batch, 1.0, true, 1);
        // 2 per channel per normalized layer: 2 * (96 * 3 + 192 * 5)
        assert_eq!(model.norm_param_count(&store), 2 * (96 * 3 + 192 * 5));
    }

    #[test]
    fn dwck_stack_weight_count_matches_plan_enumeration() {
        let (store, model) = build::<f32>(NormKind::Dwck, 1.0, false, 1);
        // closed form: per-channel stack size from each normalized layer's
        // actual spatial dims, times its channel count
        let dims = [32usize, 32, 16, 16, 16, 8, 8, 8];
        let chans = [96usize, 96, 96, 192, 192, 192, 192, 192];
        let want: usize = dims
            .iter()
            .zip(&chans)
            .map(|(&d, &c)| c * plan_dwck(d, d).weights_per_channel())
            .sum();
        assert_eq!(model.dwck_stack_weight_count(&store), want);
        // and the affine-free norm parameter count is exactly the stacks
        assert_eq!(model.norm_param_count(&store), want);
    }

    #[test]
    fn learned_norm_parameter_count_is_width_independent() {
        let (store_a, model_a) = build::<f32>(NormKind::Learned, 1.0, false, 1);
        let (store_b, model_b) = build::<f32>(NormKind::Learned, 0.25, false, 1);
        // one 85-parameter pair for block 1, 97-parameter pairs for blocks 2-8
        let want = 2 * (85 + 7 * 97);
        assert_eq!(model_a.norm_param_count(&store_a), want);
        assert_eq!(model_b.norm_param_count(&store_b), want);
    }

    #[test]
    fn dwck_at_uniform_init_matches_batch_norm_forward() {
        // jitter-0 initialization draws nothing from the rng, so both models
        // share identical convolution weights for the same seed
        let (store_bn, mut bn) = build::<f32>(NormKind::Batch, 0.25, true, 7);
        let (store_dw, mut dw) = build::<f32>(NormKind::Dwck, 0.25, true, 7);
        let (shape, values) = random_batch(2, 3);
        let mut tape = Tape::new();
        let x = tape.constant(shape, values.clone());
        let pb = bn.forward(&mut tape, &store_bn, x, true).unwrap();
        let pd = dw.forward(&mut tape, &store_dw, x, true).unwrap();
        for (a, b) in tape.values(pb).iter().zip(tape.values(pd)) {
            assert!((a - b).abs() < 1e-4, "batch {a} vs dwck {b}");
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let (store, mut model) = build::<f32>(NormKind::Learned, 0.1, true, 5);
        let (shape, values) = random_batch(2, 9);
        let mut tape = Tape::new();
        let x = tape.constant(shape, values.clone());
        let a = model.forward(&mut tape, &store, x, false).unwrap();
        let a_bits: Vec<u32> = tape.values(a).iter().map(|v| v.to_bits()).collect();
        tape.reset();
        let x = tape.constant(shape, values);
        let b = model.forward(&mut tape, &store, x, false).unwrap();
        let b_bits: Vec<u32> = tape.values(b).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }

    #[test]
    fn predict_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_rows(&[0.05f32, 0.9, 0.05, 0.0], 1, 4), vec![1]);
        assert_eq!(argmax_rows(&[0.3f32, 0.3, 0.3, 0.1], 1, 4), vec![0]);
    }

    #[test]
    fn small_inputs_rejected() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let cfg = ClassifierConfig {
            norm: NormKind::None,
            width_scale: 1.0,
            input_dims: (3, 7, 7),
            n_classes: 10,
        };
        assert!(matches!(
            build_allcnn(&mut store, cfg, &NormOptions::default(), &mut Rng::new(0)),
            Err(Error::InputTooSmall { .. })
        ));
    }

    #[test]
    fn forward_rejects_wrong_input_dims() {
        let (store, mut model) = build::<f32>(NormKind::None, 0.1, true, 1);
        let mut tape = Tape::new();
        let x = tape.constant(Shape4::new(1, 3, 16, 16), vec![0.0; 768]);
        assert!(model.forward(&mut tape, &store, x, false).is_err());
    }

    #[test]
    fn width_scale_keeps_at_least_one_filter() {
        assert_eq!(scaled_filters(0.001), (1, 1));
        assert_eq!(scaled_filters(0.25), (24, 48));
        assert_eq!(scaled_filters(1.0), (96, 192));
    }

    #[test]
    fn strided_blocks_halve_spatial_dims() {
        let (_, model) = build::<f32>(NormKind::None, 0.1, true, 1);
        let dims: Vec<(usize, usize)> = model.blocks.iter().map(|b| b.out_dims).collect();
        assert_eq!(
            dims,
            vec![
                (32, 32),
                (32, 32),
                (16, 16),
                (16, 16),
                (16, 16),
                (8, 8),
                (8, 8),
                (8, 8),
                (8, 8)
            ]
        );
    }
}
