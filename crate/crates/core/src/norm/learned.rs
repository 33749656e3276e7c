use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Real, Shape4, Tape, TensorId};

use super::dwck::NormOptions;

/// One 1-D convolution stage of a statistic network, applied along the
/// feature-map axis with same-padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv1dStage {
    pub weight: ParamId, // (c_out, c_in, 1, k)
    pub bias: ParamId,   // (1, c_out, 1, 1)
    pub kernel: usize,
}

/// Normalization whose mean and standard deviation are produced by two small
/// networks: a global average pool turns each image into a length-c sequence,
/// a 1-D convolution stack processes it, and an average over the stack's own
/// channels yields one statistic per feature map. The std output passes
/// through softplus so the scale stays strictly positive.
#[derive(Clone, Debug)]
pub struct LearnedStatsState<R: Real> {
    pub mean_net: Vec<Conv1dStage>,
    pub std_net: Vec<Conv1dStage>,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: R,
    pub channels: usize,
}

/// Stage layout per classifier depth: the first layer gets a three-stage
/// stack, deeper layers a four-stage one.
fn stage_dims(layer_index: usize) -> Vec<(usize, usize, usize)> {
    assert!(layer_index >= 1, "layer_index starts at 1");
    if layer_index == 1 {
        // (c_in, c_out, kernel)
        vec![(1, 4, 4), (4, 4, 3), (4, 1, 3)]
    } else {
        vec![(1, 4, 4), (4, 4, 3), (4, 2, 2), (2, 1, 3)]
    }
}

/// Build the mean and std networks for one normalized layer.
pub fn build_stat_nets<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    layer_index: usize,
    n_channels: usize,
    opts: &NormOptions,
    rng: &mut Rng,
) -> LearnedStatsState<R> {
    let dims = stage_dims(layer_index);
    let mut build_net = |net: &str| -> Vec<Conv1dStage> {
        dims.iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, k))| {
                let bound = (6.0 / (c_in as f64 * k as f64 + c_out as f64 * k as f64)).sqrt();
                let weight = store.register(
                    format!("{prefix}.{net}.stage{i}.weight"),
                    Shape4::new(c_out, c_in, 1, k),
                    (0..c_out * c_in * k).map(|_| R::from_f64(rng.range(-bound, bound))).collect(),
                );
                let bias = store.register(
                    format!("{prefix}.{net}.stage{i}.bias"),
                    Shape4::new(1, c_out, 1, 1),
                    vec![R::zero(); c_out],
                );
                Conv1dStage { weight, bias, kernel: k }
            })
            .collect()
    };
    let mean_net = build_net("mean_net");
    let std_net = build_net("std_net");
    let stat_shape = Shape4::new(1, n_channels, 1, 1);
    let (gamma, beta) = if opts.affine {
        (
            Some(store.register(format!("{prefix}.gamma"), stat_shape, vec![R::one(); n_channels])),
            Some(store.register(format!("{prefix}.beta"), stat_shape, vec![R::zero(); n_channels])),
        )
    } else {
        (None, None)
    };
    LearnedStatsState {
        mean_net,
        std_net,
        gamma,
        beta,
        eps: R::from_f64(opts.eps),
        channels: n_channels,
    }
}

impl<R: Real> LearnedStatsState<R> {
    /// Run one statistic network over the pooled sequence (n, 1, 1, c),
    /// returning one value per feature map as (n, c, 1, 1).
    fn net_forward(
        &self,
        net: &[Conv1dStage],
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        v: TensorId,
    ) -> Result<TensorId> {
        let vs = tape.shape(v);
        let mut cur = v;
        for stage in net {
            let pad = stage.kernel - 1;
            let left = pad / 2;
            cur = tape.pad2d(cur, [0, 0, left, pad - left])?;
            let w = tape.param(store, stage.weight);
            let b = tape.param(store, stage.bias);
            cur = tape.conv2d(cur, w, Some(b), (1, 1), (0, 0))?;
        }
        // average over the stack's own channel dimension
        let pooled = tape.mean_c(cur);
        tape.reshape(pooled, Shape4::new(vs.n, vs.w, 1, 1))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: TensorId,
        _training: bool,
    ) -> Result<TensorId> {
        let xs = tape.shape(x);
        if xs.c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "learned_stats",
                expected: self.channels,
                got: xs.c,
            });
        }
        let pooled = tape.global_avg_pool(x)?; // (n, c, 1, 1)
        let seq = tape.reshape(pooled, Shape4::new(xs.n, 1, 1, xs.c))?;
        let mu = self.net_forward(&self.mean_net, tape, store, seq)?;
        let std_raw = self.net_forward(&self.std_net, tape, store, seq)?;
        let soft = tape.softplus(std_raw);
        let sigma = tape.add_scalar(soft, self.eps);
        let centered = tape.sub(x, mu)?;
        let mut out = tape.div(centered, sigma)?;
        if let (Some(gamma), Some(beta)) = (self.gamma, self.beta) {
            let g = tape.param(store, gamma);
            let b = tape.param(store, beta);
            out = tape.mul(out, g)?;
            out = tape.add(out, b)?;
        }
        Ok(out)
    }

    /// Scalar parameter count of one statistic network (weights plus biases).
    pub fn net_param_count(&self, store: &ParamStore<R>, net: &[Conv1dStage]) -> usize {
        net.iter()
            .map(|s| store.value(s.weight).len() + store.value(s.bias).len())
            .sum()
    }

    pub fn mean_net_param_count(&self, store: &ParamStore<R>) -> usize {
        self.net_param_count(store, &self.mean_net)
    }
}
