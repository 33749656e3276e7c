use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Real, Shape4, Tape, TensorId};

use super::plan::{plan_dwck, DwckPlan};

/// Configuration shared by the DWCK and learned-statistics layers.
#[derive(Clone, Copy, Debug)]
pub struct NormOptions {
    /// Relative half-width of the uniform interval around the n-th-root
    /// initial value.
    pub jitter: f64,
    /// Apply the per-channel affine transform after normalization.
    pub affine: bool,
    /// Compute the variance with the weighted kernel stack instead of the
    /// plain mean of squared deviations.
    pub weighted_var: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions { jitter: 0.1, affine: true, weighted_var: false, momentum: 0.1, eps: 1e-5 }
    }
}

/// Draw one channel-stack of stage kernels. Every weight is sampled uniformly
/// from [(1 - jitter) * b, (1 + jitter) * b] with b = (1 / (n_h * n_w))^(1/n),
/// n the stage count, so the per-pixel product starts at 1 / (n_h * n_w).
/// `full_dims` are the unpadded image dims: zero padding contributes nothing
/// to the weighted sum, so the product must match the true pixel count.
///
/// Returns one flat (channels, 1, k_h, k_w) buffer per stage.
pub fn init_dwck<R: Real>(
    plan: &DwckPlan,
    full_dims: (usize, usize),
    channels: usize,
    jitter: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<R>>> {
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::JitterOutOfRange { jitter });
    }
    if plan.stages.is_empty() {
        return Ok(Vec::new());
    }
    let n = plan.stages.len() as f64;
    let base = (1.0 / (full_dims.0 * full_dims.1) as f64).powf(1.0 / n);
    let lo = base * (1.0 - jitter);
    let hi = base * (1.0 + jitter);
    Ok(plan
        .stages
        .iter()
        .map(|s| {
            (0..channels * s.k_h * s.k_w)
                .map(|_| R::from_f64(if jitter == 0.0 { base } else { rng.range(lo, hi) }))
                .collect()
        })
        .collect())
}

/// Weighted-mean normalization backed by a stack of depthwise kernels. The
/// stack collapses each (zero padded) feature map to one scalar per image and
/// channel; the effective weight of a pixel is the product of the stage
/// weights covering it.
#[derive(Clone, Debug)]
pub struct DwckNormState<R: Real> {
    pub plan: DwckPlan,
    pub stage_weights: Vec<ParamId>,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub momentum: R,
    pub eps: R,
    pub channels: usize,
    pub use_weighted_var: bool,
    pub full_dims: (usize, usize),
}

impl<R: Real> DwckNormState<R> {
    pub fn new(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        dims: (usize, usize),
        opts: &NormOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        let plan = plan_dwck(dims.0, dims.1);
        let kernels = init_dwck::<R>(&plan, dims, channels, opts.jitter, rng)?;
        let stage_weights = plan
            .stages
            .iter()
            .zip(kernels)
            .enumerate()
            .map(|(i, (s, values))| {
                store.register(
                    format!("{prefix}.stage{i}.weight"),
                    Shape4::new(channels, 1, s.k_h, s.k_w),
                    values,
                )
            })
            .collect();
        let stat_shape = Shape4::new(1, channels, 1, 1);
        let (gamma, beta) = if opts.affine {
            (
                Some(store.register(format!("{prefix}.gamma"), stat_shape, vec![R::one(); channels])),
                Some(store.register(format!("{prefix}.beta"), stat_shape, vec![R::zero(); channels])),
            )
        } else {
            (None, None)
        };
        Ok(DwckNormState {
            plan,
            stage_weights,
            gamma,
            beta,
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            momentum: R::from_f64(opts.momentum),
            eps: R::from_f64(opts.eps),
            channels,
            use_weighted_var: opts.weighted_var,
            full_dims: dims,
        })
    }

    fn validate(&self, op: &'static str, xs: Shape4) -> Result<()> {
        if xs.c != self.channels {
            return Err(Error::ChannelMismatch { op, expected: self.channels, got: xs.c });
        }
        if xs.h > self.plan.pad_to.0 || xs.w > self.plan.pad_to.1 {
            return Err(Error::InputExceedsPlan {
                h: xs.h,
                w: xs.w,
                pad_h: self.plan.pad_to.0,
                pad_w: self.plan.pad_to.1,
            });
        }
        Ok(())
    }

    /// Symmetric zero padding up to the planned extent; odd remainders go to
    /// the bottom/right.
    fn pad_spec(&self, h: usize, w: usize) -> [usize; 4] {
        let dh = self.plan.pad_to.0 - h;
        let dw = self.plan.pad_to.1 - w;
        [dh / 2, dh - dh / 2, dw / 2, dw - dw / 2]
    }

    /// Apply the full stage stack, collapsing (n, c, h, w) to (n, c, 1, 1).
    fn collapse(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: TensorId) -> Result<TensorId> {
        let xs = tape.shape(x);
        let mut cur = tape.pad2d(x, self.pad_spec(xs.h, xs.w))?;
        for (stage, pid) in self.plan.stages.iter().zip(&self.stage_weights) {
            let k = tape.param(store, *pid);
            cur = tape.depthwise_conv2d(cur, k, (stage.s_h, stage.s_w))?;
        }
        Ok(cur)
    }

    /// The weighted per-channel mean: stage stack per image, then the batch
    /// average, yielding shape (1, c, 1, 1).
    pub fn mean(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: TensorId) -> Result<TensorId> {
        self.validate("dwck_mean", tape.shape(x))?;
        let per_image = self.collapse(tape, store, x)?;
        Ok(tape.mean_nhw(per_image))
    }

    /// The weighted variance: the same stack applied to squared deviations.
    /// Off by default; enable with [`NormOptions::weighted_var`].
    pub fn weighted_var(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: TensorId,
        mu: TensorId,
    ) -> Result<TensorId> {
        self.validate("weighted_var", tape.shape(x))?;
        let centered = tape.sub(x, mu)?;
        let sq = tape.mul(centered, centered)?;
        let per_image = self.collapse(tape, store, sq)?;
        Ok(tape.mean_nhw(per_image))
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        self.validate("dwck_norm", tape.shape(x))?;
        let (centered, var) = if training {
            let mu = self.mean(tape, store, x)?;
            let centered = tape.sub(x, mu)?;
            let var = if self.use_weighted_var {
                let sq = tape.mul(centered, centered)?;
                let per_image = self.collapse(tape, store, sq)?;
                tape.mean_nhw(per_image)
            } else {
                // plain variance around the weighted mean
                let sq = tape.mul(centered, centered)?;
                tape.mean_nhw(sq)
            };
            self.update_running(tape.values(mu), tape.values(var));
            (centered, var)
        } else {
            let stat_shape = Shape4::new(1, self.channels, 1, 1);
            let mu = tape.constant(stat_shape, self.running_mean.clone());
            let var = tape.constant(stat_shape, self.running_var.clone());
            (tape.sub(x, mu)?, var)
        };
        let shifted = tape.add_scalar(var, self.eps);
        let denom = tape.sqrt(shifted);
        let mut out = tape.div(centered, denom)?;
        if let (Some(gamma), Some(beta)) = (self.gamma, self.beta) {
            let g = tape.param(store, gamma);
            let b = tape.param(store, beta);
            out = tape.mul(out, g)?;
            out = tape.add(out, b)?;
        }
        Ok(out)
    }

    fn update_running(&mut self, mu: &[R], var: &[R]) {
        let m = self.momentum;
        let keep = R::one() - m;
        for c in 0..self.channels {
            self.running_mean[c] = keep * self.running_mean[c] + m * mu[c];
            self.running_var[c] = keep * self.running_var[c] + m * var[c];
        }
    }

    /// Clamp every stage weight to be nonnegative. Called after each
    /// optimizer step when the projection is enabled.
    pub fn project_nonneg(&self, store: &mut ParamStore<R>) {
        for &pid in &self.stage_weights {
            for w in store.value_mut(pid) {
                if *w < R::zero() {
                    *w = R::zero();
                }
            }
        }
    }

    /// Unroll the stage stack into the single padded-extent kernel it
    /// emulates: entry (y, x) is the product of the stage weights that cover
    /// that pixel.
    pub fn effective_kernel(&self, store: &ParamStore<R>, channel: usize) -> Vec<R> {
        let (ph, pw) = self.plan.pad_to;
        let mut eff = vec![R::one(); ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let mut weight = R::one();
                let (mut ty, mut tx) = (y, x);
                for (stage, pid) in self.plan.stages.iter().zip(&self.stage_weights) {
                    let k = store.value(*pid);
                    let base = channel * stage.k_h * stage.k_w;
                    weight *= k[base + (ty % stage.k_h) * stage.k_w + tx % stage.k_w];
                    ty /= stage.k_h;
                    tx /= stage.k_w;
                }
                eff[y * pw + x] = weight;
            }
        }
        eff
    }

    /// Max over channels of |sum of effective weights over the original
    /// (unpadded) pixel region - 1|. The constraint is enforced only at
    /// initialization; this reports how far training has drifted from it.
    pub fn weight_sum_drift(&self, store: &ParamStore<R>) -> R {
        let [top, _, left, _] = self.pad_spec(self.full_dims.0, self.full_dims.1);
        let (_, pw) = self.plan.pad_to;
        let mut worst = R::zero();
        for c in 0..self.channels {
            let eff = self.effective_kernel(store, c);
            let mut sum = R::zero();
            for y in 0..self.full_dims.0 {
                for x in 0..self.full_dims.1 {
                    sum += eff[(y + top) * pw + (x + left)];
                }
            }
            let drift = (sum - R::one()).abs();
            if drift > worst {
                worst = drift;
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::batch::BatchNormState;

    fn opts(jitter: f64) -> NormOptions {
        NormOptions { jitter, affine: false, ..NormOptions::default() }
    }

    fn state_for(
        dims: (usize, usize),
        channels: usize,
        jitter: f64,
        seed: u64,
    ) -> (ParamStore<f64>, DwckNormState<f64>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let state =
            DwckNormState::new(&mut store, "dwck", channels, dims, &opts(jitter), &mut rng).unwrap();
        (store, state)
    }

    // direct-summation oracle for the arithmetic batch mean per channel
    fn arithmetic_mean(xs: Shape4, xv: &[f64]) -> Vec<f64> {
        let mut mu = vec![0.0; xs.c];
        for n in 0..xs.n {
            for c in 0..xs.c {
                for i in 0..xs.h * xs.w {
                    mu[c] += xv[xs.idx(n, c, 0, 0) + i];
                }
            }
        }
        let count = (xs.n * xs.h * xs.w) as f64;
        mu.iter().map(|s| s / count).collect()
    }

    #[test]
    fn jitter_zero_init_is_nth_root() {
        // two stages on 4x4: every weight sqrt(1/16) = 0.25
        let (store, state) = state_for((4, 4), 3, 0.0, 1);
        assert_eq!(state.plan.stages.len(), 2);
        for &pid in &state.stage_weights {
            for &w in store.value(pid) {
                assert!((w - 0.25).abs() < 1e-15);
            }
        }

        // single stage on 5x5: every weight 1/25
        let (store, state) = state_for((5, 5), 2, 0.0, 1);
        assert_eq!(state.plan.stages.len(), 1);
        for &w in store.value(state.stage_weights[0]) {
            assert!((w - 1.0 / 25.0).abs() < 1e-15);
        }
    }

    #[test]
    fn jitter_zero_products_compose_to_pixel_weight() {
        // four stages on 32x32: product of one weight per stage = 1/1024
        let (store, state) = state_for((32, 32), 1, 0.0, 1);
        assert_eq!(state.plan.stages.len(), 4);
        let product: f64 = state
            .stage_weights
            .iter()
            .map(|&pid| store.value(pid)[0])
            .product();
        assert!((product - 1.0 / 1024.0).abs() < 1e-9);
    }

    #[test]
    fn jitter_out_of_range_rejected() {
        let plan = plan_dwck(4, 4);
        let mut rng = Rng::new(0);
        assert!(matches!(
            init_dwck::<f64>(&plan, (4, 4), 1, 0.5, &mut rng),
            Err(Error::JitterOutOfRange { .. })
        ));
        assert!(matches!(
            init_dwck::<f64>(&plan, (4, 4), 1, -0.1, &mut rng),
            Err(Error::JitterOutOfRange { .. })
        ));
    }

    #[test]
    fn uniform_init_mean_equals_arithmetic_mean() {
        let (store, state) = state_for((8, 8), 3, 0.0, 2);
        let mut rng = Rng::new(9);
        let xs = Shape4::new(4, 3, 8, 8);
        let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range(-2.0, 2.0)).collect();
        let want = arithmetic_mean(xs, &xv);
        let mut tape = Tape::new();
        let x = tape.constant(xs, xv);
        let mu = state.mean(&mut tape, &store, x).unwrap();
        for (got, want) in tape.values(mu).iter().zip(&want) {
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn uniform_init_mean_handles_padding() {
        // 5x7 pads to (5, 8); zero padding must not bias the mean
        let (store, state) = state_for((5, 7), 2, 0.0, 3);
        assert_eq!(state.plan.pad_to, (5, 8));
        let mut rng = Rng::new(10);
        let xs = Shape4::new(3, 2, 5, 7);
        let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range(-1.0, 1.0)).collect();
        let want = arithmetic_mean(xs, &xv);
        let mut tape = Tape::new();
        let x = tape.constant(xs, xv);
        let mu = state.mean(&mut tape, &store, x).unwrap();
        for (got, want) in tape.values(mu).iter().zip(&want) {
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn worked_4x4_example_matches_closed_form() {
        // two 2x2 stages with weights p and q on a 4x4 image reproduce
        // sum_ab q_ab * (sum_ij p_ij x_tile)
        let (mut store, state) = state_for((4, 4), 1, 0.0, 4);
        let mut rng = Rng::new(11);
        let p: Vec<f64> = (0..4).map(|_| rng.range(-1.0, 1.0)).collect();
        let q: Vec<f64> = (0..4).map(|_| rng.range(-1.0, 1.0)).collect();
        store.value_mut(state.stage_weights[0]).copy_from_slice(&p);
        store.value_mut(state.stage_weights[1]).copy_from_slice(&q);
        let xv: Vec<f64> = (0..16).map(|_| rng.range(-2.0, 2.0)).collect();

        let at = |r: usize, c: usize| xv[r * 4 + c];
        let tile = |r0: usize, c0: usize| {
            p[0] * at(r0, c0)
                + p[1] * at(r0, c0 + 1)
                + p[2] * at(r0 + 1, c0)
                + p[3] * at(r0 + 1, c0 + 1)
        };
        let want = q[0] * tile(0, 0) + q[1] * tile(0, 2) + q[2] * tile(2, 0) + q[3] * tile(2, 2);

        let mut tape = Tape::new();
        let x = tape.constant(Shape4::new(1, 1, 4, 4), xv.clone());
        let mu = state.mean(&mut tape, &store, x).unwrap();
        assert!((tape.values(mu)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn constant_input_mean_is_the_constant() {
        let (store, state) = state_for((8, 8), 2, 0.0, 5);
        let mut tape = Tape::new();
        let x = tape.constant(Shape4::new(2, 2, 8, 8), vec![1.75; 256]);
        let mu = state.mean(&mut tape, &store, x).unwrap();
        for &v in tape.values(mu) {
            assert!((v - 1.75).abs() < 1e-10);
        }
    }

    #[test]
    fn effective_kernel_reproduces_stack() {
        // random jitter, padded dims: applying the unrolled kernel directly
        // must match the staged collapse
        let (store, state) = state_for((6, 7), 2, 0.2, 6);
        let (ph, pw) = state.plan.pad_to;
        let [top, _, left, _] = state.pad_spec(6, 7);
        let mut rng = Rng::new(12);
        let xs = Shape4::new(2, 2, 6, 7);
        let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.constant(xs, xv.clone());
        let collapsed = state.collapse(&mut tape, &store, x).unwrap();

        for n in 0..xs.n {
            for c in 0..xs.c {
                let eff = state.effective_kernel(&store, c);
                let mut want = 0.0;
                for y in 0..xs.h {
                    for xcol in 0..xs.w {
                        want += eff[(y + top) * pw + (xcol + left)] * xv[xs.idx(n, c, y, xcol)];
                    }
                }
                let got = tape.values(collapsed)[n * xs.c + c];
                assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
                assert_eq!(eff.len(), ph * pw);
            }
        }
    }

    #[test]
    fn forward_matches_batch_norm_at_uniform_init() {
        let (mut store, mut dwck) = state_for((16, 16), 3, 0.0, 7);
        let mut bn = BatchNormState::new(&mut store, "bn", 3, 0.1, 1e-5);
        let mut rng = Rng::new(13);
        let xs = Shape4::new(4, 3, 16, 16);
        let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range(-3.0, 3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(xs, xv);
        let a = dwck.forward(&mut tape, &store, x, true).unwrap();
        let b = bn.forward(&mut tape, &store, x, true).unwrap();
        for (u, v) in tape.values(a).iter().zip(tape.values(b)) {
            assert!((u - v).abs() < 1e-5, "dwck {u} vs bn {v}");
        }
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let (store, mut state) = state_for((4, 4), 2, 0.0, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Shape4::new(2, 2, 4, 4), vec![5.0; 64]);
        let y = state.forward(&mut tape, &store, x, true).unwrap();
        for &v in tape.values(y) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_var_at_uniform_init_equals_plain_variance() {
        let (store, state) = state_for((8, 8), 2, 0.0, 9);
        let mut rng = Rng::new(14);
        let xs = Shape4::new(3, 2, 8, 8);
        let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range(-2.0, 2.0)).collect();
        let mu = arithmetic_mean(xs, &xv);
        let mut plain = vec![0.0; xs.c];
        for n in 0..xs.n {
            for c in 0..xs.c {
                for i in 0..xs.h * xs.w {
                    let d = xv[xs.idx(n, c, 0, 0) + i] - mu[c];
                    plain[c] += d * d;
                }
            }
        }
        let count = (xs.n * xs.h * xs.w) as f64;
        for v in &mut plain {
            *v /= count;
        }

        let mut tape = Tape::new();
        let x = tape.constant(xs, xv);
        let mu_id = state.mean(&mut tape, &store, x).unwrap();
        let var = state.weighted_var(&mut tape, &store, x, mu_id).unwrap();
        for (got, want) in tape.values(var).iter().zip(&plain) {
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn weighted_var_of_constant_is_zero_and_nonneg_weights_give_nonneg_var() {
        // exact zero needs the weight-sum constraint, which holds at jitter 0
        let (store, state) = state_for((4, 4), 1, 0.0, 10);
        let mut tape = Tape::new();
        let x = tape.constant(Shape4::new(2, 1, 4, 4), vec![3.0; 32]);
        let mu = state.mean(&mut tape, &store, x).unwrap();
        let var = state.weighted_var(&mut tape, &store, x, mu).unwrap();
        assert!(tape.values(var)[0].abs() < 1e-12);

        let (store, state) = state_for((4, 4), 1, 0.1, 10);
        let mut rng = Rng::new(15);
        let xv: Vec<f64> = (0..32).map(|_| rng.range(-5.0, 5.0)).collect();
        let x = tape.constant(Shape4::new(2, 1, 4, 4), xv);
        let mu = state.mean(&mut tape, &store, x).unwrap();
        let var = state.weighted_var(&mut tape, &store, x, mu).unwrap();
        assert!(tape.values(var)[0] >= 0.0, "nonnegative weights must give nonnegative variance");
    }

    #[test]
    fn projection_clamps_only_negative_weights() {
        let (mut store, state) = state_for((4, 4), 1, 0.0, 16);
        let w0 = state.stage_weights[0];
        store.value_mut(w0).copy_from_slice(&[-0.1, 0.3, -2.0, 0.25]);
        state.project_nonneg(&mut store);
        assert_eq!(store.value(w0), &[0.0, 0.3, 0.0, 0.25]);
        let min = store
            .value(w0)
            .iter()
            .chain(store.value(state.stage_weights[1]))
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
    }

    #[test]
    fn ten_projected_sgd_steps_keep_weights_nonneg() {
        let (mut store, mut state) = state_for((4, 4), 2, 0.1, 17);
        let mut rng = Rng::new(18);
        let xs = Shape4::new(4, 2, 4, 4);
        for _ in 0..10 {
            let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range(-1.0, 1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(xs, xv);
            let y = state.forward(&mut tape, &store, x, true).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            let bindings: Vec<_> = tape.bindings().to_vec();
            for (pid, tid) in bindings {
                let grad = tape.grad(tid).unwrap().to_vec();
                for (w, g) in store.value_mut(pid).iter_mut().zip(grad) {
                    *w -= 0.05 * g;
                }
            }
            state.project_nonneg(&mut store);
            let min = state
                .stage_weights
                .iter()
                .flat_map(|&pid| store.value(pid).iter().copied())
                .fold(f64::INFINITY, f64::min);
            assert!(min >= 0.0, "projection violated: min weight {min}");
        }
    }

    #[test]
    fn drift_is_zero_at_uniform_init() {
        let (store, state) = state_for((5, 7), 3, 0.0, 19);
        assert!(state.weight_sum_drift(&store) < 1e-9);
    }

    #[test]
    fn oversized_input_rejected() {
        let (store, state) = state_for((4, 4), 1, 0.0, 20);
        let mut tape = Tape::new();
        let x = tape.constant(Shape4::new(1, 1, 8, 8), vec![0.0; 64]);
        assert!(matches!(
            state.mean(&mut tape, &store, x),
            Err(Error::InputExceedsPlan { .. })
        ));
    }
}
