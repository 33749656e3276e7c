use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Shape4, Tape, TensorId};

/// Per-channel batch normalization: center and scale by statistics computed
/// over batch, height, and width, then apply the learnable affine transform.
///
/// Training mode uses batch statistics and folds them into exponential moving
/// averages; evaluation mode normalizes with the stored averages.
#[derive(Clone, Debug)]
pub struct BatchNormState<R: Real> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub momentum: R,
    pub eps: R,
    pub channels: usize,
}

impl<R: Real> BatchNormState<R> {
    pub fn new(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        momentum: R,
        eps: R,
    ) -> Self {
        let stat_shape = Shape4::new(1, channels, 1, 1);
        let gamma = store.register(format!("{prefix}.gamma"), stat_shape, vec![R::one(); channels]);
        let beta = store.register(format!("{prefix}.beta"), stat_shape, vec![R::zero(); channels]);
        BatchNormState {
            gamma,
            beta,
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            momentum,
            eps,
            channels,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let xs = tape.shape(x);
        if xs.c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "batch_norm",
                expected: self.channels,
                got: xs.c,
            });
        }
        let (centered, var) = if training {
            let mu = tape.mean_nhw(x);
            let centered = tape.sub(x, mu)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_nhw(sq);
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
        let xhat = tape.div(centered, denom)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let scaled = tape.mul(xhat, gamma)?;
        tape.add(scaled, beta)
    }

    fn update_running(&mut self, mu: &[R], var: &[R]) {
        let m = self.momentum;
        let keep = R::one() - m;
        for c in 0..self.channels {
            self.running_mean[c] = keep * self.running_mean[c] + m * mu[c];
            self.running_var[c] = keep * self.running_var[c] + m * var[c];
        }
    }
}
