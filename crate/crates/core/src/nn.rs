//! Layer building blocks shared by the encoder and the generator.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use spkanon_autograd::{cast, BoundParams, Float, ParamId, ParamSet, Var, GATHER_ZERO};

fn uniform<F: Float, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| cast(dist.sample(rng)))
}

/// Affine map `x · W + b` on row vectors.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<F: Float, R: Rng>(
        params: &mut ParamSet<F>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(rng, input, output, bound));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Array2::zeros((1, output))));
        Self { weight, bias }
    }

    /// All-zero weights and bias.
    pub fn zeros<F: Float>(params: &mut ParamSet<F>, name: &str, input: usize, output: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), Array2::zeros((input, output)));
        let bias = Some(params.add(format!("{name}.bias"), Array2::zeros((1, output))));
        Self { weight, bias }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let y = x.matmul(p.get(self.weight));
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => y,
        }
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(params: &mut ParamSet<F>, name: &str, width: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Array2::ones((1, width))),
            bias: params.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    pub fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.layer_norm_rows(cast(1e-5))
            .mul(p.get(self.gain))
            .add(p.get(self.bias))
    }
}

/// 1-D convolution over time (rows) with "same" zero padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv1d {
    linear: Linear,
    kernel: usize,
    dilation: usize,
    input: usize,
}

impl Conv1d {
    pub fn new<F: Float, R: Rng>(
        params: &mut ParamSet<F>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            linear: Linear::new(params, name, kernel * input, output, true, rng),
            kernel,
            dilation,
            input,
        }
    }

    fn unfold_index(&self, frames: usize) -> Rc<Vec<usize>> {
        let half = (self.kernel / 2) as isize;
        let width = self.kernel * self.input;
        let mut idx = Vec::with_capacity(frames * width);
        for t in 0..frames {
            for k in 0..self.kernel {
                let src = t as isize + (k as isize - half) * self.dilation as isize;
                for c in 0..self.input {
                    idx.push(if (0..frames as isize).contains(&src) {
                        src as usize * self.input + c
                    } else {
                        GATHER_ZERO
                    });
                }
            }
        }
        Rc::new(idx)
    }

    pub fn forward<'t, F: Float>(&self, p: &BoundParams<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let (frames, width) = x.shape();
        assert_eq!(width, self.input, "conv input width");
        let cols = x.gather(frames, self.kernel * self.input, self.unfold_index(frames));
        self.linear.forward(p, cols)
    }
}

/// Row-wise L2 normalization.
pub(crate) fn l2_normalize_rows<'t, F: Float>(x: Var<'t, F>) -> Var<'t, F> {
    let norm = x.square().sum_cols().add_scalar(cast(1e-12)).sqrt();
    x.div(norm)
}

/// Row-wise cosine similarity between equally shaped matrices, `m × 1`.
pub(crate) fn cosine_rows<'t, F: Float>(a: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
    let dot = a.mul(b).sum_cols();
    let na = a.square().sum_cols().sqrt();
    let nb = b.square().sum_cols().sqrt();
    dot.div(na.mul(nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use spkanon_autograd::Tape;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::<f64>::new();
        let conv = Conv1d::new(&mut params, "c", 2, 3, 3, 2, &mut rng);
        let x = Array2::from_shape_fn((6, 2), |(t, c)| (t * 2 + c) as f64 * 0.1 - 0.3);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let y = conv.forward(&bound, tape.constant(x.clone())).value();
        let w = params.get(conv.linear.weight);
        for t in 0..6 {
            for o in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let src = t as isize + (k as isize - 1) * 2;
                    if !(0..6).contains(&src) {
                        continue;
                    }
                    for c in 0..2 {
                        acc += x[[src as usize, c]] * w[[k * 2 + c, o]];
                    }
                }
                assert!((y[[t, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_rows_of_parallel_rows_is_one() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(ndarray::arr2(&[[1.0, 2.0], [0.0, 3.0]]));
        let b = tape.constant(ndarray::arr2(&[[2.0, 4.0], [1.0, 0.0]]));
        let c = cosine_rows(a, b).value();
        assert!((c[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(c[[1, 0]].abs() < 1e-12);
        let n = l2_normalize_rows(a).value();
        assert!((n[[1, 1]] - 1.0).abs() < 1e-9);
    }
}
