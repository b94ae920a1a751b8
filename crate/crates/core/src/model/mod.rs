//! Point-cloud encoder with a linear classification head.
//!
//! A shared per-point MLP lifts every point to a feature vector, a column-wise
//! max pool aggregates the cloud, an affine layer produces the `D`-dimensional
//! embedding (optionally L2-normalized) and a final affine layer maps the
//! embedding to one logit per grid-cell class.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Scalar, Tape, Tensor2, Var};
use crate::seeding::{rng_for, stream};

pub use checkpoint::{read_checkpoint, write_checkpoint, CKPT_MAGIC};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-point layer widths including the 3 input coordinates.
    pub widths: Vec<usize>,
    pub embedding_size: usize,
    pub num_classes: usize,
    pub normalize_embedding: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            widths: vec![3, 64, 128, 256],
            embedding_size: 512,
            num_classes,
            normalize_embedding: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths[0] != 3 {
            return Err(Error::InvalidInput(format!(
                "per-point widths must start at 3 and have at least one layer, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidInput(
                "per-point widths must be positive".into(),
            ));
        }
        if self.embedding_size == 0 {
            return Err(Error::InvalidInput(
                "embedding size must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn feature_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// `(fan_in, fan_out)` of every layer in declaration order.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<_> = self.widths.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.push((self.feature_width(), self.embedding_size));
        shapes.push((self.embedding_size, self.num_classes));
        shapes
    }
}

/// Weight `fan_in × fan_out` and bias `1 × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor2<T>,
    pub bias: Tensor2<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor2::zeros(fan_in, fan_out),
            bias: Tensor2::zeros(1, fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub perpoint: Vec<Linear<T>>,
    pub embedding: Linear<T>,
    pub decoder: Linear<T>,
}

/// Glorot-uniform weights from a per-layer seeded stream, zero biases.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut layers: Vec<Linear> = cfg
        .layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| {
            let mut rng = rng_for(&[cfg.seed, stream::INIT, i as u64]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let mut layer = Linear::zeros(fan_in, fan_out);
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-limit..limit);
            }
            layer
        })
        .collect();
    let decoder = layers.pop().expect("decoder layer");
    let embedding = layers.pop().expect("embedding layer");
    Ok(ModelParams {
        config: cfg.clone(),
        perpoint: layers,
        embedding,
        decoder,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Zero-filled tensors with this model's shapes, e.g. a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.weight.rows(), l.weight.cols());
        Self {
            config: self.config.clone(),
            perpoint: self.perpoint.iter().map(z).collect(),
            embedding: z(&self.embedding),
            decoder: z(&self.decoder),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Linear<T>> {
        self.perpoint.iter().chain([&self.embedding, &self.decoder])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> {
        self.perpoint
            .iter_mut()
            .chain([&mut self.embedding, &mut self.decoder])
    }

    /// All tensors in checkpoint order: each layer's weight then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor2<T>> {
        self.layers().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor2<T>> {
        self.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Names matching [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.perpoint.len() {
            names.push(format!("perpoint.{i}.weight"));
            names.push(format!("perpoint.{i}.bias"));
        }
        for layer in ["embedding", "decoder"] {
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Tensor2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor2::all_finite)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().map(Tensor2::sum_squares).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            perpoint: self.perpoint.iter().map(c).collect(),
            embedding: c(&self.embedding),
            decoder: c(&self.decoder),
        }
    }

    /// Records the parameters as borrowed leaves on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        let mut bind = |l: &'a Linear<T>| (tape.param(&l.weight), tape.param(&l.bias));
        Bound {
            perpoint: self.perpoint.iter().map(&mut bind).collect(),
            embedding: bind(&self.embedding),
            decoder: bind(&self.decoder),
            normalize: self.config.normalize_embedding,
        }
    }

    /// Embedding of an `N × 3` cloud, without recording gradients.
    pub fn embed(&self, cloud: &Tensor2<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(cloud.clone());
        let e = bound.embed(&mut tape, x)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Decoder output for an embedding of length `D`.
    pub fn logits(&self, embedding: &[T]) -> Result<Vec<T>> {
        let e = Tensor2::row_vector(embedding.to_vec())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let e = tape.constant(e);
        let z = bound.logits(&mut tape, e)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Bound {
    perpoint: Vec<(Var, Var)>,
    embedding: (Var, Var),
    decoder: (Var, Var),
    normalize: bool,
}

impl Bound {
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, cloud: Var) -> Result<Var> {
        let cols = tape.value(cloud).cols();
        if cols != 3 {
            return Err(Error::ShapeMismatch {
                op: "embed",
                detail: format!("cloud must be N x 3, got {cols} columns"),
            });
        }
        let mut h = cloud;
        for &(w, b) in &self.perpoint {
            let z = tape.affine(h, w, b)?;
            h = tape.relu(z);
        }
        let pooled = tape.maxpool_rows(h);
        let e = tape.affine(pooled, self.embedding.0, self.embedding.1)?;
        if self.normalize {
            tape.l2_normalize(e)
        } else {
            Ok(e)
        }
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, embedding: Var) -> Result<Var> {
        tape.affine(embedding, self.decoder.0, self.decoder.1)
    }

    /// Copies parameter gradients out of `grads` into a parameter-shaped
    /// buffer; parameters that received none are zero.
    pub fn collect<T: Scalar>(
        &self,
        grads: &mut Gradients<T>,
        like: &ModelParams<T>,
    ) -> ModelParams<T> {
        let mut out = like.zeros_like();
        let vars = self
            .perpoint
            .iter()
            .chain([&self.embedding, &self.decoder])
            .flat_map(|&(w, b)| [w, b]);
        for (dst, v) in out.tensors_mut().zip(vars) {
            if let Some(g) = grads.take(v) {
                *dst = g;
            }
        }
        out
    }
}

/// Records `-log softmax(logits)[target]` with `mask` excluded from the
/// normalizer.
pub fn masked_ce_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    target: u32,
    mask: &[u32],
) -> Result<Var> {
    if mask.contains(&target) {
        return Err(Error::TargetMasked(target));
    }
    let lp = tape.masked_log_softmax(logits, mask)?;
    tape.nll(lp, target as usize)
}

/// Loss and its gradient with respect to the logits.
pub fn masked_ce_loss_grad(logits: &[f64], target: u32, mask: &[u32]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let z = tape.variable(Tensor2::row_vector(logits.to_vec())?);
    let loss = masked_ce_loss(&mut tape, z, target, mask)?;
    let value = tape.value(loss).get(0, 0);
    let mut grads = tape.backward(loss)?;
    let g = grads.take(z).expect("logits require grad");
    Ok((value, g.into_data()))
}

/// Output of one recorded training example.
#[derive(Debug, Clone)]
pub struct SampleGrad<T: Scalar = f32> {
    pub loss: f64,
    pub grads: ModelParams<T>,
}

/// Forward and backward pass of one labeled cloud.
pub fn sample_gradient<T: Scalar>(
    params: &ModelParams<T>,
    cloud: &Tensor2<T>,
    target: u32,
    mask: &[u32],
) -> Result<SampleGrad<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(cloud.clone());
    let e = bound.embed(&mut tape, x)?;
    let z = bound.logits(&mut tape, e)?;
    let loss = masked_ce_loss(&mut tape, z, target, mask)?;
    let value = tape.value(loss).get(0, 0).as_f64();
    let mut grads = tape.backward(loss)?;
    Ok(SampleGrad {
        loss: value,
        grads: bound.collect(&mut grads, params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(normalize: bool) -> ModelConfig {
        ModelConfig {
            widths: vec![3, 8, 8],
            embedding_size: 4,
            num_classes: 12,
            normalize_embedding: normalize,
            seed: 3,
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor2<f64> {
        let data = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor2::new(n, 3, data).unwrap()
    }

    fn loss_of(p: &ModelParams<f64>, x: &Tensor2<f64>, target: u32, mask: &[u32]) -> f64 {
        sample_gradient(p, x, target, mask).unwrap().loss
    }

    #[test]
    fn parameter_count_examples() {
        let cfg = ModelConfig {
            widths: vec![3, 8],
            ..tiny(false)
        };
        assert_eq!(init_params(&cfg).unwrap().parameter_count(), 128);
        let mut last = 0;
        for d in [1, 4, 16, 64] {
            let n = init_params(&ModelConfig {
                embedding_size: d,
                ..cfg.clone()
            })
            .unwrap()
            .parameter_count();
            assert!(n > last);
            last = n;
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = tiny(true);
        let a = init_params(&cfg).unwrap();
        assert_eq!(a, init_params(&cfg).unwrap());
        assert_ne!(
            a,
            init_params(&ModelConfig {
                seed: 4,
                ..cfg.clone()
            })
            .unwrap()
        );
        for layer in a.layers() {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
            let (fi, fo) = layer.weight.shape();
            let limit = (6.0 / (fi + fo) as f64).sqrt() as f32;
            assert!(layer.weight.data().iter().all(|w| w.abs() <= limit));
        }
        assert!(init_params(&ModelConfig {
            num_classes: 1,
            ..cfg.clone()
        })
        .is_err());
        assert!(init_params(&ModelConfig {
            widths: vec![2, 8],
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn embedding_invariances() {
        let p = init_params(&tiny(true)).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 16);
        let e = p.embed(&x).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let mut rows: Vec<Vec<f64>> = (0..16).map(|i| x.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(2, 9);
        assert_eq!(p.embed(&Tensor2::from_rows(&rows).unwrap()).unwrap(), e);
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        assert_eq!(p.embed(&Tensor2::from_rows(&doubled).unwrap()).unwrap(), e);
    }

    #[test]
    fn logits_are_affine() {
        let mut p = init_params(&tiny(false)).unwrap().cast::<f64>();
        for (i, b) in p.decoder.bias.data_mut().iter_mut().enumerate() {
            *b = i as f64 * 0.1;
        }
        let z = p.logits(&[0.0; 4]).unwrap();
        assert_eq!(z, p.decoder.bias.data());
        assert_eq!(z.len(), 12);
        let a = [0.3, -1.0, 2.0, 0.5];
        let b = [1.5, 0.25, -0.75, 1.0];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (za, zb, zab) = (
            p.logits(&a).unwrap(),
            p.logits(&b).unwrap(),
            p.logits(&ab).unwrap(),
        );
        for j in 0..12 {
            assert!((zab[j] - (za[j] + zb[j] - z[j])).abs() < 1e-12);
        }
        assert!(p.logits(&[0.0; 3]).is_err());
    }

    #[test]
    fn loss_examples() {
        let (l, g) = masked_ce_loss_grad(&[0.3, 2.0, -1.0], 1, &[0, 2]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = masked_ce_loss_grad(&[0.7; 9], 4, &[]).unwrap();
        assert!((l - 9f64.ln()).abs() < 1e-12);

        let z = [0.4, -1.3, 2.2, 0.9, -0.2];
        let (l, g) = masked_ce_loss_grad(&z, 4, &[2, 3]).unwrap();
        let kept = [0usize, 1, 4];
        let denom: f64 = kept.iter().map(|&j| z[j].exp()).sum();
        assert!((l - -(z[4].exp() / denom).ln()).abs() < 1e-12);
        assert_eq!((g[2], g[3]), (0.0, 0.0));
        assert!(matches!(
            masked_ce_loss_grad(&z, 2, &[2]),
            Err(Error::TargetMasked(2))
        ));
    }

    /// Central differences over every parameter of the tiny model.
    fn check_gradients(normalize: bool) {
        let mut p = init_params(&tiny(normalize)).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Nonzero biases so no ReLU sits on its kink by construction.
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let x = cloud(&mut rng, 16);
        let (target, mask) = (5, [4u32, 6, 9]);
        let analytic = sample_gradient(&p, &x, target, &mask).unwrap().grads;
        let eps = 1e-6;
        let mut worst = 0.0f64;
        let n_tensors = p.tensors().count();
        for t in 0..n_tensors {
            let len = p.tensors().nth(t).unwrap().len();
            for i in 0..len {
                let orig = p.tensors().nth(t).unwrap().data()[i];
                p.tensors_mut().nth(t).unwrap().data_mut()[i] = orig + eps;
                let up = loss_of(&p, &x, target, &mask);
                p.tensors_mut().nth(t).unwrap().data_mut()[i] = orig - eps;
                let down = loss_of(&p, &x, target, &mask);
                p.tensors_mut().nth(t).unwrap().data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.tensors().nth(t).unwrap().data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        check_gradients(false);
        check_gradients(true);
    }

    #[test]
    fn masked_class_is_neutral() {
        let p = init_params(&tiny(true)).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cloud(&mut rng, 16);
        let mask = [3u32, 7];
        let base = sample_gradient(&p, &x, 0, &mask).unwrap();
        let mut q = p.clone();
        for i in 0..4 {
            let w = q.decoder.weight.row_mut(i);
            w[7] += 5.0;
        }
        q.decoder.bias.data_mut()[7] -= 3.0;
        let moved = sample_gradient(&q, &x, 0, &mask).unwrap();
        assert_eq!(base.loss, moved.loss);
        assert_eq!(base.grads, moved.grads);
        for i in 0..4 {
            assert_eq!(base.grads.decoder.weight.get(i, 7), 0.0);
            assert_eq!(base.grads.decoder.weight.get(i, 3), 0.0);
        }
        assert!(base.loss >= 0.0);
    }
}
