//! Gradual-input fully-connected head.
//!
//! The flattened feature vector is cut into `segments` equal slices. Hidden
//! row `l` (0-based) reads slice `l mod segments`; every row after the first
//! also reads the previous row's activations. The output layer sees the
//! concatenation of all rows and produces one logit per class.
//!
//! ```text
//!  seg0 ──► row0 ──┐
//!  seg1 ──► row1 ──┤  (row1 also reads row0)
//!  seg0 ──► row2 ──┼──► concat ──► linear ──► logits
//!  seg1 ──► row3 ──┘  (and so on)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinalConfig {
    /// Flattened feature count `F`.
    pub input_dim: usize,
    /// Number of input slices `S`; must divide `input_dim`.
    pub segments: usize,
    /// Number of hidden rows `L`.
    pub layers: usize,
    /// Neurons per hidden row `W`.
    pub width: usize,
    pub classes: usize,
}

impl SpinalConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("segments", self.segments),
            ("layers", self.layers),
            ("width", self.width),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "at least 2 classes are required, got {}",
                self.classes
            )));
        }
        if !self.input_dim.is_multiple_of(self.segments) {
            return Err(Error::Config(format!(
                "{} segments do not divide the feature width {}",
                self.segments, self.input_dim
            )));
        }
        Ok(())
    }

    /// Width `f = F / S` of one input slice.
    pub fn segment_size(&self) -> usize {
        self.input_dim / self.segments
    }

    /// Index of the input slice read by hidden row `row` (0-based).
    pub fn segment_of_row(&self, row: usize) -> usize {
        row % self.segments
    }

    /// Fan-in of hidden row `row` (0-based).
    pub fn row_fan_in(&self, row: usize) -> usize {
        if row == 0 {
            self.segment_size()
        } else {
            self.segment_size() + self.width
        }
    }
}

/// Parameter count of a spinal head: `fW + W + (L−1)((f+W)W + W) + LWC + C`.
pub fn spinal_param_count(config: &SpinalConfig) -> usize {
    let f = config.segment_size();
    let (l, w, c) = (config.layers, config.width, config.classes);
    f * w + w + (l - 1) * ((f + w) * w + w) + l * w * c + c
}

/// Parameter count of a plain network with one hidden layer of `hidden` units.
pub fn mlp_param_count(input_dim: usize, hidden: usize, classes: usize) -> usize {
    input_dim * hidden + hidden + hidden * classes + classes
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinalHead {
    config: SpinalConfig,
    row_weights: Vec<Tensor>,
    row_biases: Vec<Tensor>,
    output_weight: Tensor,
    output_bias: Tensor,
}

/// Uniform fan-in initialisation on `[−gain/√fan_in, gain/√fan_in]`.
pub(crate) fn fan_in_uniform(
    shape: &[usize],
    fan_in: usize,
    gain: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let bound = gain / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

/// Builds a freshly initialised head; identical seeds give identical heads.
pub fn build_spinal_head(config: SpinalConfig, seed: u64) -> Result<SpinalHead> {
    SpinalHead::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl SpinalHead {
    pub(crate) fn new(config: SpinalConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut row_weights = Vec::with_capacity(config.layers);
        let mut row_biases = Vec::with_capacity(config.layers);
        for row in 0..config.layers {
            let fan_in = config.row_fan_in(row);
            row_weights.push(fan_in_uniform(&[fan_in, w], fan_in, 1.0, rng)?);
            row_biases.push(Tensor::zeros(&[w])?);
        }
        let hidden = config.layers * w;
        Ok(SpinalHead {
            config,
            row_weights,
            row_biases,
            output_weight: fan_in_uniform(&[hidden, config.classes], hidden, 1.0, rng)?,
            output_bias: Tensor::zeros(&[config.classes])?,
        })
    }

    /// Assembles a head from explicit tensors in serialization order
    /// (row weights and biases interleaved, then output weight and bias).
    pub fn from_parameters(config: SpinalConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Self::parameter_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "spinal head needs {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (p, shape)) in params.iter().zip(&expected).enumerate() {
            if p.shape() != &shape[..] {
                return Err(Error::Dimension(format!(
                    "head parameter {i} must be {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let mut it = params.into_iter();
        let mut row_weights = Vec::new();
        let mut row_biases = Vec::new();
        for _ in 0..config.layers {
            row_weights.push(it.next().expect("length checked"));
            row_biases.push(it.next().expect("length checked"));
        }
        Ok(SpinalHead {
            config,
            row_weights,
            row_biases,
            output_weight: it.next().expect("length checked"),
            output_bias: it.next().expect("length checked"),
        })
    }

    /// Shapes of all parameters in serialization order.
    pub fn parameter_shapes(config: &SpinalConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * config.layers + 2);
        for row in 0..config.layers {
            shapes.push(vec![config.row_fan_in(row), config.width]);
            shapes.push(vec![config.width]);
        }
        shapes.push(vec![config.layers * config.width, config.classes]);
        shapes.push(vec![config.classes]);
        shapes
    }

    pub fn config(&self) -> &SpinalConfig {
        &self.config
    }

    pub fn row_weights(&self) -> &[Tensor] {
        &self.row_weights
    }

    pub fn output_weight(&self) -> &Tensor {
        &self.output_weight
    }

    /// Parameters in serialization order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.config.layers + 2);
        for (w, b) in self.row_weights.iter().zip(&self.row_biases) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.output_weight);
        out.push(&self.output_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.config.layers + 2);
        for (w, b) in self.row_weights.iter_mut().zip(self.row_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.output_weight);
        out.push(&mut self.output_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Records the head on `tape`. `params` are the tape handles of
    /// [`Self::parameters`], in the same order.
    pub fn forward_on<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        features: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        match tape.value(features).shape() {
            [_, f] if *f == cfg.input_dim => {}
            s => {
                return Err(Error::Dimension(format!(
                    "spinal head expects [batch, {}] features, got {s:?}",
                    cfg.input_dim
                )))
            }
        }
        assert_eq!(
            params.len(),
            2 * cfg.layers + 2,
            "one handle per head parameter"
        );
        let f = cfg.segment_size();
        let mut rows = Vec::with_capacity(cfg.layers);
        let mut previous: Option<Var> = None;
        for row in 0..cfg.layers {
            let s = cfg.segment_of_row(row);
            let segment = tape.slice_cols(features, s * f, (s + 1) * f)?;
            let input = match previous {
                Some(prev) => tape.concat(&[segment, prev])?,
                None => segment,
            };
            let z = tape.matmul(input, params[2 * row])?;
            let z = tape.add_bias(z, params[2 * row + 1])?;
            let out = tape.relu(z)?;
            rows.push(out);
            previous = Some(out);
        }
        let all = tape.concat(&rows)?;
        let logits = tape.matmul(all, params[2 * cfg.layers])?;
        tape.add_bias(logits, params[2 * cfg.layers + 1])
    }
}

/// Logits for a `[batch, F]` feature matrix, without gradient tracking.
pub fn spinal_forward(head: &SpinalHead, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params: Vec<Var> = head
        .parameters()
        .into_iter()
        .map(|p| tape.constant(p.clone()))
        .collect();
    let x = tape.constant(features.clone());
    let logits = head.forward_on(&mut tape, &params, x)?;
    Ok(tape.into_value(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(
        input_dim: usize,
        segments: usize,
        layers: usize,
        width: usize,
        classes: usize,
    ) -> SpinalConfig {
        SpinalConfig {
            input_dim,
            segments,
            layers,
            width,
            classes,
        }
    }

    fn blob(head: &SpinalHead) -> Vec<u8> {
        head.parameters()
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .collect()
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let c = cfg(64, 2, 4, 8, 3);
        assert_eq!(
            blob(&build_spinal_head(c, 7).unwrap()),
            blob(&build_spinal_head(c, 7).unwrap())
        );
        assert_ne!(
            blob(&build_spinal_head(c, 7).unwrap()),
            blob(&build_spinal_head(c, 8).unwrap())
        );
    }

    #[test]
    fn indivisible_segments_are_rejected() {
        assert!(matches!(
            build_spinal_head(cfg(63, 2, 4, 8, 3), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_spinal_head(cfg(64, 2, 4, 8, 1), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_spinal_head(cfg(64, 2, 0, 8, 3), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn smallest_head_shapes() {
        let head = build_spinal_head(cfg(4, 1, 1, 2, 2), 0).unwrap();
        let shapes: Vec<Vec<usize>> = head
            .parameters()
            .iter()
            .map(|p| p.shape().to_vec())
            .collect();
        assert_eq!(shapes, vec![vec![4, 2], vec![2], vec![2, 2], vec![2]]);
    }

    #[test]
    fn initialisation_respects_fan_in_bound_and_zero_bias() {
        let c = cfg(64, 2, 3, 8, 3);
        let head = build_spinal_head(c, 3).unwrap();
        for (row, w) in head.row_weights().iter().enumerate() {
            let bound = 1.0 / (c.row_fan_in(row) as f32).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= bound));
        }
        assert!(head
            .row_biases
            .iter()
            .all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(spinal_param_count(&cfg(64, 2, 4, 8, 3)), 1347);
        assert_eq!(spinal_param_count(&cfg(4, 1, 1, 2, 2)), 16);
        assert_eq!(mlp_param_count(64, 32, 3), 2179);
        assert_eq!(mlp_param_count(4, 2, 2), 16);
        assert_eq!(mlp_param_count(2048, 128, 10), 263_562);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let c = cfg(6, 3, 2, 4, 3);
        let params = SpinalHead::parameter_shapes(&c)
            .iter()
            .map(|s| Tensor::zeros(s).unwrap())
            .collect();
        let head = SpinalHead::from_parameters(c, params).unwrap();
        let x = Tensor::new(&[2, 6], (0..12).map(|v| v as f32).collect::<Vec<_>>()).unwrap();
        let logits = spinal_forward(&head, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let head = build_spinal_head(cfg(8, 2, 2, 3, 2), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 6]).unwrap();
        assert!(matches!(
            spinal_forward(&head, &x),
            Err(Error::Dimension(_))
        ));
    }
}
