use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinal_core::backbone::{build_backbone, BackboneConfig, Model};
use spinal_core::spinal::{
    build_spinal_head, mlp_param_count, spinal_forward, spinal_param_count, SpinalConfig,
    SpinalHead,
};
use spinal_core::tensor::{grad_check, Element, Tape, Tensor, TensorProgram, Var};
use spinal_core::{Error, Result};

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

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn hand_evaluated_forward() {
    // Two-class version of the one-logit example: the second output column is zero.
    let c = cfg(2, 2, 2, 1, 2);
    let params = vec![
        t(&[1, 1], &[1.0]),
        t(&[1], &[0.0]),
        t(&[2, 1], &[1.0, 1.0]),
        t(&[1], &[0.0]),
        t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]),
        t(&[2], &[0.0, 0.0]),
    ];
    let head = SpinalHead::from_parameters(c, params).unwrap();
    let logits = spinal_forward(&head, &t(&[1, 2], &[3.0, 5.0])).unwrap();
    assert_eq!(logits.data(), &[11.0, 0.0]);
}

#[test]
fn zero_head_gives_zero_logits_of_width_c() {
    let c = cfg(8, 2, 3, 4, 5);
    let params = SpinalHead::parameter_shapes(&c)
        .iter()
        .map(|s| Tensor::zeros(s).unwrap())
        .collect();
    let head = SpinalHead::from_parameters(c, params).unwrap();
    let logits = spinal_forward(&head, &Tensor::full(&[4, 8], 1.5).unwrap()).unwrap();
    assert_eq!(logits.shape(), &[4, 5]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_feature_width_is_a_dimension_error() {
    let head = build_spinal_head(cfg(8, 2, 2, 2, 2), 1).unwrap();
    assert!(matches!(
        spinal_forward(&head, &Tensor::zeros(&[1, 6]).unwrap()),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn parameter_count_by_enumeration() {
    let c = cfg(64, 2, 4, 8, 3);
    let head = build_spinal_head(c, 7).unwrap();
    let enumerated: usize = head.parameters().iter().map(|p| p.numel()).sum();
    assert_eq!(enumerated, 1347);
    assert_eq!(spinal_param_count(&c), 1347);
    let blob: Vec<u8> = head
        .parameters()
        .iter()
        .flat_map(|p| p.to_le_bytes())
        .collect();
    assert_eq!(blob.len() / 4, 1347);
}

#[test]
fn blob_length_matches_count_for_many_configs() {
    for (f, s, l, w, c) in [
        (4, 1, 1, 2, 2),
        (12, 3, 5, 2, 3),
        (64, 4, 2, 8, 10),
        (10, 2, 3, 7, 2),
    ] {
        let config = cfg(f, s, l, w, c);
        let head = build_spinal_head(config, 3).unwrap();
        let blob: usize = head
            .parameters()
            .iter()
            .map(|p| p.to_le_bytes().len())
            .sum();
        assert_eq!(blob / 4, spinal_param_count(&config), "{config:?}");
    }
}

#[test]
fn weight_reduction_grid() {
    for f in [64, 256, 1024, 2048] {
        for s in [2, 4] {
            for l in [2, 4, 8] {
                for w in [8, 16, 24, 32] {
                    for c in [2, 3, 10] {
                        let config = cfg(f, s, l, w, c);
                        assert!(
                            spinal_param_count(&config) < mlp_param_count(f, l * w, c),
                            "{config:?}"
                        );
                    }
                }
            }
        }
    }
}

/// Hidden width W where only row `row` feeds the logits.
fn head_reading_one_row(config: SpinalConfig, row: usize, rng: &mut ChaCha8Rng) -> SpinalHead {
    let mut params = Vec::new();
    for r in 0..config.layers {
        params.push(random(&[config.row_fan_in(r), config.width], 0.1, 1.0, rng));
        params.push(Tensor::zeros(&[config.width]).unwrap());
    }
    let hidden = config.layers * config.width;
    let mut out = vec![0.0; hidden * config.classes];
    for unit in row * config.width..(row + 1) * config.width {
        for class in 0..config.classes {
            out[unit * config.classes + class] = 1.0;
        }
    }
    params.push(Tensor::new(&[hidden, config.classes], out).unwrap());
    params.push(Tensor::zeros(&[config.classes]).unwrap());
    SpinalHead::from_parameters(config, params).unwrap()
}

#[test]
fn segment_locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (s, l) in [(2, 4), (3, 5), (2, 2)] {
        let config = cfg(6 * s, s, l, 3, 2);
        let f = config.segment_size();
        let features = random(&[1, config.input_dim], 0.5, 1.5, &mut rng);
        for row in 0..l {
            let head = head_reading_one_row(config, row, &mut rng);
            let base = spinal_forward(&head, &features).unwrap();
            for segment in 0..s {
                let mut zeroed = features.clone();
                zeroed.data_mut()[segment * f..(segment + 1) * f].fill(0.0);
                let changed = spinal_forward(&head, &zeroed).unwrap() != base;
                // row r depends on segment j iff some row at or before r reads j
                let expected = (0..=row).any(|r| config.segment_of_row(r) == segment);
                assert_eq!(changed, expected, "S={s} L={l} row {row} segment {segment}");
            }
        }
    }
}

#[test]
fn batch_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = build_spinal_head(cfg(16, 2, 4, 5, 3), 9).unwrap();
    let batch = random(&[6, 16], -1.0, 1.0, &mut rng);
    let together = spinal_forward(&head, &batch).unwrap();
    for i in 0..6 {
        let row = t(&[1, 16], &batch.data()[i * 16..(i + 1) * 16]);
        let alone = spinal_forward(&head, &row).unwrap();
        assert_eq!(alone.data(), &together.data()[i * 3..(i + 1) * 3]);
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::build(BackboneConfig::with_image_size(16), cfg(0, 2, 2, 4, 3), 2).unwrap();
    let images = random(&[3, 1, 16, 16], -1.0, 1.0, &mut rng);
    let logits = model.forward(&images).unwrap();
    let mut swapped = images.data().to_vec();
    let (a, b) = swapped.split_at_mut(256);
    a.swap_with_slice(&mut b[..256]);
    let swapped_logits = model
        .forward(&Tensor::new(&[3, 1, 16, 16], swapped).unwrap())
        .unwrap();
    assert_eq!(&swapped_logits.data()[..3], &logits.data()[3..6]);
    assert_eq!(&swapped_logits.data()[3..6], &logits.data()[..3]);
    assert_eq!(&swapped_logits.data()[6..], &logits.data()[6..]);
}

#[test]
fn zero_model_is_uniform() {
    let model = Model::build(BackboneConfig::with_image_size(16), cfg(0, 2, 2, 4, 3), 2).unwrap();
    let params = Model::parameter_shapes(&model.config())
        .iter()
        .map(|s| Tensor::zeros(s).unwrap())
        .collect();
    let zero = Model::from_parameters(model.config(), params).unwrap();
    let logits = zero
        .forward(&Tensor::full(&[2, 1, 16, 16], 0.3).unwrap())
        .unwrap();
    assert_eq!(logits.shape(), &[2, 3]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_rejects_wrong_extent() {
    let model = Model::build(BackboneConfig::with_image_size(16), cfg(0, 2, 2, 4, 3), 2).unwrap();
    let err = model
        .forward(&Tensor::zeros(&[1, 1, 8, 8]).unwrap())
        .unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
    let (_, features) = build_backbone(BackboneConfig::default(), 0).unwrap();
    assert_eq!(features, 2048);
}

/// Cross-entropy of the tiny model with the input slot routed either to the
/// images or to one parameter tensor.
struct TinyModelLoss<'a> {
    model: &'a Model,
    images: &'a Tensor,
    labels: Vec<usize>,
    /// `None` checks the image gradient; `Some(k)` parameter `k`.
    slot: Option<usize>,
}

impl TensorProgram for TinyModelLoss<'_> {
    fn run<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut params = self.model.register_as::<T>(tape, false);
        let images = match self.slot {
            None => x,
            Some(k) => {
                params[k] = x;
                tape.constant(self.images.cast())
            }
        };
        let logits = self.model.forward_on(tape, &params, images)?;
        tape.softmax_cross_entropy_mean(logits, &self.labels)
    }
}

#[test]
fn end_to_end_gradient_check() {
    let backbone = BackboneConfig {
        blocks: vec![2],
        ..BackboneConfig::with_image_size(8)
    };
    let model = Model::build(backbone, cfg(0, 2, 2, 2, 2), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let images = random(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let mut slots = vec![None];
    slots.extend((0..model.parameters().len()).map(Some));
    for slot in slots {
        let program = TinyModelLoss {
            model: &model,
            images: &images,
            labels: vec![0, 1],
            slot,
        };
        let x = match slot {
            None => images.clone(),
            Some(k) => model.parameters()[k].clone(),
        };
        let err = grad_check(&program, &x, 1e-3).unwrap();
        assert!(err <= 1e-3, "slot {slot:?}: relative error {err}");
    }
}

#[test]
fn logits_depend_on_nearly_every_pixel() {
    let size = 32;
    let model = Model::build(
        BackboneConfig::with_image_size(size),
        cfg(0, 2, 4, 32, 3),
        31,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let image = random(&[1, 1, size, size], -1.0, 1.0, &mut rng);
    let base = model.forward(&image).unwrap();
    let sensitive = (0..size * size)
        .filter(|&p| {
            [3.0f32, -3.0].iter().any(|&delta| {
                let mut probe = image.clone();
                probe.data_mut()[p] += delta;
                model.forward(&probe).unwrap() != base
            })
        })
        .count();
    let share = sensitive as f64 / (size * size) as f64;
    assert!(share >= 0.99, "only {share} of pixels affect the logits");
}
