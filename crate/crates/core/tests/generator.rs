use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkanon::encoder::{EncoderConfig, EncoderModel};
use spkanon::generator::*;
use spkanon::losses::LossWeights;
use spkanon::signal::{istft, stft, Analyzer, StftConfig, Waveform, SAMPLE_RATE};
use spkanon::training::{batch_objective, TrainConfig, Trainer, TrainingBatch};
use spkanon_autograd::Tape;

fn noise(seed: u64, len: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-0.4..0.4)).collect(), SAMPLE_RATE).unwrap()
}

fn trained_once() -> PerturbationGenerator<f32> {
    let mut g = PerturbationGenerator::<f32>::new(GeneratorConfig::desk(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id = g.params().id_of("output.weight").unwrap();
    g.params_mut().get_mut(id).mapv_inplace(|_| rng.random_range(-0.05..0.05));
    g
}

#[test]
fn perturbation_is_frame_synchronous() {
    let g = trained_once();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [1, 7, 100] {
        let s = Array2::from_shape_fn((t, 256), |_| rng.random_range(0.0..3.0));
        let p = g.generate_perturbation(&s).unwrap();
        assert_eq!(p.values.dim(), (t, 256));
        assert_eq!(g.generate_perturbation(&s).unwrap(), p);
    }
    assert!(g.generate_perturbation(&Array2::zeros((5, 128))).is_err());
}

#[test]
fn zero_projection_is_the_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let g = PerturbationGenerator::<f32>::new(GeneratorConfig::desk(), 4).unwrap();
    assert!(g.output_is_zero());
    g.save(&path).unwrap();
    let g = PerturbationGenerator::<f32>::load(&path).unwrap();
    let cfg = StftConfig::default();
    let w = noise(5, 9000);
    let anon = anonymize(&w, &g, &cfg).unwrap();
    let round = istft(&stft(&w, &cfg).unwrap(), &cfg).unwrap();
    assert_eq!(anon.len(), w.len());
    assert!(anon.max_abs_diff(&round) <= 1e-6);
    assert!(anon.max_abs_diff(&w) <= 1e-6);
}

#[test]
fn perturb_examples() {
    let s = Array2::from_elem((1, 1), 1.0);
    let neg = Perturbation { values: Array2::from_elem((1, 1), -2.0) };
    let pos = Perturbation { values: Array2::from_elem((1, 1), 0.5) };
    assert_eq!(perturb(&s, &neg).unwrap()[[0, 0]], 0.0);
    assert_eq!(perturb(&s, &pos).unwrap()[[0, 0]], 1.5);
    assert!(perturb(&s, &Perturbation { values: Array2::zeros((2, 1)) }).is_err());
}

#[test]
fn anonymize_is_deterministic_and_length_preserving() {
    let g = trained_once();
    let cfg = StftConfig::default();
    let w = noise(6, 7777);
    let a = anonymize(&w, &g, &cfg).unwrap();
    assert_eq!(a.len(), w.len());
    assert_eq!(anonymize(&w, &g, &cfg).unwrap(), a);
    assert!(a.max_abs_diff(&w) > 1e-4);
}

#[test]
fn every_parameter_receives_gradient_after_one_step() {
    let encoder = EncoderModel::<f32>::new(EncoderConfig::default(), 0).unwrap().freeze();
    let analyzer = Analyzer::default();
    let cfg = TrainConfig { batch_size: 3, crop_seconds: 0.3, warmup_steps: 1, ..TrainConfig::desk() };
    let generator = PerturbationGenerator::<f32>::new(GeneratorConfig::desk(), 7).unwrap();
    let mut trainer = Trainer::new(generator, &encoder, &analyzer, cfg).unwrap();
    let crops: Vec<Waveform> = (0..3).map(|i| noise(10 + i, 4800)).collect();
    let batch = TrainingBatch {
        crops: crops.clone(),
        speakers: vec!["a".into(), "b".into(), "c".into()],
        padded: vec![false; 3],
    };
    let record = trainer.train_step(&batch).unwrap();
    assert!(!record.skipped);

    let g = &trainer.generator;
    let tape = Tape::<f32>::new();
    let p = g.params().bind(&tape, true);
    let (loss, _) = batch_objective(&tape, &crops, g, &p, &encoder, &analyzer, &LossWeights::default()).unwrap();
    let grads = p.gradients(&tape.backward(loss));
    for ((name, _), grad) in g.params().iter().zip(&grads) {
        assert!(grad.iter().all(|v| v.is_finite()), "{name}");
        assert!(grad.iter().any(|v| *v != 0.0), "{name} has an identically zero gradient");
    }
}
