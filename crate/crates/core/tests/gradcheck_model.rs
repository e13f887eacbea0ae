use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videograph::autodiff::Tape;
use videograph::gradcheck::{gradient_check, GradCheckOptions};
use videograph::losses::{model_loss, LossMode, LossWeights, Targets};
use videograph::model::{forward, ModelConfig, ModelParams, QueryEmbedding, QueryMode};
use videograph::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn full_model_gradients_all_modes() {
    for qm in [QueryMode::None, QueryMode::Word, QueryMode::Sentence] {
        for lm in [LossMode::SupBin, LossMode::SupScore, LossMode::Unsup] {
            let cfg = ModelConfig::tiny(qm);
            let mut p = ModelParams::init(&cfg, 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let x = rand_tensor(&[4, 3, cfg.d_obj], &mut rng);
            let q = match qm {
                QueryMode::None => QueryEmbedding::none(),
                _ => QueryEmbedding::new(qm, rand_tensor(&[2, cfg.query_dim], &mut rng)),
            };
            let labels = [0u8, 1, 0, 0];
            let scores = [0.2, 0.9, 0.1, 0.4];
            let w = LossWeights::for_mode(lm);
            let mut store = std::mem::take(&mut p.store);
            let rep = gradient_check("model", &mut store, &GradCheckOptions::default(), |tape: &mut Tape, s| {
                let mut pp = p.clone();
                pp.store = s.clone();
                let out = forward(tape, &pp, &cfg, &x, &q)?;
                let t = Targets {
                    labels: Some(&labels),
                    scores: Some(&scores),
                };
                Ok(model_loss(tape, &pp, &cfg, &w, &out, &x, t)?.total)
            })
            .unwrap();
            println!("{qm:?} {lm:?}: {rep:?}");
            assert!(rep.max_rel_error <= 1e-4, "{qm:?} {lm:?}: {rep:?}");
        }
    }
}
