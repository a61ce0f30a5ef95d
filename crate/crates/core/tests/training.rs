use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxtrain::config::LabelKind;
use voxtrain::training::losses::{BinaryObjective, MaskedLoss};
use voxtrain::training::optim::{Optimizer, OptimizerKind};
use voxtrain_models::{build_model, Architecture, EncoderSpec, EndpointKind, EndpointSpec, OutputSpec};
use voxtrain_tensor::nn::{Ctx, Module};
use voxtrain_tensor::{no_grad, Tensor, Var};

#[test]
fn small_steps_reduce_the_loss() {
    let mut enc = EncoderSpec::new(Architecture::Cnn, "");
    enc.cnn_widths = vec![3, 4];
    let endpoints = [EndpointSpec::new("y", EndpointKind::Binary), EndpointSpec::new("os", EndpointKind::Event)];
    let output = OutputSpec { dropout: 0.0, ..Default::default() };
    let loss = MaskedLoss::new(BinaryObjective::Bce, vec![LabelKind::Binary, LabelKind::Event]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Var::constant(Tensor::randn(&[6, 1, 6, 6, 6], 1.0, &mut rng));
    let t = Var::constant(Tensor::randn(&[6, 2], 1.0, &mut rng));
    let labels = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0], &[6, 2]);
    let times = Tensor::from_vec(vec![0.0, 3.0, 0.0, 9.0, 0.0, 5.0, 0.0, 7.0, 0.0, 1.0, 0.0, 4.0], &[6, 2]);
    let masks = Tensor::from_vec(vec![1.0; 12], &[6, 2]);

    for (seed, kind) in [(0, OptimizerKind::Sgd { momentum: 0.0, weight_decay: 0.0 }), (1, OptimizerKind::Sgd { momentum: 0.9, weight_decay: 0.0 })] {
        let model = build_model::<f32>(&enc, &output, &endpoints, 1, 2, seed).unwrap();
        let value = || {
            let _g = no_grad();
            let y = model.forward(Some(&x), Some(&t), &mut Ctx::eval()).unwrap();
            loss.forward(&y, &labels, &times, &masks).unwrap().item()
        };
        let mut opt = Optimizer::new(kind.clone(), model.parameters(), 1e-3);
        let before = value();
        let y = model.forward(Some(&x), Some(&t), &mut Ctx::eval()).unwrap();
        opt.zero_grad();
        loss.forward(&y, &labels, &times, &masks).unwrap().backward();
        opt.step(1e-3);
        let after = value();
        assert!(after < before, "{kind:?}: {before} -> {after}");
    }
}
