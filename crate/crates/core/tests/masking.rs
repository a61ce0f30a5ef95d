use proptest::prelude::*;
use voxtrain::config::LabelKind;
use voxtrain::training::losses::{BinaryObjective, MaskedLoss};
use voxtrain_tensor::{Tensor, Var};

#[derive(Clone, Debug)]
struct Case {
    kinds: Vec<LabelKind>,
    outputs: Vec<f64>,
    labels: Vec<f64>,
    times: Vec<f64>,
    masks: Vec<bool>,
    noise: Vec<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..4, 2usize..12).prop_flat_map(|(e, b)| {
        let n = e * b;
        (
            prop::collection::vec(prop::bool::ANY.prop_map(|ev| if ev { LabelKind::Event } else { LabelKind::Binary }), e),
            prop::collection::vec(-4.0f64..4.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(f64::from), n),
            prop::collection::vec(0.5f64..50.0, n),
            prop::collection::vec(prop::bool::weighted(0.6), n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
            .prop_map(|(kinds, outputs, labels, times, masks, noise)| Case { kinds, outputs, labels, times, masks, noise })
    })
}

fn objective(i: u8) -> BinaryObjective {
    match i {
        0 => BinaryObjective::Bce,
        1 => BinaryObjective::Focal { gamma: 2.0 },
        2 => BinaryObjective::Asl { gamma_pos: 0.0, gamma_neg: 4.0, clip: 0.05 },
        _ => BinaryObjective::Hill { lambda: 1.5, margin: 1.0, gamma: 2.0 },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masked_entries_get_zero_gradient_and_no_influence(c in case(), obj in 0u8..4) {
        let loss = MaskedLoss::new(objective(obj), c.kinds.clone());
        let Ok(base) = loss.evaluate(&c.outputs, &c.labels, &c.times, &c.masks) else {
            prop_assert!(c.masks.iter().all(|m| !m));
            return Ok(());
        };
        let (mut outputs, mut labels, mut times) = (c.outputs.clone(), c.labels.clone(), c.times.clone());
        for i in (0..c.masks.len()).filter(|&i| !c.masks[i]) {
            prop_assert_eq!(base.grad[i], 0.0);
            outputs[i] += c.noise[i];
            labels[i] = 1.0 - labels[i];
            times[i] = c.noise[i].abs() + 0.1;
        }
        prop_assert_eq!(&loss.evaluate(&c.outputs, &labels, &c.times, &c.masks).unwrap(), &base);
        prop_assert_eq!(&loss.evaluate(&outputs, &labels, &times, &c.masks).unwrap(), &base);

        let e = c.kinds.len();
        let shape = [c.outputs.len() / e, e];
        let f32s = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| x as f32).collect(), &shape);
        let mask_t = Tensor::from_vec(c.masks.iter().map(|&m| f32::from(u8::from(m))).collect(), &shape);
        let out = Var::leaf(Tensor::from_vec(c.outputs.clone(), &shape));
        loss.forward(&out, &f32s(&c.labels), &f32s(&c.times), &mask_t).unwrap().backward();
        let g = out.grad().unwrap();
        for i in (0..c.masks.len()).filter(|&i| !c.masks[i]) {
            prop_assert_eq!(g.data()[i], 0.0);
        }
    }
}
