use proptest::prelude::*;
use refvos::augmentation::parse_numbered_list;
use refvos::metrics::{boundary_f, iou};
use refvos::mil::make_proposals;
use refvos::numeric::{sigmoid, Tape, Tensor};
use refvos::objectives::{soft_iou_values, temporal_rank_loss, PseudoMask};
use refvos::schema::Polarity;
use refvos::synth::{featurize, tokenize, Codebook};
use refvos::trainer::TrainConfig;

fn mask(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_one_on_itself((a, b) in (1usize..64).prop_flat_map(|n| (mask(n), mask(n)))) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn boundary_f_is_bounded_and_one_on_itself((h, w, a, b) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), mask(h * w), mask(h * w)))) {
        let f = boundary_f(&a, &b, h, w, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(boundary_f(&a, &a, h, w, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn soft_iou_is_symmetric_and_bounded(v in (1usize..32).prop_flat_map(|n| prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), n))) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let x = soft_iou_values(&a, &b);
        prop_assert!((x - soft_iou_values(&b, &a)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn ranking_loss_is_nonnegative_and_zero_for_a_static_mask(
        frames in (3usize..6, 1usize..20).prop_flat_map(|(t, n)| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, n), t)),
        epsilon in 0.0f64..0.5,
    ) {
        let tape = Tape::new();
        let probs: Vec<_> = frames.iter().map(|f| tape.constant(Tensor::vector(f.clone()))).collect();
        prop_assert!(temporal_rank_loss(&probs, epsilon, false).unwrap().unwrap().item() >= 0.0);
        let still: Vec<_> = frames.iter().map(|_| tape.constant(Tensor::vector(frames[0].clone()))).collect();
        prop_assert_eq!(temporal_rank_loss(&still, epsilon, false).unwrap().unwrap().item(), 0.0);
    }

    #[test]
    fn proposals_and_pseudo_masks_threshold_the_sigmoid(
        logits in prop::collection::vec(-8.0f64..8.0, 1..24),
        theta in 0.01f64..0.99,
    ) {
        let s = Tensor::matrix(logits.len(), 1, logits.clone()).unwrap();
        let proposals = make_proposals(&s, theta).unwrap();
        let pseudo = PseudoMask::from_logits(&Tensor::vector(logits.clone()), theta);
        for (j, x) in logits.iter().enumerate() {
            prop_assert_eq!(proposals.masks[0][j], sigmoid(*x) > theta);
            prop_assert_eq!(pseudo.binary[j], sigmoid(*x) > theta);
        }
        prop_assert_eq!(proposals.empty[0], !proposals.masks[0].iter().any(|b| *b));
    }

    #[test]
    fn numbered_lists_parse_back(items in prop::collection::vec("[a-z][a-z ]{0,20}[a-z]", 1..10)) {
        let raw: String = items.iter().enumerate().map(|(i, t)| format!("{}. {t}\n", i + 1)).collect();
        prop_assert_eq!(parse_numbered_list(&raw).unwrap(), items);
    }

    #[test]
    fn featurize_marks_exactly_the_real_tokens(text in "[a-z]{1,6}( [a-z]{1,6}){0,12}", n_l in 1usize..10) {
        let e = featurize(&text, Polarity::Original, 1.0, &Codebook::new(1, 4), n_l);
        let real = tokenize(&text).len().min(n_l);
        prop_assert_eq!(e.n_real(), real);
        prop_assert!(e.pad_mask[..real].iter().all(|m| *m));
        prop_assert!(e.tokens[real * 4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_survives_a_toml_round_trip(lr in 1e-6f64..1e-1, epochs in 1usize..100, theta in 0.05f64..0.95, seed in any::<u32>()) {
        let cfg = TrainConfig { lr, epochs, theta, seed: seed.into(), ..TrainConfig::default() };
        prop_assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
