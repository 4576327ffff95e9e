mod common;

use duofield::field::ClassTableMask;
use duofield::loss::{LossWeights, Phase, Term};
use duofield::model::{BLOCK_NAMES, STATIC_BLOCKS};
use duofield::pipeline::{forward_backward, StepOptions};
use duofield::scene::ClassTable;
use duofield::train::{TrainConfig, Trainer};

#[test]
fn init_phase_never_touches_the_dynamic_branch() {
    let mut t = Trainer::new(TrainConfig { steps: Some(200), ..TrainConfig::desk() }).unwrap();
    assert!(t.init_steps() > 6);
    let before: Vec<Vec<f64>> = t.model.blocks()[STATIC_BLOCKS..].iter().map(|b| b.to_vec()).collect();
    for _ in 0..6 {
        let rec = t.step_once().unwrap();
        assert_eq!(rec.phase, Phase::Init);
        assert_eq!(rec.max_dynamic_grad, 0.0);
    }
    let after: Vec<Vec<f64>> = t.model.blocks()[STATIC_BLOCKS..].iter().map(|b| b.to_vec()).collect();
    assert_eq!(before, after);
    assert!(t.optimizer.updates[STATIC_BLOCKS..].iter().all(|&n| n == 0));
    assert!(t.optimizer.updates[..STATIC_BLOCKS].iter().all(|&n| n == 6));
}

#[test]
fn full_phase_reaches_every_dynamic_block() {
    let mut m = common::miniature(5);
    let opts = StepOptions { fixed_irls: Some(m.inliers.clone()), ..StepOptions::new(Phase::Full, LossWeights::default()) };
    let grads = forward_backward(&m.model, &m.batch, &m.samples, &opts).unwrap().grads.unwrap();
    for (name, block) in BLOCK_NAMES.iter().zip(grads.blocks()).skip(STATIC_BLOCKS) {
        // With one movable class the masked softmax is constant.
        if *name == "dynamic.semantic" {
            assert!(block.iter().all(|&g| g == 0.0), "{name} moved with a single movable class");
        } else {
            assert!(block.iter().any(|&g| g != 0.0), "{name} received no gradient");
        }
    }

    m.model.dynamic_field.mask = Some(ClassTableMask::new(vec![false, false, true, true]).unwrap());
    let grads = forward_backward(&m.model, &m.batch, &m.samples, &opts).unwrap().grads.unwrap();
    assert!(grads.dynamic_grads.semantic.iter().any(|&g| g != 0.0));
}

#[test]
fn init_phase_gradient_is_zero_on_dynamic_blocks() {
    let m = common::miniature(6);
    let opts = StepOptions { fixed_irls: Some(m.inliers.clone()), ..StepOptions::new(Phase::Init, LossWeights::default()) };
    let out = forward_backward(&m.model, &m.batch, &m.samples, &opts).unwrap();
    assert!(out.report.get(Term::Robust).is_some());
    assert!(out.report.get(Term::Rgb).is_none());
    assert_eq!(out.grads.unwrap().max_abs_dynamic(), 0.0);
    assert!(out.bundles.iter().all(|b| b.dynamic_opacity == 0.0));
}

#[test]
fn masked_logit_slots_get_exactly_zero_gradient() {
    let m = common::miniature(7);
    let movable = ClassTable::standard().movable();
    let head = &m.model.dynamic_field.semantic;
    let dims = head.dims();
    let (inp, out) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    for term in [Term::Semantic, Term::Rgb, Term::Entropy, Term::SigmaD] {
        let grads = forward_backward(&m.model, &m.batch, &m.samples, &common::single_term(&m, term, true))
            .unwrap()
            .grads
            .unwrap();
        let g = &grads.dynamic_grads.semantic;
        let last = &g[g.len() - (inp * out + out)..];
        for (l, &mov) in movable.iter().enumerate() {
            let col: Vec<f64> = (0..inp).map(|i| last[i * out + l]).chain([last[inp * out + l]]).collect();
            if !mov {
                assert!(col.iter().all(|&v| v == 0.0), "{}: class {l} slot has gradient", term.name());
            }
        }
    }
}
