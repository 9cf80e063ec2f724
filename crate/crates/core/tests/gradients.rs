mod common;

use common::*;

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in SEEDS {
        for (name, err) in primitive_grad_errors(seed) {
            assert!(err < GRAD_TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn step_loss_gradient_at_snapshot() {
    for seed in SEEDS {
        let step = MiniStep::new(seed);
        let err = step_loss_grad_error(&step, &step.snapshot);
        assert!(err < GRAD_TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn step_loss_gradient_with_clipping_active() {
    let mut saw_clip = false;
    for seed in SEEDS {
        let step = MiniStep::new(seed);
        let params = perturbed(&step.snapshot, seed, 0.4);
        assert!(min_clip_margin(&step, &params) > 1e-3, "seed {seed}: ratio too close to a clip boundary");
        let eval = step.objective().evaluate(&params, false).unwrap();
        saw_clip |= eval.clipped_tokens > 0;
        let err = step_loss_grad_error(&step, &params);
        assert!(err < GRAD_TOL, "seed {seed}: rel err {err:e}");
    }
    assert!(saw_clip, "no seed exercised the clipped branch");
}

#[test]
fn parallel_and_serial_gradients_identical() {
    let step = MiniStep::new(2);
    let params = perturbed(&step.snapshot, 2, 0.3);
    let a = step.objective().evaluate(&params, false).unwrap();
    let b = step.objective().evaluate(&params, true).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| x.to_bits() == y.to_bits()));
}
