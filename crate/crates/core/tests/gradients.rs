mod support;

use crn_core::perceiver::Perceiver;
use crn_core::trainer::LossKind;
use support::*;

const KINDS: [LossKind; 4] = [LossKind::Eq1, LossKind::Eq2, LossKind::Eq3, LossKind::Eq4];

#[test]
fn pixel_gradients_through_desk_perceiver() {
    let perceiver = Perceiver::desk(0);
    for kind in KINDS {
        let check = perceiver_grad_check(kind, &perceiver, 11);
        assert!(check.min_margin.unwrap() >= KINK_MARGIN);
        assert!(check.rel_error < GRAD_RTOL, "{kind:?}: {check:?}");
    }
}

#[test]
fn parameter_gradients_through_refinement_modules() {
    let perceiver = Perceiver::desk(0);
    for kind in KINDS {
        let check = model_grad_check(kind, &perceiver, 5);
        assert!(check.rel_error < GRAD_RTOL, "{kind:?}: {check:?}");
    }
}

