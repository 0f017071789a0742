//! End-to-end check of the pruned vision forward pass against a
//! straight-line script.

#[path = "support/scripted.rs"]
mod scripted;

#[test]
fn elip_forward_matches_straight_line_script() {
    for (w, i, lambda) in [(11, 12, 0.8), (3, 4, 0.0), (5, 6, 1.0)] {
        let err = scripted::compare_with_script(w, i, lambda).unwrap();
        assert!(err < 1e-9, "seeds ({w}, {i}) λ {lambda}: deviation {err:e}");
    }
}
