use ccn_web::{fields_text, invariance_text};

#[test]
fn relabeled_graph_gives_the_same_output() {
    let text = invariance_text(5, "0-1 1-2 2-3 3-4 4-0 0-2", "4 2 0 1 3", 3).unwrap();
    let ratio: f64 = text.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(ratio < 1e-10, "{text}");
    assert!(invariance_text(3, "0-1", "0 0 1", 3).is_err());
}

#[test]
fn fields_reject_out_of_range_vertices() {
    assert!(fields_text(2, "0-5", 1).is_err());
}
