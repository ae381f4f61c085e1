mod support;

#[test]
fn outputs_stay_in_range_at_input_resolution() {
    println!("{}", support::check_output_contract().unwrap());
}

#[test]
fn presets_are_strictly_ordered_by_size() {
    println!("{}", support::check_capacity_ordering().unwrap());
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    println!("{}", support::check_checkpoint_round_trip(dir.path()).unwrap());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    println!("{}", support::check_network_gradients(2).unwrap());
}
