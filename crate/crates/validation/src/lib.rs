//! Home of the `acceptance` test target. Run it with
//! `cargo test -p ocmlab-validation --test acceptance`; pass criterion
//! numbers or name fragments to run a subset.
