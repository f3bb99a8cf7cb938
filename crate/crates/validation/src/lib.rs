//! Holds the `acceptance` test target; run it with
//! `cargo test -p cmpc-validation --test acceptance`.
