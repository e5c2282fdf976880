//! Eval/report stub.
