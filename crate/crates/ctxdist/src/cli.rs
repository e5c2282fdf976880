//! CLI stub.
