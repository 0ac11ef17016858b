//! TODO module body.
