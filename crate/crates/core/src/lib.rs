//! Extraction of frequent time-series shapes under user-level local
//! differential privacy.
//!
//! Time series are reduced to short symbol strings (SAX followed by
//! collapsing repeated symbols). A server grows a candidate trie level by
//! level; each user contributes exactly one randomized report, either a
//! perturbed length, a perturbed adjacent symbol pair, an Exponential
//! Mechanism selection among candidates, or a refinement report.
//!
//! The crate is `no_std` (with `alloc`). File formats, networking and the
//! experiment driver live in the `privshape` companion crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod ldp;
pub mod metrics;
pub mod protocol;
pub mod series;
pub mod trie;

pub use error::{Error, Result};
pub use ldp::{CandidateSet, PrivacyBudget, RandomSource};
pub use metrics::DistanceMetric;
pub use protocol::{
    Mechanism, ProtocolConfig, Report, ReportPayload, Server, ShapeResult, Task, UserAgent,
};
pub use series::{SaxAlphabet, ShapeTransform, SymbolSequence, TimeSeries};
