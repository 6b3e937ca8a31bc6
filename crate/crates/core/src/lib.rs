//! Core building blocks of the kestrel observability toolkit.
//!
//! * [`records`]: the monitoring record model and its binary/text codecs.
//! * [`agent`]: probes, the monitoring controller with its asynchronous writer, and samplers.
//! * [`pipeline`]: a small linear pipe-and-filter runtime.
//! * [`tracemodel`]: call tree reconstruction and span translation.
//! * [`bench`]: the self-recursive overhead microbenchmark.

pub mod agent;
pub mod bench;
pub mod pipeline;
pub mod records;
pub mod tracemodel;
