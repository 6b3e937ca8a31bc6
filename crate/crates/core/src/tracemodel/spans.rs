use std::collections::BTreeMap;

use super::Trace;

/// An OpenTelemetry-style span translated from one execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub trace_id: u128,
    pub span_id: u64,
    pub parent_span_id: Option<u64>,
    pub name: String,
    pub start_unix_nano: u64,
    pub end_unix_nano: u64,
    pub attributes: BTreeMap<String, String>,
}

pub const ATTR_HOST_NAME: &str = "host.name";
pub const ATTR_SESSION_ID: &str = "session.id";
pub const ATTR_EOI: &str = "execution.eoi";
pub const ATTR_ESS: &str = "execution.ess";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic span id for execution `eoi` under `seed`.
///
/// The state `seed + (eoi + 1) * gamma` is distinct for distinct eoi and the
/// mixer is a bijection, so ids never collide within one seed. The single
/// state that would mix to zero is remapped.
pub fn span_id(seed: u64, eoi: u32) -> u64 {
    let state = seed.wrapping_add((eoi as u64 + 1).wrapping_mul(GOLDEN_GAMMA));
    match mix64(state) {
        0 => mix64(!state) | 1,
        id => id,
    }
}

/// One span per execution, in eoi order.
pub fn translate_to_spans(trace: &Trace, id_seed: u64) -> Vec<Span> {
    trace
        .preorder()
        .map(|(node, parent)| {
            let r = &node.record;
            let attributes = BTreeMap::from([
                (ATTR_HOST_NAME.to_string(), r.host_name.clone()),
                (ATTR_SESSION_ID.to_string(), r.session_id.clone()),
                (ATTR_EOI.to_string(), r.eoi.to_string()),
                (ATTR_ESS.to_string(), r.ess.to_string()),
            ]);
            Span {
                trace_id: r.trace_id as u128,
                span_id: span_id(id_seed, r.eoi),
                parent_span_id: parent.map(|p| span_id(id_seed, p)),
                name: r.operation_signature.clone(),
                start_unix_nano: r.tin,
                end_unix_nano: r.tout,
                attributes,
            }
        })
        .collect()
}
