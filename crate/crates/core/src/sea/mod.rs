//! Safe-error campaigns over a victim model and LSBL bit estimation.

mod campaign;
mod knowledge;
mod stats;

pub use campaign::{
    false_sea_marks, input_leakage, run_campaign, run_campaign_from, sea_probe, CampaignConfig,
    CampaignOutcome, InputRecord, ProbeOutcome,
};
pub use knowledge::{
    bits_string, lsbl_param, lsbl_propagate, pack_param, projected_range, source_string, unpack_param, BitKnowledge,
    ParamBits, Slot,
};
pub use stats::{
    layer_count, leakage_table, recovery_stats, BitRate, LayerRecovery, LeakageRow,
    RecoveryReport,
};
