//! Shared fixtures for the benchmarks.

use tpg_core::config::RunConfig;
use tpg_core::model::{Stage2Sample, TpgModel};
use tpg_core::synth::make_sample;
use tpg_core::DegradationKind;

/// Desk-preset model plus `n` prepared stage-2 samples.
pub fn desk_fixture(n: usize) -> (RunConfig, TpgModel, Vec<Stage2Sample>) {
    let cfg = RunConfig::preset("desk").expect("desk preset");
    let mut model = TpgModel::new(&cfg.model, 0).expect("model");
    model.freeze_stage1();
    let samples = (0..n)
        .map(|i| {
            let kind = DegradationKind::ALL[i % DegradationKind::ALL.len()];
            let s = make_sample(i as u64, kind, &cfg.corpus).expect("sample");
            model.prepare_stage2(&s.x_lq, &s.x_gt, &s.cues).expect("prepare")
        })
        .collect();
    (cfg, model, samples)
}
