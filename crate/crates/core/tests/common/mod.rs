// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

pub mod oracle;

use std::sync::Arc;

use melody::hybrid::HybridConfig;
use melody::synth::{generate, prepare, train_model, Prepared, SynthConfig, SynthOutput};
use melody::{HybridModel, LabelingScheme, Registry, Scalar};

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        n_labeled: 80,
        n_unlabeled: 40,
        anomaly_rate: 0.25,
        t_history: 120,
        mean_stream_len: 8.0,
        max_stream_len: 24,
        seed: 11,
        ..SynthConfig::default()
    }
}

pub fn tiny_hybrid() -> HybridConfig {
    let mut h = HybridConfig {
        semidoc_members: 2,
        gbdt_members: 2,
        margin_grid: vec![10.0],
        ..HybridConfig::default()
    };
    h.semidoc.hidden = 16;
    h.semidoc.embed = 8;
    h.semidoc.max_epochs = 6;
    h.semidoc.patience = 6;
    h.semidoc.batch_size = 32;
    h.gbdt.n_estimators = 15;
    h.gbdt.max_depth = 3;
    h
}

pub fn tiny_data() -> SynthOutput {
    generate(&tiny_synth()).expect("tiny benchmark generates")
}

pub fn tiny_prepared<F: Scalar>(out: &SynthOutput) -> Prepared<F> {
    let data = out.dataset.clone().partition(LabelingScheme::Hard).expect("partition");
    prepare(&data, &Registry::default()).expect("features")
}

pub fn tiny_model<F: Scalar>() -> (SynthOutput, Arc<HybridModel<F>>) {
    let out = tiny_data();
    let prepared = tiny_prepared::<F>(&out);
    let model = train_model(&prepared, &tiny_hybrid(), 5).expect("training succeeds");
    (out, Arc::new(model))
}
