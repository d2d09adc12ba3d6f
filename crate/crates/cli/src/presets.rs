//! Shipped experiment configs, sized to finish in seconds.

const PRESETS: &[(&str, &str)] = &[
    ("fig1-mlp", include_str!("../presets/fig1-mlp.json")),
    ("fig3-deep-linear", include_str!("../presets/fig3-deep-linear.json")),
    ("fig5-partial-whitening", include_str!("../presets/fig5-partial-whitening.json")),
    ("figC2-two-layer-theory", include_str!("../presets/figC2-two-layer-theory.json")),
    ("figF1-transfer", include_str!("../presets/figF1-transfer.json")),
    ("figG1-multiclass", include_str!("../presets/figG1-multiclass.json")),
    ("appB-model-kernel", include_str!("../presets/appB-model-kernel.json")),
    ("appH-minnorm", include_str!("../presets/appH-minnorm.json")),
    ("appI-laziness", include_str!("../presets/appI-laziness.json")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}
