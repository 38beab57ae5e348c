//! Settings of the desk-scale smoke run on the procedural corpus.

/// Overrides on top of the defaults; the corpus is 64x64 RGB.
pub const SMOKE_OVERRIDES: &[(&str, &str)] = &[
    ("resolution", "64"),
    ("epochs", "15"),
    ("base_width", "8"),
    ("width_cap", "32"),
    ("stages", "3"),
    ("blocks_per_stage", "1"),
    ("latent_channels", "16"),
    ("unet_base_width", "8"),
    ("unet_levels", "3"),
    ("synth_cells_min", "1"),
    ("synth_cells_max", "4"),
    ("lr0", "0.0003"),
    ("kernel", "7"),
    ("val_fraction", "0.1"),
    ("seed", "7"),
];
