//! Tube geometry, the Gaussian heat-flow functional and the Kakeya ratio.

pub mod geometry;
pub mod heat;
pub mod ratio;

pub use geometry::{
    align_frame, curved_axiom_check, left_null_vector, map_transversality_at, pi_frame, transversality_margin, AtomMap,
    AxiomReport, CurvedMapFamily, MapFamily, Tube, TubeFamily,
};
pub use heat::{
    combo_centers, derivative_decomposition, divergence_probe, error_term_scan, error_terms, fit_power_law, frame_hypothesis,
    gaussian_weight, geometric_ladder, q_functional, q_scan, s0_check, s0_integral, s0_sample_points, Cutoff,
    DerivativeReport, DivergenceProbe, ErrorTerms, PowerFit, QConfig, QScan, QValue, S0Report, S0Value, Spacing,
};
pub use ratio::{dyadic_ladder, kakeya_ratio, ratio_ladder, RatioConfig, RatioLadder, RatioReport};
