//! Runs only when `ARHMM_TERN_TRACKS` points at the 30 Hz tern track file
//! (`id,x,y[,t_sec]`).

use arhmm::fit::fit;
use arhmm::geometry::{downsample, steps_and_turns};
use arhmm::{io, FitOptions, ModelSpec, PenaltyConfig, PooledData};

#[test]
fn bic_prefers_mixed_degrees_on_tern_tracks() {
    let Ok(path) = std::env::var("ARHMM_TERN_TRACKS") else {
        eprintln!("ARHMM_TERN_TRACKS not set; skipping");
        return;
    };
    let tracks = io::read_tracks(path).unwrap();
    let series: Vec<_> = tracks
        .iter()
        .map(|t| steps_and_turns(&downsample(t, 30).unwrap(), 1e-3).unwrap())
        .collect();
    let data = PooledData::new(series).unwrap();
    let opts = FitOptions {
        n_starts: 10,
        ..FitOptions::default()
    };
    let bic = |p_step: Vec<usize>, p_turn: Vec<usize>| {
        let spec = ModelSpec::new(2, p_step, p_turn).unwrap();
        fit(&data, &spec, &PenaltyConfig::default(), &opts).unwrap().bic
    };
    let mixed = bic(vec![1, 3], vec![1, 3]);
    for d in [0, 1, 2, 3] {
        let other = bic(vec![d, d], vec![d, d]);
        assert!(mixed < other, "degree {d}: {other} <= {mixed}");
    }
}
