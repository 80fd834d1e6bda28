//! Shared fixtures for the benchmarks.

use worldtrack::oracle::{corrupt, generate_scene_with, render, Preset, RenderedSequence, SceneOptions};

/// Oracle render of a preset at 64×48.
pub fn fixture(preset: Preset, frames: usize) -> RenderedSequence {
    let opts = SceneOptions { num_frames: frames, ..Default::default() };
    render(&generate_scene_with(preset, 0, &opts)).expect("preset renders")
}

/// The same render with corrupted tracking pointmaps.
pub fn corrupted(seq: &RenderedSequence) -> RenderedSequence {
    corrupt(seq, 0.05, 0.01, 0, false).expect("valid corruption")
}
