//! Online tracking: multi-scale search, cosine-window damping, scale
//! smoothing, localization and memory writing, one frame at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::config::TrackerConfig;
use crate::controller::ControlSignals;
use crate::error::{contract, Result};
use crate::featnet::{self, upsample_response};
use crate::frame::{context_side, crop_patch, crop_window, CropWindow, Frame};
use crate::geometry::BoundingBox;
use crate::model::{self, Model, SequenceState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub sequence: SequenceState<Tensor<f32>>,
    pub bbox: BoundingBox,
    /// Size of the box relative to the first frame.
    pub scale: f64,
    pub base_size: (f64, f64),
    pub frame_index: usize,
}

/// Diagnostics for one tracked frame.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub bbox: BoundingBox,
    pub scale_index: usize,
    pub peak: f32,
    /// Attention weights laid out as `rows × cols` (absent for `NoAtt`).
    pub attention: Option<Tensor<f32>>,
    pub read_weights: Tensor<f32>,
    pub write_weights: Tensor<f32>,
    pub access: Tensor<f32>,
    pub signals: ControlSignals<Tensor<f32>>,
    /// Final template matched against the search features this frame.
    pub template: Tensor<f32>,
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of Hann windows, peak 1 at the centre.
pub fn hann2d(rows: usize, cols: usize) -> Tensor<f32> {
    let (hr, hc) = (hann(rows), hann(cols));
    Tensor::from_fn([rows, cols], |i| (hr[i / cols] * hc[i % cols]) as f32)
}

/// `(1−f)·normalize(resp) + f·hann2d`, normalizing to `[0, 1]` by the
/// map's own range.
pub fn apply_window(resp: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    let lo = resp.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = resp.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    apply_window_in_range(resp, factor, lo, hi)
}

/// As [`apply_window`] but normalizing by a caller-supplied range, so that
/// several maps can share one normalization.
pub fn apply_window_in_range(resp: &Tensor<f32>, factor: f64, lo: f32, hi: f32) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&factor) {
        return contract(format!("apply_window: factor {factor} outside [0, 1]"));
    }
    if resp.rank() != 2 {
        return contract(format!("apply_window: expected a 2-D map, got {:?}", resp.shape()));
    }
    let win = hann2d(resp.shape()[0], resp.shape()[1]);
    let span = hi - lo;
    let f = factor as f32;
    resp.zip_map(&win, |r, w| {
        let n = if span > 0.0 { (r - lo) / span } else { 0.0 };
        (1.0 - f) * n + f * w
    })
}

/// Move the box by the offset of the map's argmax from its centre.
/// `stride` is the frame-pixel distance between coarse response cells and
/// `upsample` the factor by which `resp` was upsampled.
pub fn locate(resp: &Tensor<f32>, current: &BoundingBox, scale_ratio: f64, stride: f64, upsample: usize) -> BoundingBox {
    let (rows, cols) = (resp.shape()[0], resp.shape()[1]);
    let idx = resp.argmax();
    let (iy, ix) = ((idx / cols) as f64, (idx % cols) as f64);
    let (my, mx) = ((rows - 1) as f64 / 2.0, (cols - 1) as f64 / 2.0);
    let k = stride / upsample as f64;
    BoundingBox::new(
        current.cx + (ix - mx) * k,
        current.cy + (iy - my) * k,
        current.width * scale_ratio,
        current.height * scale_ratio,
    )
}

pub fn smooth_scale(previous: f64, factor: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * previous + gamma * previous * factor
}

pub fn init(model: &Model, frame: &Frame, bbox: BoundingBox) -> Result<TrackerState> {
    bbox.ensure_valid()?;
    let cfg = &model.config;
    let patch = crop_patch(frame, &bbox, cfg.featnet.context_factor, 1.0, cfg.featnet.object_size)?;
    let g = Graph::<f32>::new();
    let p = model.params.bind(&g, false);
    let st = model::begin(&g, cfg, &p, g.constant(patch.pixels))?;
    Ok(TrackerState {
        sequence: st.map(|v| g.value(*v)),
        bbox,
        scale: 1.0,
        base_size: (bbox.width, bbox.height),
        frame_index: 0,
    })
}

fn scale_order(n: usize) -> impl Iterator<Item = usize> {
    // Middle scale first so that ties keep the current size.
    let mid = n / 2;
    std::iter::once(mid).chain((0..n).filter(move |&i| i != mid))
}

pub fn step(model: &Model, state: &mut TrackerState, frame: &Frame) -> Result<StepReport> {
    let cfg = &model.config;
    let tc: &TrackerConfig = &cfg.tracker;
    let fc = &cfg.featnet;
    let g = Graph::<f32>::new();
    let p = model.params.bind(&g, false);
    let mut seq = state.sequence.bind(&g);

    let factors = tc.scale_factors();
    let base_side = context_side(&state.bbox, fc.context_factor) * fc.search_size as f64 / fc.object_size as f64;
    let mut windows = Vec::with_capacity(factors.len());
    let mut feats = Vec::with_capacity(factors.len());
    for &f in &factors {
        let window = CropWindow::square(state.bbox.cx, state.bbox.cy, base_side * f);
        let patch = crop_window(frame, window, fc.search_size);
        feats.push(featnet::extract(&g, fc, &p.featnet, g.constant(patch.pixels))?);
        windows.push(window);
    }
    let mid = factors.len() / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let read = model::read_template(&g, cfg, &p, &mut seq, feats[mid], false, &mut rng)?;

    let mut maps = Vec::with_capacity(factors.len());
    for &sf in &feats {
        let r = model::response(&g, &p, read.template, sf)?;
        maps.push(upsample_response(&g.value(r), tc.upsample)?);
    }
    let lo = maps.iter().flat_map(|m| m.data()).copied().fold(f32::INFINITY, f32::min);
    let hi = maps.iter().flat_map(|m| m.data()).copied().fold(f32::NEG_INFINITY, f32::max);
    let mut best: Option<(usize, f32, Tensor<f32>)> = None;
    for i in scale_order(factors.len()) {
        let w = apply_window_in_range(&maps[i], tc.window_factor, lo, hi)?;
        let peak = w.data()[w.argmax()];
        if best.as_ref().is_none_or(|b| peak > b.1) {
            best = Some((i, peak, w));
        }
    }
    let (si, peak, windowed) = best.expect("at least one scale");

    let new_scale = smooth_scale(state.scale, factors[si], tc.scale_smoothing);
    let stride = fc.total_stride() as f64 * windows[si].side_x / fc.search_size as f64;
    let moved = locate(&windowed, &state.bbox, new_scale / state.scale, stride, tc.upsample);
    let bbox = moved.clipped(frame.width() as f64, frame.height() as f64, tc.min_side);

    let obj = crop_patch(frame, &bbox, fc.context_factor, 1.0, fc.object_size)?;
    let t_new = featnet::extract(&g, fc, &p.featnet, g.constant(obj.pixels))?;
    let ww = model::write_template(&g, cfg, &mut seq, &read, t_new)?;

    let attention = match read.attention {
        Some(a) => Some(g.value(a).reshape([read.grid.0, read.grid.1])?),
        None => None,
    };
    let report = StepReport {
        bbox,
        scale_index: si,
        peak,
        attention,
        read_weights: g.value(read.read_weights),
        write_weights: g.value(ww),
        access: g.value(seq.memory.access),
        signals: read.signals.map(|v| g.value(*v)),
        template: g.value(read.template),
    };
    state.sequence = seq.map(|v| g.value(*v));
    state.bbox = bbox;
    state.scale = new_scale;
    state.frame_index += 1;
    Ok(report)
}

/// Track a whole sequence from the first-frame box; returns one box per
/// frame, the first being the initialization box.
pub fn track(model: &Model, frames: &[Frame], first: BoundingBox) -> Result<Vec<BoundingBox>> {
    track_with(model, frames, first, |_, _| {})
}

/// As [`track`], calling `observe(frame_index, report)` after each step.
pub fn track_with(
    model: &Model,
    frames: &[Frame],
    first: BoundingBox,
    mut observe: impl FnMut(usize, &StepReport),
) -> Result<Vec<BoundingBox>> {
    let Some(f0) = frames.first() else {
        return contract("track: empty sequence");
    };
    let mut state = init(model, f0, first)?;
    let mut out = vec![first];
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let report = step(model, &mut state, frame)?;
        observe(i, &report);
        out.push(report.bbox);
    }
    Ok(out)
}

/// CSV header and rows for a memory dump: one row per frame and slot.
pub fn memory_dump_header() -> &'static str {
    "frame,slot,read_weight,write_weight,access"
}

pub fn memory_dump_rows(frame: usize, r: &StepReport) -> Vec<String> {
    (0..r.read_weights.len())
        .map(|j| {
            format!(
                "{frame},{j},{},{},{}",
                r.read_weights.data()[j],
                r.write_weights.data()[j],
                r.access.data()[j]
            )
        })
        .collect()
}

pub fn attention_dump_header() -> &'static str {
    "frame,row,col,weight"
}

pub fn attention_dump_rows(frame: usize, r: &StepReport) -> Vec<String> {
    let Some(a) = &r.attention else {
        return Vec::new();
    };
    let cols = a.shape()[1];
    a.data()
        .iter()
        .enumerate()
        .map(|(i, w)| format!("{frame},{},{},{w}", i / cols, i % cols))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_peak_is_centred() {
        let h = hann2d(5, 5);
        assert_eq!(h.argmax(), 12);
        assert!((h.at(&[2, 2]) - 1.0).abs() < 1e-7);
        assert_eq!(h.at(&[0, 3]), 0.0);
    }

    #[test]
    fn window_factor_zero_preserves_order() {
        let r = Tensor::new([2, 3], vec![3.0, -1.0, 0.5, 2.0, 7.0, 1.0]).unwrap();
        let w = apply_window(&r, 0.0).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(r.data()[i] < r.data()[j], w.data()[i] < w.data()[j]);
            }
        }
    }

    #[test]
    fn window_factor_one_peaks_at_centre() {
        let r = Tensor::from_fn([7, 7], |i| i as f32);
        assert_eq!(apply_window(&r, 1.0).unwrap().argmax(), 24);
    }

    #[test]
    fn central_peak_beats_equal_off_centre_peak() {
        for f in [1e-3, 0.15, 0.5, 0.99] {
            let mut r = Tensor::zeros([9, 9]);
            r.data_mut()[0] = 1.0;
            r.data_mut()[40] = 1.0;
            assert_eq!(apply_window(&r, f).unwrap().argmax(), 40);
        }
    }

    #[test]
    fn window_rejects_bad_factor() {
        assert!(apply_window(&Tensor::zeros([3, 3]), 1.5).is_err());
    }

    #[test]
    fn locate_examples() {
        let b = BoundingBox::new(50.0, 40.0, 10.0, 20.0);
        let mut r = Tensor::zeros([9, 9]);
        r.data_mut()[40] = 1.0;
        assert_eq!(locate(&r, &b, 1.0, 8.0, 4), b);
        // one coarse cell right = 4 upsampled cells
        let mut r = Tensor::zeros([9, 9]);
        r.data_mut()[4 * 9 + 8] = 1.0;
        let m = locate(&r, &b, 1.0, 8.0, 4);
        assert_eq!((m.cx, m.cy), (58.0, 40.0));
        let m = locate(&Tensor::zeros([9, 9]), &b, 1.05, 8.0, 4);
        assert_eq!((m.cx, m.cy), (42.0, 32.0));
        assert!((m.width - 10.5).abs() < 1e-12);
    }

    #[test]
    fn scale_smoothing_examples() {
        assert_eq!(smooth_scale(1.3, 1.0, 0.6), 1.3);
        assert!((smooth_scale(1.0, 1.05, 0.6) - 1.03).abs() < 1e-12);
    }

    #[test]
    fn scale_order_starts_at_middle() {
        assert_eq!(scale_order(3).collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_eq!(scale_order(1).collect::<Vec<_>>(), vec![0]);
    }
}
