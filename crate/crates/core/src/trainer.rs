//! Offline training: clip sampling with augmentation, the unrolled
//! per-clip loss, Adam with step decay, and gradient clipping.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::{Config, TrainConfig};
use crate::error::{contract, Error, Result};
use crate::featnet;
use crate::frame::{context_side, crop_patch, crop_window, CropWindow, Frame};
use crate::geometry::BoundingBox;
use crate::model::{self, Model, ModelParams};
use crate::synthetic::Sequence;

/// One frame of a training clip.
#[derive(Clone, Debug)]
pub struct ClipFrame<'a> {
    /// Object patch around the (augmented) ground truth.
    pub object: Tensor<f32>,
    /// Search patch around the previous clip frame's ground truth.
    pub search: Tensor<f32>,
    pub search_window: CropWindow,
    /// Ground truth in search-patch pixels.
    pub truth: BoundingBox,
    pub frame_truth: BoundingBox,
    pub source: &'a Frame,
}

#[derive(Clone, Debug)]
pub struct TrainingClip<'a> {
    pub indices: Vec<usize>,
    pub frames: Vec<ClipFrame<'a>>,
}

/// `t` frame indices in `0..len`, sorted: without replacement when the
/// video is long enough, with replacement otherwise.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, t: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len < 2 {
        return contract(format!("sample_clip: video of {len} frames, need at least 2"));
    }
    let mut idx = if len >= t {
        index::sample(rng, len, t).into_vec()
    } else {
        (0..t).map(|_| rng.random_range(0..len)).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.random_range(-amount..=amount)
    } else {
        0.0
    }
}

fn augmented_window<R: Rng + ?Sized>(rng: &mut R, cx: f64, cy: f64, side: f64, out: usize, tc: &TrainConfig) -> CropWindow {
    let px = side / out as f64;
    CropWindow {
        cx: cx + jitter(rng, tc.translate) * px,
        cy: cy + jitter(rng, tc.translate) * px,
        side_x: side * (1.0 + jitter(rng, tc.stretch)),
        side_y: side * (1.0 + jitter(rng, tc.stretch)),
    }
}

/// Sample a clip of `cfg.train.clip_len` frames from one video and crop
/// its augmented object and search patches.
pub fn sample_clip<'a, R: Rng + ?Sized>(video: &'a Sequence, cfg: &Config, rng: &mut R) -> Result<TrainingClip<'a>> {
    if video.frames.len() != video.truth.len() {
        return contract("sample_clip: frame and box counts differ");
    }
    let fc = &cfg.featnet;
    let tc = &cfg.train;
    let indices = sample_indices(video.len(), tc.clip_len, rng)?;
    // Keep the target far enough inside the response map for its label.
    let r = fc.response_side()? as f64;
    let reach = ((r - 1.0) / 2.0 - tc.label_radius).max(0.0) * fc.total_stride() as f64;
    let mut frames = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let truth = video.truth[i];
        truth.ensure_valid()?;
        let source = &video.frames[i];
        let obj_side = context_side(&truth, fc.context_factor);
        let ow = augmented_window(rng, truth.cx, truth.cy, obj_side, fc.object_size, tc);
        let object = crop_window(source, ow, fc.object_size).pixels;

        let prev = video.truth[indices[k.saturating_sub(1)]];
        let search_side = context_side(&prev, fc.context_factor) * fc.search_size as f64 / fc.object_size as f64;
        let limit = reach * search_side / fc.search_size as f64;
        let cx = truth.cx + (prev.cx - truth.cx).clamp(-limit, limit);
        let cy = truth.cy + (prev.cy - truth.cy).clamp(-limit, limit);
        let mut sw = augmented_window(rng, cx, cy, search_side, fc.search_size, tc);
        let (lx, ly) = (reach * sw.side_x / fc.search_size as f64, reach * sw.side_y / fc.search_size as f64);
        sw.cx = truth.cx + (sw.cx - truth.cx).clamp(-lx, lx);
        sw.cy = truth.cy + (sw.cy - truth.cy).clamp(-ly, ly);
        let search = crop_window(source, sw, fc.search_size).pixels;
        let (px, py) = sw.to_patch(truth.cx, truth.cy, fc.search_size);
        let s = fc.search_size as f64;
        let patch_truth = BoundingBox::new(px, py, truth.width * s / sw.side_x, truth.height * s / sw.side_y);
        frames.push(ClipFrame {
            object,
            search,
            search_window: sw,
            truth: patch_truth,
            frame_truth: truth,
            source,
        });
    }
    Ok(TrainingClip { indices, frames })
}

/// Response-map cell `(row, col)` under a search-patch pixel position.
pub fn patch_to_cell(px: f64, py: f64, search_size: usize, stride: usize, response_side: usize) -> (f64, f64) {
    let c = (response_side as f64 - 1.0) / 2.0;
    let s = search_size as f64 / 2.0;
    ((py - s) / stride as f64 + c, (px - s) / stride as f64 + c)
}

/// Balanced logistic loss: cells within `radius` of `center` are positives,
/// the rest negatives, each class carrying half the total weight.
pub fn response_loss<T: Real>(g: &Graph<T>, resp: Var, center: (f64, f64), radius: f64) -> Result<Var> {
    let s = g.shape(resp);
    if s.len() != 2 {
        return contract(format!("response_loss: expected a 2-D map, got {s:?}"));
    }
    let cols = s[1];
    let positive: Vec<bool> = (0..s[0] * cols)
        .map(|i| ((i / cols) as f64 - center.0).hypot((i % cols) as f64 - center.1) <= radius)
        .collect();
    let npos = positive.iter().filter(|&&p| p).count();
    let nneg = positive.len() - npos;
    if npos == 0 {
        return contract(format!("response_loss: no positive cell near {center:?}"));
    }
    let (wp, wn) = if nneg == 0 {
        (1.0 / npos as f64, 0.0)
    } else {
        (0.5 / npos as f64, 0.5 / nneg as f64)
    };
    let sign = Tensor::from_fn(s.clone(), |i| if positive[i] { -T::one() } else { T::one() });
    let weight = Tensor::from_fn(s.clone(), |i| T::lit(if positive[i] { wp } else { wn }));
    let margin = g.mul(g.constant(sign), resp)?;
    let per_cell = g.mul(g.softplus(margin), g.constant(weight))?;
    Ok(g.sum(per_cell))
}

/// Unrolled loss of one clip, summed over frames `1..T`. Returns the loss
/// and the number of scored frames.
pub fn clip_loss<T: Real, R: Rng + ?Sized>(
    g: &Graph<T>,
    cfg: &Config,
    p: &ModelParams<Var>,
    clip: &TrainingClip<'_>,
    training: bool,
    rng: &mut R,
) -> Result<(Var, usize)> {
    let fc = &cfg.featnet;
    let first = clip.frames.first().ok_or_else(|| Error::Contract("clip_loss: empty clip".into()))?;
    let mut state = model::begin(g, cfg, p, g.constant(first.object.cast()))?;
    let stride = fc.total_stride();
    let side = fc.response_side()?;
    let last = clip.frames.len() - 1;
    let mut total: Option<Var> = None;
    for (k, f) in clip.frames.iter().enumerate().skip(1) {
        let sf = featnet::extract(g, fc, &p.featnet, g.constant(f.search.cast()))?;
        let read = model::read_template(g, cfg, p, &mut state, sf, training, rng)?;
        let resp = model::response(g, p, read.template, sf)?;
        let center = patch_to_cell(f.truth.cx, f.truth.cy, fc.search_size, stride, side);
        let l = response_loss(g, resp, center, cfg.train.label_radius)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        if k == last {
            break;
        }
        let patch = if cfg.train.teacher_forcing {
            f.object.clone()
        } else {
            predicted_object(g.value_ref(resp).cast(), f, cfg)?
        };
        let t_new = featnet::extract(g, fc, &p.featnet, g.constant(patch.cast()))?;
        model::write_template(g, cfg, &mut state, &read, t_new)?;
    }
    let total = total.ok_or_else(|| Error::Contract("clip_loss: clip needs at least 2 frames".into()))?;
    Ok((total, last))
}

/// Object patch cropped at the response peak, for training without teacher forcing.
fn predicted_object(resp: Tensor<f32>, f: &ClipFrame<'_>, cfg: &Config) -> Result<Tensor<f32>> {
    let fc = &cfg.featnet;
    let side = resp.shape()[1];
    let idx = resp.argmax();
    let c = (side as f64 - 1.0) / 2.0;
    let stride = fc.total_stride() as f64;
    let s = fc.search_size as f64 / 2.0;
    let px = s + ((idx % side) as f64 - c) * stride;
    let py = s + ((idx / side) as f64 - c) * stride;
    let (fx, fy) = f.search_window.to_frame(px, py, fc.search_size);
    let b = BoundingBox::new(fx, fy, f.frame_truth.width, f.frame_truth.height);
    Ok(crop_patch(f.source, &b, fc.context_factor, 1.0, fc.object_size)?.pixels)
}

/// Adam moments, one pair per parameter tensor in visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<Tensor<f32>>) -> Self {
        let zeros: Vec<_> = params.to_vec().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// One bias-corrected Adam update at the scheduled learning rate.
pub fn adam_update(params: &mut ModelParams<Tensor<f32>>, grads: &[Tensor<f32>], opt: &mut OptimizerState, tc: &TrainConfig) -> f64 {
    let lr = tc.learning_rate_at(opt.step);
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2, eps) = (tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let mut i = 0;
    params.for_each_mut(&mut |_, p| {
        let (m, v, g) = (&mut opt.m[i], &mut opt.v[i], &grads[i]);
        for (((w, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            *w = (*w as f64 - lr * (mn / c1) / ((vn / c2).sqrt() + eps)) as f32;
        }
        i += 1;
    });
    lr
}

/// Loss and gradients of one clip; `seed` drives dropout.
pub fn clip_gradients(model: &Model, clip: &TrainingClip<'_>, seed: u64) -> Result<(f64, usize, Vec<Tensor<f32>>)> {
    let g = Graph::<f32>::new();
    let p = model.params.bind(&g, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loss, frames) = clip_loss(&g, &model.config, &p, clip, true, &mut rng)?;
    let value = g.value_ref(loss).item() as f64;
    let grads = g.backward(loss)?;
    let out = p.to_vec().into_iter().map(|v| grads.get(*v)).collect();
    Ok((value, frames, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Summed loss over all frames and clips.
    pub loss: f64,
    pub frames: usize,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss / self.frames.max(1) as f64
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Forward and backward over a batch of clips in parallel, then a single
/// clipped Adam update. Gradients are summed in clip order.
pub fn train_step(model: &mut Model, opt: &mut OptimizerState, clips: &[TrainingClip<'_>], seed: u64) -> Result<StepStats> {
    if clips.is_empty() {
        return contract("train_step: empty batch");
    }
    let len = clips[0].frames.len();
    if clips.iter().any(|c| c.frames.len() != len) {
        return contract("train_step: clips of unequal length");
    }
    let results: Vec<_> = clips
        .par_iter()
        .enumerate()
        .map(|(i, c)| clip_gradients(model, c, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut frames = 0;
    let mut grads: Vec<Tensor<f32>> = Vec::new();
    for (i, (l, n, g)) in results.into_iter().enumerate() {
        if !l.is_finite() || g.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(diagnostics(model, opt.step, i, l)));
        }
        loss += l;
        frames += n;
        if grads.is_empty() {
            grads = g;
        } else {
            for (acc, t) in grads.iter_mut().zip(&g) {
                acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    let grad_norm = clip_global_norm(&mut grads, model.config.train.grad_clip);
    let step = opt.step;
    let lr = adam_update(&mut model.params, &grads, opt, &model.config.train);
    Ok(StepStats {
        step,
        loss,
        frames,
        grad_norm,
        lr,
    })
}

fn diagnostics(model: &Model, step: usize, clip: usize, loss: f64) -> String {
    let mut out = format!("step {step}, clip {clip}: loss {loss}; parameter norms:");
    model.params.for_each(&mut |name, t| {
        let n = t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        out.push_str(&format!(" {name}={n:.4e}"));
    });
    out
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean loss per scored frame.
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Draw a batch of clips for update `step`: videos are chosen uniformly
/// with replacement.
pub fn sample_batch<'a>(model: &Model, data: &'a [Sequence], step: usize) -> Result<(Vec<TrainingClip<'a>>, u64)> {
    if data.is_empty() {
        return contract("train: no training videos");
    }
    let mut rng = step_rng(model.config.seed, step);
    let clips = (0..model.config.train.batch)
        .map(|_| {
            let v = &data[rng.random_range(0..data.len())];
            sample_clip(v, &model.config, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, rng.random()))
}

/// Run `steps` updates, calling `on_step` after each one. Batches depend
/// only on the seed and the step count, so training can be resumed.
pub fn train(
    model: &mut Model,
    opt: &mut OptimizerState,
    data: &[Sequence],
    steps: usize,
    mut on_step: impl FnMut(&StepStats, &LogRow),
) -> Result<()> {
    let start = Instant::now();
    for _ in 0..steps {
        let (clips, seed) = sample_batch(model, data, opt.step)?;
        let stats = train_step(model, opt, &clips, seed)?;
        let row = LogRow {
            step: stats.step,
            loss: stats.mean_loss(),
            lr: stats.lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_step(&stats, &row);
    }
    Ok(())
}

pub const LOG_HEADER: &str = "step,loss,lr,wall_time";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{:.3}", self.step, self.loss, self.lr, self.wall_time)
    }
}

/// Moving average over a window of `w` values.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, tier_spec, Tier};

    #[test]
    fn full_length_video_gives_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_indices(16, 16, &mut rng).unwrap(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn indices_sorted_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [2, 5, 16, 40] {
            for _ in 0..50 {
                let idx = sample_indices(len, 16, &mut rng).unwrap();
                assert_eq!(idx.len(), 16);
                assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                assert!(idx.iter().all(|&i| i < len));
                if len >= 16 {
                    assert!(idx.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
        assert!(sample_indices(1, 16, &mut rng).is_err());
        assert!(sample_indices(0, 16, &mut rng).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([9, 9]));
        let l = response_loss(&g, z, (4.0, 4.0), 2.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let sep = Tensor::from_fn([9, 9], |i| {
            let d = ((i / 9) as f64 - 4.0).hypot((i % 9) as f64 - 4.0);
            if d <= 2.0 {
                60.0
            } else {
                -60.0
            }
        });
        let l = response_loss(&g, g.constant(sep), (4.0, 4.0), 2.0).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn loss_balanced_against_negative_count() {
        // Same positives; the second map has twice as many negative cells,
        // all with the same response.
        let g = Graph::<f64>::new();
        let small = Tensor::from_fn([5, 10], |i| if i % 10 == 2 && i / 10 == 2 { 1.5 } else { -0.3 });
        let big = Tensor::from_fn([5, 20], |i| if i % 20 == 2 && i / 20 == 2 { 1.5 } else { -0.3 });
        let a = response_loss(&g, g.constant(small), (2.0, 2.0), 0.5).unwrap();
        let b = response_loss(&g, g.constant(big), (2.0, 2.0), 0.5).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_map_without_positives() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([5, 5]));
        assert!(response_loss(&g, z, (40.0, 40.0), 2.0).is_err());
    }

    #[test]
    fn patch_centre_maps_to_response_centre() {
        assert_eq!(patch_to_cell(36.0, 36.0, 72, 4, 10), (4.5, 4.5));
        assert_eq!(patch_to_cell(40.0, 36.0, 72, 4, 10), (4.5, 5.5));
    }

    #[test]
    fn clip_truth_lies_inside_response_map() {
        let cfg = Config::default();
        let video = generate(&tier_spec(Tier::Hard, 500, 48), "v").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let side = cfg.featnet.response_side().unwrap() as f64;
        for _ in 0..20 {
            let clip = sample_clip(&video, &cfg, &mut rng).unwrap();
            assert_eq!(clip.frames.len(), 16);
            for f in &clip.frames {
                let (r, c) = patch_to_cell(f.truth.cx, f.truth.cy, 72, 4, side as usize);
                let m = side - 1.0 - cfg.train.label_radius;
                assert!(r >= cfg.train.label_radius - 1e-9 && r <= m + 1e-9, "{r}");
                assert!(c >= cfg.train.label_radius - 1e-9 && c <= m + 1e-9, "{c}");
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = Config::default();
        let mut m = Model::new(cfg.clone()).unwrap();
        let before = m.params.clone();
        let mut opt = OptimizerState::new(&m.params);
        let grads: Vec<_> = m.params.to_vec().iter().map(|t| Tensor::full(t.shape().to_vec(), 0.3f32)).collect();
        adam_update(&mut m.params, &grads, &mut opt, &cfg.train);
        let (a, b) = (before.to_vec(), m.params.to_vec());
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!(((p - q) as f64 - 1e-4).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0f32, 4.0]), Tensor::vector(vec![0.0f32, 12.0])];
        let n = clip_global_norm(&mut g, 5.0);
        assert!((n - 13.0).abs() < 1e-9);
        let after: f32 = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum();
        assert!((after.sqrt() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
