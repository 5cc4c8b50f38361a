//! Scale-space warping: trilinear sampling of a Gaussian blur volume at
//! displaced coordinates, so motion compensation can trade sharpness for
//! uncertainty per pixel.

use super::blur::{blur_stack, BlurVolume};
use crate::tensor::{Tensor, TensorError};

/// One bilinear sample with border clamping, plus the partials needed for the
/// backward pass: (value, d/dx, d/dy, corner indices and weights).
struct BilinearTap {
    idx: [usize; 4], // (lo,lo) (hi,lo) (lo,hi) (hi,hi) as y-major offsets
    wgt: [f32; 4],
    dx_wgt: [f32; 4],
    dy_wgt: [f32; 4],
}

fn bilinear_tap(xs: f32, ys: f32, w: usize, h: usize) -> BilinearTap {
    let xc = xs.clamp(0.0, (w - 1) as f32);
    let yc = ys.clamp(0.0, (h - 1) as f32);
    let x_lo = xc.floor() as usize;
    let y_lo = yc.floor() as usize;
    let x_hi = (x_lo + 1).min(w - 1);
    let y_hi = (y_lo + 1).min(h - 1);
    let fx = xc - x_lo as f32;
    let fy = yc - y_lo as f32;
    // Clamped samples have zero spatial derivative.
    let dxf = if (0.0..=(w - 1) as f32).contains(&xs) { 1.0 } else { 0.0 };
    let dyf = if (0.0..=(h - 1) as f32).contains(&ys) { 1.0 } else { 0.0 };
    BilinearTap {
        idx: [y_lo * w + x_lo, y_lo * w + x_hi, y_hi * w + x_lo, y_hi * w + x_hi],
        wgt: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        dx_wgt: [-(1.0 - fy) * dxf, (1.0 - fy) * dxf, -fy * dxf, fy * dxf],
        dy_wgt: [-(1.0 - fx) * dyf, -fx * dyf, (1.0 - fx) * dyf, fx * dyf],
    }
}

/// Trilinear sample of `volume` at `(x + dx, y + dy, s)` per pixel.
/// `field` channels are (dx, dy, s); spatial samples clamp at the border and
/// `s` clamps to `[0, levels - 1]`. Differentiable w.r.t. the volume levels
/// and the field.
pub fn warp_volume(volume: &BlurVolume, field: &Tensor) -> Result<Tensor, TensorError> {
    let num_levels = volume.levels.len();
    let [n, c, h, w] = volume.levels[0].shape();
    let [fn_, fc, fh, fw] = field.shape();
    if fc != 3 || fn_ != n || fh != h || fw != w {
        return Err(TensorError::ShapeMismatch {
            op: "scale_space_warp",
            detail: format!(
                "field must be ({n}, 3, {h}, {w}), got ({fn_}, {fc}, {fh}, {fw})"
            ),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0f32; n * c * plane];
    {
        let levels: Vec<_> = volume.levels.iter().map(|t| t.data()).collect();
        let fd = field.data();
        for b in 0..n {
            let fbase = b * 3 * plane;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let dx = fd[fbase + p];
                    let dy = fd[fbase + plane + p];
                    let s = fd[fbase + 2 * plane + p].clamp(0.0, (num_levels - 1) as f32);
                    let s_lo = (s.floor() as usize).min(num_levels - 1);
                    let s_hi = (s_lo + 1).min(num_levels - 1);
                    let ws = s - s_lo as f32;
                    let tap = bilinear_tap(x as f32 + dx, y as f32 + dy, w, h);
                    for ch in 0..c {
                        let lo = &levels[s_lo][(b * c + ch) * plane..][..plane];
                        let hi = &levels[s_hi][(b * c + ch) * plane..][..plane];
                        let mut v_lo = 0.0f32;
                        let mut v_hi = 0.0f32;
                        for t in 0..4 {
                            v_lo += tap.wgt[t] * lo[tap.idx[t]];
                            v_hi += tap.wgt[t] * hi[tap.idx[t]];
                        }
                        out[(b * c + ch) * plane + p] = v_lo * (1.0 - ws) + v_hi * ws;
                    }
                }
            }
        }
    }
    let mut parents: Vec<Tensor> = volume.levels.clone();
    parents.push(field.clone());
    let saved_levels: Vec<Vec<f32>> = volume.levels.iter().map(|t| t.to_vec()).collect();
    let saved_field = field.to_vec();
    Ok(Tensor::from_op(
        [n, c, h, w],
        out,
        parents,
        Box::new(move |gout, parents| {
            let mut g_levels = vec![vec![0.0f32; n * c * plane]; num_levels];
            let mut g_field = vec![0.0f32; n * 3 * plane];
            for b in 0..n {
                let fbase = b * 3 * plane;
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let dx = saved_field[fbase + p];
                        let dy = saved_field[fbase + plane + p];
                        let s_raw = saved_field[fbase + 2 * plane + p];
                        let s = s_raw.clamp(0.0, (num_levels - 1) as f32);
                        let in_s = (0.0..=(num_levels - 1) as f32).contains(&s_raw);
                        let s_lo = (s.floor() as usize).min(num_levels - 1);
                        let s_hi = (s_lo + 1).min(num_levels - 1);
                        let ws = s - s_lo as f32;
                        let tap = bilinear_tap(x as f32 + dx, y as f32 + dy, w, h);
                        let mut gdx = 0.0f32;
                        let mut gdy = 0.0f32;
                        let mut gs = 0.0f32;
                        for ch in 0..c {
                            let go = gout[(b * c + ch) * plane + p];
                            if go == 0.0 {
                                continue;
                            }
                            let lo = &saved_levels[s_lo][(b * c + ch) * plane..][..plane];
                            let hi = &saved_levels[s_hi][(b * c + ch) * plane..][..plane];
                            let mut v_lo = 0.0f32;
                            let mut v_hi = 0.0f32;
                            let mut ddx = 0.0f32;
                            let mut ddy = 0.0f32;
                            for t in 0..4 {
                                let lerped = lo[tap.idx[t]] * (1.0 - ws) + hi[tap.idx[t]] * ws;
                                v_lo += tap.wgt[t] * lo[tap.idx[t]];
                                v_hi += tap.wgt[t] * hi[tap.idx[t]];
                                ddx += tap.dx_wgt[t] * lerped;
                                ddy += tap.dy_wgt[t] * lerped;
                                g_levels[s_lo][(b * c + ch) * plane + tap.idx[t]] +=
                                    go * tap.wgt[t] * (1.0 - ws);
                                g_levels[s_hi][(b * c + ch) * plane + tap.idx[t]] +=
                                    go * tap.wgt[t] * ws;
                            }
                            gdx += go * ddx;
                            gdy += go * ddy;
                            if in_s {
                                gs += go * (v_hi - v_lo);
                            }
                        }
                        g_field[fbase + p] += gdx;
                        g_field[fbase + plane + p] += gdy;
                        g_field[fbase + 2 * plane + p] += gs;
                    }
                }
            }
            for (lvl, g) in g_levels.iter().enumerate() {
                parents[lvl].accumulate_grad(g);
            }
            parents[num_levels].accumulate_grad(&g_field);
        }),
    ))
}

/// Builds the blur volume for `frame` and warps it by `field`.
pub fn scale_space_warp(frame: &Tensor, field: &Tensor) -> Result<Tensor, TensorError> {
    let volume = blur_stack(frame, super::blur::BLUR_SIGMAS.len());
    warp_volume(&volume, field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::models::blur::gaussian_blur;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..crate::tensor::numel(shape)).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn zero_field_is_identity() {
        let frame = rand_frame([1, 3, 12, 12], 40);
        let field = Tensor::zeros([1, 3, 12, 12]);
        let out = scale_space_warp(&frame, &field).unwrap();
        for (a, b) in out.data().iter().zip(frame.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_shift_moves_ramp() {
        // Horizontal ramp image; dx = 1 samples one pixel to the right.
        let w = 10;
        let data: Vec<f32> = (0..w * w).map(|i| (i % w) as f32 / w as f32).collect();
        let frame = Tensor::new([1, 1, w, w], data);
        let mut fdata = vec![0.0f32; 3 * w * w];
        for v in fdata.iter_mut().take(w * w) {
            *v = 1.0;
        }
        let field = Tensor::new([1, 3, w, w], fdata);
        let out = scale_space_warp(&frame, &field).unwrap();
        let od = out.data();
        for y in 0..w {
            for x in 0..w - 1 {
                let expect = (x + 1) as f32 / w as f32;
                assert!((od[y * w + x] - expect).abs() < 1e-5, "({x},{y})");
            }
        }
    }

    #[test]
    fn pure_scale_one_is_blur_level_one() {
        let frame = rand_frame([1, 1, 16, 16], 41);
        let mut fdata = vec![0.0f32; 3 * 256];
        for v in fdata.iter_mut().skip(2 * 256) {
            *v = 1.0;
        }
        let field = Tensor::new([1, 3, 16, 16], fdata);
        let out = scale_space_warp(&frame, &field).unwrap();
        let expect = gaussian_blur(&frame, 1.0);
        for (a, b) in out.data().iter().zip(expect.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_field_channels() {
        let frame = rand_frame([1, 3, 8, 8], 42);
        let field = Tensor::zeros([1, 2, 8, 8]);
        assert!(scale_space_warp(&frame, &field).is_err());
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let frame = {
            let t = rand_frame([1, 2, 8, 8], 43);
            Tensor::param(t.shape(), t.to_vec())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        // Keep fractional parts well inside (0, 1): the warp is only
        // piecewise smooth and finite differences must not cross a grid kink.
        let fdata: Vec<f32> = (0..3 * 64)
            .map(|i| {
                let base: i32 = if i < 128 { rng.gen_range(-2..2) } else { rng.gen_range(0..3) };
                base as f32 + rng.gen_range(0.3..0.7)
            })
            .collect();
        let field = Tensor::param([1, 3, 8, 8], fdata);
        let loss = || scale_space_warp(&frame, &field).unwrap().square().sum();
        // With h = 1e-3 the finite differences carry about 1e-3 of f32
        // noise, so gradients below ~0.05 are compared absolutely.
        let err = gradcheck::max_rel_error_with_floor(
            &[("frame", &frame), ("field", &field)],
            &loss,
            1e-3,
            5e-2,
        );
        assert!(err < 5e-2, "rel err {err}");
    }
}
