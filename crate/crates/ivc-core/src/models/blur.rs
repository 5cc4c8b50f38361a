//! Gaussian blur stack: a pyramid of progressively blurred copies of a frame
//! at full resolution, the sampling volume for scale-space warping.

use crate::tensor::Tensor;

/// Blur levels sigma = 0, 1, 2, 4, 8.
pub const BLUR_SIGMAS: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];

/// Stack of `levels` blurred copies; level 0 is the source frame itself.
pub struct BlurVolume {
    pub levels: Vec<Tensor>,
    pub sigmas: Vec<f64>,
}

/// Normalized 1D Gaussian taps truncated at radius ceil(3 sigma).
fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps.iter().map(|&t| t as f32).collect()
}

fn reflect(i: i64, n: i64) -> usize {
    // Reflect without repeating the edge sample: -1 -> 1, n -> n - 2.
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
        if n == 1 {
            return 0;
        }
    }
}

/// 1D blur along one axis with reflect padding, as a linear op with an exact
/// adjoint backward pass.
fn blur_axis(t: &Tensor, taps: Vec<f32>, horizontal: bool) -> Tensor {
    let [n, c, h, w] = t.shape();
    let radius = (taps.len() / 2) as i64;
    let run = |src: &[f32], dst: &mut [f32], transpose: bool| {
        // transpose=false: dst[i] += k[j] src[reflect(i + j - r)]
        // transpose=true (adjoint): dst[reflect(i + j - r)] += k[j] src[i]
        let (len, lanes, lane_stride, step) = if horizontal {
            (w as i64, n * c * h, w, 1usize)
        } else {
            (h as i64, n * c, h * w, w)
        };
        for lane in 0..lanes {
            // For vertical blur each lane covers w columns; walk them too.
            let cols = if horizontal { 1 } else { w };
            for col in 0..cols {
                let base = lane * lane_stride + col;
                for i in 0..len {
                    for (j, &kv) in taps.iter().enumerate() {
                        let s = reflect(i + j as i64 - radius, len);
                        let di = base + i as usize * step;
                        let si = base + s * step;
                        if transpose {
                            dst[si] += kv * src[di];
                        } else {
                            dst[di] += kv * src[si];
                        }
                    }
                }
            }
        }
    };
    let mut out = vec![0.0f32; t.numel()];
    run(&t.data(), &mut out, false);
    let taps_b = taps;
    Tensor::from_op(
        [n, c, h, w],
        out,
        vec![t.clone()],
        Box::new(move |gout, parents| {
            let mut gin = vec![0.0f32; gout.len()];
            let radius = (taps_b.len() / 2) as i64;
            let (len, lanes, lane_stride, step) = if horizontal {
                (w as i64, n * c * h, w, 1usize)
            } else {
                (h as i64, n * c, h * w, w)
            };
            for lane in 0..lanes {
                let cols = if horizontal { 1 } else { w };
                for col in 0..cols {
                    let base = lane * lane_stride + col;
                    for i in 0..len {
                        for (j, &kv) in taps_b.iter().enumerate() {
                            let s = reflect(i + j as i64 - radius, len);
                            gin[base + s * step] += kv * gout[base + i as usize * step];
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&gin);
        }),
    )
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(frame: &Tensor, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return frame.clone();
    }
    let taps = gaussian_kernel(sigma);
    blur_axis(&blur_axis(frame, taps.clone(), true), taps, false)
}

/// Builds the blur volume over the first `levels` entries of [`BLUR_SIGMAS`].
pub fn blur_stack(frame: &Tensor, levels: usize) -> BlurVolume {
    assert!((2..=BLUR_SIGMAS.len()).contains(&levels), "levels must be in 2..=5");
    let sigmas: Vec<f64> = BLUR_SIGMAS[..levels].to_vec();
    let levels = sigmas.iter().map(|&s| gaussian_blur(frame, s)).collect();
    BlurVolume { levels, sigmas }
}
