//! Fast kernels against direct loop implementations. Each check returns
//! its worst disagreement so callers choose how to report it.

use plainseg::nn::{scaled_dot_product, ConvParams, KeyMask};
use plainseg::train::{assignment_cost, brute_force_assignment, hungarian};
use plainseg::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Trials where the matcher reuses a column or misses the optimum.
pub fn hungarian_failures(trials: usize) -> usize {
    let mut r = rng(1);
    let mut failures = 0;
    for trial in 0..trials {
        let rows = r.random_range(1..=6);
        let cols = r.random_range(rows..=6);
        // integer costs produce many ties, real costs few; use both
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| if trial % 2 == 0 { r.random_range(0..5) as f64 } else { r.random_range(-3.0..3.0) })
            .collect();
        let a = hungarian(&cost, rows, cols).unwrap();
        let mut used = a.clone();
        used.sort();
        used.dedup();
        let (_, best) = brute_force_assignment(&cost, rows, cols);
        if used.len() != rows || (assignment_cost(&cost, cols, &a) - best).abs() > 1e-9 {
            failures += 1;
        }
    }
    failures
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, p: ConvParams) -> Vec<f64> {
    let [n, cin, h, wd] = x.shape().try_into().unwrap();
    let (ho, wo) = (p.out_size(h), p.out_size(wd));
    let cpg_in = cin / p.groups;
    let cpg_out = p.out_ch / p.groups;
    let mut out = vec![0.0; n * p.out_ch * ho * wo];
    for bi in 0..n {
        for co in 0..p.out_ch {
            let g = co / cpg_out;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cpg_in {
                        for ky in 0..p.kernel {
                            for kx in 0..p.kernel {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.at(&[bi, g * cpg_in + ci, iy as usize, ix as usize]);
                                s += xv * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((bi * p.out_ch + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

pub fn grouped_conv_error() -> f64 {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let cases = [
        ConvParams::same(6, 9, 3).groups(3),
        ConvParams::same(4, 4, 1).groups(4),
        ConvParams { stride: 2, ..ConvParams::same(4, 6, 3) }.groups(2).bias(false),
        ConvParams { padding: 0, ..ConvParams::same(3, 5, 3) },
        ConvParams { stride: 4, padding: 0, ..ConvParams::same(3, 8, 4) },
    ];
    for p in cases {
        let x = Tensor::<f64>::randn(vec![2, p.in_ch, 9, 8], 1.0, &mut r);
        let w = Tensor::<f64>::randn(p.weight_shape().to_vec(), 1.0, &mut r);
        let b = p.has_bias.then(|| Tensor::<f64>::randn(vec![p.out_ch], 1.0, &mut r));
        let g = Graph::new();
        let y =
            g.constant(x.clone()).conv2d(g.constant(w.clone()), b.clone().map(|b| g.constant(b)), p).unwrap().value();
        worst = worst.max(max_diff(y.data(), &naive_conv(&x, &w, b.as_ref(), p)));
    }
    worst
}

pub fn deconv_error() -> f64 {
    let mut r = rng(3);
    let (n, cin, cout, h, w) = (2, 3, 4, 3, 5);
    let x = Tensor::<f64>::randn(vec![n, cin, h, w], 1.0, &mut r);
    let wt = Tensor::<f64>::randn(vec![cin, cout, 2, 2], 1.0, &mut r);
    let b = Tensor::<f64>::randn(vec![cout], 1.0, &mut r);
    let p = ConvParams { kernel: 2, stride: 2, padding: 0, ..ConvParams::same(cin, cout, 1) };
    let g = Graph::new();
    let y =
        g.constant(x.clone()).conv_transpose2d(g.constant(wt.clone()), Some(g.constant(b.clone())), p).unwrap().value();
    let mut want = vec![0.0; n * cout * 4 * h * w];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let mut s = b.data()[co];
                    for ci in 0..cin {
                        s += x.at(&[bi, ci, oy / 2, ox / 2]) * wt.at(&[ci, co, oy % 2, ox % 2]);
                    }
                    want[((bi * cout + co) * 2 * h + oy) * 2 * w + ox] = s;
                }
            }
        }
    }
    max_diff(y.data(), &want)
}

/// Includes additive bias, random key masks and one fully masked row.
pub fn attention_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let (b, nq, nk, heads, hd) = (2, 4, 6, 2, 3);
        let d = heads * hd;
        let q = Tensor::<f64>::randn(vec![b, nq, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(vec![b, nk, d], 1.0, &mut r);
        let v = Tensor::<f64>::randn(vec![b, nk, d], 1.0, &mut r);
        let bias = Tensor::<f64>::randn(vec![heads, nq, nk], 1.0, &mut r);
        let mut mask = KeyMask::new(b, nq, nk, (0..b * nq * nk).map(|_| r.random_bool(0.6)).collect()).unwrap();
        mask.masked[nk..2 * nk].fill(true);
        let g = Graph::new();
        let (out, _) = scaled_dot_product(
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
            heads,
            Some(g.constant(bias.clone())),
            Some(&mask),
        )
        .unwrap();
        let mut want = vec![0.0; b * nq * d];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..nq {
                    let row = &mask.masked[(bi * nq + i) * nk..][..nk];
                    let all_masked = row.iter().all(|&m| m);
                    let mut scores = vec![f64::NEG_INFINITY; nk];
                    for j in 0..nk {
                        if row[j] && !all_masked {
                            continue;
                        }
                        let dot: f64 = (0..hd).map(|c| q.at(&[bi, i, h * hd + c]) * k.at(&[bi, j, h * hd + c])).sum();
                        scores[j] = dot / (hd as f64).sqrt() + bias.at(&[h, i, j]);
                    }
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..hd {
                        want[(bi * nq + i) * d + h * hd + c] =
                            (0..nk).map(|j| e[j] / z * v.at(&[bi, j, h * hd + c])).sum();
                    }
                }
            }
        }
        worst = worst.max(max_diff(out.value().data(), &want));
    }
    worst
}

/// Bilinear read of one `h x w` map at normalized `(x, y)` with half-pixel
/// centers, clamping the continuous coordinate to the border pixels.
fn bilinear_at(map: &dyn Fn(usize, usize) -> f64, h: usize, w: usize, x: f64, y: f64) -> f64 {
    let px = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    map(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + map(y0, x1) * (1.0 - fy) * fx
        + map(y1, x0) * fy * (1.0 - fx)
        + map(y1, x1) * fy * fx
}

pub fn deformable_sampling_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let levels = [(5, 4), (3, 3), (1, 2)];
        let tokens: usize = levels.iter().map(|(h, w)| h * w).sum();
        let (b, nq, heads, hd, np) = (2, 3, 2, 3, 3);
        let nl = levels.len();
        let value = Tensor::<f64>::randn(vec![b, tokens, heads, hd], 1.0, &mut r);
        // includes points outside the unit square to exercise clamping
        let loc = Tensor::<f64>::uniform(vec![b, nq, heads, nl, np, 2], -0.2, 1.2, &mut r);
        let wts = Tensor::<f64>::randn(vec![b, nq, heads, nl, np], 1.0, &mut r);
        let g = Graph::new();
        let out = g
            .constant(value.clone())
            .ms_deform_sample(&levels, g.constant(loc.clone()), g.constant(wts.clone()))
            .unwrap()
            .value();
        let mut want = vec![0.0; b * nq * heads * hd];
        for bi in 0..b {
            for q in 0..nq {
                for h in 0..heads {
                    for c in 0..hd {
                        let mut start = 0;
                        let mut s = 0.0;
                        for (l, &(lh, lw)) in levels.iter().enumerate() {
                            let map = |y: usize, x: usize| value.at(&[bi, start + y * lw + x, h, c]);
                            for p in 0..np {
                                let x = loc.at(&[bi, q, h, l, p, 0]);
                                let y = loc.at(&[bi, q, h, l, p, 1]);
                                s += wts.at(&[bi, q, h, l, p]) * bilinear_at(&map, lh, lw, x, y);
                            }
                            start += lh * lw;
                        }
                        want[((bi * nq + q) * heads + h) * hd + c] = s;
                    }
                }
            }
        }
        worst = worst.max(max_diff(out.data(), &want));
    }
    worst
}
