//! Semantic maps from model outputs, whole-image and sliding-window.

use crate::autograd::Graph;
use crate::error::{invalid, shape_err, Result};
use crate::model::{SegOutput, Segmenter};
use crate::nn::{resize_bilinear, Ctx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Per-class scores `[B, K, h, w]` from mask-classification logits:
/// `sum_q softmax(class)_q[c] * sigmoid(mask)_q[x]` over the real classes.
pub fn semantic_scores<T: Scalar>(class_logits: &Tensor<T>, mask_logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (cs, ms) = (class_logits.shape(), mask_logits.shape());
    if cs.len() != 3 || ms.len() != 4 || cs[0] != ms[0] || cs[1] != ms[1] || cs[2] < 2 {
        return shape_err("semantic scores", format!("class {cs:?} vs mask {ms:?}"));
    }
    let (b, nq, k1) = (cs[0], cs[1], cs[2]);
    let k = k1 - 1;
    let hw = ms[2] * ms[3];
    let mut probs = class_logits.to_vec();
    probs.chunks_mut(k1).for_each(softmax_in_place);
    let sig: Vec<T> = mask_logits.data().iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect();
    let mut out = vec![T::zero(); b * k * hw];
    // [K, Nq] x [Nq, hw] per image
    for bi in 0..b {
        let p = &probs[bi * nq * k1..];
        T::gemm(
            k,
            nq,
            hw,
            T::one(),
            p,
            1,
            k1,
            &sig[bi * nq * hw..(bi + 1) * nq * hw],
            hw,
            1,
            T::zero(),
            &mut out[bi * k * hw..(bi + 1) * k * hw],
            hw,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![b, k, ms[2], ms[3]], out))
}

/// Channel softmax of dense logits `[B, K, h, w]`.
pub fn dense_scores<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 4 {
        return shape_err("dense scores", format!("{s:?}"));
    }
    let t = logits.permute(&[0, 2, 3, 1])?;
    let mut v = t.to_vec();
    v.chunks_mut(s[1]).for_each(softmax_in_place);
    Tensor::from_parts(vec![s[0], s[2], s[3], s[1]], v).permute(&[0, 3, 1, 2])
}

/// Argmax over the class axis of `[B, K, H, W]`; ties go to the lower class.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let s = scores.shape();
    if s.len() != 4 || s[1] > 255 {
        return shape_err("argmax labels", format!("{s:?} (at most 255 classes)"));
    }
    let (k, hw) = (s[1], s[2] * s[3]);
    let d = scores.data();
    Ok((0..s[0])
        .map(|b| {
            let img = &d[b * k * hw..(b + 1) * k * hw];
            (0..hw)
                .map(|x| {
                    let mut best = 0;
                    for c in 1..k {
                        if img[c * hw + x] > img[best * hw + x] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Scores resized to `(out_h, out_w)` then reduced to labels.
pub fn semantic_inference<T: Scalar>(
    class_logits: &Tensor<T>,
    mask_logits: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Vec<u8>>> {
    let scores = semantic_scores(class_logits, mask_logits)?;
    argmax_labels(&resize_bilinear(&scores, out_h, out_w)?)
}

/// Full-resolution class scores `[B, K, H, W]` in eval mode.
pub fn predict_scores<T: Scalar>(model: &Segmenter<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &model.store);
    let s = images.shape();
    if s.len() != 4 {
        return shape_err("predict", format!("images {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    match model.forward(&ctx, ctx.constant(images.clone()))? {
        SegOutput::Dense(logits) => dense_scores(&resize_bilinear(&logits.value(), h, w)?),
        SegOutput::MaskClass(out) => {
            let p = out.last();
            resize_bilinear(&semantic_scores(&p.class_logits.value(), &p.mask_logits.value())?, h, w)
        }
    }
}

/// Window offsets covering `size`, the last one flush with the edge.
pub fn window_starts(size: usize, crop: usize, stride: usize) -> Vec<usize> {
    if crop >= size {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + crop < size).collect();
    starts.push(size - crop);
    starts.dedup();
    starts
}

/// Averages per-window scores over a `[1, C, H, W]` image.
///
/// `score` maps a `[1, C, h, w]` crop to `[1, K, h, w]` scores. When the crop
/// covers the image the whole image is scored in one call.
pub fn sliding_window<T: Scalar>(
    image: &Tensor<T>,
    crop: usize,
    stride: usize,
    mut score: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return shape_err("sliding window", format!("expects one image, got {s:?}"));
    }
    if stride == 0 || stride > crop {
        return invalid("sliding window", format!("stride {stride} must be in 1..={crop}"));
    }
    let (h, w) = (s[2], s[3]);
    if crop >= h && crop >= w {
        return score(image);
    }
    let (ch, cw) = (crop.min(h), crop.min(w));
    let mut acc: Option<Vec<T>> = None;
    let mut count = vec![0u32; h * w];
    let mut k = 0;
    for &y in &window_starts(h, ch, stride) {
        for &x in &window_starts(w, cw, stride) {
            let win = image.narrow(2, y, ch)?.narrow(3, x, cw)?;
            let out = score(&win)?;
            let os = out.shape();
            if os.len() != 4 || os[2] != ch || os[3] != cw {
                return shape_err("sliding window", format!("window scores {os:?} for a {ch}x{cw} crop"));
            }
            k = os[1];
            let buf = acc.get_or_insert_with(|| vec![T::zero(); k * h * w]);
            let od = out.data();
            for c in 0..k {
                for r in 0..ch {
                    let dst = &mut buf[c * h * w + (y + r) * w + x..][..cw];
                    let src = &od[(c * ch + r) * cw..][..cw];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
            for r in 0..ch {
                count[(y + r) * w + x..][..cw].iter_mut().for_each(|n| *n += 1);
            }
        }
    }
    let mut buf = acc.expect("at least one window");
    for c in 0..k {
        for (v, &n) in buf[c * h * w..(c + 1) * h * w].iter_mut().zip(&count) {
            *v /= T::of_usize(n as usize);
        }
    }
    Ok(Tensor::from_parts(vec![1, k, h, w], buf))
}

/// Label map for one `[1, 3, H, W]` image using sliding windows of `crop`.
pub fn predict_labels<T: Scalar>(
    model: &Segmenter<T>,
    image: &Tensor<T>,
    crop: usize,
    stride: usize,
) -> Result<Vec<u8>> {
    let scores = sliding_window(image, crop, stride, |win| predict_scores(model, win))?;
    Ok(argmax_labels(&scores)?.remove(0))
}
