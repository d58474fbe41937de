//! Grayscale block-DCT quantisation standing in for JPEG compression. No
//! entropy coding or chroma handling; the artifact that matters to a
//! detector is coefficient quantisation.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Standard JPEG luminance quantisation table (Annex K).
pub const Q_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quantiser step per coefficient for a quality in `[1, 100]`.
pub fn quant_steps(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "JPEG quality {quality} outside [1, 100]"
        )));
    }
    let q = quality as f64;
    let s = if quality < 50 {
        50.0 / q
    } else {
        (200.0 - 2.0 * q) / 100.0
    };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(Q_LUMA.iter()) {
        *o = (base as f64 * s).round().max(1.0);
    }
    Ok(out)
}

fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (k, row) in b.iter_mut().enumerate() {
            let ck = if k == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = ck * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        b
    })
}

fn dct2(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for k in 0..8 {
            tmp[y * 8 + k] = (0..8).map(|x| b[k][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..8 {
        for x in 0..8 {
            out[k * 8 + x] = (0..8).map(|y| b[k][y] * tmp[y * 8 + x]).sum();
        }
    }
    out
}

fn idct2(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            tmp[y * 8 + x] = (0..8).map(|k| b[k][y] * coef[k * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|k| b[k][x] * tmp[y * 8 + k]).sum();
        }
    }
    out
}

/// 8×8 block DCT-II, quantise/dequantise with the scaled luminance table,
/// inverse DCT, clamp to `[-1, 1]`. Partial edge blocks are padded by edge
/// replication.
pub fn compress_blockdct<F: Real>(x: &Tensor<F>, quality: u32) -> Result<Tensor<F>> {
    let steps = quant_steps(quality)?;
    let (h, w) = super::hw(x)?;
    let px = |yy: usize, xx: usize| {
        (x.data()[yy.min(h - 1) * w + xx.min(w - 1)].f64() + 1.0) * 127.5 - 128.0
    };
    let mut out = vec![F::zero(); h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for xx in 0..8 {
                    block[y * 8 + xx] = px(by + y, bx + xx);
                }
            }
            let mut c = dct2(&block);
            for (v, s) in c.iter_mut().zip(steps.iter()) {
                *v = (*v / s).round() * s;
            }
            let rec = idct2(&c);
            for y in 0..8 {
                for xx in 0..8 {
                    let (yy, xc) = (by + y, bx + xx);
                    if yy < h && xc < w {
                        let v = (rec[y * 8 + xx] + 128.0) / 127.5 - 1.0;
                        out[yy * w + xc] = F::c(v.clamp(-1.0, 1.0));
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_follow_quality_scaling() {
        assert!(quant_steps(100).unwrap().iter().all(|&s| s == 1.0));
        let q50 = quant_steps(50).unwrap();
        assert_eq!(q50[0], 16.0);
        assert_eq!(quant_steps(25).unwrap()[0], 32.0);
        assert!(quant_steps(0).is_err() && quant_steps(101).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 17) as f64 - 8.0;
        }
        let back = idct2(&dct2(&block));
        for (a, b) in block.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_within_one_dc_step() {
        let x = Tensor::<f64>::full(&[16, 16], 0.3137);
        for q in [10, 50, 75, 95] {
            let y = compress_blockdct(&x, q).unwrap();
            let dc_step = quant_steps(q).unwrap()[0];
            // A DC error of one step moves every pixel by step/8 levels.
            let bound = dc_step / 8.0 / 127.5 + 1e-12;
            assert!(y.data().iter().all(|v| (v - 0.3137).abs() <= bound));
        }
    }
}
