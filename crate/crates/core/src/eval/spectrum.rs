use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::diffusion::{DenoiserNet, Timesteps};
use crate::tensor::io::write_bytes;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Real, Result};

/// Power binned by integer frequency radius.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialProfile {
    /// Sum of normalised power per bin (so that the bins sum to the
    /// spatial-domain energy), averaged over images.
    pub bin_energy: Vec<f64>,
    pub counts: Vec<usize>,
}

impl RadialProfile {
    /// Mean power per frequency in each bin.
    pub fn mean_power(&self) -> Vec<f64> {
        self.bin_energy
            .iter()
            .zip(&self.counts)
            .map(|(e, &c)| if c == 0 { 0.0 } else { e / c as f64 })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.bin_energy.iter().sum()
    }

    /// CSV `radius,energy` with the mean power per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("radius,energy\n");
        for (r, e) in self.mean_power().iter().enumerate() {
            s.push_str(&format!("{r},{e}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_csv().as_bytes())
    }
}

fn centred(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// `|DFT(x)|^2 / (H W)` binned by rounded radius; the bins sum to `sum x^2`.
pub fn radial_power<F: Real>(
    x: &Tensor<F>,
    planner: &mut FftPlanner<f64>,
) -> Result<RadialProfile> {
    let &[h, w] = x.dims() else {
        return Err(Error::shape(format!("expected [H, W], got {:?}", x.dims())));
    };
    let mut buf: Vec<Complex<f64>> = x
        .data()
        .iter()
        .map(|v| Complex::new(v.f64(), 0.0))
        .collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let max_r = ((h / 2).pow(2) as f64 + (w / 2).pow(2) as f64)
        .sqrt()
        .round() as usize;
    let mut energy = vec![0.0; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    let n = (h * w) as f64;
    for r in 0..h {
        for c in 0..w {
            let rad = (centred(r, h).powi(2) + centred(c, w).powi(2))
                .sqrt()
                .round() as usize;
            energy[rad] += buf[r * w + c].norm_sqr() / n;
            counts[rad] += 1;
        }
    }
    Ok(RadialProfile {
        bin_energy: energy,
        counts,
    })
}

/// Average radial profile of a set of same-size images.
pub fn mean_radial_profile<F: Real>(images: &[Tensor<F>]) -> Result<RadialProfile> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("spectrum of an empty image set".into()))?;
    let dims = first.dims().to_vec();
    let mut planner = FftPlanner::new();
    let mut acc: Option<RadialProfile> = None;
    for img in images {
        if img.dims() != dims.as_slice() {
            return Err(Error::shape(format!(
                "image dims {:?} differ from {:?}",
                img.dims(),
                dims
            )));
        }
        let p = radial_power(img, &mut planner)?;
        match &mut acc {
            None => acc = Some(p),
            Some(a) => a
                .bin_energy
                .iter_mut()
                .zip(&p.bin_energy)
                .for_each(|(x, y)| *x += y),
        }
    }
    let mut out = acc.expect("non-empty");
    let k = images.len() as f64;
    out.bin_energy.iter_mut().for_each(|e| *e /= k);
    Ok(out)
}

/// Residual `x - x0_hat`, where `x0_hat` is the one-step denoised estimate
/// treating `x` as the noisy state at `t_probe` under the null class.
pub fn denoise_residuals<F: Real>(
    net: &DenoiserNet<F>,
    images: &[Tensor<F>],
    t_probe: usize,
) -> Result<Vec<Tensor<F>>> {
    if images.is_empty() {
        return Err(Error::Contract("residuals of an empty image set".into()));
    }
    if t_probe == 0 || t_probe > net.steps() {
        return Err(Error::Config(format!(
            "t_probe {t_probe} outside [1, {}]",
            net.steps()
        )));
    }
    let dims = images[0].dims().to_vec();
    let pix: usize = dims.iter().product();
    let ab = net.alpha_bar(t_probe);
    let chunks: Vec<&[Tensor<F>]> = images.chunks(256).collect();
    let out = crate::par::parallel_map(&chunks, |chunk| {
        let rows: Vec<&[F]> = chunk.iter().map(|t| t.data()).collect();
        let x = Tensor::stack_rows(&rows, &[pix])?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone())?;
        let classes = vec![net.cfg.null_class(); chunk.len()];
        let eps = net.forward(&mut g, None, xv, Timesteps::Same(t_probe), &classes)?;
        let eps = g.value(eps);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut res = Vec::with_capacity(chunk.len());
        for (i, row) in x.data().chunks(pix).enumerate() {
            let e = &eps.data()[i * pix..(i + 1) * pix];
            let r: Vec<F> = row
                .iter()
                .zip(e)
                .map(|(&xv, &ev)| {
                    let x0 = (xv.f64() - sn * ev.f64()) / sa;
                    F::c(xv.f64() - x0)
                })
                .collect();
            res.push(Tensor::new(dims.clone(), r)?);
        }
        Ok(res)
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Radial energy profile of denoising residuals, averaged over images.
pub fn residual_spectrum<F: Real>(
    net: &DenoiserNet<F>,
    images: &[Tensor<F>],
    t_probe: usize,
) -> Result<RadialProfile> {
    mean_radial_profile(&denoise_residuals(net, images, t_probe)?)
}
