//! Local contrast normalization across all feature maps.
//!
//! Subtractive step: every value minus the Gaussian-weighted mean of its
//! spatial neighbourhood taken over all maps. Divisive step: every value
//! divided by `max(σ_local, floor)` where `σ_local` is the root of the
//! Gaussian-weighted local mean square, again over all maps.
//!
//! At the image border the Gaussian weights are renormalized over the
//! in-bounds support, so constants are annihilated everywhere.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor3;

/// Divisors never drop below this, so all-zero inputs map to zeros.
const MIN_DIVISOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloorMode {
    /// Mean of the `σ_local` map of the current image.
    MeanSigma,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub window: usize,
    pub sigma: f64,
    pub floor: FloorMode,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            window: 9,
            sigma: 1.6,
            floor: FloorMode::MeanSigma,
        }
    }
}

impl NormConfig {
    pub fn with_window(window: usize) -> Self {
        NormConfig {
            window,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "normalization window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!(
                "normalization sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if let FloorMode::Constant(c) = self.floor {
            if !(c > 0.0) {
                return Err(Error::Parameter(format!(
                    "divisive floor must be > 0, got {c}"
                )));
            }
        }
        Ok(())
    }

    fn check(&self, t: &Tensor3) -> Result<()> {
        self.validate()?;
        if self.window > t.height() || self.window > t.width() {
            return dim_err(format!(
                "normalization window {} larger than {}x{}",
                self.window,
                t.height(),
                t.width()
            ));
        }
        Ok(())
    }

    /// One-dimensional Gaussian taps, normalized to sum to one.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|d| (-((d * d) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Same-mode separable Gaussian filter with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        let src = &plane[i * w..(i + 1) * w];
        let dst = &mut rows[i * w..(i + 1) * w];
        for (j, d) in dst.iter_mut().enumerate() {
            let lo = j.saturating_sub(r);
            let hi = (j + r).min(w - 1);
            let mut acc = 0.0;
            for jj in lo..=hi {
                acc += taps[jj + r - j] * src[jj];
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(h - 1);
        let dst = &mut out[i * w..(i + 1) * w];
        for ii in lo..=hi {
            let t = taps[ii + r - i];
            let src = &rows[ii * w..(ii + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += t * s;
            }
        }
    }
    out
}

/// The local-average operator `A` over planes and its adjoint, for a fixed
/// spatial size and map count.
struct LocalAverage {
    h: usize,
    w: usize,
    taps: Vec<f64>,
    /// `1 / (maps · Z(i, j))`
    inv_mass: Vec<f64>,
}

impl LocalAverage {
    fn new(cfg: &NormConfig, maps: usize, h: usize, w: usize) -> Self {
        let taps = cfg.taps();
        let z = blur(&vec![1.0; h * w], h, w, &taps);
        let inv_mass = z.iter().map(|&v| 1.0 / (maps as f64 * v)).collect();
        LocalAverage { h, w, taps, inv_mass }
    }

    fn apply(&self, plane: &[f64]) -> Vec<f64> {
        let mut out = blur(plane, self.h, self.w, &self.taps);
        out.iter_mut().zip(&self.inv_mass).for_each(|(v, m)| *v *= m);
        out
    }

    fn adjoint(&self, plane: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = plane
            .iter()
            .zip(&self.inv_mass)
            .map(|(v, m)| v * m)
            .collect();
        blur(&scaled, self.h, self.w, &self.taps)
    }
}

fn map_sum(t: &Tensor3) -> Vec<f64> {
    let mut s = vec![0.0; t.plane_len()];
    for m in 0..t.maps() {
        s.iter_mut().zip(t.map(m)).for_each(|(a, b)| *a += b);
    }
    s
}

pub fn subtractive_norm(t: &Tensor3, cfg: &NormConfig) -> Result<Tensor3> {
    cfg.check(t)?;
    let avg = LocalAverage::new(cfg, t.maps(), t.height(), t.width());
    // the weights sum to one, so shifting by any reference value leaves the
    // result unchanged; shifting by an input value makes constants exact zeros
    let reference = t.data().first().copied().unwrap_or(0.0);
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v -= reference);
    let mean = avg.apply(&map_sum(&out));
    for m in 0..t.maps() {
        out.map_mut(m)
            .iter_mut()
            .zip(&mean)
            .for_each(|(v, mu)| *v -= mu);
    }
    Ok(out)
}

/// Adjoint of [`subtractive_norm`] (it is linear).
pub fn subtractive_norm_backward(grad: &Tensor3, cfg: &NormConfig) -> Result<Tensor3> {
    cfg.check(grad)?;
    let avg = LocalAverage::new(cfg, grad.maps(), grad.height(), grad.width());
    let neg: Vec<f64> = map_sum(grad).iter().map(|v| -v).collect();
    let back = avg.adjoint(&neg);
    let mut out = grad.clone();
    for m in 0..grad.maps() {
        out.map_mut(m)
            .iter_mut()
            .zip(&back)
            .for_each(|(v, b)| *v += b);
    }
    Ok(out)
}

/// Values recorded by the divisive step for its backward pass.
#[derive(Debug, Clone)]
pub struct DivisiveCache {
    input: Tensor3,
    sigma: Vec<f64>,
    divisor: Vec<f64>,
    floor: f64,
}

impl DivisiveCache {
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

pub fn divisive_norm(t: &Tensor3, cfg: &NormConfig) -> Result<Tensor3> {
    divisive_norm_cached(t, cfg).map(|(out, _)| out)
}

pub fn divisive_norm_cached(t: &Tensor3, cfg: &NormConfig) -> Result<(Tensor3, DivisiveCache)> {
    cfg.check(t)?;
    let avg = LocalAverage::new(cfg, t.maps(), t.height(), t.width());
    let mut sq = vec![0.0; t.plane_len()];
    for m in 0..t.maps() {
        sq.iter_mut().zip(t.map(m)).for_each(|(a, v)| *a += v * v);
    }
    let sigma: Vec<f64> = avg.apply(&sq).into_iter().map(|v| v.max(0.0).sqrt()).collect();
    let floor = match cfg.floor {
        FloorMode::MeanSigma => sigma.iter().sum::<f64>() / sigma.len() as f64,
        FloorMode::Constant(c) => c,
    };
    let divisor: Vec<f64> = sigma
        .iter()
        .map(|&s| s.max(floor).max(MIN_DIVISOR))
        .collect();
    let mut out = t.clone();
    for m in 0..t.maps() {
        out.map_mut(m)
            .iter_mut()
            .zip(&divisor)
            .for_each(|(v, d)| *v /= d);
    }
    Ok((
        out,
        DivisiveCache {
            input: t.clone(),
            sigma,
            divisor,
            floor,
        },
    ))
}

/// Backward of [`divisive_norm`]. The `max(σ, floor)` switch is held at the
/// branch taken in the forward pass; with the mean-σ floor the floor's own
/// dependence on the input is propagated.
pub fn divisive_norm_backward(
    cache: &DivisiveCache,
    grad: &Tensor3,
    cfg: &NormConfig,
) -> Result<Tensor3> {
    let t = &cache.input;
    if !grad.same_shape(t) {
        return dim_err("divisive backward: gradient shape mismatch");
    }
    let n = t.plane_len();
    let avg = LocalAverage::new(cfg, t.maps(), t.height(), t.width());
    let mut gd = vec![0.0; n];
    let mut gin = grad.clone();
    for m in 0..t.maps() {
        let x = t.map(m);
        let g = grad.map(m);
        for p in 0..n {
            let d = cache.divisor[p];
            gd[p] -= g[p] * x[p] / (d * d);
        }
        gin.map_mut(m)
            .iter_mut()
            .zip(&cache.divisor)
            .for_each(|(v, d)| *v /= d);
    }
    let mut gsigma = vec![0.0; n];
    let mut gfloor = 0.0;
    let floor_active = cache.floor >= MIN_DIVISOR;
    for p in 0..n {
        let s = cache.sigma[p];
        if s >= cache.floor && s >= MIN_DIVISOR {
            gsigma[p] = gd[p];
        } else if floor_active {
            gfloor += gd[p];
        }
    }
    if matches!(cfg.floor, FloorMode::MeanSigma) && gfloor != 0.0 {
        let share = gfloor / n as f64;
        gsigma.iter_mut().for_each(|g| *g += share);
    }
    let gvar: Vec<f64> = gsigma
        .iter()
        .zip(&cache.sigma)
        .map(|(g, &s)| if s > 0.0 { g / (2.0 * s) } else { 0.0 })
        .collect();
    let gsq = avg.adjoint(&gvar);
    for m in 0..t.maps() {
        let x = t.map(m).to_vec();
        gin.map_mut(m)
            .iter_mut()
            .zip(x.iter().zip(&gsq))
            .for_each(|(v, (xv, gq))| *v += 2.0 * xv * gq);
    }
    Ok(gin)
}

#[derive(Debug, Clone)]
pub struct NormCache {
    divisive: DivisiveCache,
}

/// Subtractive then divisive normalization, shape preserving.
pub fn local_cn(t: &Tensor3, cfg: &NormConfig) -> Result<Tensor3> {
    local_cn_cached(t, cfg).map(|(out, _)| out)
}

pub fn local_cn_cached(t: &Tensor3, cfg: &NormConfig) -> Result<(Tensor3, NormCache)> {
    let v = subtractive_norm(t, cfg)?;
    let (out, divisive) = divisive_norm_cached(&v, cfg)?;
    Ok((out, NormCache { divisive }))
}

pub fn local_cn_backward(cache: &NormCache, grad: &Tensor3, cfg: &NormConfig) -> Result<Tensor3> {
    let gv = divisive_norm_backward(&cache.divisive, grad, cfg)?;
    subtractive_norm_backward(&gv, cfg)
}

/// Valid-mode variant used for input preprocessing: the shape-preserving
/// result with a `(window − 1)/2` border cropped from each side.
pub fn local_cn_valid(t: &Tensor3, cfg: &NormConfig) -> Result<Tensor3> {
    let full = local_cn(t, cfg)?;
    let r = cfg.window / 2;
    full.crop(r, r, t.height() - 2 * r, t.width() - 2 * r)
}
