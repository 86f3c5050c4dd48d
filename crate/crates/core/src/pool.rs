//! Average, max and pyramid-average pooling.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn avg(window: usize, stride: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Avg,
            window,
            stride,
        }
    }

    pub fn max(window: usize, stride: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Max,
            window,
            stride,
        }
    }

    /// `floor((n − window) / stride) + 1`
    pub fn output_dim(&self, n: usize) -> Result<usize> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "pool stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        if self.window == 0 || self.window > n {
            return dim_err(format!("pool window {} larger than input {n}", self.window));
        }
        Ok((n - self.window) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidSpec {
    /// `(window, stride)` per level, concatenated in this order.
    pub levels: Vec<(usize, usize)>,
}

impl PyramidSpec {
    pub fn new(levels: Vec<(usize, usize)>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        Ok(PyramidSpec { levels })
    }

    fn level(&self, i: usize) -> PoolSpec {
        let (w, s) = self.levels[i];
        PoolSpec::avg(w, s)
    }

    /// Flattened feature length for `maps × h × w` input.
    pub fn output_len(&self, maps: usize, h: usize, w: usize) -> Result<usize> {
        let mut total = 0;
        for i in 0..self.levels.len() {
            let l = self.level(i);
            total += maps * l.output_dim(h)? * l.output_dim(w)?;
        }
        Ok(total)
    }
}

/// Argmax locations (flat indices into the input) for max pooling.
#[derive(Debug, Clone)]
pub struct PoolCache {
    in_shape: (usize, usize, usize),
    argmax: Vec<usize>,
}

pub fn pool(t: &Tensor3, spec: &PoolSpec) -> Result<Tensor3> {
    pool_cached(t, spec).map(|(out, _)| out)
}

pub fn pool_cached(t: &Tensor3, spec: &PoolSpec) -> Result<(Tensor3, PoolCache)> {
    let oh = spec.output_dim(t.height())?;
    let ow = spec.output_dim(t.width())?;
    let (maps, h, w) = t.shape();
    let (win, st) = (spec.window, spec.stride);
    let mut out = Tensor3::zeros(maps, oh, ow);
    let mut argmax = Vec::new();
    match spec.kind {
        PoolKind::Avg => {
            let inv = 1.0 / (win * win) as f64;
            for m in 0..maps {
                let src = t.map(m);
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..win {
                            let row = &src[(i * st + a) * w + j * st..(i * st + a) * w + j * st + win];
                            acc += row.iter().sum::<f64>();
                        }
                        out.set(m, i, j, acc * inv);
                    }
                }
            }
        }
        PoolKind::Max => {
            argmax.reserve(maps * oh * ow);
            for m in 0..maps {
                let src = t.map(m);
                let base = m * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        // first maximum in scan order wins ties
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for a in 0..win {
                            for b in 0..win {
                                let idx = (i * st + a) * w + j * st + b;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.set(m, i, j, best);
                        argmax.push(base + best_idx);
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            in_shape: (maps, h, w),
            argmax,
        },
    ))
}

pub fn pool_backward(cache: &PoolCache, grad: &Tensor3, spec: &PoolSpec) -> Result<Tensor3> {
    let (maps, h, w) = cache.in_shape;
    let oh = spec.output_dim(h)?;
    let ow = spec.output_dim(w)?;
    if grad.shape() != (maps, oh, ow) {
        return dim_err(format!(
            "pool backward: gradient {:?} vs output {:?}",
            grad.shape(),
            (maps, oh, ow)
        ));
    }
    let mut gin = Tensor3::zeros(maps, h, w);
    match spec.kind {
        PoolKind::Avg => {
            let (win, st) = (spec.window, spec.stride);
            let inv = 1.0 / (win * win) as f64;
            for m in 0..maps {
                let g = grad.map(m).to_vec();
                let dst = gin.map_mut(m);
                for i in 0..oh {
                    for j in 0..ow {
                        let v = g[i * ow + j] * inv;
                        for a in 0..win {
                            let row = &mut dst[(i * st + a) * w + j * st..(i * st + a) * w + j * st + win];
                            row.iter_mut().for_each(|r| *r += v);
                        }
                    }
                }
            }
        }
        PoolKind::Max => {
            let data = gin.data_mut();
            for (&idx, &g) in cache.argmax.iter().zip(grad.data()) {
                data[idx] += g;
            }
        }
    }
    Ok(gin)
}

pub fn pyramid_pool(t: &Tensor3, spec: &PyramidSpec) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.output_len(t.maps(), t.height(), t.width())?);
    for i in 0..spec.levels.len() {
        out.extend_from_slice(pool(t, &spec.level(i))?.data());
    }
    Ok(out)
}

pub fn pyramid_pool_backward(
    in_shape: (usize, usize, usize),
    grad: &[f64],
    spec: &PyramidSpec,
) -> Result<Tensor3> {
    let (maps, h, w) = in_shape;
    if grad.len() != spec.output_len(maps, h, w)? {
        return dim_err("pyramid backward: gradient length mismatch");
    }
    let mut gin = Tensor3::zeros(maps, h, w);
    let mut offset = 0;
    for i in 0..spec.levels.len() {
        let level = spec.level(i);
        let (oh, ow) = (level.output_dim(h)?, level.output_dim(w)?);
        let n = maps * oh * ow;
        let g = Tensor3::from_vec(maps, oh, ow, grad[offset..offset + n].to_vec())?;
        let cache = PoolCache {
            in_shape,
            argmax: Vec::new(),
        };
        gin.axpy(1.0, &pool_backward(&cache, &g, &level)?);
        offset += n;
    }
    Ok(gin)
}
