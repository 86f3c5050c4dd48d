//! Dense feature-map stacks and valid-mode cross-correlation.
//!
//! Every signal in the pipeline is a [`Tensor3`]: a stack of `maps` planes of
//! `height × width` scalars stored map-major, row-major. Filters live in a
//! [`KernelBank`], a sparse set of `k × k` kernels indexed by
//! `(out_map, in_map)` pairs drawn from a [`ConnectionTable`].
//!
//! The "convolution" here is cross-correlation (kernels are not flipped).

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

pub const TENSOR_MAGIC: [u8; 2] = *b"T3";
pub const DTYPE_F64: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    maps: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(maps: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            maps,
            height,
            width,
            data: vec![0.0; maps * height * width],
        }
    }

    pub fn filled(maps: usize, height: usize, width: usize, value: f64) -> Self {
        Tensor3 {
            maps,
            height,
            width,
            data: vec![value; maps * height * width],
        }
    }

    pub fn from_vec(maps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != maps * height * width {
            return dim_err(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                maps,
                height,
                width
            ));
        }
        Ok(Tensor3 {
            maps,
            height,
            width,
            data,
        })
    }

    pub fn random_normal<R: Rng + ?Sized>(
        maps: usize,
        height: usize,
        width: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..maps * height * width)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Tensor3 {
            maps,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn maps(&self) -> usize {
        self.maps
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.maps, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.data[(m * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, m: usize, i: usize, j: usize, v: f64) {
        self.data[(m * self.height + i) * self.width + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, m: usize, i: usize, j: usize, v: f64) {
        self.data[(m * self.height + i) * self.width + j] += v;
    }

    pub fn map(&self, m: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn map_mut(&mut self, m: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[m * n..(m + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `size × size` window with top-left corner `(i, j)` from every map.
    pub fn crop(&self, i: usize, j: usize, height: usize, width: usize) -> Result<Tensor3> {
        if i + height > self.height || j + width > self.width {
            return dim_err(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                height, width, i, j, self.height, self.width
            ));
        }
        let mut out = Tensor3::zeros(self.maps, height, width);
        for m in 0..self.maps {
            for r in 0..height {
                let src = &self.map(m)[(i + r) * self.width + j..(i + r) * self.width + j + width];
                out.map_mut(m)[r * width..(r + 1) * width].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Keeps only the listed maps, in the listed order.
    pub fn select_maps(&self, maps: &[usize]) -> Tensor3 {
        let mut data = Vec::with_capacity(maps.len() * self.plane_len());
        for &m in maps {
            data.extend_from_slice(self.map(m));
        }
        Tensor3 {
            maps: maps.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// 16-byte header (magic, dtype code, three `u32` dims) followed by
    /// little-endian `f64` values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&DTYPE_F64.to_le_bytes())?;
        for d in [self.maps, self.height, self.width] {
            let d = u32::try_from(d).map_err(|_| Error::Dimension("dim exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor3> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[0..2] != TENSOR_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad tensor magic".into(),
            });
        }
        let dtype = u16::from_le_bytes([header[2], header[3]]);
        if dtype != DTYPE_F64 {
            return Err(Error::Format {
                offset: 2,
                msg: format!("unsupported dtype code {dtype}"),
            });
        }
        let dim = |o: usize| {
            u32::from_le_bytes([header[o], header[o + 1], header[o + 2], header[o + 3]]) as usize
        };
        let (maps, height, width) = (dim(4), dim(8), dim(12));
        let n = maps * height * width;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::Format {
            offset: 16,
            msg: format!("expected {n} values"),
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor3 {
            maps,
            height,
            width,
            data,
        })
    }
}

/// Which input maps feed which output maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionTable {
    n_in: usize,
    n_out: usize,
    /// `(in_map, out_map)`, sorted by output then input.
    entries: Vec<(usize, usize)>,
}

impl ConnectionTable {
    pub fn new(n_in: usize, n_out: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_by_key(|&(i, o)| (o, i));
        let mut seen = BTreeSet::new();
        for &(i, o) in &entries {
            if i >= n_in || o >= n_out {
                return Err(Error::Config(format!(
                    "connection ({i} -> {o}) out of range for {n_in} -> {n_out}"
                )));
            }
            if !seen.insert((i, o)) {
                return Err(Error::Config(format!("duplicate connection ({i} -> {o})")));
            }
        }
        Ok(ConnectionTable {
            n_in,
            n_out,
            entries,
        })
    }

    pub fn full(n_in: usize, n_out: usize) -> Self {
        let entries = (0..n_out)
            .flat_map(|o| (0..n_in).map(move |i| (i, o)))
            .collect();
        ConnectionTable {
            n_in,
            n_out,
            entries,
        }
    }

    /// Each output map draws `fan_in` distinct inputs uniformly at random.
    pub fn random<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_in > n_in {
            return Err(Error::Config(format!(
                "fan-in {fan_in} invalid for {n_in} input maps"
            )));
        }
        let mut entries = Vec::with_capacity(n_out * fan_in);
        for o in 0..n_out {
            let mut picked = sample(rng, n_in, fan_in).into_vec();
            picked.sort_unstable();
            entries.extend(picked.into_iter().map(|i| (i, o)));
        }
        ConnectionTable::new(n_in, n_out, entries)
    }

    /// Three-channel luminance/chrominance table: map 0 feeds every output,
    /// maps 1 and 2 each feed `chroma_fanout` randomly chosen outputs.
    pub fn luma_chroma<R: Rng + ?Sized>(
        n_out: usize,
        chroma_fanout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if chroma_fanout > n_out {
            return Err(Error::Config(format!(
                "chroma fan-out {chroma_fanout} exceeds {n_out} outputs"
            )));
        }
        let mut entries: Vec<(usize, usize)> = (0..n_out).map(|o| (0, o)).collect();
        for ch in 1..3 {
            entries.extend(
                sample(rng, n_out, chroma_fanout)
                    .into_iter()
                    .map(|o| (ch, o)),
            );
        }
        ConnectionTable::new(3, n_out, entries)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fan_in(&self, out_map: usize) -> usize {
        self.entries.iter().filter(|&&(_, o)| o == out_map).count()
    }

    pub fn inputs_of(&self, out_map: usize) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|&&(_, o)| o == out_map)
            .map(|&(i, _)| i)
            .collect()
    }
}

/// `k × k` kernels, one per connection, stored contiguously in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    table: ConnectionTable,
    k: usize,
    weights: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(table: ConnectionTable, k: usize) -> Self {
        let weights = vec![0.0; table.len() * k * k];
        KernelBank { table, k, weights }
    }

    pub fn from_weights(table: ConnectionTable, k: usize, weights: Vec<f64>) -> Result<Self> {
        if k == 0 || weights.len() != table.len() * k * k {
            return dim_err(format!(
                "{} weights for {} kernels of size {k}",
                weights.len(),
                table.len()
            ));
        }
        Ok(KernelBank { table, k, weights })
    }

    /// Gaussian(0, 1) entries, then each output map's kernel stack scaled to unit norm.
    pub fn random_normalized<R: Rng + ?Sized>(table: ConnectionTable, k: usize, rng: &mut R) -> Self {
        let weights = (0..table.len() * k * k)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut bank = KernelBank { table, k, weights };
        bank.normalize_atoms();
        bank
    }

    pub fn table(&self) -> &ConnectionTable {
        &self.table
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_in(&self) -> usize {
        self.table.n_in
    }

    pub fn n_out(&self) -> usize {
        self.table.n_out
    }

    pub fn n_kernels(&self) -> usize {
        self.table.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn kernel(&self, idx: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.weights[idx * kk..(idx + 1) * kk]
    }

    pub fn kernel_mut(&mut self, idx: usize) -> &mut [f64] {
        let kk = self.k * self.k;
        &mut self.weights[idx * kk..(idx + 1) * kk]
    }

    /// Indices of the kernels feeding `out_map`.
    pub fn kernels_of(&self, out_map: usize) -> impl Iterator<Item = usize> + '_ {
        self.table
            .entries
            .iter()
            .enumerate()
            .filter(move |(_, &(_, o))| o == out_map)
            .map(|(idx, _)| idx)
    }

    /// L2 norm of all kernels attached to each output map.
    pub fn atom_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.n_out()];
        for (idx, &(_, o)) in self.table.entries.iter().enumerate() {
            sq[o] += self.kernel(idx).iter().map(|v| v * v).sum::<f64>();
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Rescales each output map's kernel stack to unit L2 norm. Zero atoms are left alone.
    pub fn normalize_atoms(&mut self) {
        let norms = self.atom_norms();
        let entries = self.table.entries.clone();
        for (idx, &(_, o)) in entries.iter().enumerate() {
            if norms[o] > 0.0 {
                let inv = 1.0 / norms[o];
                self.kernel_mut(idx).iter_mut().for_each(|v| *v *= inv);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &KernelBank) -> bool {
        self.k == other.k && self.table == other.table
    }
}

fn check_bank(input: &Tensor3, bank: &KernelBank, n_out: usize) -> Result<(usize, usize)> {
    let k = bank.k;
    if k > input.height || k > input.width {
        return dim_err(format!(
            "kernel {k}x{k} larger than input {}x{}",
            input.height, input.width
        ));
    }
    if bank.n_in() != input.maps {
        return Err(Error::Config(format!(
            "bank expects {} input maps, got {}",
            bank.n_in(),
            input.maps
        )));
    }
    if bank.n_out() != n_out {
        return Err(Error::Config(format!(
            "bank has {} output maps, requested {n_out}",
            bank.n_out()
        )));
    }
    Ok((input.height - k + 1, input.width - k + 1))
}

/// Valid-mode cross-correlation: `out[p] = Σ_{q→p} W_pq ⋆ x[q]`.
pub fn correlate_valid(input: &Tensor3, bank: &KernelBank, n_out: usize) -> Result<Tensor3> {
    let (oh, ow) = check_bank(input, bank, n_out)?;
    let k = bank.k;
    let iw = input.width;
    let mut out = Tensor3::zeros(n_out, oh, ow);
    for (idx, &(q, p)) in bank.table.entries.iter().enumerate() {
        let kernel = bank.kernel(idx);
        let src = input.map(q);
        let dst = out.map_mut(p);
        if ow < k {
            // narrow outputs (patch training): kernel rows innermost
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..k {
                        let s = &src[(i + a) * iw + j..(i + a) * iw + j + k];
                        acc += kernel[a * k..(a + 1) * k].iter().zip(s).map(|(w, x)| w * x).sum::<f64>();
                    }
                    dst[i * ow + j] += acc;
                }
            }
            continue;
        }
        for a in 0..k {
            for b in 0..k {
                let w = kernel[a * k + b];
                if w == 0.0 {
                    continue;
                }
                for i in 0..oh {
                    let s = &src[(i + a) * iw + b..(i + a) * iw + b + ow];
                    let d = &mut dst[i * ow..(i + 1) * ow];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += w * sv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`correlate_valid`] with respect to its input (a "full"
/// convolution of `grad_out` with the kernels).
pub fn correlate_adjoint(
    grad_out: &Tensor3,
    bank: &KernelBank,
    in_height: usize,
    in_width: usize,
) -> Result<Tensor3> {
    let k = bank.k;
    if in_height + 1 < k || in_width + 1 < k {
        return dim_err("input smaller than kernel");
    }
    let (oh, ow) = (in_height + 1 - k, in_width + 1 - k);
    if grad_out.shape() != (bank.n_out(), oh, ow) {
        return dim_err(format!(
            "grad shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            (bank.n_out(), oh, ow)
        ));
    }
    let mut gin = Tensor3::zeros(bank.n_in(), in_height, in_width);
    for (idx, &(q, p)) in bank.table.entries.iter().enumerate() {
        let kernel = bank.kernel(idx);
        let g = grad_out.map(p);
        let dst = gin.map_mut(q);
        if ow < k {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = g[i * ow + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        let d = &mut dst[(i + a) * in_width + j..(i + a) * in_width + j + k];
                        for (dv, w) in d.iter_mut().zip(&kernel[a * k..(a + 1) * k]) {
                            *dv += gv * w;
                        }
                    }
                }
            }
            continue;
        }
        for a in 0..k {
            for b in 0..k {
                let w = kernel[a * k + b];
                if w == 0.0 {
                    continue;
                }
                for i in 0..oh {
                    let gs = &g[i * ow..(i + 1) * ow];
                    let d = &mut dst[(i + a) * in_width + b..(i + a) * in_width + b + ow];
                    for (dv, gv) in d.iter_mut().zip(gs) {
                        *dv += w * gv;
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Gradient of `⟨correlate_valid(input, W), grad_out⟩` with respect to the kernels.
pub fn correlate_kernel_grad(
    input: &Tensor3,
    bank: &KernelBank,
    grad_out: &Tensor3,
) -> Result<KernelBank> {
    let (oh, ow) = check_bank(input, bank, bank.n_out())?;
    if grad_out.shape() != (bank.n_out(), oh, ow) {
        return dim_err(format!(
            "grad shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            (bank.n_out(), oh, ow)
        ));
    }
    let k = bank.k;
    let iw = input.width;
    let mut gk = KernelBank::zeros(bank.table.clone(), k);
    for (idx, &(q, p)) in bank.table.entries.iter().enumerate() {
        let src = input.map(q);
        let g = grad_out.map(p);
        let kernel = gk.kernel_mut(idx);
        if ow < k {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = g[i * ow + j];
                    for a in 0..k {
                        let s = &src[(i + a) * iw + j..(i + a) * iw + j + k];
                        for (kv, x) in kernel[a * k..(a + 1) * k].iter_mut().zip(s) {
                            *kv += gv * x;
                        }
                    }
                }
            }
            continue;
        }
        for a in 0..k {
            for b in 0..k {
                let mut acc = 0.0;
                for i in 0..oh {
                    let s = &src[(i + a) * iw + b..(i + a) * iw + b + ow];
                    let gs = &g[i * ow..(i + 1) * ow];
                    acc += s.iter().zip(gs).map(|(x, y)| x * y).sum::<f64>();
                }
                kernel[a * k + b] = acc;
            }
        }
    }
    Ok(gk)
}

/// Both adjoints of [`correlate_valid`].
pub fn correlate_grad(
    input: &Tensor3,
    bank: &KernelBank,
    grad_out: &Tensor3,
) -> Result<(Tensor3, KernelBank)> {
    let gk = correlate_kernel_grad(input, bank, grad_out)?;
    let gi = correlate_adjoint(grad_out, bank, input.height, input.width)?;
    Ok((gi, gk))
}
