//! MLP embedding head, dictionary pooling, cosine similarity and their
//! reverse-mode gradients.
//!
//! Rows are samples throughout: a batch of inputs is an `n x d` matrix and
//! weights are stored `out x in`, so a layer computes `X W^T + b`.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;
use rand::Rng;

use crate::corpus::{Corpus, FeatureSeries};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Input, hidden (skip), hidden, output widths.
pub const MODEL_DIMS: [usize; 4] = [1024, 1024, 512, 256];
pub const EMBED_DIM: usize = 256;

pub const MODEL_MAGIC: [u8; 4] = *b"WRLM";
pub const MODEL_VERSION: u32 = 1;

pub trait Scalar: LinalgScalar + ScalarOperand + Float + Send + Sync + std::fmt::Debug {}
impl<T: LinalgScalar + ScalarOperand + Float + Send + Sync + std::fmt::Debug> Scalar for T {}

fn c<F: Scalar>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

#[inline]
fn lrelu<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        z
    } else {
        z * c(LEAKY_SLOPE)
    }
}

#[inline]
fn lrelu_grad<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one()
    } else {
        c(LEAKY_SLOPE)
    }
}

/// Parameters of the head; the same shape doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F = f32> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub w3: Array2<F>,
    pub b3: Array1<F>,
}

pub type ModelParams = Mlp<f32>;

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    x: Array2<F>,
    z1: Array2<F>,
    h1: Array2<F>,
    z2: Array2<F>,
    h2: Array2<F>,
}

impl<F> ForwardCache<F> {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    /// Layer pre-activations, for kink detection in gradient checks.
    pub fn pre_activations(&self) -> (&Array2<F>, &Array2<F>) {
        (&self.z1, &self.z2)
    }
}

impl<F: Scalar> Mlp<F> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        assert_eq!(dims[0], dims[1], "skip connection needs equal widths");
        Self {
            w1: Array2::zeros((dims[1], dims[0])),
            b1: Array1::zeros(dims[1]),
            w2: Array2::zeros((dims[2], dims[1])),
            b2: Array1::zeros(dims[2]),
            w3: Array2::zeros((dims[3], dims[2])),
            b3: Array1::zeros(dims[3]),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Self {
        let mut m = Self::zeros(dims);
        for (w, b) in [(&mut m.w1, &mut m.b1), (&mut m.w2, &mut m.b2), (&mut m.w3, &mut m.b3)] {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| c(rng.random_range(-bound..=bound)));
            b.mapv_inplace(|_| c(rng.random_range(-bound..=bound)));
        }
        m
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.w1.ncols(), self.w1.nrows(), self.w2.nrows(), self.w3.nrows()]
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w3.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter blocks in file order: W1, b1, W2, b2, W3, b3.
    pub fn slices(&self) -> [&[F]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        let f = |x: &F| G::from(*x).expect("castable");
        Mlp {
            w1: self.w1.map(f),
            b1: self.b1.map(f),
            w2: self.w2.map(f),
            b2: self.b2.map(f),
            w3: self.w3.map(f),
            b3: self.b3.map(f),
        }
    }

    /// `self += alpha * other`, block by block.
    pub fn scaled_add(&mut self, alpha: F, other: &Mlp<F>) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + alpha * *s;
            }
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x = *x * alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn forward_cached(&self, x: Array2<F>) -> (Array2<F>, ForwardCache<F>) {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let z1 = x.dot(&self.w1.t()) + &self.b1;
        let mut h1 = z1.mapv(lrelu);
        Zip::from(&mut h1).and(&x).for_each(|h, &xi| *h = *h + xi);
        let z2 = h1.dot(&self.w2.t()) + &self.b2;
        let h2 = z2.mapv(lrelu);
        let out = h2.dot(&self.w3.t()) + &self.b3;
        (out, ForwardCache { x, z1, h1, z2, h2 })
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        self.forward_cached(x.to_owned()).0
    }

    pub fn embed(&self, x: &[F]) -> Array1<F> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(x).row(0).to_owned()
    }

    /// Gradients of a scalar objective given `d_out = dL/d(output)`.
    /// The input gradient is only formed when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_out: ArrayView2<F>,
        want_input_grad: bool,
    ) -> (Mlp<F>, Option<Array2<F>>) {
        assert_eq!(d_out.dim(), (cache.rows(), self.output_dim()), "upstream gradient shape");
        let w3 = d_out.t().dot(&cache.h2);
        let b3 = d_out.sum_axis(Axis(0));
        let mut d_z2 = d_out.dot(&self.w3);
        Zip::from(&mut d_z2).and(&cache.z2).for_each(|g, &z| *g = *g * lrelu_grad(z));
        let w2 = d_z2.t().dot(&cache.h1);
        let b2 = d_z2.sum_axis(Axis(0));
        let d_h1 = d_z2.dot(&self.w2);
        let mut d_z1 = d_h1.clone();
        Zip::from(&mut d_z1).and(&cache.z1).for_each(|g, &z| *g = *g * lrelu_grad(z));
        let w1 = d_z1.t().dot(&cache.x);
        let b1 = d_z1.sum_axis(Axis(0));
        let d_x = want_input_grad.then(|| d_z1.dot(&self.w1) + &d_h1);
        (Mlp { w1, b1, w2, b2, w3, b3 }, d_x)
    }
}

/// Mean of the subclip vectors of one dictionary variant.
pub fn pool_dictionary(variant: &FeatureSeries) -> Vec<f32> {
    let mut acc = vec![0f64; variant.dim()];
    for r in 0..variant.rows() {
        for (a, &x) in acc.iter_mut().zip(variant.row(r)) {
            *a += f64::from(x);
        }
    }
    let n = variant.rows() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Pooled input vector of every dictionary variant, indexed by word id then
/// variant; words without an entry get an empty list.
pub fn pooled_dictionary(corpus: &Corpus) -> Vec<Vec<Vec<f32>>> {
    let mut out = vec![Vec::new(); corpus.vocabulary().len()];
    for entry in corpus.dictionary() {
        out[entry.word.index()] = entry.variants.iter().map(pool_dictionary).collect();
    }
    out
}

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations that met a zero-norm input.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

fn note_zero_norm() {
    ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
}

fn norm<F: Scalar>(a: &[F]) -> F {
    a.iter().fold(F::zero(), |s, &x| s + x * x).sqrt()
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> F {
    assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    if na == F::zero() || nb == F::zero() {
        note_zero_norm();
        return F::zero();
    }
    let dot = a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y);
    (dot / (na * nb)).max(-F::one()).min(F::one())
}

/// `d cos(a, b) / d a = (b_hat - cos * a_hat) / |a|`; zero for a zero-norm side.
pub fn cosine_grad<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    let (na, nb) = (norm(a), norm(b));
    if na == F::zero() || nb == F::zero() {
        return vec![F::zero(); a.len()];
    }
    let dot = a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y);
    let cos = dot / (na * nb);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (y / nb - cos * x / na) / na)
        .collect()
}

/// Row-normalized copy of `x` plus the row norms. Zero rows stay zero.
pub struct Normalized<F> {
    pub unit: Array2<F>,
    pub norms: Array1<F>,
}

pub fn normalize_rows<F: Scalar>(x: &Array2<F>) -> Normalized<F> {
    let norms: Array1<F> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut unit = x.clone();
    for (mut row, &n) in unit.rows_mut().into_iter().zip(&norms) {
        if n == F::zero() {
            note_zero_norm();
        } else {
            row.mapv_inplace(|v| v / n);
        }
    }
    Normalized { unit, norms }
}

/// Backpropagates `d_unit = dL/d(unit rows)` through the normalization.
pub fn normalize_rows_backward<F: Scalar>(n: &Normalized<F>, d_unit: &Array2<F>) -> Array2<F> {
    let mut out = d_unit.clone();
    for ((mut g, u), &len) in out.rows_mut().into_iter().zip(n.unit.rows()).zip(&n.norms) {
        if len == F::zero() {
            g.fill(F::zero());
            continue;
        }
        let proj = g.dot(&u);
        Zip::from(&mut g).and(&u).for_each(|gi, &ui| *gi = (*gi - proj * ui) / len);
    }
    out
}

/// Writes parameters in the `WRLM` layout.
pub fn write_model(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 4 * params.num_params());
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for d in params.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for block in params.slices() {
        for x in block {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(path, &bytes)
}

fn decode_model(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    let truncated = |expected| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 24 {
        return Err(truncated(24));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = u32_at(4);
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let dims = [u32_at(8), u32_at(12), u32_at(16), u32_at(20)].map(|d| d as usize);
    if dims.contains(&0) || dims[0] != dims[1] {
        return Err(Error::Contract(format!("{}: invalid model dims {dims:?}", path.display())));
    }
    let mut params = ModelParams::zeros(dims);
    let expected = 24 + 4 * params.num_params();
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let mut floats = bytes[24..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for (block_idx, block) in params.slices_mut().into_iter().enumerate() {
        for (i, x) in block.iter_mut().enumerate() {
            *x = floats.next().unwrap();
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    row: block_idx,
                    col: i,
                });
            }
        }
    }
    Ok(params)
}
