//! Two-layer embedding network with hand-written reverse mode.
//!
//! `descriptor = W2 · relu(W1 · flatten(img) + b1) + b2`, no output
//! normalization. Batches are processed as matrices so both passes reduce to
//! a handful of GEMMs.
//!
//! `flatten` is row-major and, for freshly initialized networks, subtracts the
//! image mean ([`Flatten::Centered`]). Without it the mean brightness, which
//! shifts freely between a scene and its crops, swamps every first-layer unit
//! and the norm never picks up how much detail an image carries.
//!
//! Checkpoint layout (little-endian): magic `ASLP`, `u32` version, `u32`
//! input height, `u32` input width, `u32` hidden, `u32` output dim, `u32`
//! classes, `u32` flatten mode (0 raw, 1 centered), then `f64` arrays in the
//! order W1 (row-major, hidden × input), b1, W2 (row-major, dim × hidden), b2,
//! proxies (row-major, classes × dim).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::synth::ToyImage;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASLP";
pub const CHECKPOINT_VERSION: u32 = 2;

/// How an image becomes an input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flatten {
    /// Pixels as stored.
    Raw,
    /// Pixels minus the image mean.
    Centered,
}

impl Flatten {
    fn code(self) -> u32 {
        match self {
            Flatten::Raw => 0,
            Flatten::Centered => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Flatten::Raw),
            1 => Some(Flatten::Centered),
            _ => None,
        }
    }

    fn extend_row(self, row: &mut Vec<f64>, pixels: &[f64]) {
        match self {
            Flatten::Raw => row.extend_from_slice(pixels),
            Flatten::Centered => {
                let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
                row.extend(pixels.iter().map(|p| p - mean));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
}

impl Dims {
    pub fn input(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub height: usize,
    pub width: usize,
    pub flatten: Flatten,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// One row per class, used only by the metric loss.
    pub proxies: Array2<f64>,
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub proxies: Array2<f64>,
}

impl Grads {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w1: Array2::zeros((dims.hidden, dims.input())),
            b1: Array1::zeros(dims.hidden),
            w2: Array2::zeros((dims.dim, dims.hidden)),
            b2: Array1::zeros(dims.dim),
            proxies: Array2::zeros((dims.classes, dims.dim)),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
        self.proxies *= s;
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
            self.proxies.view().into_dyn(),
        ]
        .iter()
        .flat_map(|a| a.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl EncoderParams {
    pub fn dims(&self) -> Dims {
        Dims {
            height: self.height,
            width: self.width,
            hidden: self.w1.nrows(),
            dim: self.w2.nrows(),
            classes: self.proxies.nrows(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
            && self.proxies.iter().all(|v| v.is_finite())
    }

    /// Every tensor, in checkpoint order, as mutable slices.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.proxies.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.proxies.as_slice().expect("standard layout"),
        ]
    }
}

impl Grads {
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.proxies.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.proxies.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Weights uniform in `±1/√fan_in`, zero biases, unit-norm proxy rows.
pub fn init_params(seed: u64, dims: Dims) -> EncoderParams {
    assert!(
        dims.input() > 0 && dims.hidden > 0 && dims.dim > 0 && dims.classes > 0,
        "dims must be positive: {dims:?}"
    );
    let mut rng = rng::stream(seed, domain::INIT, 0);
    let mut uniform = |rows: usize, cols: usize| {
        let bound = 1.0 / (cols as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
    };
    let w1 = uniform(dims.hidden, dims.input());
    let w2 = uniform(dims.dim, dims.hidden);
    let mut proxies = uniform(dims.classes, dims.dim);
    for mut row in proxies.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    EncoderParams {
        height: dims.height,
        width: dims.width,
        flatten: Flatten::Centered,
        w1,
        b1: Array1::zeros(dims.hidden),
        w2,
        b2: Array1::zeros(dims.dim),
        proxies,
    }
}

/// Activations recorded by a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    hidden: Array2<f64>,
    dims: Dims,
}

impl Tape {
    pub fn batch_len(&self) -> usize {
        self.input.nrows()
    }
}

/// Flattens images into the rows of an `n × (H·W)` matrix.
pub fn stack_images<'a>(
    images: impl IntoIterator<Item = &'a ToyImage>,
    dims: Dims,
    flatten: Flatten,
) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for img in images {
        check_image(img, dims)?;
        flatten.extend_row(&mut data, &img.pixels);
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, dims.input()), data).expect("row lengths checked"))
}

fn check_image(img: &ToyImage, dims: Dims) -> Result<()> {
    if img.height != dims.height || img.width != dims.width || img.pixels.len() != dims.input() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", dims.height, dims.width),
            found: format!("{}x{}", img.height, img.width),
        });
    }
    Ok(())
}

pub fn forward_batch(params: &EncoderParams, input: Array2<f64>) -> Result<(Array2<f64>, Tape)> {
    let dims = params.dims();
    if input.ncols() != dims.input() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} input columns", dims.input()),
            found: format!("{}", input.ncols()),
        });
    }
    let pre_activation = input.dot(&params.w1.t()) + &params.b1;
    let hidden = pre_activation.mapv(|v| v.max(0.0));
    let output = hidden.dot(&params.w2.t()) + &params.b2;
    Ok((
        output,
        Tape {
            input,
            pre_activation,
            hidden,
            dims,
        },
    ))
}

/// Gradients of `Σ_rows ⟨grad_output_row, descriptor_row⟩`. The proxy block of
/// the result is zero; the metric loss supplies it.
pub fn backward_batch(params: &EncoderParams, tape: &Tape, grad_output: ArrayView2<f64>) -> Result<Grads> {
    let dims = params.dims();
    if tape.dims != dims {
        return Err(Error::TapeMismatch(format!(
            "tape recorded for {:?}, params are {:?}",
            tape.dims, dims
        )));
    }
    if grad_output.dim() != (tape.batch_len(), dims.dim) {
        return Err(Error::TapeMismatch(format!(
            "grad_output is {:?}, expected ({}, {})",
            grad_output.dim(),
            tape.batch_len(),
            dims.dim
        )));
    }
    let w2 = grad_output.t().dot(&tape.hidden);
    let b2 = grad_output.sum_axis(Axis(0));
    let mut delta = grad_output.dot(&params.w2);
    ndarray::Zip::from(&mut delta)
        .and(&tape.pre_activation)
        .for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
    let w1 = delta.t().dot(&tape.input);
    let b1 = delta.sum_axis(Axis(0));
    Ok(Grads {
        w1: w1.as_standard_layout().into_owned(),
        b1,
        w2: w2.as_standard_layout().into_owned(),
        b2,
        proxies: Array2::zeros((dims.classes, dims.dim)),
    })
}

pub fn forward(params: &EncoderParams, img: &ToyImage) -> Result<(Vec<f64>, Tape)> {
    let x = stack_images([img], params.dims(), params.flatten)?;
    let (out, tape) = forward_batch(params, x)?;
    Ok((out.row(0).to_vec(), tape))
}

pub fn backward(params: &EncoderParams, tape: &Tape, grad_output: &[f64]) -> Result<Grads> {
    if tape.batch_len() != 1 {
        return Err(Error::TapeMismatch(format!(
            "single-image backward on a tape of {} rows",
            tape.batch_len()
        )));
    }
    let g = ArrayView1::from(grad_output);
    let g = g.insert_axis(Axis(0));
    backward_batch(params, tape, g)
}

/// Forward-only embedding of many images, in chunks.
pub fn embed(params: &EncoderParams, images: &[&ToyImage]) -> Result<Array2<f64>> {
    const CHUNK: usize = 256;
    let dims = params.dims();
    let mut out = Array2::zeros((images.len(), dims.dim));
    for (c, chunk) in images.chunks(CHUNK).enumerate() {
        let x = stack_images(chunk.iter().copied(), dims, params.flatten)?;
        let (y, _) = forward_batch(params, x)?;
        out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), ..])
            .assign(&y);
    }
    Ok(out)
}

pub fn encode_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let d = params.dims();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        d.height as u32,
        d.width as u32,
        d.hidden as u32,
        d.dim as u32,
        d.classes as u32,
        params.flatten.code(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    const HEADER: usize = 32;
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            offset: 0,
            needed: (4 - bytes.len()) as u64,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER {
        return Err(Error::TruncatedFile {
            offset: bytes.len() as u64,
            needed: (HEADER - bytes.len()) as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            offset: 4,
            expected: CHECKPOINT_VERSION,
            found: word(0),
        });
    }
    let dims = Dims {
        height: word(1) as usize,
        width: word(2) as usize,
        hidden: word(3) as usize,
        dim: word(4) as usize,
        classes: word(5) as usize,
    };
    let flatten = Flatten::from_code(word(6)).ok_or(Error::UnknownFlatten {
        offset: 28,
        found: word(6),
    })?;
    let mut params = EncoderParams {
        height: dims.height,
        width: dims.width,
        flatten,
        w1: Array2::zeros((dims.hidden, dims.input())),
        b1: Array1::zeros(dims.hidden),
        w2: Array2::zeros((dims.dim, dims.hidden)),
        b2: Array1::zeros(dims.dim),
        proxies: Array2::zeros((dims.classes, dims.dim)),
    };
    let total: usize = params.tensors().iter().map(|t| t.len()).sum();
    let expected_len = HEADER + 8 * total;
    if bytes.len() < expected_len {
        return Err(Error::TruncatedFile {
            offset: bytes.len() as u64,
            needed: (expected_len - bytes.len()) as u64,
        });
    }
    if bytes.len() > expected_len {
        return Err(Error::DimensionMismatch {
            offset: expected_len as u64,
            expected: expected_len,
            found: bytes.len(),
        });
    }
    let mut values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::ImageId;
    use ndarray::array;
    use rand::SeedableRng;

    fn small_dims() -> Dims {
        Dims {
            height: 3,
            width: 4,
            hidden: 5,
            dim: 3,
            classes: 2,
        }
    }

    fn random_image(seed: u64, dims: Dims) -> ToyImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ToyImage {
            id: ImageId(seed),
            height: dims.height,
            width: dims.width,
            pixels: (0..dims.input()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    /// Perturbs biases so that no pre-activation sits near the ReLU kink.
    fn random_params(seed: u64, dims: Dims) -> EncoderParams {
        let mut p = init_params(seed, dims);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        p.b1.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        p.b2.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        p
    }

    #[test]
    fn init_is_seeded_with_zero_biases_and_unit_proxies() {
        let dims = Dims {
            height: 8,
            width: 8,
            hidden: 16,
            dim: 4,
            classes: 5,
        };
        let a = init_params(3, dims);
        assert_eq!(a, init_params(3, dims));
        assert_ne!(a, init_params(4, dims));
        assert!(a.b1.iter().chain(a.b2.iter()).all(|&v| v == 0.0));
        for row in a.proxies.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let bound = 1.0 / 8.0;
        assert!(a.w1.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_weights_give_zero_descriptor() {
        let dims = small_dims();
        let mut p = init_params(1, dims);
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        let (y, _) = forward(&p, &random_image(1, dims)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_pixel_network_by_hand() {
        let p = EncoderParams {
            height: 1,
            width: 1,
            flatten: Flatten::Raw,
            w1: array![[2.0]],
            b1: array![0.0],
            w2: array![[3.0]],
            b2: array![1.0],
            proxies: array![[1.0]],
        };
        let img = ToyImage::filled(ImageId(0), 1, 1, 0.5);
        let (y, _) = forward(&p, &img).unwrap();
        assert_eq!(y, vec![4.0]);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let p = init_params(1, small_dims());
        let img = ToyImage::filled(ImageId(0), 4, 4, 0.5);
        assert!(matches!(forward(&p, &img), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let dims = small_dims();
        let p = random_params(2, dims);
        let img = random_image(2, dims);
        let (a, _) = forward(&p, &img).unwrap();
        let (b, _) = forward(&p, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let dims = small_dims();
        let p = random_params(5, dims);
        let (_, tape) = forward(&p, &random_image(5, dims)).unwrap();
        let g = backward(&p, &tape, &[0.0; 3]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let dims = small_dims();
        let p = random_params(6, dims);
        let (_, tape) = forward(&p, &random_image(6, dims)).unwrap();
        let g1 = backward(&p, &tape, &[0.3, -1.1, 0.7]).unwrap();
        let g2 = backward(&p, &tape, &[0.6, -2.2, 1.4]).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let p = random_params(6, small_dims());
        let (_, tape) = forward(&p, &random_image(6, small_dims())).unwrap();
        assert!(matches!(backward(&p, &tape, &[1.0; 2]), Err(Error::TapeMismatch(_))));
        let other = init_params(
            1,
            Dims {
                hidden: 7,
                ..small_dims()
            },
        );
        assert!(matches!(
            backward(&other, &tape, &[1.0; 3]),
            Err(Error::TapeMismatch(_))
        ));
    }

    #[test]
    fn batch_matches_single_image_passes() {
        let dims = small_dims();
        let p = random_params(8, dims);
        let imgs: Vec<ToyImage> = (0..4).map(|i| random_image(20 + i, dims)).collect();
        let x = stack_images(&imgs, dims, p.flatten).unwrap();
        let (y, tape) = forward_batch(&p, x).unwrap();
        let g = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * (j as f64 + 0.5));
        let batch = backward_batch(&p, &tape, g.view()).unwrap();
        let mut summed = Grads::zeros(dims);
        for (i, img) in imgs.iter().enumerate() {
            let (yi, t) = forward(&p, img).unwrap();
            for (a, b) in yi.iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
            let gi = backward(&p, &t, g.row(i).as_slice().unwrap()).unwrap();
            for (acc, part) in summed.tensors_mut().into_iter().zip(gi.tensors()) {
                for (a, b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }
        for (a, b) in summed.tensors().iter().zip(batch.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = random_params(9, small_dims());
        let bytes = encode_checkpoint(&p);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 8]),
            Err(Error::TruncatedFile { needed: 8, .. })
        ));
    }

    #[test]
    fn checkpoint_keeps_flatten_mode() {
        let mut p = random_params(10, small_dims());
        for mode in [Flatten::Raw, Flatten::Centered] {
            p.flatten = mode;
            let bytes = encode_checkpoint(&p);
            assert_eq!(bytes[28..32], mode.code().to_le_bytes());
            assert_eq!(decode_checkpoint(&bytes).unwrap().flatten, mode);
        }
        let mut bad = encode_checkpoint(&p);
        bad[28..32].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::UnknownFlatten { offset: 28, found: 7 })
        ));
    }

    #[test]
    fn centered_input_ignores_a_uniform_shift() {
        let dims = small_dims();
        let p = random_params(11, dims);
        assert_eq!(p.flatten, Flatten::Centered);
        let a = random_image(30, dims);
        let shifted = ToyImage {
            pixels: a.pixels.iter().map(|v| v + 0.25).collect(),
            ..a.clone()
        };
        let (ya, _) = forward(&p, &a).unwrap();
        let (yb, _) = forward(&p, &shifted).unwrap();
        for (x, y) in ya.iter().zip(&yb) {
            assert!((x - y).abs() < 1e-12);
        }
        let raw = EncoderParams {
            flatten: Flatten::Raw,
            ..p
        };
        assert_ne!(forward(&raw, &a).unwrap().0, forward(&raw, &shifted).unwrap().0);
    }
}
