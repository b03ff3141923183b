//! Architectural contract of the detector network and a naive reference
//! forward pass.
//!
//! The network is a 1x1 stem convolution to the trunk width followed by a
//! stack of residual blocks. Every block runs entry -> middle -> exit
//! convolutions (ReLU between them) on its residual branch. Intermediate
//! blocks add the branch to their input and apply ReLU; the last block maps
//! to the prediction channels, adds a 1x1 projection of its input and applies
//! no activation. No layer has stride or pooling.

use rand::Rng;
use rayon::prelude::*;

use crate::codec::{AnchorLayout, AnchorMap, PredictionMap};
use crate::error::{Error, Result};
use crate::range_image::NetworkInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Columns wrap around (full 360 degree sweeps); rows are zero padded.
    Circular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub trunk_channels: usize,
    /// Width inside each residual branch.
    pub branch_channels: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// (rows, cols) kernels of the three branch convolutions.
    pub entry_kernel: (usize, usize),
    pub middle_kernel: (usize, usize),
    pub exit_kernel: (usize, usize),
    pub padding: Padding,
    /// Disabling makes the network affine in its input.
    pub activations: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 32,
            trunk_channels: 64,
            branch_channels: 64,
            input_channels: 1,
            output_channels: AnchorLayout::TOTAL_CHANNELS,
            entry_kernel: (1, 1),
            middle_kernel: (1, 7),
            exit_kernel: (1, 1),
            padding: Padding::Zero,
            activations: true,
        }
    }
}

/// (out, in, kernel rows, kernel cols)
pub type LayerShape = (usize, usize, usize, usize);

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::InvalidInput("model needs at least one block".into()));
        }
        if self.trunk_channels == 0 || self.branch_channels == 0 || self.input_channels == 0 {
            return Err(Error::InvalidInput("channel counts must be positive".into()));
        }
        if self.output_channels != AnchorLayout::TOTAL_CHANNELS {
            return Err(Error::InvalidInput(format!(
                "output_channels {} != {}",
                self.output_channels,
                AnchorLayout::TOTAL_CHANNELS
            )));
        }
        for (kh, kw) in [self.entry_kernel, self.middle_kernel, self.exit_kernel] {
            if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::InvalidInput(format!(
                    "kernel {kh}x{kw} must have odd, positive extents"
                )));
            }
        }
        Ok(())
    }

    /// Layer shapes in storage order: stem, blocks (entry, middle, exit), projection.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let (t, b) = (self.trunk_channels, self.branch_channels);
        let mut shapes = vec![(t, self.input_channels, 1, 1)];
        for i in 0..self.n_blocks {
            let out = if i + 1 == self.n_blocks {
                self.output_channels
            } else {
                t
            };
            shapes.push((b, t, self.entry_kernel.0, self.entry_kernel.1));
            shapes.push((b, b, self.middle_kernel.0, self.middle_kernel.1));
            shapes.push((out, b, self.exit_kernel.0, self.exit_kernel.1));
        }
        shapes.push((self.output_channels, t, 1, 1));
        shapes
    }
}

pub fn output_shape(rows: usize, cols: usize, config: &ModelConfig) -> Result<(usize, usize, usize)> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput(format!("input {rows}x{cols}")));
    }
    config.validate()?;
    Ok((rows, cols, config.output_channels))
}

/// Receptive field (rows, cols) of one output pixel.
pub fn receptive_field(config: &ModelConfig) -> (usize, usize) {
    let per_block = |dim: fn((usize, usize)) -> usize| {
        dim(config.entry_kernel) + dim(config.middle_kernel) + dim(config.exit_kernel) - 3
    };
    (
        1 + config.n_blocks * per_block(|k| k.0),
        1 + config.n_blocks * per_block(|k| k.1),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    /// Indexed [out][in][kernel row][kernel col].
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn zeros(shape: LayerShape) -> Self {
        let (o, i, kh, kw) = shape;
        Self {
            out_channels: o,
            in_channels: i,
            kernel_rows: kh,
            kernel_cols: kw,
            weights: vec![0.0; o * i * kh * kw],
            bias: vec![0.0; o],
        }
    }

    pub fn random<R: Rng + ?Sized>(shape: LayerShape, scale: f32, rng: &mut R) -> Self {
        let mut l = Self::zeros(shape);
        for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *w = rng.random_range(-scale..=scale);
        }
        l
    }

    pub fn shape(&self) -> LayerShape {
        (self.out_channels, self.in_channels, self.kernel_rows, self.kernel_cols)
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kernel_rows + ky) * self.kernel_cols + kx]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f32) {
        let idx = ((o * self.in_channels + i) * self.kernel_rows + ky) * self.kernel_cols + kx;
        self.weights[idx] = v;
    }

    fn check(&self) -> Result<()> {
        let (o, i, kh, kw) = self.shape();
        if self.weights.len() != o * i * kh * kw || self.bias.len() != o {
            return Err(Error::ShapeMismatch(format!(
                "layer {o}x{i}x{kh}x{kw} holds {} weights and {} biases",
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub entry: ConvLayer,
    pub middle: ConvLayer,
    pub exit: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub stem: ConvLayer,
    pub blocks: Vec<ResidualBlock>,
    /// 1x1 skip projection of the last block.
    pub projection: ConvLayer,
}

impl ModelWeights {
    /// Assembles weights from layers in [`ModelConfig::layer_shapes`] order.
    pub fn from_layers(config: &ModelConfig, layers: Vec<ConvLayer>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers for a config needing {}",
                layers.len(),
                shapes.len()
            )));
        }
        for (k, (layer, shape)) in layers.iter().zip(&shapes).enumerate() {
            layer.check()?;
            if layer.shape() != *shape {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k}: got {:?}, expected {:?}",
                    layer.shape(),
                    shape
                )));
            }
        }
        let mut it = layers.into_iter();
        let stem = it.next().expect("stem");
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            blocks.push(ResidualBlock {
                entry: it.next().expect("entry"),
                middle: it.next().expect("middle"),
                exit: it.next().expect("exit"),
            });
        }
        let projection = it.next().expect("projection");
        Ok(Self {
            stem,
            blocks,
            projection,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let layers = config.layer_shapes().into_iter().map(ConvLayer::zeros).collect();
        Self::from_layers(config, layers)
    }

    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, scale: f32, rng: &mut R) -> Result<Self> {
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|s| ConvLayer::random(s, scale, rng))
            .collect();
        Self::from_layers(config, layers)
    }

    /// Layers in storage order.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.stem];
        for b in &self.blocks {
            v.extend([&b.entry, &b.middle, &b.exit]);
        }
        v.push(&self.projection);
        v
    }

    pub fn into_layers(self) -> Vec<ConvLayer> {
        let mut v = vec![self.stem];
        for b in self.blocks {
            v.extend([b.entry, b.middle, b.exit]);
        }
        v.push(self.projection);
        v
    }
}

/// Channel-major activations.
#[derive(Debug, Clone)]
struct Feature {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Feature {
    fn plane(&self, c: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }
}

fn conv2d(input: &Feature, layer: &ConvLayer, padding: Padding) -> Feature {
    let (rows, cols) = (input.rows, input.cols);
    let n = rows * cols;
    let ph = (layer.kernel_rows / 2) as isize;
    let pw = (layer.kernel_cols / 2) as isize;
    let mut data = vec![0.0; layer.out_channels * n];
    data.par_chunks_mut(n).enumerate().for_each(|(o, out)| {
        out.fill(layer.bias[o] as f64);
        for i in 0..layer.in_channels {
            let src = input.plane(i);
            for ky in 0..layer.kernel_rows {
                let dy = ky as isize - ph;
                for kx in 0..layer.kernel_cols {
                    let w = layer.weight(o, i, ky, kx) as f64;
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw;
                    for r in 0..rows {
                        let sr = r as isize + dy;
                        if sr < 0 || sr >= rows as isize {
                            continue;
                        }
                        let src_row = &src[sr as usize * cols..(sr as usize + 1) * cols];
                        let dst_row = &mut out[r * cols..(r + 1) * cols];
                        for (c, d) in dst_row.iter_mut().enumerate() {
                            let sc = c as isize + dx;
                            let v = match padding {
                                Padding::Circular => src_row[sc.rem_euclid(cols as isize) as usize],
                                Padding::Zero if sc >= 0 && sc < cols as isize => src_row[sc as usize],
                                Padding::Zero => continue,
                            };
                            *d += w * v;
                        }
                    }
                }
            }
        }
    });
    Feature {
        channels: layer.out_channels,
        rows,
        cols,
        data,
    }
}

fn relu_in_place(f: &mut Feature, enabled: bool) {
    if enabled {
        f.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// Direct-convolution forward pass; slow but exact enough for interop checks.
pub fn forward_reference(
    config: &ModelConfig,
    weights: &ModelWeights,
    input: &NetworkInput,
) -> Result<PredictionMap> {
    config.validate()?;
    let expected = config.layer_shapes();
    let got: Vec<LayerShape> = weights.layers().iter().map(|l| l.shape()).collect();
    if got != expected {
        return Err(Error::ShapeMismatch(
            "weights do not match the model config".into(),
        ));
    }
    for l in weights.layers() {
        l.check()?;
    }
    if input.values.len() != input.rows * input.cols || input.rows == 0 || input.cols == 0 {
        return Err(Error::ShapeMismatch("network input".into()));
    }
    if config.input_channels != 1 {
        return Err(Error::ShapeMismatch(
            "range-image input has a single channel".into(),
        ));
    }

    let act = config.activations;
    let x0 = Feature {
        channels: 1,
        rows: input.rows,
        cols: input.cols,
        data: input.values.clone(),
    };
    let mut x = conv2d(&x0, &weights.stem, config.padding);
    relu_in_place(&mut x, act);

    let last = weights.blocks.len() - 1;
    for (k, block) in weights.blocks.iter().enumerate() {
        let mut h = conv2d(&x, &block.entry, config.padding);
        relu_in_place(&mut h, act);
        let mut h = conv2d(&h, &block.middle, config.padding);
        relu_in_place(&mut h, act);
        let mut h = conv2d(&h, &block.exit, config.padding);
        if k == last {
            let skip = conv2d(&x, &weights.projection, config.padding);
            h.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
        } else {
            h.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
            relu_in_place(&mut h, act);
        }
        x = h;
    }

    let (rows, cols, ch) = (x.rows, x.cols, x.channels);
    let n = rows * cols;
    let mut out = vec![0.0; n * ch];
    for c in 0..ch {
        for p in 0..n {
            out[p * ch + c] = x.data[c * n + p];
        }
    }
    AnchorMap::from_data(rows, cols, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            trunk_channels: 4,
            branch_channels: 3,
            ..ModelConfig::default()
        }
    }

    fn input(rows: usize, cols: usize, seed: u64) -> NetworkInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkInput {
            rows,
            cols,
            values: (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn output_shape_examples() {
        let c = ModelConfig::default();
        assert_eq!(output_shape(25, 1808, &c).unwrap(), (25, 1808, 72));
        assert_eq!(output_shape(25, 904, &c).unwrap(), (25, 904, 72));
        assert_eq!(output_shape(1, 1, &c).unwrap(), (1, 1, 72));
        assert!(output_shape(0, 5, &c).is_err());
    }

    #[test]
    fn receptive_field_examples() {
        let single = ModelConfig {
            n_blocks: 1,
            ..ModelConfig::default()
        };
        assert_eq!(receptive_field(&single), (1, 7));
        assert_eq!(receptive_field(&ModelConfig::default()), (1, 193));
        let square = ModelConfig {
            n_blocks: 4,
            entry_kernel: (3, 3),
            middle_kernel: (1, 7),
            exit_kernel: (3, 1),
            ..ModelConfig::default()
        };
        assert_eq!(receptive_field(&square), (1 + 4 * 4, 1 + 4 * 8));
    }

    #[test]
    fn receptive_field_grows_with_depth() {
        let mut prev = (0, 0);
        for n in 1..40 {
            let rf = receptive_field(&ModelConfig {
                n_blocks: n,
                ..ModelConfig::default()
            });
            assert!(rf.0 >= prev.0 && rf.1 >= prev.1);
            prev = rf;
        }
    }

    #[test]
    fn rejects_even_kernels() {
        let c = ModelConfig {
            middle_kernel: (1, 6),
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let c = small_config();
        let w = ModelWeights::zeros(&c).unwrap();
        let out = forward_reference(&c, &w, &input(3, 9, 1)).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
        assert_eq!((out.rows, out.cols), (3, 9));
    }

    #[test]
    fn identity_trunk_passes_input_through() {
        let c = small_config();
        let mut w = ModelWeights::zeros(&c).unwrap();
        for o in 0..c.trunk_channels {
            w.stem.set_weight(o, 0, 0, 0, 1.0);
            w.projection.set_weight(o, o, 0, 0, 1.0);
        }
        let x = input(3, 9, 2);
        let out = forward_reference(&c, &w, &x).unwrap();
        for r in 0..3 {
            for col in 0..9 {
                let px = out.pixel(r, col);
                for (ch, v) in px.iter().enumerate() {
                    let want = if ch < c.trunk_channels { x.get(r, col) } else { 0.0 };
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weight_shape_mismatch_is_error() {
        let c = small_config();
        let mut layers = ModelWeights::zeros(&c).unwrap().into_layers();
        layers[1] = ConvLayer::zeros((3, 4, 1, 5));
        assert!(ModelWeights::from_layers(&c, layers.clone()).is_err());
        layers.pop();
        assert!(ModelWeights::from_layers(&c, layers).is_err());
        let mut w = ModelWeights::zeros(&c).unwrap();
        w.blocks[0].middle.weights.pop();
        assert!(forward_reference(&c, &w, &input(2, 4, 0)).is_err());
    }

    #[test]
    fn linear_without_activations() {
        let c = ModelConfig {
            activations: false,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = ModelWeights::random(&c, 0.3, &mut rng).unwrap();
        for l in [&mut w.stem, &mut w.projection] {
            l.bias.fill(0.0);
        }
        for b in &mut w.blocks {
            for l in [&mut b.entry, &mut b.middle, &mut b.exit] {
                l.bias.fill(0.0);
            }
        }
        let a = input(3, 11, 6);
        let b = input(3, 11, 7);
        let sum = NetworkInput {
            rows: 3,
            cols: 11,
            values: a.values.iter().zip(&b.values).map(|(x, y)| 2.0 * x + y).collect(),
        };
        let fa = forward_reference(&c, &w, &a).unwrap();
        let fb = forward_reference(&c, &w, &b).unwrap();
        let fs = forward_reference(&c, &w, &sum).unwrap();
        for i in 0..fs.data.len() {
            assert!((fs.data[i] - (2.0 * fa.data[i] + fb.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn circular_padding_is_column_equivariant() {
        let c = ModelConfig {
            padding: Padding::Circular,
            middle_kernel: (3, 5),
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = ModelWeights::random(&c, 0.4, &mut rng).unwrap();
        let x = input(4, 13, 10);
        let k = 5;
        let shifted = NetworkInput {
            rows: 4,
            cols: 13,
            values: (0..4 * 13)
                .map(|i| x.get(i / 13, (i % 13 + 13 - k) % 13))
                .collect(),
        };
        let a = forward_reference(&c, &w, &x).unwrap();
        let b = forward_reference(&c, &w, &shifted).unwrap();
        for r in 0..4 {
            for col in 0..13 {
                let pa = a.pixel(r, col);
                let pb = b.pixel(r, (col + k) % 13);
                for (u, v) in pa.iter().zip(pb) {
                    assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }
}
