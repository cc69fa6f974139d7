//! The classifier that doubles as the explainer's encoder, plus GradCAM.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ConvSpec, Linear, ParamId, Params, Real, Tape, Tensor, Var};
use crate::pnm::{quantize, Raster};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

/// RGB image, channel-major, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != IMAGE_CHANNELS * height * width {
            return Err(Error::shape("image", &[IMAGE_CHANNELS, height, width], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::NumericDomain("image values must lie in [0,1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; IMAGE_CHANNELS * height * width],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let at = y * self.width + x;
        [self.data[at], self.data[plane + at], self.data[2 * plane + at]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let at = y * self.width + x;
        for (ch, v) in rgb.into_iter().enumerate() {
            self.data[ch * plane + at] = v;
        }
    }

    pub fn to_raster(&self) -> Raster {
        let mut samples = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                samples.extend(self.pixel(x, y).map(quantize));
            }
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            samples,
        }
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels != 3 {
            return Err(Error::Format("expected a P6 pixmap".into()));
        }
        let mut img = Self::blank(r.height, r.width);
        for (i, px) in r.samples.chunks(3).enumerate() {
            let rgb = [px[0], px[1], px[2]].map(|v| f32::from(v) / 255.0);
            img.set_pixel(i % r.width, i / r.width, rgb);
        }
        Ok(img)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::from_raster(&Raster::read(path)?)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        self.to_raster().write(path)
    }
}

/// Encoder output: `K = height·width` location vectors of dimension `channels`,
/// stored location-major (`data[j·channels + ch]`, `j = row·width + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T = f32> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
    /// Earlier-stage grids (V^i). Exposed, not consumed by the explainer.
    pub intermediate: Vec<FeatureGrid<T>>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("feature grid", &[height * width, channels], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("feature grid contains NaN or Inf".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            intermediate: Vec::new(),
        })
    }

    /// Builds from a channel-major `[C,h,w]` activation block.
    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[T]) -> Self {
        let k = height * width;
        let mut data = vec![T::zero(); k * channels];
        for ch in 0..channels {
            for j in 0..k {
                data[j * channels + ch] = chw[ch * k + j];
            }
        }
        Self {
            height,
            width,
            channels,
            data,
            intermediate: Vec::new(),
        }
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn location(&self, j: usize) -> &[T] {
        &self.data[j * self.channels..(j + 1) * self.channels]
    }

    pub fn mean_vector(&self) -> Vec<T> {
        let k = T::lit(self.locations() as f64);
        (0..self.channels)
            .map(|ch| (0..self.locations()).map(|j| self.data[j * self.channels + ch]).sum::<T>() / k)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            intermediate: self.intermediate.iter().map(FeatureGrid::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencySource {
    Gradcam,
    Gaze,
    Uniform,
    Custom,
}

/// Raw real-valued spatial map (ε). Row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source: SaliencySource,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SaliencyJson {
    Full(SaliencyMap),
    Rows(Vec<Vec<f32>>),
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, source: SaliencySource) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("saliency map", &[height, width], &[values.len()]));
        }
        Ok(Self {
            height,
            width,
            values,
            source,
        })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            source: SaliencySource::Uniform,
        }
    }

    /// `magnitude` at `cell`, zero elsewhere.
    pub fn one_hot(height: usize, width: usize, cell: usize, magnitude: f32) -> Self {
        let mut values = vec![0.0; height * width];
        values[cell] = magnitude;
        Self {
            height,
            width,
            values,
            source: SaliencySource::Custom,
        }
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Flat index of the maximum; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Pixel-space centre of the argmax cell for an image of the given size.
    pub fn peak_in_pixels(&self, image_width: usize, image_height: usize) -> (f32, f32) {
        let at = self.argmax();
        let (row, col) = (at / self.width, at % self.width);
        (
            (col as f32 + 0.5) * image_width as f32 / self.width as f32,
            (row as f32 + 0.5) * image_height as f32 / self.height as f32,
        )
    }

    /// Bilinear resampling (half-pixel centres, edge clamped).
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sample = |y: f32, x: f32| -> f32 {
            let y = y.clamp(0.0, (self.height - 1) as f32);
            let x = x.clamp(0.0, (self.width - 1) as f32);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (y - y0 as f32, x - x0 as f32);
            let v = |r: usize, c: usize| self.values[r * self.width + c];
            (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
        };
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let values = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| sample((r as f32 + 0.5) * sy - 0.5, (c as f32 + 0.5) * sx - 0.5))
            .collect();
        Self {
            height,
            width,
            values,
            source: self.source,
        }
    }

    /// Nearest-neighbour upsampling, keeping cells crisp.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> Self {
        let values = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| self.values[(r * self.height / height) * self.width + c * self.width / width])
            .collect();
        Self {
            height,
            width,
            values,
            source: self.source,
        }
    }

    /// 8-bit graymap scaled so the maximum maps to 255 (all zeros when max ≤ 0).
    pub fn to_raster(&self) -> Raster {
        let max = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let samples = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { quantize(v.max(0.0) / max) } else { 0 })
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            samples,
        }
    }

    pub fn from_raster(r: &Raster, source: SaliencySource) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::Format("expected a P5 graymap".into()));
        }
        let values = r.samples.iter().map(|&v| f32::from(v) / 255.0).collect();
        Self::new(r.height, r.width, values, source)
    }

    /// Reads `.pgm` (P5) or `.json` (object or nested rows of floats).
    pub fn read(path: &Path, source: SaliencySource) -> Result<Self> {
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if !is_json {
            return Self::from_raster(&Raster::read(path)?, source);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        match serde_json::from_str(&text)? {
            SaliencyJson::Full(m) => Self::new(m.height, m.width, m.values, m.source),
            SaliencyJson::Rows(rows) => {
                let width = rows.first().map_or(0, Vec::len);
                if width == 0 || rows.iter().any(|r| r.len() != width) {
                    return Err(Error::Format("saliency rows must be non-empty and equal length".into()));
                }
                Self::new(rows.len(), width, rows.concat(), source)
            }
        }
    }
}

/// Three stride-2 conv stages plus a global-average-pool linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub widths: [usize; 3],
    pub image_size: usize,
}

impl ClassifierConfig {
    pub fn reference(num_classes: usize) -> Self {
        Self {
            num_classes,
            widths: [16, 32, 64],
            image_size: IMAGE_SIZE,
        }
    }

    /// Spatial side of V^f.
    pub fn grid_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

const CONV: ConvSpec = ConvSpec { stride: 2, pad: 1 };

/// Tape handles of one batched classifier forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierPass {
    pub logits: Var,
    /// `[B, c, h, w]`, last stage after ReLU.
    pub focus: Var,
    /// `[B, c', 2h, 2w]`, second stage after ReLU.
    pub intermediate: Var,
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Real = f32> {
    pub config: ClassifierConfig,
    pub params: Params<T>,
    convs: [ConvLayer; 3],
    head: Linear,
}

impl<T: Real> Classifier<T> {
    pub fn new(config: ClassifierConfig, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let mut in_ch = IMAGE_CHANNELS;
        let convs = std::array::from_fn(|stage| {
            let out = config.widths[stage];
            let bound = (6.0 / (in_ch * 9) as f64).sqrt();
            let kernel = params.add(
                format!("classifier.conv{}.kernel", stage + 1),
                crate::numerics::layers_uniform(rng, &[out, in_ch, 3, 3], bound),
            );
            let bias = params.add(format!("classifier.conv{}.bias", stage + 1), Tensor::zeros([out]));
            in_ch = out;
            ConvLayer { kernel, bias }
        });
        let head = Linear::init(&mut params, "classifier.head", config.widths[2], config.num_classes, true, rng);
        Self {
            config,
            params,
            convs,
            head,
        }
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.bias.expect("classifier head has a bias")
    }

    pub fn conv_kernel(&self, stage: usize) -> ParamId {
        self.convs[stage].kernel
    }

    pub fn conv_bias(&self, stage: usize) -> ParamId {
        self.convs[stage].bias
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            config: self.config,
            params: self.params.cast(),
            convs: self.convs,
            head: self.head,
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height != s || image.width != s || image.data.len() != IMAGE_CHANNELS * s * s {
            return Err(Error::shape(
                "classifier input",
                &[IMAGE_CHANNELS, s, s],
                &[IMAGE_CHANNELS, image.height, image.width],
            ));
        }
        Ok(())
    }

    pub fn batch_input(&self, images: &[&Image]) -> Result<(Vec<usize>, Vec<T>)> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * IMAGE_CHANNELS * s * s);
        for img in images {
            self.check_image(img)?;
            data.extend(img.data.iter().map(|&v| T::lit(f64::from(v))));
        }
        Ok((vec![images.len(), IMAGE_CHANNELS, s, s], data))
    }

    /// Batched forward on `[B,3,S,S]` input.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<ClassifierPass> {
        let mut x = input;
        let mut intermediate = input;
        for (stage, layer) in self.convs.iter().enumerate() {
            let y = tape.conv2d(x, bound[layer.kernel], CONV)?;
            let y = tape.channel_bias(y, bound[layer.bias])?;
            x = tape.relu(y);
            if stage == 1 {
                intermediate = x;
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = self.head.forward(tape, bound, pooled)?;
        Ok(ClassifierPass {
            logits,
            focus: x,
            intermediate,
        })
    }

    /// Logits, V^f and V^i for each image.
    pub fn classify_batch(&self, images: &[&Image]) -> Result<Vec<(Vec<T>, FeatureGrid<T>)>> {
        let (shape, data) = self.batch_input(images)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.constant(shape, data)?;
        let pass = self.forward(&mut tape, &bound, input)?;
        let nc = self.config.num_classes;
        let fs = tape.shape(pass.focus).to_vec();
        let is = tape.shape(pass.intermediate).to_vec();
        let (fplane, iplane) = (fs[1] * fs[2] * fs[3], is[1] * is[2] * is[3]);
        let mut out = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let logits = tape.value(pass.logits)[b * nc..(b + 1) * nc].to_vec();
            let mut grid = FeatureGrid::from_chw(fs[1], fs[2], fs[3], &tape.value(pass.focus)[b * fplane..(b + 1) * fplane]);
            grid.intermediate.push(FeatureGrid::from_chw(
                is[1],
                is[2],
                is[3],
                &tape.value(pass.intermediate)[b * iplane..(b + 1) * iplane],
            ));
            out.push((logits, grid));
        }
        Ok(out)
    }

    pub fn classifier_forward(&self, image: &Image) -> Result<(Tensor<T>, FeatureGrid<T>)> {
        let (logits, grid) = self.classify_batch(&[image])?.pop().expect("one image in, one out");
        Ok((Tensor::vector(logits), grid))
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        let (logits, _) = self.classifier_forward(image)?;
        Ok(argmax(logits.data()))
    }

    /// GradCAM for `class_index`, at the spatial resolution of V^f.
    pub fn gradcam(&self, image: &Image, class_index: usize) -> Result<SaliencyMap> {
        if class_index >= self.config.num_classes {
            return Err(Error::contract(format!(
                "class index {class_index} out of range {}",
                self.config.num_classes
            )));
        }
        let (shape, data) = self.batch_input(&[image])?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        // the image requires grad so every activation is differentiable even for frozen weights
        let input = tape.variable(shape, data)?;
        let pass = self.forward(&mut tape, &bound, input)?;
        let score = tape.pick(pass.logits, class_index)?;
        let fs = tape.shape(pass.focus).to_vec();
        let acts = tape.value(pass.focus).to_vec();
        let grads = tape.backward(score)?.wrt(pass.focus);
        let (c, h, w) = (fs[1], fs[2], fs[3]);
        let weights: Vec<T> = grads
            .chunks(h * w)
            .map(|g| g.iter().copied().sum::<T>() / T::lit((h * w) as f64))
            .collect();
        Ok(gradcam_map(&acts, &weights, c, h, w))
    }
}

/// ReLU of the channel-weighted activation sum, max-normalized when max > 0.
/// `activations` is channel-major `[C,h,w]`.
pub fn gradcam_map<T: Real>(activations: &[T], weights: &[T], channels: usize, height: usize, width: usize) -> SaliencyMap {
    let plane = height * width;
    let mut values = vec![0.0f32; plane];
    for (p, v) in values.iter_mut().enumerate() {
        let s: T = (0..channels).map(|ch| weights[ch] * activations[ch * plane + p]).sum();
        *v = s.max(T::zero()).to_f64_lossy() as f32;
    }
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    SaliencyMap {
        height,
        width,
        values,
        source: SaliencySource::Gradcam,
    }
}

pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn zeroed(num_classes: usize) -> Classifier<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Classifier::new(ClassifierConfig::reference(num_classes), &mut rng);
        for (_, t) in c.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        c
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut c = zeroed(3);
        let b = c.head_bias();
        c.params.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let (logits, grid) = c.classifier_forward(&Image::blank(32, 32)).unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0]);
        assert_eq!((grid.height, grid.width, grid.channels), (4, 4, 64));
        assert_eq!(grid.intermediate[0].height, 8);
        assert_eq!(grid.intermediate[0].channels, 32);
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let c = zeroed(2);
        assert!(matches!(c.classifier_forward(&Image::blank(16, 16)), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Classifier::<f32>::new(ClassifierConfig::reference(4), &mut rng);
        let mut img = Image::blank(32, 32);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        let a = c.classifier_forward(&img).unwrap();
        let b = c.classifier_forward(&img).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data, b.1.data);
    }

    #[test]
    fn gradcam_single_channel_is_relu_of_activation() {
        let acts = [1.0f64, -2.0, 0.5, 3.0];
        let map = gradcam_map(&acts, &[2.0], 1, 2, 2);
        let expect = [1.0 / 3.0, 0.0, 0.5 / 3.0, 1.0];
        for (g, e) in map.values.iter().zip(expect) {
            assert!((f64::from(*g) - e).abs() < 1e-6);
        }
    }

    #[test]
    fn gradcam_zero_weights_is_zero_map() {
        let acts = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let map = gradcam_map(&acts, &[0.0, 0.0], 2, 2, 2);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    /// Class 0 reads a red-channel detector; a red blob in the upper-left
    /// quadrant must put the GradCAM peak there.
    #[test]
    fn gradcam_peaks_on_hand_built_detector() {
        let mut c = zeroed(2);
        for stage in 0..3 {
            let k = c.conv_kernel(stage);
            let t = c.params.get_mut(k);
            let in_ch = t.shape()[1];
            // out 0 <- in 0, centre tap
            t.data_mut()[4] = 1.0;
            assert!(in_ch >= 1);
        }
        let w = c.head_weight();
        c.params.get_mut(w).data_mut()[0] = 1.0; // channel 0 -> class 0
        let mut img = Image::blank(32, 32);
        for y in 2..12 {
            for x in 3..13 {
                img.set_pixel(x, y, [1.0, 0.0, 0.0]);
            }
        }
        let map = c.gradcam(&img, 0).unwrap();
        assert!(map.values.iter().all(|&v| v >= 0.0));
        let best = map.argmax();
        // exhaustive check of the argmax against every cell
        for (i, &v) in map.values.iter().enumerate() {
            assert!(map.values[best] >= v, "cell {i}");
        }
        let (row, col) = (best / 4, best % 4);
        assert!(row < 2 && col < 2, "peak at {row},{col}");
    }

    #[test]
    fn gradcam_rejects_bad_class() {
        let c = zeroed(2);
        assert!(matches!(c.gradcam(&Image::blank(32, 32), 2), Err(Error::Contract(_))));
    }

    #[test]
    fn saliency_resample_and_argmax() {
        let m = SaliencyMap::one_hot(4, 4, 5, 3.0);
        assert_eq!(m.argmax(), 5);
        assert_eq!(m.peak_in_pixels(32, 32), (12.0, 12.0));
        let up = m.upsample_nearest(32, 32);
        assert_eq!(up.values[9 * 32 + 9], 3.0);
        assert_eq!(up.values[0], 0.0);
        let down = up.resample(4, 4);
        assert_eq!(down.argmax(), 5);
        let tie = SaliencyMap::new(1, 3, vec![1.0, 2.0, 2.0], SaliencySource::Custom).unwrap();
        assert_eq!(tie.argmax(), 1);
    }

    #[test]
    fn saliency_p5_round_trip_is_max_normalized() {
        let m = SaliencyMap::new(2, 2, vec![0.0, 2.0, 1.0, 4.0], SaliencySource::Gaze).unwrap();
        let back = SaliencyMap::from_raster(&Raster::decode(&m.to_raster().encode()).unwrap(), SaliencySource::Gaze).unwrap();
        assert_eq!(back.values[3], 1.0);
        assert_eq!(back.values[0], 0.0);
        assert_eq!(back.argmax(), m.argmax());
    }

    #[test]
    fn image_ppm_round_trip() {
        let mut img = Image::blank(4, 3);
        img.set_pixel(1, 2, [1.0, 0.0, 1.0]);
        let back = Image::from_raster(&Raster::decode(&img.to_raster().encode()).unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
