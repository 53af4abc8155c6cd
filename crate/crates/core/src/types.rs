//! Shared data model: images, groups, batches and the validated tensor
//! wrappers passed between pipeline stages.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Interleaved `h x w x channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Planar `channels x h x w` copy of the pixel data.
    pub fn to_planar(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); plane * self.channels];
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[T]) -> Self {
        let plane = height * width;
        let mut data = vec![T::zero(); plane * channels];
        for p in 0..plane {
            for c in 0..channels {
                data[p * channels + c] = planar[c * plane + p];
            }
        }
        Self { height, width, channels, data }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
        }
    }
}

/// Thresholds a grayscale mask at 0.5 (inclusive) into `{0, 1}`.
pub fn binarize_mask<T: Scalar>(raw: &Image<T>) -> Result<Image<T>> {
    if let Some(i) = raw.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("mask value at flat index {i}")));
    }
    let half: T = lit(0.5);
    Ok(Image {
        data: raw
            .data
            .iter()
            .map(|&v| if v >= half { T::one() } else { T::zero() })
            .collect(),
        ..*raw
    })
}

/// Bilinear resize with half-pixel centers (corners not aligned).
pub fn resize_bilinear<T: Scalar>(img: &Image<T>, height: usize, width: usize) -> Result<Image<T>> {
    if img.height == 0 || img.width == 0 || img.channels == 0 {
        return Err(Error::contract("cannot resize an empty image"));
    }
    if height == 0 || width == 0 {
        return Err(Error::contract(format!("resize target {height}x{width} must be positive")));
    }
    let planar = img.to_planar();
    let out = kernels::resize_planes(&planar, img.channels, img.height, img.width, height, width);
    Ok(Image::from_planar(height, width, img.channels, &out))
}

/// Resizes a binary mask and re-binarizes it at 0.5.
pub fn resize_mask<T: Scalar>(mask: &Image<T>, height: usize, width: usize) -> Result<Image<T>> {
    binarize_mask(&resize_bilinear(mask, height, width)?)
}

/// One co-saliency group: images sharing a target class, with binary masks.
#[derive(Clone, Debug)]
pub struct ImageGroup {
    pub group_id: String,
    pub class_index: usize,
    pub images: Vec<Image<f32>>,
    pub gt_masks: Vec<Image<f32>>,
    pub names: Vec<String>,
}

impl ImageGroup {
    pub fn new(
        group_id: impl Into<String>,
        class_index: usize,
        images: Vec<Image<f32>>,
        gt_masks: Vec<Image<f32>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let group_id = group_id.into();
        if images.is_empty() || images.len() != gt_masks.len() || images.len() != names.len() {
            return Err(Error::Data(format!(
                "group {group_id}: {} images, {} masks, {} names",
                images.len(),
                gt_masks.len(),
                names.len()
            )));
        }
        if let Some(m) = gt_masks.iter().find(|m| m.data.iter().any(|&v| v != 0.0 && v != 1.0)) {
            return Err(Error::Data(format!(
                "group {group_id}: mask {}x{} is not binary",
                m.height, m.width
            )));
        }
        Ok(Self {
            group_id,
            class_index,
            images,
            gt_masks,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One training step's input: two equally sized groups of distinct classes.
#[derive(Clone, Debug)]
pub struct GroupBatch<T> {
    /// `N x 3 x S x S`, values in `[0, 1]`.
    pub group_a: Tensor<T>,
    pub group_b: Tensor<T>,
    /// `N x 1 x S x S`, values in `{0, 1}`.
    pub gt_a: Tensor<T>,
    pub gt_b: Tensor<T>,
    pub class_a: usize,
    pub class_b: usize,
}

impl<T: Scalar> GroupBatch<T> {
    pub fn new(
        group_a: Tensor<T>,
        group_b: Tensor<T>,
        gt_a: Tensor<T>,
        gt_b: Tensor<T>,
        class_a: usize,
        class_b: usize,
    ) -> Result<Self> {
        let b = Self {
            group_a,
            group_b,
            gt_a,
            gt_b,
            class_a,
            class_b,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        for (name, t, ch) in [("group_a", &self.group_a, 3), ("group_b", &self.group_b, 3), ("gt_a", &self.gt_a, 1), ("gt_b", &self.gt_b, 1)] {
            if t.rank() != 4 || t.shape()[1] != ch || t.shape()[2] != t.shape()[3] {
                return Err(Error::contract(format!("{name} must be N x {ch} x S x S, got {:?}", t.shape())));
            }
        }
        let (na, nb) = (self.group_a.shape()[0], self.group_b.shape()[0]);
        if na != nb || na == 0 {
            return Err(Error::contract(format!("groups must be equal and non-empty: {na} vs {nb}")));
        }
        if self.gt_a.shape()[0] != na || self.gt_b.shape()[0] != nb {
            return Err(Error::contract("mask count differs from image count"));
        }
        if self.group_a.shape()[2..] != self.group_b.shape()[2..] || self.gt_a.shape()[2..] != self.group_a.shape()[2..] {
            return Err(Error::contract("all batch tensors must share one side length"));
        }
        Ok(())
    }

    /// Images per group.
    pub fn n(&self) -> usize {
        self.group_a.shape()[0]
    }

    /// Side length `S`.
    pub fn side(&self) -> usize {
        self.group_a.shape()[2]
    }

    /// A batch pairing one group with itself (single-group inference).
    pub fn duplicated(images: Tensor<T>, class: usize) -> Result<Self> {
        let (n, _, s, _) = images.dims4();
        let gt = Tensor::zeros(&[n, 1, s, s]);
        Self::new(images.clone(), images, gt.clone(), gt, class, class)
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
    }
}

/// Rank-4 feature tensor `N x C x H x W` with its stride relative to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub data: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(data: Tensor<T>, stride: usize) -> Result<Self> {
        if data.rank() != 4 || data.shape()[1..].contains(&0) {
            return Err(Error::contract(format!("feature stack needs positive C,H,W, got {:?}", data.shape())));
        }
        check_finite(&data, "feature stack")?;
        Ok(Self { data, stride })
    }
}

/// Per-group channel descriptor of shape `1 x C x 1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Consensus<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> Consensus<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != 1 || s[2] != 1 || s[3] != 1 {
            return Err(Error::contract(format!("consensus must be 1 x C x 1 x 1, got {s:?}")));
        }
        check_finite(&data, "consensus")?;
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Per-image saliency maps `N x 1 x S x S` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMaps<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> SaliencyMaps<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 4 || data.shape()[1] != 1 {
            return Err(Error::contract(format!("saliency maps must be N x 1 x H x W, got {:?}", data.shape())));
        }
        check_finite(&data, "saliency maps")?;
        if data.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::contract("saliency values must lie in [0, 1]"));
        }
        Ok(Self { data })
    }

    /// Map `i` as a single-channel image.
    pub fn image(&self, i: usize) -> Image<T> {
        let (_, _, h, w) = self.data.dims4();
        Image {
            height: h,
            width: w,
            channels: 1,
            data: self.data.data()[i * h * w..(i + 1) * h * w].to_vec(),
        }
    }
}
