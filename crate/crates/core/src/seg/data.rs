use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// An `H x W x C` image with one class id per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGrid {
    pub image: Tensor,
    /// Row-major class ids; [`IGNORE_LABEL`] marks unlabeled pixels.
    pub labels: Vec<u8>,
}

impl LabeledGrid {
    pub fn new(image: Tensor, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        let [h, w, _] = *image.shape() else {
            return Err(Error::contract(format!("image must be HxWxC, got {:?}", image.shape())));
        };
        if labels.len() != h * w {
            return Err(Error::dim("labeled grid", image.shape(), &[labels.len()]));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::Label {
                pixel: i,
                label: l as usize,
                classes: num_classes,
            });
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn label(&self, row: usize, col: usize) -> Option<usize> {
        let l = self.labels[row * self.width() + col];
        (l != IGNORE_LABEL).then_some(l as usize)
    }

    pub fn targets(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE_LABEL).then_some(l as usize))
    }

    pub fn flipped(&self) -> Self {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let mut img = Vec::with_capacity(h * w * c);
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            for col in (0..w).rev() {
                let base = (r * w + col) * c;
                img.extend_from_slice(&self.image.data()[base..base + c]);
                labels.push(self.labels[r * w + col]);
            }
        }
        Self {
            image: Tensor::new(&[h, w, c], img).expect("same extents"),
            labels,
        }
    }

    pub fn cropped(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let (w, c) = (self.width(), self.channels());
        let mut img = Vec::with_capacity(height * width * c);
        let mut labels = Vec::with_capacity(height * width);
        for r in top..top + height {
            let base = (r * w + left) * c;
            img.extend_from_slice(&self.image.data()[base..base + width * c]);
            labels.extend_from_slice(&self.labels[r * w + left..r * w + left + width]);
        }
        Ok(Self {
            image: Tensor::new(&[height, width, c], img)?,
            labels,
        })
    }

    /// Adds `N(0, stddev^2)` noise to every image value.
    pub fn jittered(&self, rng: &mut Rng, stddev: f64) -> Self {
        let mut out = self.clone();
        if stddev > 0.0 {
            out.image
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.normal(0.0, stddev));
        }
        out
    }
}

/// Stacks equally sized samples into an NHWC batch plus flat targets.
pub(crate) fn stack(samples: &[&LabeledGrid]) -> Result<(Tensor, Vec<Option<usize>>)> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    let mut targets = Vec::with_capacity(samples.len() * first.labels.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::dim("batch", &shape, s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        targets.extend(s.targets());
    }
    let batch = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((batch, targets))
}
