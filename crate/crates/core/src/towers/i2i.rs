use super::input::ImagePatchGrid;
use super::model::Embedding;
use crate::error::{domain_err, shape_err, Result};

/// The image-to-image model: a fixed embedder that keeps only visual
/// detail. An image maps to its mean-centered pixels, unit-normalized, so
/// cosine similarity is the correlation of pixel intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelEmbedder {
    size: usize,
    patch: usize,
}

impl PixelEmbedder {
    pub fn new(size: usize, patch: usize) -> Self {
        Self { size, patch }
    }

    pub fn dim(&self) -> usize {
        self.size * self.size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.size, self.patch)
    }

    pub fn embed(&self, img: &ImagePatchGrid) -> Result<Embedding> {
        if img.size() != self.size {
            return Err(shape_err!("image is {}x{}, embedder expects {}", img.size(), img.size(), self.size));
        }
        if img.is_empty() {
            return Err(domain_err!("cannot embed an empty image"));
        }
        let px = img.pixels();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        let centered: Vec<f64> = px.iter().map(|p| p - mean).collect();
        let norm = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(domain_err!("image has no contrast"));
        }
        Ok(centered.into_iter().map(|x| x / norm).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_ignores_brightness_and_contrast() {
        let e = PixelEmbedder::new(4, 2);
        let px: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 0.3 + 0.5).collect();
        let a = e.embed(&ImagePatchGrid::new(4, 2, px.clone()).unwrap()).unwrap();
        let shifted: Vec<f64> = px.iter().map(|p| 0.5 * p + 0.2).collect();
        let b = e.embed(&ImagePatchGrid::new(4, 2, shifted).unwrap()).unwrap();
        assert_eq!(a.len(), 16);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(e.embed(&ImagePatchGrid::new(4, 2, vec![0.3; 16]).unwrap()).is_err());
        assert!(e.embed(&ImagePatchGrid::empty(4, 2)).is_err());
        assert!(e.embed(&ImagePatchGrid::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).is_err());
    }
}
