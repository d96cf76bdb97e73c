use crate::catalog::{decode_pgm, encode_pgm, ImageBlob, Raster};
use crate::error::{domain_err, shape_err, Result};
use crate::numcore::{AttentionMask, Tensor};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Square grayscale image split into non-overlapping square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatchGrid {
    size: usize,
    patch: usize,
    pixels: Vec<f64>,
    empty: bool,
}

impl ImagePatchGrid {
    pub fn new(size: usize, patch: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 || patch == 0 || size % patch != 0 {
            return Err(shape_err!("grid {size} not divisible into {patch}-pixel patches"));
        }
        if pixels.len() != size * size {
            return Err(shape_err!("{} pixels for a {size}x{size} grid", pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(domain_err!("pixel value {p} outside [0, 1]"));
        }
        Ok(Self {
            size,
            patch,
            pixels,
            empty: false,
        })
    }

    /// The all-zeros placeholder used to pad an item to `K` images.
    pub fn empty(size: usize, patch: usize) -> Self {
        Self {
            size,
            patch,
            pixels: vec![0.0; size * size],
            empty: true,
        }
    }

    /// Decodes PGM bytes, resampling (nearest neighbor) to `size x size`.
    pub fn from_blob(blob: &ImageBlob, size: usize, patch: usize) -> Result<Self> {
        let r = decode_pgm(blob.bytes())?;
        Self::new(size, patch, resample(&r, 0, 0, r.width, r.height, size))
    }

    pub fn to_blob(&self) -> ImageBlob {
        encode_pgm(self.size, self.size, &self.pixels)
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.size / self.patch;
        per_side * per_side
    }

    /// All patches valid, or none for an empty image.
    pub fn patch_mask(&self) -> AttentionMask {
        if self.empty {
            AttentionMask::all_invalid(self.num_patches())
        } else {
            AttentionMask::all_valid(self.num_patches())
        }
    }

    /// `num_patches x patch^2` matrix, patches in row-major order.
    pub fn patch_matrix(&self) -> Tensor {
        let (p, per_side) = (self.patch, self.size / self.patch);
        let mut data = Vec::with_capacity(self.size * self.size);
        for pr in 0..per_side {
            for pc in 0..per_side {
                for y in 0..p {
                    let row = (pr * p + y) * self.size + pc * p;
                    data.extend_from_slice(&self.pixels[row..row + p]);
                }
            }
        }
        Tensor::matrix(per_side * per_side, p * p, data).expect("patch layout")
    }

    /// Crops `(x0, y0, x1, y1)` and resamples back to the grid size.
    pub fn crop(&self, bbox: (usize, usize, usize, usize)) -> Result<Self> {
        let (x0, y0, x1, y1) = bbox;
        if x0 >= x1 || y0 >= y1 || x1 > self.size || y1 > self.size {
            return Err(shape_err!("box {bbox:?} outside a {}x{} grid", self.size, self.size));
        }
        let r = Raster {
            width: self.size,
            height: self.size,
            pixels: self.pixels.clone(),
        };
        Self::new(self.size, self.patch, resample(&r, x0, y0, x1 - x0, y1 - y0, self.size))
    }
}

fn resample(r: &Raster, x0: usize, y0: usize, w: usize, h: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = y0 + y * h / size;
        for x in 0..size {
            let sx = x0 + x * w / size;
            out.push(r.pixels[sy * r.width + sx]);
        }
    }
    out
}

/// Token ids padded to a fixed length, with their validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TitleTokens {
    ids: Vec<u32>,
    max_len: usize,
}

impl TitleTokens {
    /// Keeps at most `max_len` ids.
    pub fn new(mut ids: Vec<u32>, max_len: usize) -> Self {
        ids.truncate(max_len);
        Self { ids, max_len }
    }

    /// The empty title: zero tokens, every position masked.
    pub fn empty(max_len: usize) -> Self {
        Self {
            ids: Vec::new(),
            max_len,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids padded with [`PAD_ID`] to `max_len`.
    pub fn padded(&self) -> Vec<u32> {
        let mut v = self.ids.clone();
        v.resize(self.max_len, PAD_ID);
        v
    }

    pub fn mask(&self) -> AttentionMask {
        AttentionMask::new((0..self.max_len).map(|i| i < self.ids.len()).collect())
    }
}

/// Toy vocabulary: id 0 is padding, 1 is unknown, and id `i >= 2` is the
/// word `w{i:04}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(domain_err!("vocabulary needs at least 3 entries, got {size}"));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn word(&self, id: u32) -> String {
        match id {
            PAD_ID => "[PAD]".into(),
            UNK_ID => "[UNK]".into(),
            i => format!("w{i:04}"),
        }
    }

    pub fn lookup(&self, word: &str) -> u32 {
        word.strip_prefix('w')
            .filter(|d| d.len() >= 4 && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|i| *i >= 2 && *i < self.size)
            .map_or(UNK_ID, |i| i as u32)
    }

    /// Lowercases, splits on anything that is not alphanumeric and maps
    /// each word to an id.
    pub fn tokenize(&self, title: &str, max_len: usize) -> TitleTokens {
        let ids = title
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.lookup(w))
            .collect();
        TitleTokens::new(ids, max_len)
    }
}

/// Pads with empty images or keeps the first `k`; the mask marks real slots.
pub fn pad_or_truncate(
    images: &[ImagePatchGrid],
    k: usize,
    size: usize,
    patch: usize,
) -> Result<(Vec<ImagePatchGrid>, AttentionMask)> {
    if k == 0 {
        return Err(domain_err!("K must be at least 1"));
    }
    let mut out: Vec<ImagePatchGrid> = images.iter().take(k).cloned().collect();
    while out.len() < k {
        out.push(ImagePatchGrid::empty(size, patch));
    }
    let mask = AttentionMask::new(out.iter().map(|g| !g.is_empty()).collect());
    Ok((out, mask))
}

/// Everything the item tower consumes for one product.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemInput {
    pub title: TitleTokens,
    pub images: Vec<ImagePatchGrid>,
    pub image_mask: AttentionMask,
    pub class_id: u32,
}

impl ItemInput {
    /// Pads or truncates `images` to `k` slots of a `size x size` grid.
    pub fn new(
        title: TitleTokens,
        images: &[ImagePatchGrid],
        k: usize,
        (size, patch): (usize, usize),
        class_id: u32,
    ) -> Result<Self> {
        if let Some(g) = images.iter().find(|g| g.size != size || g.patch != patch) {
            return Err(shape_err!(
                "image grid {}/{} does not match {size}/{patch}",
                g.size,
                g.patch
            ));
        }
        let (images, image_mask) = pad_or_truncate(images, k, size, patch)?;
        Ok(Self {
            title,
            images,
            image_mask,
            class_id,
        })
    }

    pub fn k(&self) -> usize {
        self.images.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> ImagePatchGrid {
        ImagePatchGrid::new(4, 2, vec![v; 16]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(ImagePatchGrid::new(6, 4, vec![0.0; 36]).is_err());
        assert!(ImagePatchGrid::new(4, 2, vec![0.0; 15]).is_err());
        assert!(ImagePatchGrid::new(4, 2, vec![1.5; 16]).is_err());
        let e = ImagePatchGrid::empty(16, 4);
        assert_eq!(e.num_patches(), 16);
        assert!(!e.patch_mask().any_valid());
        assert!(e.pixels().iter().all(|p| *p == 0.0));
    }

    #[test]
    fn patches_are_row_major_blocks() {
        let px: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let m = ImagePatchGrid::new(4, 2, px).unwrap().patch_matrix();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        let s = |v: &[f64]| v.iter().map(|x| (x * 16.0).round() as usize).collect::<Vec<_>>();
        assert_eq!(s(m.row_slice(0)), vec![0, 1, 4, 5]);
        assert_eq!(s(m.row_slice(1)), vec![2, 3, 6, 7]);
        assert_eq!(s(m.row_slice(3)), vec![10, 11, 14, 15]);
    }

    #[test]
    fn pad_two_of_four() {
        let (out, mask) = pad_or_truncate(&[img(0.1), img(0.2)], 4, 4, 2).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], img(0.1));
        assert_eq!(out[1], img(0.2));
        assert!(out[2].is_empty() && out[3].is_empty());
        assert_eq!(mask.flags(), &[true, true, false, false]);
    }

    #[test]
    fn truncate_six_to_four_keeps_catalog_order() {
        let six: Vec<_> = (0..6).map(|i| img(i as f64 / 10.0)).collect();
        let (out, mask) = pad_or_truncate(&six, 4, 4, 2).unwrap();
        assert_eq!(out, six[..4].to_vec());
        assert_eq!(mask.valid_count(), 4);
    }

    #[test]
    fn exactly_k_is_identity() {
        let four: Vec<_> = (0..4).map(|i| img(i as f64 / 10.0)).collect();
        let (out, _) = pad_or_truncate(&four, 4, 4, 2).unwrap();
        assert_eq!(out, four);
        assert!(pad_or_truncate(&four, 0, 4, 2).is_err());
    }

    #[test]
    fn tokenizer_maps_known_words_and_unknowns() {
        let v = Vocab::new(100).unwrap();
        let t = v.tokenize("W0005 w0099, Sepatu w0100 w5", 16);
        assert_eq!(t.ids(), &[5, 99, UNK_ID, UNK_ID, UNK_ID]);
        assert_eq!(v.lookup(&v.word(42)), 42);
        assert!(v.tokenize("?! .", 16).is_empty());
        let long = v.tokenize(&"w0002 ".repeat(40), 16);
        assert_eq!(long.ids().len(), 16);
        assert_eq!(long.mask().valid_count(), 16);
        assert_eq!(TitleTokens::empty(16).mask().valid_count(), 0);
    }

    #[test]
    fn blob_round_trip_and_crop() {
        let px: Vec<f64> = (0..16).map(|i| (i * 17) as f64 / 255.0).collect();
        let g = ImagePatchGrid::new(4, 2, px).unwrap();
        assert_eq!(ImagePatchGrid::from_blob(&g.to_blob(), 4, 2).unwrap(), g);
        let c = g.crop((1, 1, 3, 3)).unwrap();
        assert_eq!(c.pixels()[0], g.pixels()[5]);
        assert_ne!(c, g);
        assert!(g.crop((0, 0, 5, 4)).is_err());
    }
}
