//! Procedurally generated segmentation scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value marking pixels that carry no supervision.
pub const IGNORE_INDEX: u8 = 255;

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H·W` class ids in row-major order; `ignore_index` marks unlabeled pixels.
    pub label: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, label: Vec<u8>) -> Result<Self> {
        let [c, h, w] = image.dims::<3>("SegSample")?;
        if c != 3 {
            return Err(Error::dim_axis("SegSample", 0, format!("expected 3 channels, got {c}")));
        }
        if label.len() != h * w {
            return Err(Error::dim(
                "SegSample",
                format!("{} labels for a {h}×{w} image", label.len()),
            ));
        }
        Ok(SegSample { image, label })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// `true` at pixels excluded from loss and metrics.
    pub fn ignore_mask(&self, ignore_index: u8) -> Vec<bool> {
        self.label.iter().map(|&l| l == ignore_index).collect()
    }
}

/// Random-access collection of samples. Only in-memory synthetic data is
/// provided; file-backed datasets plug in here.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<SegSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SegSample] {
    fn len(&self) -> usize {
        <[SegSample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("sample {index} out of range for {} samples", self.len())))
    }
}

impl SampleSource for Vec<SegSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        self.as_slice().sample(index)
    }
}

/// Geometric primitive in pixel coordinates; pixel `(y, x)` covers
/// `[y, y+1) × [x, x+1)` and is tested at its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect {
        top: f64,
        left: f64,
        bottom: f64,
        right: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => y >= top && y < bottom && x >= left && x < right,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub shape: Shape,
    pub class: u8,
    pub color: [f32; 3],
}

/// Background plus regions painted in order; later regions cover earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: [f32; 3],
    pub regions: Vec<Region>,
}

/// Base color of a class: evenly spaced hues at full saturation.
fn class_color(class: u8, num_classes: usize) -> [f32; 3] {
    let hue = class as f32 / num_classes as f32 * 6.0;
    let channel = |offset: f32| {
        let k = (hue + offset) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [channel(5.0), channel(3.0), channel(1.0)]
}

fn jitter(base: [f32; 3], rng: &mut impl Rng) -> [f32; 3] {
    base.map(|v| (v + rng.random_range(-0.08..0.08f32)).clamp(0.0, 1.0))
}

impl Scene {
    /// One to three shapes over a class-0 background, each of a class drawn
    /// from `1..num_classes`.
    pub fn random(height: usize, width: usize, num_classes: usize, rng: &mut impl Rng) -> Scene {
        let (hf, wf) = (height as f64, width as f64);
        let background = jitter(class_color(0, num_classes), rng);
        let count = rng.random_range(1..=3);
        let regions = (0..count)
            .map(|_| {
                let class = rng.random_range(1..num_classes) as u8;
                let (cy, cx) = (rng.random_range(0.2..0.8) * hf, rng.random_range(0.2..0.8) * wf);
                let (ry, rx) = (rng.random_range(0.15..0.35) * hf, rng.random_range(0.15..0.35) * wf);
                let shape = if rng.random_bool(0.5) {
                    Shape::Rect {
                        top: cy - ry,
                        left: cx - rx,
                        bottom: cy + ry,
                        right: cx + rx,
                    }
                } else {
                    Shape::Ellipse { cy, cx, ry, rx }
                };
                Region {
                    shape,
                    class,
                    color: jitter(class_color(class, num_classes), rng),
                }
            })
            .collect();
        Scene {
            height,
            width,
            background,
            regions,
        }
    }

    /// Class and color of the topmost region covering pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> (u8, [f32; 3]) {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        self.regions
            .iter()
            .rev()
            .find(|r| r.shape.contains(py, px))
            .map_or((0, self.background), |r| (r.class, r.color))
    }

    pub fn render(&self) -> SegSample {
        let (h, w) = (self.height, self.width);
        let mut image = vec![0.0f32; 3 * h * w];
        let mut label = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (class, color) = self.pixel(y, x);
                for (c, v) in color.into_iter().enumerate() {
                    image[(c * h + y) * w + x] = v;
                }
                label.push(class);
            }
        }
        SegSample {
            image: Tensor::from_parts(vec![3, h, w], image),
            label,
        }
    }
}

/// Scenes behind [`make_synth_dataset`]; sample `i` draws from stream `i` of
/// a ChaCha8 generator seeded with `seed`.
pub fn synth_scenes(n: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Result<Vec<Scene>> {
    if !(2..=255).contains(&num_classes) {
        return Err(Error::config(
            "num_classes",
            format!("must be in 2..=255, got {num_classes}"),
        ));
    }
    if height == 0 || width == 0 {
        return Err(Error::config("size", "image must be at least 1×1"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Scene::random(height, width, num_classes, &mut rng)
        })
        .collect())
}

pub fn make_synth_dataset(
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SegSample>> {
    Ok(synth_scenes(n, height, width, num_classes, seed)?
        .iter()
        .map(Scene::render)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_samples() {
        let a = make_synth_dataset(3, 16, 24, 4, 9).unwrap();
        assert_eq!(a, make_synth_dataset(3, 16, 24, 4, 9).unwrap());
        assert_ne!(a, make_synth_dataset(3, 16, 24, 4, 10).unwrap());
    }

    #[test]
    fn labels_in_range_and_images_in_unit_box() {
        for s in make_synth_dataset(8, 32, 32, 3, 1).unwrap() {
            assert!(s.label.iter().all(|&l| l < 3));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn palette_is_distinct() {
        let colors: Vec<_> = (0..6).map(|c| class_color(c, 6)).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                let d: f32 = colors[i].iter().zip(&colors[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 0.5, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn rejects_one_class() {
        assert!(make_synth_dataset(1, 8, 8, 1, 0).is_err());
    }

    #[test]
    fn sample_shape_checks() {
        assert!(SegSample::new(Tensor::zeros(vec![3, 2, 2]), vec![0; 3]).is_err());
        assert!(SegSample::new(Tensor::zeros(vec![1, 2, 2]), vec![0; 4]).is_err());
        let s = SegSample::new(Tensor::zeros(vec![3, 2, 2]), vec![0, 255, 1, 255]).unwrap();
        assert_eq!(s.ignore_mask(IGNORE_INDEX), vec![false, true, false, true]);
    }
}
