//! Click and box prompts simulated from reference masks.
//!
//! Clicks go to the centroids of the largest connected components of a
//! class. When a slice has fewer components than requested clicks, the
//! remaining clicks are drawn around the centroid of a randomly chosen
//! component and rejected until they land inside it.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PointLabel, PromptSet};

/// Attempts per Gaussian click before falling back to a uniform pixel.
pub const MAX_GAUSSIAN_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Validation(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// A borrowed 2-D label map with its class count.
#[derive(Debug, Clone, Copy)]
pub struct SliceView<'a> {
    pub labels: &'a [u8],
    pub height: usize,
    pub width: usize,
    /// Largest valid fluid class id.
    pub num_classes: u8,
}

impl<'a> SliceView<'a> {
    pub fn new(labels: &'a [u8], height: usize, width: usize, num_classes: u8) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Validation(format!(
                "slice has {} pixels, expected {height}x{width}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(Self {
            labels,
            height,
            width,
            num_classes,
        })
    }

    fn check_class(&self, class_id: u8) -> Result<()> {
        if class_id == 0 || class_id > self.num_classes {
            return Err(Error::Validation(format!(
                "unknown class {class_id}; valid classes are 1..={}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl PixelBox {
    fn point(row: usize, col: usize) -> Self {
        Self {
            row_min: row,
            col_min: col,
            row_max: row,
            col_max: col,
        }
    }

    fn include(&mut self, row: usize, col: usize) {
        self.row_min = self.row_min.min(row);
        self.col_min = self.col_min.min(col);
        self.row_max = self.row_max.max(row);
        self.col_max = self.col_max.max(col);
    }

    /// Largest side length in pixels.
    pub fn max_extent(&self) -> usize {
        (self.row_max - self.row_min + 1).max(self.col_max - self.col_min + 1)
    }

    /// As `(x_min, y_min, x_max, y_max)`.
    pub fn as_xyxy(&self) -> (usize, usize, usize, usize) {
        (self.col_min, self.row_min, self.col_max, self.row_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub class_id: u8,
    /// `(row, col)` in discovery order; the first entry is the raster-first pixel.
    pub pixels: Vec<(usize, usize)>,
    /// `(row, col)` mean.
    pub centroid: (f64, f64),
    pub bbox: PixelBox,
}

impl Component {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Component index per pixel (`None` for other classes), plus components
/// in discovery (raster) order.
fn label_components(
    view: &SliceView<'_>,
    class_id: u8,
    connectivity: Connectivity,
) -> (Vec<Option<usize>>, Vec<Component>) {
    let (h, w) = (view.height, view.width);
    let mut index = vec![None; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if view.labels[start] != class_id || index[start].is_some() {
            continue;
        }
        let id = components.len();
        let (r0, c0) = (start / w, start % w);
        let mut pixels = Vec::new();
        let mut bbox = PixelBox::point(r0, c0);
        let (mut sum_r, mut sum_c) = (0.0, 0.0);
        index[start] = Some(id);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            pixels.push((r, c));
            bbox.include(r, c);
            sum_r += r as f64;
            sum_c += c as f64;
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if view.labels[q] == class_id && index[q].is_none() {
                    index[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
        let n = pixels.len() as f64;
        components.push(Component {
            class_id,
            pixels,
            centroid: (sum_r / n, sum_c / n),
            bbox,
        });
    }
    (index, components)
}

/// Connected components of `class_id`, largest first. Equal sizes keep
/// raster order of each component's first pixel.
pub fn connected_components(
    view: &SliceView<'_>,
    class_id: u8,
    connectivity: Connectivity,
) -> Result<Vec<Component>> {
    view.check_class(class_id)?;
    let (_, mut components) = label_components(view, class_id, connectivity);
    components.sort_by(|a, b| b.size().cmp(&a.size()));
    Ok(components)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointProvenance {
    Centroid,
    GaussianFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedPoint {
    /// Pixel column.
    pub x: usize,
    /// Pixel row.
    pub y: usize,
    pub label: PointLabel,
    pub provenance: PointProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedPrompt {
    pub class_id: u8,
    pub points: Vec<SimulatedPoint>,
    pub seed: u64,
}

impl SimulatedPrompt {
    pub fn to_prompt_set(&self) -> PromptSet {
        self.points.iter().fold(PromptSet::empty(), |set, p| {
            set.with_point(p.x as f64, p.y as f64, p.label)
        })
    }
}

/// Rounded centroid, moved to the closest member pixel when it falls off
/// the component (concave shapes).
fn centroid_pixel(component: &Component, index: &[Option<usize>], id: usize, width: usize) -> (usize, usize) {
    let (cr, cc) = component.centroid;
    let (rr, rc) = (cr.round() as usize, cc.round() as usize);
    if index[rr * width + rc] == Some(id) {
        return (rr, rc);
    }
    let mut best = component.pixels[0];
    let mut best_d = f64::INFINITY;
    let mut sorted = component.pixels.clone();
    sorted.sort_unstable();
    for &(r, c) in &sorted {
        let d = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
        if d < best_d {
            best_d = d;
            best = (r, c);
        }
    }
    best
}

/// Simulates `n` positive clicks on `class_id`.
pub fn simulate_points(
    view: &SliceView<'_>,
    class_id: u8,
    n: usize,
    seed: u64,
    connectivity: Connectivity,
) -> Result<SimulatedPrompt> {
    view.check_class(class_id)?;
    if n == 0 {
        return Err(Error::Validation("number of clicks must be >= 1".into()));
    }
    let (index, discovered) = label_components(view, class_id, connectivity);
    if discovered.is_empty() {
        return Err(Error::EmptyClass { class_id });
    }
    let mut order: Vec<usize> = (0..discovered.len()).collect();
    order.sort_by(|&a, &b| discovered[b].size().cmp(&discovered[a].size()));

    let mut points = Vec::with_capacity(n);
    for &id in order.iter().take(n) {
        let (y, x) = centroid_pixel(&discovered[id], &index, id, view.width);
        points.push(SimulatedPoint {
            x,
            y,
            label: PointLabel::Positive,
            provenance: PointProvenance::Centroid,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    while points.len() < n {
        let id = rng.random_range(0..discovered.len());
        let comp = &discovered[id];
        let sigma = comp.bbox.max_extent() as f64 / 4.0;
        let mut hit = None;
        for _ in 0..MAX_GAUSSIAN_ATTEMPTS {
            let r = (comp.centroid.0 + sigma * unit.sample(&mut rng)).round();
            let c = (comp.centroid.1 + sigma * unit.sample(&mut rng)).round();
            if r < 0.0 || c < 0.0 || r >= view.height as f64 || c >= view.width as f64 {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if index[r * view.width + c] == Some(id) {
                hit = Some((r, c));
                break;
            }
        }
        let (y, x) = hit.unwrap_or_else(|| comp.pixels[rng.random_range(0..comp.size())]);
        points.push(SimulatedPoint {
            x,
            y,
            label: PointLabel::Positive,
            provenance: PointProvenance::GaussianFallback,
        });
    }
    Ok(SimulatedPrompt {
        class_id,
        points,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxTarget {
    #[default]
    LargestComponent,
    Union,
}

/// Tight bounding box of the largest component or of all class pixels.
pub fn box_from_mask(
    view: &SliceView<'_>,
    class_id: u8,
    connectivity: Connectivity,
    target: BoxTarget,
) -> Result<PixelBox> {
    view.check_class(class_id)?;
    match target {
        BoxTarget::LargestComponent => connected_components(view, class_id, connectivity)?
            .first()
            .map(|c| c.bbox)
            .ok_or(Error::EmptyClass { class_id }),
        BoxTarget::Union => {
            let mut bbox: Option<PixelBox> = None;
            for (i, _) in view.labels.iter().enumerate().filter(|(_, &l)| l == class_id) {
                let (r, c) = (i / view.width, i % view.width);
                match bbox.as_mut() {
                    Some(b) => b.include(r, c),
                    None => bbox = Some(PixelBox::point(r, c)),
                }
            }
            bbox.ok_or(Error::EmptyClass { class_id })
        }
    }
}
