//! Felzenszwalb–Huttenlocher graph-based segmentation.
//!
//! Pixels are nodes of a 4-connected grid graph weighted by the Euclidean
//! distance between (optionally Gaussian-smoothed) RGB values. Edges are
//! visited in nondecreasing weight order and two components merge when the
//! edge weight does not exceed either component's internal difference plus
//! `k / |C|`. Components smaller than `min_size` are then folded into their
//! cheapest neighbor. Every merge follows a grid edge, so regions are
//! 4-connected by construction. Diagonal edges are left out: merging through
//! them and splitting afterwards leaves fragments below `min_size`.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, F32Raster};
use crate::raster::{ensure_same_dims, ImageRaster, ScalarRaster};

#[derive(Clone, Copy, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default)]
pub struct FhParams {
    /// Gaussian pre-smoothing stddev; 0 disables smoothing.
    pub sigma: f64,
    /// Threshold scale; larger values give larger regions.
    pub k: f64,
    /// Minimum region size in pixels after post-merging.
    pub min_size: usize,
}

impl Default for FhParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 100.0,
            min_size: 50,
        }
    }
}

impl FhParams {
    /// Defaults scaled down for small synthetic images.
    pub fn small_image() -> Self {
        Self {
            min_size: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k must be > 0, got {}", self.k)));
        }
        if self.min_size == 0 {
            return Err(Error::Config("min_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Disjoint-set forest with path compression and union by rank.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] as usize != root {
            root = self.parent[root] as usize;
        }
        let mut cur = x;
        while self.parent[cur] as usize != root {
            let next = self.parent[cur] as usize;
            self.parent[cur] = root as u32;
            cur = next;
        }
        root
    }

    pub fn size(&self, root: usize) -> usize {
        self.size[root] as usize
    }

    /// Joins two roots and returns the surviving root.
    pub fn union_roots(&mut self, a: usize, b: usize) -> usize {
        debug_assert_ne!(a, b);
        let (keep, drop) = match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => (b, a),
            std::cmp::Ordering::Greater => (a, b),
            std::cmp::Ordering::Equal => {
                self.rank[a] += 1;
                (a, b)
            }
        };
        self.parent[drop] = keep as u32;
        self.size[keep] += self.size[drop];
        keep
    }
}

/// Superpixel partition of an image with its 4-connected region adjacency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    region_id: Vec<u32>,
    region_pixels: Vec<Vec<u32>>,
    adjacency: BTreeSet<(u32, u32)>,
    neighbors: Vec<Vec<u32>>,
}

impl SuperpixelMap {
    /// Builds a map from any per-pixel labeling. Labels are split into
    /// 4-connected pieces and renumbered densely in raster order.
    pub fn from_labels(width: usize, height: usize, labels: &[u32]) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Format(format!(
                "region labels: {} values for {width}x{height}",
                labels.len()
            )));
        }
        let n = labels.len();
        let mut uf = UnionFind::new(n);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if x + 1 < width && labels[i] == labels[i + 1] {
                    let (a, b) = (uf.find(i), uf.find(i + 1));
                    if a != b {
                        uf.union_roots(a, b);
                    }
                }
                if y + 1 < height && labels[i] == labels[i + width] {
                    let (a, b) = (uf.find(i), uf.find(i + width));
                    if a != b {
                        uf.union_roots(a, b);
                    }
                }
            }
        }
        let mut dense = vec![u32::MAX; n];
        let mut region_id = vec![0u32; n];
        let mut next = 0u32;
        for (i, id) in region_id.iter_mut().enumerate() {
            let root = uf.find(i);
            if dense[root] == u32::MAX {
                dense[root] = next;
                next += 1;
            }
            *id = dense[root];
        }
        Ok(Self::from_dense(width, height, region_id, next as usize))
    }

    fn from_dense(width: usize, height: usize, region_id: Vec<u32>, count: usize) -> Self {
        let mut region_pixels = vec![Vec::new(); count];
        for (i, &r) in region_id.iter().enumerate() {
            region_pixels[r as usize].push(i as u32);
        }
        let mut adjacency = BTreeSet::new();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let a = region_id[i];
                let mut link = |b: u32| {
                    if a != b {
                        adjacency.insert((a.min(b), a.max(b)));
                    }
                };
                if x + 1 < width {
                    link(region_id[i + 1]);
                }
                if y + 1 < height {
                    link(region_id[i + width]);
                }
            }
        }
        let mut neighbors = vec![Vec::new(); count];
        for &(a, b) in &adjacency {
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Self {
            width,
            height,
            region_id,
            region_pixels,
            adjacency,
            neighbors,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn region_count(&self) -> usize {
        self.region_pixels.len()
    }

    pub fn region_ids(&self) -> &[u32] {
        &self.region_id
    }

    pub fn region_of(&self, pixel: usize) -> usize {
        self.region_id[pixel] as usize
    }

    pub fn region_pixels(&self, region: usize) -> &[u32] {
        &self.region_pixels[region]
    }

    pub fn adjacency(&self) -> &BTreeSet<(u32, u32)> {
        &self.adjacency
    }

    pub fn neighbors(&self, region: usize) -> &[u32] {
        &self.neighbors[region]
    }

    /// Pixel sets of every region, for partition comparisons.
    pub fn partition(&self) -> BTreeSet<Vec<u32>> {
        self.region_pixels.iter().cloned().collect()
    }

    pub fn to_f32r(&self) -> F32Raster {
        F32Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.region_id.iter().map(|&r| r as f32).collect(),
        }
    }

    pub fn adjacency_text(&self) -> String {
        self.adjacency
            .iter()
            .map(|(a, b)| format!("{a} {b}\n"))
            .collect()
    }

    /// Writes `<stem>.f32r` with region ids and `<stem>.adj` with one
    /// `a b` pair per line.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        io::write_f32r(dir.join(format!("{stem}.f32r")), &self.to_f32r())?;
        io::atomic_write(
            dir.join(format!("{stem}.adj")),
            self.adjacency_text().as_bytes(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = io::read_f32r(path)?;
        if r.channels != 1 {
            return Err(Error::Format("superpixel map must have 1 channel".into()));
        }
        let labels: Vec<u32> = r
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::Format(format!("invalid region id {v}")))
                }
            })
            .collect::<Result<_>>()?;
        Self::from_labels(r.width, r.height, &labels)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let len = (sigma * 4.0).ceil() as usize + 1;
    let mut k: Vec<f64> = (0..len)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum = 2.0 * k.iter().sum::<f64>() - k[0];
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian smoothing of one channel with edge clamping.
fn smooth_channel(src: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = kernel[0] * row[x];
            for (i, &k) in kernel.iter().enumerate().skip(1) {
                let l = x.saturating_sub(i);
                let r = (x + i).min(width - 1);
                acc += k * (row[l] + row[r]);
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = kernel[0] * tmp[y * width + x];
            for (i, &k) in kernel.iter().enumerate().skip(1) {
                let u = y.saturating_sub(i);
                let d = (y + i).min(height - 1);
                acc += k * (tmp[u * width + x] + tmp[d * width + x]);
            }
            out[y * width + x] = acc;
        }
    }
    out
}

struct Edge {
    weight: f64,
    a: u32,
    b: u32,
}

fn build_edges(channels: &[Vec<f64>; 3], width: usize, height: usize) -> Vec<Edge> {
    let dist = |i: usize, j: usize| {
        channels
            .iter()
            .map(|c| (c[i] - c[j]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut edges = Vec::with_capacity(width * height * 4);
    let mut push = |i: usize, j: usize| {
        edges.push(Edge {
            weight: dist(i, j),
            a: i as u32,
            b: j as u32,
        })
    };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                push(i, i + 1);
            }
            if y + 1 < height {
                push(i, i + width);
            }
        }
    }
    edges
}

/// Segments an image into superpixels. Deterministic for fixed inputs.
pub fn segment(image: &ImageRaster, params: &FhParams) -> Result<SuperpixelMap> {
    params.validate()?;
    let (width, height) = image.dims();
    let n = width * height;
    let mut channels: [Vec<f64>; 3] = Default::default();
    for (c, chan) in channels.iter_mut().enumerate() {
        *chan = image.data()[c..]
            .iter()
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect();
    }
    if params.sigma > 0.0 {
        let kernel = gaussian_kernel(params.sigma);
        for chan in &mut channels {
            *chan = smooth_channel(chan, width, height, &kernel);
        }
    }

    let mut edges = build_edges(&channels, width, height);
    edges.sort_by(|p, q| {
        p.weight
            .total_cmp(&q.weight)
            .then(p.a.cmp(&q.a))
            .then(p.b.cmp(&q.b))
    });

    let mut uf = UnionFind::new(n);
    let mut threshold = vec![params.k; n];
    for e in &edges {
        let a = uf.find(e.a as usize);
        let b = uf.find(e.b as usize);
        if a != b && e.weight <= threshold[a] && e.weight <= threshold[b] {
            let root = uf.union_roots(a, b);
            threshold[root] = e.weight + params.k / uf.size(root) as f64;
        }
    }
    for e in &edges {
        let a = uf.find(e.a as usize);
        let b = uf.find(e.b as usize);
        if a != b && (uf.size(a) < params.min_size || uf.size(b) < params.min_size) {
            uf.union_roots(a, b);
        }
    }

    let labels: Vec<u32> = (0..n).map(|i| uf.find(i) as u32).collect();
    SuperpixelMap::from_labels(width, height, &labels)
}

/// Mean of `raster` over each region's pixels.
pub fn average_raster_per_region(sp: &SuperpixelMap, raster: &ScalarRaster) -> Result<Vec<f64>> {
    ensure_same_dims(sp.dims(), raster.dims())?;
    let data = raster.data();
    Ok(sp
        .region_pixels
        .iter()
        .map(|px| {
            let sum: f64 = px.iter().map(|&i| f64::from(data[i as usize])).sum();
            sum / px.len() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_image(w: usize, h: usize) -> ImageRaster {
        let mut img = ImageRaster::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in w / 2..w {
                img.set(x, y, [255, 255, 255]);
            }
        }
        img
    }

    #[test]
    fn constant_image_is_one_region() {
        let img = ImageRaster::filled(16, 16, [40, 90, 200]);
        for k in [1.0, 10.0, 1000.0] {
            let sp = segment(
                &img,
                &FhParams {
                    k,
                    ..FhParams::default()
                },
            )
            .unwrap();
            assert_eq!(sp.region_count(), 1);
            assert!(sp.adjacency().is_empty());
        }
    }

    #[test]
    fn half_split_at_column_boundary() {
        let params = FhParams {
            sigma: 0.0,
            k: 10.0,
            min_size: 1,
        };
        let sp = segment(&split_image(16, 16), &params).unwrap();
        assert_eq!(sp.region_count(), 2);
        for y in 0..16 {
            for x in 0..16 {
                let expected = usize::from(x >= 8);
                assert_eq!(sp.region_of(y * 16 + x), expected);
            }
        }
        assert_eq!(sp.adjacency().iter().collect::<Vec<_>>(), vec![&(0, 1)]);
    }

    #[test]
    fn min_size_absorbs_small_components() {
        let mut img = ImageRaster::filled(12, 12, [0, 0, 0]);
        img.set(5, 5, [255, 255, 255]);
        let mut params = FhParams {
            sigma: 0.0,
            k: 1.0,
            min_size: 1,
        };
        assert_eq!(segment(&img, &params).unwrap().region_count(), 2);
        params.min_size = 2;
        assert_eq!(segment(&img, &params).unwrap().region_count(), 1);
    }

    #[test]
    fn from_labels_splits_disconnected_pieces() {
        // Label 7 appears in two pieces separated by label 1.
        let labels = [7, 1, 7, 1, 1, 1];
        let sp = SuperpixelMap::from_labels(3, 2, &labels).unwrap();
        assert_eq!(sp.region_count(), 3);
        assert_eq!(sp.region_ids(), &[0, 1, 2, 1, 1, 1]);
        assert!(sp.adjacency().contains(&(0, 1)));
        assert!(sp.adjacency().contains(&(1, 2)));
        assert!(!sp.adjacency().contains(&(0, 2)));
    }

    #[test]
    fn averages_per_region() {
        let sp = SuperpixelMap::from_labels(2, 1, &[0, 0]).unwrap();
        let r = ScalarRaster::new(2, 1, vec![0.2, 0.8]).unwrap();
        let avg = average_raster_per_region(&sp, &r).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-7);

        let sp = segment(&split_image(8, 8), &FhParams::default()).unwrap();
        let avg = average_raster_per_region(&sp, &ScalarRaster::filled(8, 8, 0.3)).unwrap();
        assert!(avg.iter().all(|v| (v - 0.3).abs() < 1e-7));

        let bad = ScalarRaster::filled(4, 8, 0.0);
        assert!(matches!(
            average_raster_per_region(&sp, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_invalid_params() {
        let img = ImageRaster::filled(2, 2, [0, 0, 0]);
        for p in [
            FhParams {
                sigma: -1.0,
                ..FhParams::default()
            },
            FhParams {
                k: 0.0,
                ..FhParams::default()
            },
            FhParams {
                min_size: 0,
                ..FhParams::default()
            },
        ] {
            assert!(segment(&img, &p).is_err());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sp = segment(&split_image(10, 6), &FhParams::small_image()).unwrap();
        sp.save(dir.path(), "sp").unwrap();
        let back = SuperpixelMap::load(dir.path().join("sp.f32r")).unwrap();
        assert_eq!(back, sp);
        let adj = std::fs::read_to_string(dir.path().join("sp.adj")).unwrap();
        assert_eq!(adj, sp.adjacency_text());
    }
}
