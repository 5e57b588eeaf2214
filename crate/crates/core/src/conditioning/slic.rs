use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicConfig {
    pub superpixels: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            superpixels: 16,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Label map over an `h×w` grid; `-1` marks cells outside the foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelAssignment {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i32>,
    pub counts: Vec<usize>,
}

impl SuperpixelAssignment {
    pub fn count(&self) -> usize {
        self.counts.len()
    }

    pub fn label(&self, y: usize, x: usize) -> i32 {
        self.labels[y * self.width + x]
    }
}

struct Center {
    feature: Vec<f64>,
    y: f64,
    x: f64,
}

/// Masked SLIC over a `[h, w, C]` feature map. Only foreground cells of
/// `foreground` are clustered.
pub fn slic_superpixels<T: Real>(
    features: &Tensor<T>,
    foreground: &Mask,
    config: &SlicConfig,
    seed: u64,
) -> Result<SuperpixelAssignment> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "SLIC features must be [h, w, C], got {s:?}"
        )));
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    foreground.check_dims(h, w)?;
    if config.superpixels == 0 {
        return Err(Error::Config("superpixel count must be >= 1".into()));
    }
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| foreground.get(y, x))
        .collect();
    if fg.is_empty() {
        return Err(Error::Input("no foreground to cluster".into()));
    }
    let target = config.superpixels.min(fg.len());
    let step = (fg.len() as f64 / target as f64).sqrt();
    let feat = |y: usize, x: usize| -> Vec<f64> {
        features.data()[(y * w + x) * ch..(y * w + x + 1) * ch]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    };

    let mut rng = Rng::new(seed).split("slic");
    let bbox = foreground.bbox().expect("nonempty foreground");
    // Grid points sit at patch centres over the foreground box; each keeps its
    // continuous position and takes features from the cell under it.
    let mut seeds: Vec<(usize, usize, f64, f64)> = Vec::new();
    let rows = ((bbox.height() as f64 / step).ceil() as usize).max(1);
    let cols = ((bbox.width() as f64 / step).ceil() as usize).max(1);
    for i in 0..rows {
        let gy = bbox.y0 as f64 + (i as f64 + 0.5) * step - 0.5;
        for j in 0..cols {
            let gx = bbox.x0 as f64 + (j as f64 + 0.5) * step - 0.5;
            let y = (gy.round().max(0.0) as usize).min(bbox.y1);
            let x = (gx.round().max(0.0) as usize).min(bbox.x1);
            if foreground.get(y, x) && !seeds.iter().any(|s| (s.0, s.1) == (y, x)) {
                seeds.push((y, x, gy, gx));
            }
        }
    }
    if seeds.len() > target {
        rng.shuffle(&mut seeds);
        seeds.truncate(target);
    } else if seeds.len() < target {
        let mut spare: Vec<(usize, usize, f64, f64)> = fg
            .iter()
            .filter(|p| !seeds.iter().any(|s| (s.0, s.1) == **p))
            .map(|&(y, x)| (y, x, y as f64, x as f64))
            .collect();
        rng.shuffle(&mut spare);
        seeds.extend(spare.into_iter().take(target - seeds.len()));
    }
    let mut centers: Vec<Center> = seeds
        .iter()
        .map(|&(y, x, cy, cx)| Center {
            feature: feat(y, x),
            y: cy,
            x: cx,
        })
        .collect();

    let spatial_weight = config.compactness / step;
    let mut assign = vec![0usize; fg.len()];
    for _ in 0..config.iterations.max(1) {
        for (a, &(y, x)) in assign.iter_mut().zip(&fg) {
            let f = feat(y, x);
            let mut best = (0, f64::INFINITY);
            for (k, c) in centers.iter().enumerate() {
                let df: f64 = f
                    .iter()
                    .zip(&c.feature)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                let d = df.sqrt() + spatial_weight * ds.sqrt();
                if d < best.1 {
                    best = (k, d);
                }
            }
            *a = best.0;
        }
        let mut sums: Vec<(Vec<f64>, f64, f64, usize)> = (0..centers.len())
            .map(|_| (vec![0.0; ch], 0.0, 0.0, 0))
            .collect();
        for (&k, &(y, x)) in assign.iter().zip(&fg) {
            let acc = &mut sums[k];
            for (s, v) in acc.0.iter_mut().zip(feat(y, x)) {
                *s += v;
            }
            acc.1 += y as f64;
            acc.2 += x as f64;
            acc.3 += 1;
        }
        for (c, (fs, sy, sx, n)) in centers.iter_mut().zip(sums) {
            if n > 0 {
                let n = n as f64;
                c.feature = fs.into_iter().map(|v| v / n).collect();
                c.y = sy / n;
                c.x = sx / n;
            }
        }
    }

    let mut labels = vec![-1i32; h * w];
    for (&k, &(y, x)) in assign.iter().zip(&fg) {
        labels[y * w + x] = k as i32;
    }
    merge_orphans(&mut labels, h, w);
    Ok(relabel(labels, h, w))
}

/// Keeps the largest 4-connected fragment of each label and merges every
/// other fragment into a label it touches.
fn merge_orphans(labels: &mut [i32], h: usize, w: usize) {
    let mut component = vec![usize::MAX; h * w];
    let mut fragments: Vec<(i32, Vec<usize>)> = Vec::new();
    for start in 0..h * w {
        if labels[start] < 0 || component[start] != usize::MAX {
            continue;
        }
        let label = labels[start];
        let id = fragments.len();
        let mut cells = vec![start];
        component[start] = id;
        let mut i = 0;
        while i < cells.len() {
            let p = cells[i];
            i += 1;
            for q in neighbours(p, h, w) {
                if labels[q] == label && component[q] == usize::MAX {
                    component[q] = id;
                    cells.push(q);
                }
            }
        }
        fragments.push((label, cells));
    }
    let mut largest: std::collections::BTreeMap<i32, usize> = Default::default();
    for (id, (label, cells)) in fragments.iter().enumerate() {
        let e = largest.entry(*label).or_insert(id);
        if fragments[*e].1.len() < cells.len() {
            *e = id;
        }
    }
    for (id, (label, cells)) in fragments.iter().enumerate() {
        if largest[label] == id {
            continue;
        }
        let target = cells
            .iter()
            .flat_map(|&p| neighbours(p, h, w))
            .map(|q| labels[q])
            .find(|&l| l >= 0 && l != *label);
        if let Some(t) = target {
            for &p in cells {
                labels[p] = t;
            }
        }
    }
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    let up = (y > 0).then(|| p - w);
    let down = (y + 1 < h).then(|| p + w);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < w).then(|| p + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Renumbers labels `0..S` in raster order of first appearance.
fn relabel(labels: Vec<i32>, height: usize, width: usize) -> SuperpixelAssignment {
    let mut map: std::collections::HashMap<i32, i32> = Default::default();
    let mut counts = Vec::new();
    let labels = labels
        .into_iter()
        .map(|l| {
            if l < 0 {
                return -1;
            }
            let next = map.len() as i32;
            let id = *map.entry(l).or_insert(next);
            if id as usize == counts.len() {
                counts.push(0);
            }
            counts[id as usize] += 1;
            id
        })
        .collect();
    SuperpixelAssignment {
        height,
        width,
        labels,
        counts,
    }
}

/// Per-superpixel mean of a `[h, w, C]` feature map: row `j` is the sum of
/// the features labelled `j` divided by their count. Returns `[S, C]`.
pub fn localized_masked_pooling<T: Real>(
    features: &Tensor<T>,
    assignment: &SuperpixelAssignment,
) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != assignment.height || s[1] != assignment.width {
        return Err(Error::Dimension(format!(
            "features {s:?} do not match a {}x{} assignment",
            assignment.height, assignment.width
        )));
    }
    let ch = s[2];
    let mut sums = vec![T::zero(); assignment.count() * ch];
    for (p, &l) in assignment.labels.iter().enumerate() {
        if l >= 0 {
            let row = &mut sums[l as usize * ch..(l as usize + 1) * ch];
            for (acc, &v) in row.iter_mut().zip(&features.data()[p * ch..(p + 1) * ch]) {
                *acc += v;
            }
        }
    }
    for (row, &n) in sums.chunks_exact_mut(ch).zip(&assignment.counts) {
        let n = T::lit(n as f64);
        for v in row {
            *v = *v / n;
        }
    }
    Tensor::new([assignment.count(), ch], sums)
}
