use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};

/// Foreground mask on a pixel grid, row-major with `y` pointing down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig("mask must have positive size".into()));
        }
        if data.len() != width * height {
            return Err(Error::mismatch("mask pixels", width * height, data.len()));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::InvalidConfig("mask has no foreground pixels".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, data)
    }

    /// Pixels with mean channel value above one half are foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = crate::texture::RgbImage::load_png(path.as_ref())?;
        Self::from_fn(img.width(), img.height(), |x, y| {
            let p = img.pixel(x, y);
            (p[0] + p[1] + p[2]) / 3.0 > 0.5
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-range coordinates read as background.
    fn at(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Label 4-connected components of pixels equal to `value`.
    fn components(&self, value: bool) -> (Vec<usize>, Vec<usize>) {
        let (w, h) = (self.width, self.height);
        let mut label = vec![usize::MAX; w * h];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for s in 0..w * h {
            if self.data[s] != value || label[s] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            label[s] = id;
            queue.push_back(s);
            while let Some(p) = queue.pop_front() {
                size += 1;
                let (x, y) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if self.data[q] == value && label[q] == usize::MAX {
                        label[q] = id;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            sizes.push(size);
        }
        (label, sizes)
    }

    fn keep_largest_component(&mut self) {
        let (label, sizes) = self.components(true);
        let Some(best) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
            return;
        };
        for (d, l) in self.data.iter_mut().zip(&label) {
            *d = *d && *l == best;
        }
    }

    /// Background regions that do not touch the image border become
    /// foreground.
    fn fill_holes(&mut self) -> bool {
        let (w, h) = (self.width, self.height);
        let (label, sizes) = self.components(false);
        let mut touches = vec![false; sizes.len()];
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    let l = label[y * w + x];
                    if l != usize::MAX {
                        touches[l] = true;
                    }
                }
            }
        }
        let mut changed = false;
        for (d, l) in self.data.iter_mut().zip(&label) {
            if !*d && !touches[*l] {
                *d = true;
                changed = true;
            }
        }
        changed
    }

    /// Fills 2×2 blocks whose foreground touches only diagonally, including
    /// against the implicit background outside the image.
    fn fix_diagonal_pinches(&mut self) -> bool {
        let mut changed = false;
        let (w, h) = (self.width as i64, self.height as i64);
        for y in -1..h {
            for x in -1..w {
                let a = self.at(x, y);
                let b = self.at(x + 1, y);
                let c = self.at(x, y + 1);
                let d = self.at(x + 1, y + 1);
                let fill: &[(i64, i64)] = if a && d && !b && !c {
                    &[(x + 1, y), (x, y + 1)]
                } else if b && c && !a && !d {
                    &[(x, y), (x + 1, y + 1)]
                } else {
                    &[]
                };
                for &(px, py) in fill {
                    if px >= 0 && py >= 0 && px < w && py < h {
                        self.data[py as usize * self.width + px as usize] = true;
                        changed = true;
                    }
                }
            }
        }
        changed
    }

    /// Single 4-connected, hole-free region without diagonal-only contacts,
    /// so its outline is one simple polygon.
    pub fn prepared(&self) -> Self {
        let mut m = self.clone();
        loop {
            let fixed = m.fix_diagonal_pinches();
            m.keep_largest_component();
            let filled = m.fill_holes();
            if !filled && !fixed {
                break;
            }
        }
        m
    }

    /// Outline of a prepared mask along pixel corners, as a closed polygon in
    /// pixel coordinates without repeated or collinear vertices.
    pub fn outer_contour(&self) -> Result<Vec<[f64; 2]>> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut next: BTreeMap<(i64, i64), (i64, i64)> = BTreeMap::new();
        let mut push = |a: (i64, i64), b: (i64, i64)| -> Result<()> {
            if next.insert(a, b).is_some() {
                return Err(Error::Triangulation(format!(
                    "mask outline touches itself at pixel corner ({}, {})",
                    a.0, a.1
                )));
            }
            Ok(())
        };
        for y in 0..h {
            for x in 0..w {
                if !self.at(x, y) {
                    continue;
                }
                if !self.at(x, y - 1) {
                    push((x, y), (x + 1, y))?;
                }
                if !self.at(x + 1, y) {
                    push((x + 1, y), (x + 1, y + 1))?;
                }
                if !self.at(x, y + 1) {
                    push((x + 1, y + 1), (x, y + 1))?;
                }
                if !self.at(x - 1, y) {
                    push((x, y + 1), (x, y))?;
                }
            }
        }
        let Some((&start, _)) = next.iter().next() else {
            return Err(Error::Triangulation("mask is empty".into()));
        };
        let mut ring = vec![start];
        let mut cur = next[&start];
        while cur != start {
            ring.push(cur);
            cur = *next
                .get(&cur)
                .ok_or_else(|| Error::Triangulation("mask outline is not closed".into()))?;
            if ring.len() > next.len() {
                return Err(Error::Triangulation("mask outline does not close".into()));
            }
        }
        if ring.len() != next.len() {
            return Err(Error::Triangulation(
                "mask has more than one outline; prepare it first".into(),
            ));
        }
        let n = ring.len();
        let corners: Vec<[f64; 2]> = (0..n)
            .filter(|&i| {
                let (p, c, q) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
                (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0) != 0
            })
            .map(|i| [ring[i].0 as f64, ring[i].1 as f64])
            .collect();
        Ok(corners)
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

fn simplify_chain(points: &[[f64; 2]], tol: f64, out: &mut Vec<[f64; 2]>) {
    let (first, last) = (points[0], points[points.len() - 1]);
    let mut worst = (0.0, 0);
    for (i, p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
        let d = point_segment_distance(*p, first, last);
        if d > worst.0 {
            worst = (d, i);
        }
    }
    if worst.0 > tol {
        simplify_chain(&points[..=worst.1], tol, out);
        simplify_chain(&points[worst.1..], tol, out);
    } else {
        out.push(first);
    }
}

/// Douglas-Peucker on a closed polygon: the ring is split at its first
/// vertex and the vertex farthest from it, and both chains are simplified.
pub fn simplify_polygon(ring: &[[f64; 2]], tolerance: f64) -> Vec<[f64; 2]> {
    let n = ring.len();
    if n < 4 {
        return ring.to_vec();
    }
    let far = (1..n)
        .max_by(|&i, &j| {
            let di = (ring[i][0] - ring[0][0]).hypot(ring[i][1] - ring[0][1]);
            let dj = (ring[j][0] - ring[0][0]).hypot(ring[j][1] - ring[0][1]);
            di.total_cmp(&dj).then(j.cmp(&i))
        })
        .unwrap();
    let mut closed = ring.to_vec();
    closed.push(ring[0]);
    let mut out = Vec::new();
    simplify_chain(&closed[..=far], tolerance, &mut out);
    simplify_chain(&closed[far..], tolerance, &mut out);
    out
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

pub(crate) fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// First pair of non-adjacent polygon edges that touch, if any.
pub fn find_self_intersection(ring: &[[f64; 2]]) -> Option<(usize, usize)> {
    let n = ring.len();
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(ring: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub(crate) fn distance_to_polygon(ring: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| point_segment_distance(p, ring[i], ring[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}
