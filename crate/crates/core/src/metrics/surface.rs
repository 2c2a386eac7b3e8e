//! Surface extraction and exact surface distances.
//!
//! Nearest-surface distances come from an exact squared Euclidean distance
//! transform (lower envelope of parabolas, one pass per axis) evaluated with
//! the physical spacing, so the cost is linear in the voxel count instead
//! of quadratic in the number of surface points.

use super::mask::{Label, SegmentationMask};

/// Surface voxels of one class: a foreground voxel is on the surface when
/// one of its face neighbours is background or lies outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    /// Flat indices into the mask.
    pub indices: Vec<usize>,
    /// Voxel centres in millimetres, `[z, y, x]` with `z = 0` for 2-D masks.
    pub points: Vec<[f64; 3]>,
}

impl Surface {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

pub(crate) fn surface_flags(fg: &[bool], dims: [usize; 3], volume: bool) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; fg.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !fg[i] {
                    continue;
                }
                let in_plane_edge = y == 0 || y + 1 == h || x == 0 || x + 1 == w;
                let depth_edge = volume && (z == 0 || z + 1 == d);
                out[i] = in_plane_edge
                    || depth_edge
                    || !fg[i - 1]
                    || !fg[i + 1]
                    || !fg[i - w]
                    || !fg[i + w]
                    || (volume && (!fg[i - h * w] || !fg[i + h * w]));
            }
        }
    }
    out
}

/// For 2-D masks only the in-plane four neighbourhood counts. A volume uses
/// six neighbours, so a one-slice volume is all surface.
pub fn extract_surface(mask: &SegmentationMask, class: Label) -> Surface {
    let dims = mask.dims3();
    let sp = mask.spacing3();
    let flags = surface_flags(&mask.binary(class), dims, mask.dims().len() == 3);
    let [_, h, w] = dims;
    let mut indices = Vec::new();
    let mut points = Vec::new();
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        indices.push(i);
        points.push([z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]);
    }
    Surface { indices, points }
}

/// Squared distance of a 1-D sampled function's lower envelope:
/// `out[p] = min_q f[q] + ((p − q)·s)²`. Infinite entries are ignored.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let xq = q as f64 * s;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * s;
                    let cut = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if cut <= *z.last().expect("parallel stacks") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cut);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let xp = p as f64 * s;
        while k + 1 < v.len() && z[k + 1] < xp {
            k += 1;
        }
        let xv = v[k] as f64 * s;
        *o = (xp - xv) * (xp - xv) + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel
/// with `seed[i] == true`; infinite everywhere when there is no seed.
pub fn squared_distance_transform(seed: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut pass = |g: &mut Vec<f64>, n: usize, starts: Vec<usize>, stride: usize, s: f64| {
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for start in starts {
            for (k, l) in line.iter_mut().enumerate() {
                *l = g[start + k * stride];
            }
            edt_1d(&line, s, &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                g[start + k * stride] = *o;
            }
        }
    };
    let rows: Vec<usize> = (0..d * h).map(|r| r * w).collect();
    pass(&mut g, w, rows, 1, spacing[2]);
    let cols: Vec<usize> = (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect();
    pass(&mut g, h, cols, w, spacing[1]);
    if d > 1 {
        pass(&mut g, d, (0..h * w).collect(), h * w, spacing[0]);
    }
    g
}

/// Directed nearest distances (mm) from each surface voxel of `from` to the
/// surface `to`, in the order of `from.indices`.
pub(crate) fn directed_distances(from: &Surface, to: &Surface, dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut seed = vec![false; n];
    for &i in &to.indices {
        seed[i] = true;
    }
    let dt = squared_distance_transform(&seed, dims, spacing);
    from.indices.iter().map(|&i| dt[i].sqrt()).collect()
}
