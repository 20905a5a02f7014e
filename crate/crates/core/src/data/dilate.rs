//! Widening lane labels.

/// Median length of the horizontal runs of equal nonzero labels; 0 when
/// there are no lane pixels.
pub fn estimate_lane_width(labels: &[u8], h: usize, w: usize) -> f64 {
    let mut runs = Vec::new();
    for y in 0..h {
        let row = &labels[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            let l = row[x];
            let start = x;
            while x < w && row[x] == l {
                x += 1;
            }
            if l > 0 {
                runs.push(x - start);
            }
        }
    }
    if runs.is_empty() {
        return 0.0;
    }
    runs.sort_unstable();
    let n = runs.len();
    if n % 2 == 1 {
        runs[n / 2] as f64
    } else {
        (runs[n / 2 - 1] + runs[n / 2]) as f64 / 2.0
    }
}

/// Widens every lane to about `width_px` by growing it with a disk of
/// radius `(width_px - current) / 2`, where the current width is
/// [`estimate_lane_width`]. A background pixel within the radius of some
/// lane takes the class of the nearest lane pixel (ties: lower class).
/// Lane pixels are never relabeled. No-op when the lanes are already at
/// least that wide.
pub fn dilate_labels(labels: &[u8], h: usize, w: usize, width_px: usize) -> Vec<u8> {
    let current = estimate_lane_width(labels, h, w);
    let r = (width_px as f64 - current) / 2.0;
    if current == 0.0 || r <= 0.0 {
        return labels.to_vec();
    }
    let reach = r.floor() as isize;
    let r2 = r * r;
    let mut offsets: Vec<(isize, isize, isize)> = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d2 = dy * dy + dx * dx;
            if d2 > 0 && (d2 as f64) <= r2 {
                offsets.push((d2, dy, dx));
            }
        }
    }
    offsets.sort_unstable();

    let mut out = labels.to_vec();
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != 0 {
                continue;
            }
            let mut best: Option<(isize, u8)> = None;
            for &(d2, dy, dx) in &offsets {
                if let Some((bd, _)) = best {
                    if d2 > bd {
                        break;
                    }
                }
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let l = labels[sy as usize * w + sx as usize];
                if l == 0 {
                    continue;
                }
                best = match best {
                    Some((bd, bl)) if bl <= l => Some((bd, bl)),
                    _ => Some((d2, l)),
                };
            }
            if let Some((_, l)) = best {
                out[y * w + x] = l;
            }
        }
    }
    out
}
