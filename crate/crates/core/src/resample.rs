//! Bilinear resampling between spatial grids (half-pixel centers, edge clamped).
//!
//! The map is linear, so [`Bilinear::transpose`] gives the exact adjoint used
//! when back-propagating a per-pixel gradient to the coarse grid.

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            let frac = if hi == lo { 0.0 } else { frac };
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bilinear {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl Bilinear {
    pub fn new(input: (usize, usize), output: (usize, usize)) -> Self {
        assert!(input.0 > 0 && input.1 > 0 && output.0 > 0 && output.1 > 0);
        Bilinear {
            in_h: input.0,
            in_w: input.1,
            out_h: output.0,
            out_w: output.1,
            rows: taps(input.0, output.0),
            cols: taps(input.1, output.1),
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    /// Resample a row-major `in_h × in_w` plane.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_h * self.in_w);
        if self.is_identity() {
            return input.to_vec();
        }
        let mut out = Vec::with_capacity(self.out_h * self.out_w);
        for r in &self.rows {
            let top = &input[r.lo * self.in_w..(r.lo + 1) * self.in_w];
            let bot = &input[r.hi * self.in_w..(r.hi + 1) * self.in_w];
            for c in &self.cols {
                let t = c.w_lo * top[c.lo] + c.w_hi * top[c.hi];
                let b = c.w_lo * bot[c.lo] + c.w_hi * bot[c.hi];
                out.push(r.w_lo * t + r.w_hi * b);
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward): scatter an output-grid plane back
    /// onto the input grid.
    pub fn transpose(&self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.out_h * self.out_w);
        if self.is_identity() {
            return grad.to_vec();
        }
        let mut out = vec![0.0; self.in_h * self.in_w];
        for (y, r) in self.rows.iter().enumerate() {
            for (x, c) in self.cols.iter().enumerate() {
                let g = grad[y * self.out_w + x];
                if g == 0.0 {
                    continue;
                }
                let gt = r.w_lo * g;
                let gb = r.w_hi * g;
                out[r.lo * self.in_w + c.lo] += c.w_lo * gt;
                out[r.lo * self.in_w + c.hi] += c.w_hi * gt;
                out[r.hi * self.in_w + c.lo] += c.w_lo * gb;
                out[r.hi * self.in_w + c.hi] += c.w_hi * gb;
            }
        }
        out
    }
}
