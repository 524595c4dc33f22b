//! Quadrature: log-domain adaptive Gauss–Kronrod on intervals and
//! tensor-product Gauss–Legendre on centred cubes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

// Gauss–Kronrod 7/15 abscissae (positive half, descending) and weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Computes `ln ∫_a^b exp(ln_f(s)) ds` by globally adaptive Gauss–Kronrod
/// bisection, rescaling each panel by its largest log-value so that
/// integrands like `exp(e^{2s})` never overflow. The panel with the largest
/// error estimate is split until the summed error is below `rtol` times the
/// total or `max_panels` panels exist.
pub fn ln_integrate(ln_f: &dyn Fn(f64) -> f64, a: f64, b: f64, rtol: f64, max_panels: usize) -> Result<f64> {
    if !(b >= a) {
        return Err(Error::QuadratureFailure(format!("reversed interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(f64::NEG_INFINITY);
    }
    let first = ln_panel(ln_f, a, b)?;
    if first.shift == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sums = Sums::new(&first);
    let mut heap = BinaryHeap::from([first]);
    let mut resolved: Vec<Panel> = Vec::new();
    let mut panels = 1;
    while sums.error > rtol * (sums.open + sums.resolved) && panels < max_panels {
        let Some(worst) = heap.pop() else { break };
        let c = 0.5 * (worst.a + worst.b);
        let children = if c <= worst.a || c >= worst.b || worst.b - worst.a < 4.0 * f64::EPSILON * c.abs().max(1.0) {
            resolved.push(worst);
            None
        } else {
            Some([ln_panel(ln_f, worst.a, c)?, ln_panel(ln_f, c, worst.b)?])
        };
        if let Some(children) = children {
            heap.extend(children);
            panels += 1;
        }
        if worst.shift >= sums.top || panels % 64 == 0 {
            // The largest panel changed (or drift may have built up): rebuild.
            sums = Sums::rebuild(&heap, &resolved);
        } else {
            sums.remove(&worst);
            match children {
                Some(children) => children.iter().for_each(|p| sums.add_open(p)),
                None => sums.add_resolved(&worst),
            }
        }
    }
    Ok(sums.top + (sums.open + sums.resolved).ln())
}

/// Running totals relative to `exp(top)`.
struct Sums {
    top: f64,
    open: f64,
    resolved: f64,
    error: f64,
}

impl Sums {
    fn new(p: &Panel) -> Self {
        Self { top: p.shift, open: p.value, resolved: 0.0, error: p.error }
    }

    fn rebuild(heap: &BinaryHeap<Panel>, resolved: &[Panel]) -> Self {
        let top = heap.iter().chain(resolved).map(|p| p.shift).fold(f64::NEG_INFINITY, f64::max);
        let mut s = Self { top, open: 0.0, resolved: 0.0, error: 0.0 };
        heap.iter().for_each(|p| s.add_open(p));
        resolved.iter().for_each(|p| s.add_resolved(p));
        s
    }

    fn rel(&self, p: &Panel, x: f64) -> f64 {
        if x == 0.0 {
            0.0
        } else {
            x * (p.shift - self.top).exp()
        }
    }

    fn lift(&mut self, p: &Panel) {
        if p.shift > self.top {
            let scale = (self.top - p.shift).exp();
            self.open *= scale;
            self.resolved *= scale;
            self.error *= scale;
            self.top = p.shift;
        }
    }

    fn add_open(&mut self, p: &Panel) {
        self.lift(p);
        self.open += self.rel(p, p.value);
        self.error += self.rel(p, p.error);
    }

    fn add_resolved(&mut self, p: &Panel) {
        self.lift(p);
        self.resolved += self.rel(p, p.value);
    }

    fn remove(&mut self, p: &Panel) {
        self.open = (self.open - self.rel(p, p.value)).max(0.0);
        self.error = (self.error - self.rel(p, p.error)).max(0.0);
    }
}

/// A panel's integral is `exp(shift) * value` with error `exp(shift) * error`.
#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    shift: f64,
    value: f64,
    error: f64,
}

impl Panel {
    fn ln_error(&self) -> f64 {
        self.shift + self.error.ln()
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ln_error().total_cmp(&other.ln_error())
    }
}

fn ln_panel(ln_f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Result<Panel> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut vals = [0.0; 15];
    for k in 0..7 {
        vals[2 * k] = ln_f(c - h * XGK[k]);
        vals[2 * k + 1] = ln_f(c + h * XGK[k]);
    }
    vals[14] = ln_f(c);
    if vals.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::QuadratureFailure(format!("integrand not finite on [{a}, {b}]")));
    }
    let shift = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Ok(Panel { a, b, shift, value: 0.0, error: 0.0 });
    }
    let e = |i: usize| (vals[i] - shift).exp();
    let mut kron = WGK[7] * e(14);
    let mut gauss = WG[3] * e(14);
    for k in 0..7 {
        let pair = e(2 * k) + e(2 * k + 1);
        kron += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    // Log-values carry absolute rounding of about ε|ln f|, which bounds the
    // attainable relative accuracy. On a panel where f varies by less than a
    // factor e, a Kronrod–Gauss difference below that floor is noise.
    let noise = 16.0 * f64::EPSILON * shift.abs().max(1.0);
    let spread = shift - vals.iter().copied().fold(f64::INFINITY, f64::min);
    let diff = (kron - gauss).abs();
    let err = if spread <= 1.0 && diff <= noise * kron { 0.0 } else { diff };
    Ok(Panel { a, b, shift, value: kron * h, error: err * h })
}

/// Gauss–Legendre rule on `[-1, 1]` as `(node, weight)` pairs.
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let order = NonZeroUsize::new(order).expect("quadrature order must be positive");
    GaussLegendre::new(order).as_node_weight_pairs().to_vec()
}

/// 1-D composite rule on `[-radius, radius]` with `panels` panels.
fn composite_rule(radius: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let base = gauss_legendre(order);
    let width = 2.0 * radius / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = -radius + p as f64 * width;
        for &(x, w) in &base {
            out.push((lo + 0.5 * width * (x + 1.0), 0.5 * width * w));
        }
    }
    out
}

/// Tensor-product integral of `f` over `[-radius, radius]^dim`.
pub fn cube_integral(f: &dyn Fn(&[f64]) -> f64, dim: usize, radius: f64, panels: usize, order: usize) -> f64 {
    let rule = composite_rule(radius, panels, order);
    let n = rule.len();
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            x[k] = rule[i].0;
            w *= rule[i].1;
        }
        total += w * f(&x);
        // odometer increment
        let mut k = 0;
        loop {
            if k == dim {
                return total;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Largest `|f|` over the tensor nodes lying on the faces of the cube.
fn boundary_max(f: &dyn Fn(&[f64]) -> f64, dim: usize, radius: f64, panels: usize, order: usize) -> f64 {
    let rule: Vec<f64> = composite_rule(radius, panels, order).into_iter().map(|(x, _)| x).collect();
    let mut worst: f64 = 0.0;
    let mut x = vec![0.0; dim];
    for face_axis in 0..dim {
        for side in [-radius, radius] {
            let others = dim - 1;
            let total = rule.len().pow(others as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut k_other = 0;
                for k in 0..dim {
                    if k == face_axis {
                        x[k] = side;
                    } else {
                        x[k] = rule[rem % rule.len()];
                        rem /= rule.len();
                        k_other += 1;
                    }
                }
                debug_assert_eq!(k_other, others);
                worst = worst.max(f(&x).abs());
            }
        }
    }
    worst
}

/// Result of an integral over R^d truncated to a cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedIntegral {
    pub value: f64,
    /// `|I(order) - I(order - 4)|` on the final cube.
    pub error: f64,
    pub radius: f64,
    /// Largest `|f|` on the cube faces relative to `|value|`.
    pub boundary_ratio: f64,
}

/// Integrates `f` over R^d, growing the cube `[-R, R]^d` until the integrand
/// on its faces is below `boundary_tol` times the running total.
pub fn integrate_rd(f: &dyn Fn(&[f64]) -> f64, dim: usize, boundary_tol: f64, max_radius: f64) -> Result<TruncatedIntegral> {
    const ORDER: usize = 10;
    let mut radius: f64 = 2.0;
    loop {
        let panels = (2.0 * radius).ceil() as usize;
        let value = cube_integral(f, dim, radius, panels, ORDER);
        let edge = boundary_max(f, dim, radius, panels, ORDER);
        let ratio = if value != 0.0 { edge / value.abs() } else if edge == 0.0 { 0.0 } else { f64::INFINITY };
        if ratio < boundary_tol {
            let coarse = cube_integral(f, dim, radius, panels, ORDER - 4);
            return Ok(TruncatedIntegral { value, error: (value - coarse).abs(), radius, boundary_ratio: ratio });
        }
        if radius >= max_radius {
            return Err(Error::IntegrabilityProbeFailed(format!(
                "integrand on the faces of [-{radius}, {radius}]^{dim} is still {ratio:e} of the total"
            )));
        }
        radius = (radius + 1.0).min(max_radius);
    }
}
