//! Poincaré-ball calculus.
//!
//! [`PoincareBall`] holds the curvature and exposes the raw vector kernels
//! (Möbius addition, exponential and logarithmic maps, distance, gyration,
//! parallel transport, hyperboloid lift). Every kernel has a matching
//! `*_vjp` that returns the vector-Jacobian product for an upstream
//! gradient; the differentiation engine in [`crate::adgrad`] is built on
//! those adjoints.
//!
//! [`BallPoint`] and [`TangentVector`] are the checked, typed surface: every
//! ball-valued result is re-projected so that `‖x‖² ≤ (1 − ε)/c` with
//! `ε = 1e-5`.
//!
//! ```
//! use hydro_core::manifold::{PoincareBall, mobius_add};
//!
//! let ball = PoincareBall::new(1.0).unwrap();
//! let x = ball.point(vec![0.3, 0.0]).unwrap();
//! let y = ball.point(vec![0.4, 0.0]).unwrap();
//! let z = mobius_add(&x, &y).unwrap();
//! assert!((z.coords()[0] - 0.625).abs() < 1e-12);
//! ```

use ndarray::{Array1, ArrayView1};

use crate::error::{HydroError, Result};

/// Margin kept between every stored point and the boundary of the ball.
pub const BOUNDARY_EPS: f64 = 1e-5;

// Below this magnitude the ratio helpers switch to their Taylor expansions.
const SERIES_CUTOFF: f64 = 1e-3;
// Largest argument passed to artanh.
const ARTANH_CLAMP: f64 = 1.0 - 1e-15;

/// `tanh(a) / a`, continuous at zero.
fn tanh_over(a: f64) -> f64 {
    if a.abs() < SERIES_CUTOFF {
        1.0 - a * a / 3.0
    } else {
        a.tanh() / a
    }
}

/// `(a·sech²a − tanh a) / a³`, the derivative kernel of [`tanh_over`].
fn tanh_over_d(a: f64) -> f64 {
    if a.abs() < SERIES_CUTOFF {
        -2.0 / 3.0 + 8.0 * a * a / 15.0
    } else {
        let t = a.tanh();
        (a * (1.0 - t * t) - t) / (a * a * a)
    }
}

fn artanh(a: f64) -> f64 {
    a.min(ARTANH_CLAMP).atanh()
}

/// `artanh(a) / a`, continuous at zero.
fn artanh_over(a: f64) -> f64 {
    if a.abs() < SERIES_CUTOFF {
        1.0 + a * a / 3.0
    } else {
        artanh(a) / a
    }
}

/// `(a/(1 − a²) − artanh a) / a³`, the derivative kernel of [`artanh_over`].
fn artanh_over_d(a: f64) -> f64 {
    if a.abs() < SERIES_CUTOFF {
        2.0 / 3.0 + 4.0 * a * a / 5.0
    } else {
        let a = a.min(ARTANH_CLAMP);
        (a / (1.0 - a * a) - artanh(a)) / (a * a * a)
    }
}

fn dot(x: &ArrayView1<f64>, y: &ArrayView1<f64>) -> f64 {
    x.dot(y)
}

fn check_dims(x: &ArrayView1<f64>, y: &ArrayView1<f64>, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(HydroError::shape(format!(
            "{what}: dimension {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// The Poincaré ball `{x : c‖x‖² < 1}` of curvature `−c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoincareBall {
    c: f64,
}

impl PoincareBall {
    pub fn new(curvature: f64) -> Result<Self> {
        if !(curvature.is_finite() && curvature > 0.0) {
            return Err(HydroError::domain(format!(
                "curvature must be positive and finite, got {curvature}"
            )));
        }
        Ok(Self { c: curvature })
    }

    pub fn curvature(&self) -> f64 {
        self.c
    }

    /// Euclidean radius `1/√c`.
    pub fn radius(&self) -> f64 {
        1.0 / self.c.sqrt()
    }

    /// Largest squared norm a projected point may have.
    pub fn max_norm_sq(&self) -> f64 {
        (1.0 - BOUNDARY_EPS) / self.c
    }

    /// Conformal factor `λ_x = 2 / (1 − c‖x‖²)`.
    pub fn conformal_factor(&self, x: ArrayView1<f64>) -> f64 {
        2.0 / (1.0 - self.c * dot(&x, &x))
    }

    /// Builds a checked point, projecting it inside the boundary margin.
    pub fn point(&self, coords: impl Into<Array1<f64>>) -> Result<BallPoint> {
        let coords = coords.into();
        let coords = project_to_ball(coords.view(), self)?;
        Ok(BallPoint {
            coords,
            ball: *self,
        })
    }

    pub fn origin(&self, dim: usize) -> BallPoint {
        BallPoint {
            coords: Array1::zeros(dim),
            ball: *self,
        }
    }

    // ---- raw kernels -------------------------------------------------------

    /// Möbius addition `x ⊕_c y` without projection.
    pub fn mobius_add_raw(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let c = self.c;
        let xy = dot(&x, &y);
        let x2 = dot(&x, &x);
        let y2 = dot(&y, &y);
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        let mut out = Array1::zeros(x.len());
        for ((o, &xi), &yi) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
            *o = (a * xi + b * yi) / den;
        }
        out
    }

    /// Adjoint of [`Self::mobius_add_raw`]: returns `(∂/∂x, ∂/∂y)` of `⟨g, x ⊕ y⟩`.
    pub fn mobius_add_vjp(
        &self,
        x: ArrayView1<f64>,
        y: ArrayView1<f64>,
        g: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let c = self.c;
        let xy = dot(&x, &y);
        let x2 = dot(&x, &x);
        let y2 = dot(&y, &y);
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;

        let gx_dot = dot(&g, &x);
        let gy_dot = dot(&g, &y);
        // numerator N = a·x + b·y
        let g_a = gx_dot / den;
        let g_b = gy_dot / den;
        let g_den = -(a * gx_dot + b * gy_dot) / (den * den);

        let mut gx = Array1::zeros(x.len());
        let mut gy = Array1::zeros(y.len());
        for i in 0..x.len() {
            let (xi, yi, gi) = (x[i], y[i], g[i]);
            gx[i] = a * gi / den
                + g_a * 2.0 * c * yi
                + g_b * (-2.0 * c * xi)
                + g_den * (2.0 * c * yi + 2.0 * c * c * y2 * xi);
            gy[i] = b * gi / den
                + g_a * (2.0 * c * xi + 2.0 * c * yi)
                + g_den * (2.0 * c * xi + 2.0 * c * c * x2 * yi);
        }
        (gx, gy)
    }

    /// Rescales `v` onto the boundary margin when it lies beyond it.
    pub fn project_raw(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let n2 = dot(&v, &v);
        let max = self.max_norm_sq();
        if n2 < max {
            v.to_owned()
        } else {
            let scale = (max / n2).sqrt();
            v.mapv(|x| x * scale)
        }
    }

    pub fn project_vjp(&self, v: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
        let n2 = dot(&v, &v);
        let max = self.max_norm_sq();
        if n2 < max {
            g.to_owned()
        } else {
            let n = n2.sqrt();
            let r = max.sqrt();
            let vg = dot(&v, &g);
            let mut out = Array1::zeros(v.len());
            for i in 0..v.len() {
                out[i] = r / n * (g[i] - v[i] * vg / n2);
            }
            out
        }
    }

    /// Exponential map at the origin, `tanh(√c‖u‖)·u/(√c‖u‖)`.
    pub fn expmap0_raw(&self, u: ArrayView1<f64>) -> Array1<f64> {
        let s = self.c.sqrt();
        let n = dot(&u, &u).sqrt();
        let f = tanh_over(s * n);
        u.mapv(|x| x * f)
    }

    pub fn expmap0_vjp(&self, u: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
        let s = self.c.sqrt();
        let n = dot(&u, &u).sqrt();
        let a = s * n;
        let f = tanh_over(a);
        // d f / d n divided by n
        let fd = s * s * tanh_over_d(a);
        let ug = dot(&u, &g);
        let mut out = Array1::zeros(u.len());
        for i in 0..u.len() {
            out[i] = f * g[i] + fd * ug * u[i];
        }
        out
    }

    /// Logarithmic map at the origin, `artanh(√c‖y‖)·y/(√c‖y‖)`.
    pub fn logmap0_raw(&self, y: ArrayView1<f64>) -> Array1<f64> {
        let s = self.c.sqrt();
        let n = dot(&y, &y).sqrt();
        let h = artanh_over(s * n);
        y.mapv(|x| x * h)
    }

    pub fn logmap0_vjp(&self, y: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
        let s = self.c.sqrt();
        let n = dot(&y, &y).sqrt();
        let a = s * n;
        let h = artanh_over(a);
        let hd = s * s * artanh_over_d(a);
        let yg = dot(&y, &g);
        let mut out = Array1::zeros(y.len());
        for i in 0..y.len() {
            out[i] = h * g[i] + hd * yg * y[i];
        }
        out
    }

    /// Exponential map at `p`:
    /// `p ⊕ tanh(√c·λ_p·‖u‖/2)·u/(√c‖u‖)`; the zero vector maps to `p`.
    pub fn expmap_raw(&self, p: ArrayView1<f64>, u: ArrayView1<f64>) -> Array1<f64> {
        let n = dot(&u, &u).sqrt();
        if n == 0.0 {
            return p.to_owned();
        }
        let w = self.expmap_step(p, u);
        self.mobius_add_raw(p, w.view())
    }

    /// The Möbius summand of `exp_p(u)`.
    fn expmap_step(&self, p: ArrayView1<f64>, u: ArrayView1<f64>) -> Array1<f64> {
        let s = self.c.sqrt();
        let lam = self.conformal_factor(p);
        let n = dot(&u, &u).sqrt();
        // tanh(sλn/2)/(s n) = (λ/2)·tanh_over(sλn/2)
        let k = 0.5 * lam * tanh_over(0.5 * s * lam * n);
        u.mapv(|x| x * k)
    }

    /// Adjoint of [`Self::expmap_raw`]: `(∂/∂p, ∂/∂u)`.
    pub fn expmap_vjp(
        &self,
        p: ArrayView1<f64>,
        u: ArrayView1<f64>,
        g: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let c = self.c;
        let s = c.sqrt();
        let lam = self.conformal_factor(p);
        let n = dot(&u, &u).sqrt();
        let a = 0.5 * s * lam * n;
        let w = self.expmap_step(p, u);
        let (mut gp, gw) = self.mobius_add_vjp(p, w.view(), g);

        let k = 0.5 * lam * tanh_over(a);
        let gw_u = dot(&gw.view(), &u);
        // dk/dn / n
        let kd = (0.5 * s * lam).powi(3) / s * tanh_over_d(a);
        let mut gu = Array1::zeros(u.len());
        for i in 0..u.len() {
            gu[i] = k * gw[i] + gw_u * kd * u[i];
        }
        // dk/dλ = sech²(a)/2, dλ/dp = cλ²p
        let t = a.tanh();
        let dk_dlam = 0.5 * (1.0 - t * t);
        let coef = gw_u * dk_dlam * c * lam * lam;
        for i in 0..p.len() {
            gp[i] += coef * p[i];
        }
        (gp, gu)
    }

    /// Logarithmic map at `p1`:
    /// `(2/(√c·λ_{p1}))·artanh(√c‖m‖)·m/‖m‖` with `m = (−p1) ⊕ p2`.
    pub fn logmap_raw(&self, p1: ArrayView1<f64>, p2: ArrayView1<f64>) -> Array1<f64> {
        let s = self.c.sqrt();
        let neg = p1.mapv(|x| -x);
        let m = self.mobius_add_raw(neg.view(), p2);
        let lam = self.conformal_factor(p1);
        let n = dot(&m.view(), &m.view()).sqrt();
        let q = 2.0 / lam * artanh_over(s * n);
        m.mapv(|x| x * q)
    }

    /// Adjoint of [`Self::logmap_raw`]: `(∂/∂p1, ∂/∂p2)`.
    pub fn logmap_vjp(
        &self,
        p1: ArrayView1<f64>,
        p2: ArrayView1<f64>,
        g: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let c = self.c;
        let s = c.sqrt();
        let neg = p1.mapv(|x| -x);
        let m = self.mobius_add_raw(neg.view(), p2);
        let lam = self.conformal_factor(p1);
        let n = dot(&m.view(), &m.view()).sqrt();
        let a = s * n;
        let q = 2.0 / lam * artanh_over(a);
        let qd = 2.0 / lam * c * artanh_over_d(a);
        let gm_dot = dot(&g, &m.view());
        let mut gm = Array1::zeros(m.len());
        for i in 0..m.len() {
            gm[i] = q * g[i] + qd * gm_dot * m[i];
        }
        let g_lam = -gm_dot * q / lam;
        let (gneg, gp2) = self.mobius_add_vjp(neg.view(), p2, gm.view());
        let mut gp1 = gneg.mapv(|x| -x);
        let coef = g_lam * c * lam * lam;
        for i in 0..p1.len() {
            gp1[i] += coef * p1[i];
        }
        (gp1, gp2)
    }

    /// Squared geodesic distance `(2/√c · artanh(√c‖(−p1) ⊕ p2‖))²`.
    pub fn distance_sq_raw(&self, p1: ArrayView1<f64>, p2: ArrayView1<f64>) -> f64 {
        let s = self.c.sqrt();
        let neg = p1.mapv(|x| -x);
        let m = self.mobius_add_raw(neg.view(), p2);
        let n = dot(&m.view(), &m.view()).sqrt();
        let d = 2.0 / s * artanh(s * n);
        d * d
    }

    pub fn distance_sq_vjp(
        &self,
        p1: ArrayView1<f64>,
        p2: ArrayView1<f64>,
        g: f64,
    ) -> (Array1<f64>, Array1<f64>) {
        let s = self.c.sqrt();
        let neg = p1.mapv(|x| -x);
        let m = self.mobius_add_raw(neg.view(), p2);
        let n = dot(&m.view(), &m.view()).sqrt();
        let a = (s * n).min(ARTANH_CLAMP);
        let coef = g * 8.0 * artanh_over(a) / (1.0 - a * a);
        let gm = m.mapv(|x| x * coef);
        let (gneg, gp2) = self.mobius_add_vjp(neg.view(), p2, gm.view());
        (gneg.mapv(|x| -x), gp2)
    }

    /// Gyration `gyr[a, b] w`, evaluated with the closed form that is linear
    /// in `w`.
    pub fn gyration_raw(
        &self,
        a: ArrayView1<f64>,
        b: ArrayView1<f64>,
        w: ArrayView1<f64>,
    ) -> Array1<f64> {
        let c = self.c;
        let ab = dot(&a, &b);
        let aw = dot(&a, &w);
        let bw = dot(&b, &w);
        let a2 = dot(&a, &a);
        let b2 = dot(&b, &b);
        let ca = -c * c * aw * b2 + c * bw + 2.0 * c * c * ab * bw;
        let cb = -c * c * bw * a2 - c * aw;
        let den = 1.0 + 2.0 * c * ab + c * c * a2 * b2;
        let mut out = w.to_owned();
        for i in 0..out.len() {
            out[i] += 2.0 * (ca * a[i] + cb * b[i]) / den;
        }
        out
    }

    /// Adjoint of [`Self::gyration_raw`]: `(∂/∂a, ∂/∂b, ∂/∂w)`.
    pub fn gyration_vjp(
        &self,
        a: ArrayView1<f64>,
        b: ArrayView1<f64>,
        w: ArrayView1<f64>,
        g: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let c = self.c;
        let c2 = c * c;
        let ab = dot(&a, &b);
        let aw = dot(&a, &w);
        let bw = dot(&b, &w);
        let a2 = dot(&a, &a);
        let b2 = dot(&b, &b);
        let ca = -c2 * aw * b2 + c * bw + 2.0 * c2 * ab * bw;
        let cb = -c2 * bw * a2 - c * aw;
        let den = 1.0 + 2.0 * c * ab + c2 * a2 * b2;

        let ga_dot = dot(&g, &a);
        let gb_dot = dot(&g, &b);
        // out = w + 2N/den, N = ca·a + cb·b
        let g_ca = 2.0 * ga_dot / den;
        let g_cb = 2.0 * gb_dot / den;
        let g_den = -2.0 * (ca * ga_dot + cb * gb_dot) / (den * den);

        let dim = a.len();
        let mut grad_a = Array1::zeros(dim);
        let mut grad_b = Array1::zeros(dim);
        let mut grad_w = g.to_owned();
        for i in 0..dim {
            let (ai, bi, wi, gi) = (a[i], b[i], w[i], g[i]);
            grad_a[i] = 2.0 * ca * gi / den
                + g_ca * (-c2 * b2 * wi + 2.0 * c2 * bw * bi)
                + g_cb * (-2.0 * c2 * bw * ai - c * wi)
                + g_den * (2.0 * c * bi + 2.0 * c2 * b2 * ai);
            grad_b[i] = 2.0 * cb * gi / den
                + g_ca * (-2.0 * c2 * aw * bi + c * wi + 2.0 * c2 * (bw * ai + ab * wi))
                + g_cb * (-c2 * a2 * wi)
                + g_den * (2.0 * c * ai + 2.0 * c2 * a2 * bi);
            grad_w[i] += g_ca * (-c2 * b2 * ai + c * bi + 2.0 * c2 * ab * bi)
                + g_cb * (-c2 * a2 * bi - c * ai);
        }
        (grad_a, grad_b, grad_w)
    }

    /// Parallel transport `PT_{x→y}(u) = gyr[y, −x](u) · λ_x/λ_y`.
    pub fn transport_raw(
        &self,
        x: ArrayView1<f64>,
        y: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Array1<f64> {
        let neg_x = x.mapv(|v| -v);
        let scale = self.transport_scale(x, y);
        let mut out = self.gyration_raw(y, neg_x.view(), u);
        out.mapv_inplace(|v| v * scale);
        out
    }

    fn transport_scale(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        (1.0 - self.c * dot(&y, &y)) / (1.0 - self.c * dot(&x, &x))
    }

    /// Adjoint of [`Self::transport_raw`]: `(∂/∂x, ∂/∂y, ∂/∂u)`.
    pub fn transport_vjp(
        &self,
        x: ArrayView1<f64>,
        y: ArrayView1<f64>,
        u: ArrayView1<f64>,
        g: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let c = self.c;
        let neg_x = x.mapv(|v| -v);
        let kappa = self.transport_scale(x, y);
        let gyr = self.gyration_raw(y, neg_x.view(), u);
        let g_kappa = dot(&g, &gyr.view());
        let g_gyr = g.mapv(|v| v * kappa);
        let (ga, gb, gu) = self.gyration_vjp(y, neg_x.view(), u, g_gyr.view());
        let bx = 1.0 - c * dot(&x, &x);
        let by = 1.0 - c * dot(&y, &y);
        let mut gx = gb.mapv(|v| -v);
        let mut gy = ga;
        for i in 0..x.len() {
            gx[i] += g_kappa * by * 2.0 * c * x[i] / (bx * bx);
            gy[i] += g_kappa * (-2.0 * c * y[i] / bx);
        }
        (gx, gy, gu)
    }

    /// Lift to the hyperboloid `−t² + ‖s‖² = −K`, `K = 1/c`:
    /// `√K·(K + ‖x‖², 2√K·x) / (K − ‖x‖²)`.
    pub fn to_hyperboloid_raw(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let k = 1.0 / self.c;
        let sqrt_k = k.sqrt();
        let q = dot(&x, &x);
        let r = sqrt_k / (k - q);
        let mut out = Array1::zeros(x.len() + 1);
        out[0] = (k + q) * r;
        let sk = 2.0 * sqrt_k * r;
        for i in 0..x.len() {
            out[i + 1] = sk * x[i];
        }
        out
    }

    pub fn to_hyperboloid_vjp(&self, x: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
        let k = 1.0 / self.c;
        let sqrt_k = k.sqrt();
        let q = dot(&x, &x);
        let r = 1.0 / (k - q);
        let sk = 2.0 * sqrt_k;
        let gs_x: f64 = (0..x.len()).map(|i| g[i + 1] * x[i]).sum();
        // before the √K factor: dt/dq = 2K r², d(r)/dq = r²
        let g_q = g[0] * 2.0 * k * r * r + sk * gs_x * r * r;
        let mut out = Array1::zeros(x.len());
        for i in 0..x.len() {
            out[i] = sqrt_k * (sk * r * g[i + 1] + g_q * 2.0 * x[i]);
        }
        out
    }
}

/// A point strictly inside the boundary margin of its ball.
#[derive(Clone, Debug, PartialEq)]
pub struct BallPoint {
    coords: Array1<f64>,
    ball: PoincareBall,
}

impl BallPoint {
    pub fn coords(&self) -> &Array1<f64> {
        &self.coords
    }

    pub fn ball(&self) -> PoincareBall {
        self.ball
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn conformal_factor(&self) -> f64 {
        self.ball.conformal_factor(self.coords.view())
    }

    pub fn into_coords(self) -> Array1<f64> {
        self.coords
    }

    /// Wraps raw kernel output, re-projecting it into the margin.
    fn from_raw(ball: PoincareBall, raw: Array1<f64>) -> BallPoint {
        BallPoint {
            coords: ball.project_raw(raw.view()),
            ball,
        }
    }

    pub fn tangent(&self, coords: impl Into<Array1<f64>>) -> Result<TangentVector> {
        let coords = coords.into();
        if coords.len() != self.dim() {
            return Err(HydroError::shape(format!(
                "tangent vector of dimension {} at a point of dimension {}",
                coords.len(),
                self.dim()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(HydroError::domain("tangent vector has non-finite entries"));
        }
        Ok(TangentVector {
            coords,
            base: self.clone(),
        })
    }
}

/// A tangent vector attached to a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    coords: Array1<f64>,
    base: BallPoint,
}

impl TangentVector {
    pub fn coords(&self) -> &Array1<f64> {
        &self.coords
    }

    pub fn base(&self) -> &BallPoint {
        &self.base
    }

    /// Riemannian norm `λ_base · ‖u‖`.
    pub fn metric_norm(&self) -> f64 {
        self.base.conformal_factor() * self.coords.dot(&self.coords).sqrt()
    }
}

fn same_ball(x: &BallPoint, y: &BallPoint, what: &str) -> Result<()> {
    if x.ball != y.ball {
        return Err(HydroError::contract(format!(
            "{what}: points live on balls of different curvature"
        )));
    }
    check_dims(&x.coords.view(), &y.coords.view(), what)
}

pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    same_ball(x, y, "mobius_add")?;
    let raw = x.ball.mobius_add_raw(x.coords.view(), y.coords.view());
    Ok(BallPoint::from_raw(x.ball, raw))
}

pub fn distance_sq(p1: &BallPoint, p2: &BallPoint) -> Result<f64> {
    same_ball(p1, p2, "distance_sq")?;
    Ok(p1.ball.distance_sq_raw(p1.coords.view(), p2.coords.view()))
}

pub fn exp_map(p: &BallPoint, u: &TangentVector) -> Result<BallPoint> {
    same_ball(p, &u.base, "exp_map")?;
    if u.base.coords != p.coords {
        return Err(HydroError::contract(
            "exp_map: tangent vector is not based at p",
        ));
    }
    let raw = p.ball.expmap_raw(p.coords.view(), u.coords.view());
    Ok(BallPoint::from_raw(p.ball, raw))
}

pub fn log_map(p1: &BallPoint, p2: &BallPoint) -> Result<TangentVector> {
    same_ball(p1, p2, "log_map")?;
    let coords = p1.ball.logmap_raw(p1.coords.view(), p2.coords.view());
    Ok(TangentVector {
        coords,
        base: p1.clone(),
    })
}

pub fn parallel_transport(
    x: &BallPoint,
    y: &BallPoint,
    u: &TangentVector,
) -> Result<TangentVector> {
    same_ball(x, y, "parallel_transport")?;
    if u.base.coords != x.coords {
        return Err(HydroError::contract(
            "parallel_transport: tangent vector is not based at the source point",
        ));
    }
    let coords = x
        .ball
        .transport_raw(x.coords.view(), y.coords.view(), u.coords.view());
    Ok(TangentVector {
        coords,
        base: y.clone(),
    })
}

/// Hyperboloid coordinates `(t, s)` satisfying `−t² + ‖s‖² = −1/c`.
pub fn to_hyperboloid(x: &BallPoint) -> Result<Array1<f64>> {
    let k = 1.0 / x.ball.c;
    let q = x.coords.dot(&x.coords);
    if q >= k {
        return Err(HydroError::domain(format!(
            "to_hyperboloid: ‖x‖² = {q} is not inside the ball of radius² {k}"
        )));
    }
    Ok(x.ball.to_hyperboloid_raw(x.coords.view()))
}

/// Rescales `v` to the boundary margin when `‖v‖² ≥ (1 − ε)/c`.
pub fn project_to_ball(v: ArrayView1<f64>, ball: &PoincareBall) -> Result<Array1<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(HydroError::domain(
            "project_to_ball: non-finite coordinates",
        ));
    }
    Ok(ball.project_raw(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball(c: f64) -> PoincareBall {
        PoincareBall::new(c).unwrap()
    }

    fn random_point(
        rng: &mut ChaCha8Rng,
        b: &PoincareBall,
        dim: usize,
        max_frac: f64,
    ) -> Array1<f64> {
        let v: Array1<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.dot(&v).sqrt();
        let r = rng.gen_range(0.0..max_frac) * b.radius();
        v.mapv(|x| x / n * r)
    }

    #[test]
    fn rejects_bad_curvature() {
        assert!(PoincareBall::new(0.0).is_err());
        assert!(PoincareBall::new(-1.0).is_err());
        assert!(PoincareBall::new(f64::NAN).is_err());
    }

    #[test]
    fn mobius_examples() {
        let b = ball(1.0);
        let zero = b.point(array![0.0, 0.0]).unwrap();
        let y = b.point(array![0.3, 0.4]).unwrap();
        assert_eq!(mobius_add(&zero, &y).unwrap().coords(), y.coords());

        let x = b.point(array![0.5, 0.0]).unwrap();
        let nx = b.point(array![-0.5, 0.0]).unwrap();
        let z = mobius_add(&x, &nx).unwrap();
        assert!(z.coords().iter().all(|v| v.abs() < 1e-15));

        // collinear case reduces to (x + y) / (1 + xy)
        let x = b.point(array![0.3, 0.0]).unwrap();
        let y = b.point(array![0.4, 0.0]).unwrap();
        let z = mobius_add(&x, &y).unwrap();
        assert!((z.coords()[0] - 0.7 / 1.12).abs() < 1e-15);
        assert_eq!(z.coords()[1], 0.0);
    }

    #[test]
    fn mobius_dimension_mismatch() {
        let b = ball(1.0);
        let x = b.point(array![0.1, 0.0]).unwrap();
        let y = b.point(array![0.1, 0.0, 0.0]).unwrap();
        assert!(matches!(mobius_add(&x, &y), Err(HydroError::Shape(_))));
    }

    #[test]
    fn distance_from_origin() {
        let b = ball(1.0);
        let o = b.origin(2);
        let p = b.point(array![0.5, 0.0]).unwrap();
        let expected = 3f64.ln().powi(2);
        assert!((distance_sq(&o, &p).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.206_948_960_812_582).abs() < 1e-12);
        assert_eq!(distance_sq(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn exp_log_origin_examples() {
        let b = ball(1.0);
        let o = b.origin(2);
        let u = o.tangent(array![0.5, 0.0]).unwrap();
        let p = exp_map(&o, &u).unwrap();
        assert!((p.coords()[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((p.coords()[0] - 0.462_117).abs() < 1e-6);

        let q = b.point(array![0.462117, 0.0]).unwrap();
        let v = log_map(&o, &q).unwrap();
        assert!((v.coords()[0] - 0.5).abs() < 1e-6);

        let zero = o.tangent(array![0.0, 0.0]).unwrap();
        assert_eq!(exp_map(&o, &zero).unwrap(), o);
        let same = log_map(&p, &p).unwrap();
        assert!(same.coords().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn exp_map_zero_tangent_is_identity() {
        let b = ball(0.1);
        let p = b.point(array![1.0, -2.0, 0.5]).unwrap();
        let u = p.tangent(array![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(exp_map(&p, &u).unwrap(), p);
    }

    #[test]
    fn exp_map_rejects_foreign_tangent() {
        let b = ball(1.0);
        let p = b.point(array![0.1, 0.0]).unwrap();
        let q = b.point(array![0.0, 0.1]).unwrap();
        let u = q.tangent(array![0.1, 0.1]).unwrap();
        assert!(matches!(exp_map(&p, &u), Err(HydroError::Contract(_))));
    }

    #[test]
    fn hyperboloid_examples() {
        let b = ball(1.0);
        let h = to_hyperboloid(&b.origin(2)).unwrap();
        assert_eq!(h, array![1.0, 0.0, 0.0]);
        let x = b.point(array![0.5, 0.0]).unwrap();
        let h = to_hyperboloid(&x).unwrap();
        assert!((h[0] - 5.0 / 3.0).abs() < 1e-15);
        assert!((h[1] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(h[2], 0.0);
        // K = 4: the origin lifts to (√K, 0)
        let b = ball(0.25);
        assert_eq!(to_hyperboloid(&b.origin(1)).unwrap(), array![2.0, 0.0]);
        let h = to_hyperboloid(&b.point(array![1.0]).unwrap()).unwrap();
        assert!((h[0] - 10.0 / 3.0).abs() < 1e-14);
        assert!((h[1] - 8.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn projection_examples() {
        let b = ball(1.0);
        let v = array![0.1, 0.1];
        assert_eq!(project_to_ball(v.view(), &b).unwrap(), v);
        let p = project_to_ball(array![2.0, 0.0].view(), &b).unwrap();
        assert!((p[0] - (1.0 - 1e-5f64).sqrt()).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
        let pp = project_to_ball(p.view(), &b).unwrap();
        assert_eq!(pp, p);
        assert!(project_to_ball(array![f64::NAN, 0.0].view(), &b).is_err());
        assert!(project_to_ball(array![f64::INFINITY, 0.0].view(), &b).is_err());
    }

    #[test]
    fn transport_identity_when_points_coincide() {
        let b = ball(1.0);
        let x = b.point(array![0.2, -0.3]).unwrap();
        let u = x.tangent(array![0.7, 0.1]).unwrap();
        let v = parallel_transport(&x, &x, &u).unwrap();
        for (a, e) in v.coords().iter().zip(u.coords().iter()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    /// Gyration from the Möbius identity
    /// `gyr[a,b]w = −(a⊕b) ⊕ (a ⊕ (b ⊕ w))`, applied to a scaled copy of `w`
    /// that fits inside the ball and rescaled afterwards (gyration is linear).
    fn gyration_oracle(
        b: &PoincareBall,
        x: ArrayView1<f64>,
        y: ArrayView1<f64>,
        w: ArrayView1<f64>,
    ) -> Array1<f64> {
        let n = w.dot(&w).sqrt();
        if n == 0.0 {
            return w.to_owned();
        }
        let tau = 0.01 * b.radius() / n;
        let ws = w.mapv(|v| v * tau);
        let ab = b.mobius_add_raw(x, y);
        let inner = b.mobius_add_raw(y, ws.view());
        let outer = b.mobius_add_raw(x, inner.view());
        let neg_ab = ab.mapv(|v| -v);
        b.mobius_add_raw(neg_ab.view(), outer.view())
            .mapv(|v| v / tau)
    }

    #[test]
    fn gyration_matches_mobius_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &c in &[1.0, 0.1, 0.01] {
            let b = ball(c);
            for _ in 0..50 {
                let x = random_point(&mut rng, &b, 4, 0.9);
                let y = random_point(&mut rng, &b, 4, 0.9);
                let w: Array1<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let got = b.gyration_raw(x.view(), y.view(), w.view());
                let want = gyration_oracle(&b, x.view(), y.view(), w.view());
                for (g, e) in got.iter().zip(want.iter()) {
                    assert!((g - e).abs() < 1e-9, "{g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn transport_round_trip_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = ball(1.0);
        for _ in 0..50 {
            let x = random_point(&mut rng, &b, 3, 0.9);
            let y = random_point(&mut rng, &b, 3, 0.9);
            let u: Array1<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let there = b.transport_raw(x.view(), y.view(), u.view());
            let back = b.transport_raw(y.view(), x.view(), there.view());
            for (a, e) in back.iter().zip(u.iter()) {
                assert!((a - e).abs() < 1e-7);
            }
            // the same transport assembled from the Möbius-identity gyration
            let nx = x.mapv(|v| -v);
            let scale = (1.0 - y.dot(&y)) / (1.0 - x.dot(&x));
            let oracle = gyration_oracle(&b, y.view(), nx.view(), u.view()).mapv(|v| v * scale);
            for (a, e) in there.iter().zip(oracle.iter()) {
                assert!((a - e).abs() < 1e-7);
            }
        }
    }

    fn fd_check<F>(f: F, x: &Array1<f64>, analytic: &Array1<f64>, what: &str)
    where
        F: Fn(&Array1<f64>) -> f64,
    {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1.0);
            assert!(
                err < 1e-5,
                "{what}[{i}]: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &c in &[1.0, 0.1, 0.01] {
            let b = ball(c);
            for _ in 0..20 {
                let x = random_point(&mut rng, &b, 3, 0.8);
                let y = random_point(&mut rng, &b, 3, 0.8);
                let u: Array1<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g: Array1<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g4: Array1<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

                let (gx, gy) = b.mobius_add_vjp(x.view(), y.view(), g.view());
                fd_check(
                    |x| b.mobius_add_raw(x.view(), y.view()).dot(&g),
                    &x,
                    &gx,
                    "mobius x",
                );
                fd_check(
                    |y| b.mobius_add_raw(x.view(), y.view()).dot(&g),
                    &y,
                    &gy,
                    "mobius y",
                );

                let gu = b.expmap0_vjp(u.view(), g.view());
                fd_check(|u| b.expmap0_raw(u.view()).dot(&g), &u, &gu, "expmap0");
                let gl = b.logmap0_vjp(x.view(), g.view());
                fd_check(|x| b.logmap0_raw(x.view()).dot(&g), &x, &gl, "logmap0");

                let (gp, gu) = b.expmap_vjp(x.view(), u.view(), g.view());
                fd_check(
                    |p| b.expmap_raw(p.view(), u.view()).dot(&g),
                    &x,
                    &gp,
                    "expmap p",
                );
                fd_check(
                    |u| b.expmap_raw(x.view(), u.view()).dot(&g),
                    &u,
                    &gu,
                    "expmap u",
                );

                let (g1, g2) = b.logmap_vjp(x.view(), y.view(), g.view());
                fd_check(
                    |p| b.logmap_raw(p.view(), y.view()).dot(&g),
                    &x,
                    &g1,
                    "logmap p1",
                );
                fd_check(
                    |q| b.logmap_raw(x.view(), q.view()).dot(&g),
                    &y,
                    &g2,
                    "logmap p2",
                );

                let (d1, d2) = b.distance_sq_vjp(x.view(), y.view(), 1.0);
                fd_check(
                    |p| b.distance_sq_raw(p.view(), y.view()),
                    &x,
                    &d1,
                    "dist p1",
                );
                fd_check(
                    |q| b.distance_sq_raw(x.view(), q.view()),
                    &y,
                    &d2,
                    "dist p2",
                );

                let (tx, ty, tu) = b.transport_vjp(x.view(), y.view(), u.view(), g.view());
                fd_check(
                    |p| b.transport_raw(p.view(), y.view(), u.view()).dot(&g),
                    &x,
                    &tx,
                    "pt x",
                );
                fd_check(
                    |q| b.transport_raw(x.view(), q.view(), u.view()).dot(&g),
                    &y,
                    &ty,
                    "pt y",
                );
                fd_check(
                    |w| b.transport_raw(x.view(), y.view(), w.view()).dot(&g),
                    &u,
                    &tu,
                    "pt u",
                );

                let gh = b.to_hyperboloid_vjp(x.view(), g4.view());
                fd_check(
                    |p| b.to_hyperboloid_raw(p.view()).dot(&g4),
                    &x,
                    &gh,
                    "hyperboloid",
                );

                let xn = x.dot(&x).sqrt();
                let far = x.mapv(|v| v / xn * 2.0 * b.radius());
                let gpj = b.project_vjp(far.view(), g.view());
                fd_check(|v| b.project_raw(v.view()).dot(&g), &far, &gpj, "project");
            }
        }
    }

    #[test]
    fn exp_map_zero_tangent_adjoint() {
        let b = ball(1.0);
        let p = array![0.2, -0.1];
        let u = array![0.0, 0.0];
        let g = array![0.3, 0.7];
        let (gp, gu) = b.expmap_vjp(p.view(), u.view(), g.view());
        fd_check(
            |w| b.expmap_raw(p.view(), w.view()).dot(&g),
            &u,
            &gu,
            "exp zero u",
        );
        fd_check(
            |q| b.expmap_raw(q.view(), u.view()).dot(&g),
            &p,
            &gp,
            "exp zero p",
        );
    }

    fn in_ball(b: &PoincareBall, dir: &[f64], frac: f64) -> Array1<f64> {
        let v = Array1::from(dir.to_vec());
        let n = v.dot(&v).sqrt().max(1e-9);
        v * (frac * b.radius() / n)
    }

    proptest! {
        #[test]
        fn mobius_identity_and_inverse(
            c in prop::sample::select(vec![0.01, 0.5, 1.0, 3.0]),
            dir in prop::collection::vec(-1.0..1.0f64, 3),
            frac in 0.0..0.95f64,
        ) {
            let b = ball(c);
            let x = in_ball(&b, &dir, frac);
            let z = Array1::zeros(3);
            let scale = b.radius().max(1.0);
            for (a, e) in b.mobius_add_raw(x.view(), z.view()).iter().zip(x.iter()) {
                prop_assert!((a - e).abs() <= 1e-12 * scale);
            }
            for v in b.mobius_add_raw((-&x).view(), x.view()).iter() {
                prop_assert!(v.abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn exp_log_round_trip(
            c in prop::sample::select(vec![0.01, 0.5, 1.0, 3.0]),
            d1 in prop::collection::vec(-1.0..1.0f64, 3),
            d2 in prop::collection::vec(-1.0..1.0f64, 3),
            f1 in 0.0..0.9f64,
            f2 in 0.0..0.9f64,
        ) {
            let b = ball(c);
            let (p, q) = (in_ball(&b, &d1, f1), in_ball(&b, &d2, f2));
            let back = b.expmap_raw(p.view(), b.logmap_raw(p.view(), q.view()).view());
            let scale = b.radius().max(1.0);
            for (a, e) in back.iter().zip(q.iter()) {
                prop_assert!((a - e).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn transport_preserves_metric_norm(
            c in prop::sample::select(vec![0.01, 0.5, 1.0, 3.0]),
            d1 in prop::collection::vec(-1.0..1.0f64, 3),
            d2 in prop::collection::vec(-1.0..1.0f64, 3),
            u in prop::collection::vec(-2.0..2.0f64, 3),
            f1 in 0.0..0.9f64,
            f2 in 0.0..0.9f64,
        ) {
            let b = ball(c);
            let (x, y) = (in_ball(&b, &d1, f1), in_ball(&b, &d2, f2));
            let u = Array1::from(u);
            let v = b.transport_raw(x.view(), y.view(), u.view());
            let n0 = b.conformal_factor(x.view()) * u.dot(&u).sqrt();
            let n1 = b.conformal_factor(y.view()) * v.dot(&v).sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-9 * n0.max(1.0));
        }

        #[test]
        fn hyperboloid_constraint(
            c in prop::sample::select(vec![0.01, 0.5, 1.0, 3.0]),
            dir in prop::collection::vec(-1.0..1.0f64, 4),
            frac in 0.0..0.95f64,
        ) {
            let b = ball(c);
            let h = b.to_hyperboloid_raw(in_ball(&b, &dir, frac).view());
            let lhs = -h[0] * h[0] + h.iter().skip(1).map(|v| v * v).sum::<f64>();
            prop_assert!(h[0] > 0.0);
            prop_assert!((lhs + 1.0 / c).abs() <= 1e-9 * (h[0] * h[0]).max(1.0));
        }
    }
}
