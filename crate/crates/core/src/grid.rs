//! Uniform time grids with piecewise-linear sampling.

/// Values that can be linearly interpolated between grid nodes.
pub trait Lerp: Clone {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self;
}

impl Lerp for f64 {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
}

impl Lerp for nalgebra::DMatrix<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
}

impl Lerp for nalgebra::DVector<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
}

/// Samples of a time-dependent quantity on the uniform grid
/// `t_i = i * dt`, `i = 0..=steps`, covering `[0, t_end]` exactly.
#[derive(Debug, Clone)]
pub struct TimeGrid<T> {
    t_end: f64,
    dt: f64,
    values: Vec<T>,
}

impl<T> TimeGrid<T> {
    /// Wraps node values; `values.len()` must be `steps + 1` with
    /// `steps = round(t_end/dt)`.
    pub fn new(t_end: f64, values: Vec<T>) -> Self {
        assert!(t_end > 0.0, "grid must cover a positive interval");
        assert!(values.len() >= 2, "grid needs at least two nodes");
        let dt = t_end / (values.len() - 1) as f64;
        Self { t_end, dt, values }
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of nodes (steps + 1).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> &T {
        &self.values[i]
    }

    pub fn node_time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn first(&self) -> &T {
        &self.values[0]
    }

    pub fn last(&self) -> &T {
        &self.values[self.values.len() - 1]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }
}

impl<T: Lerp> TimeGrid<T> {
    /// Piecewise-linear sample at time `t`, clamped to `[0, t_end]`.
    pub fn at(&self, t: f64) -> T {
        let t = t.clamp(0.0, self.t_end);
        let pos = t / self.dt;
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let w = pos - i as f64;
        if w == 0.0 {
            self.values[i].clone()
        } else {
            T::lerp(&self.values[i], &self.values[i + 1], w)
        }
    }

    /// Trapezoid quadrature of the stored samples over `[0, t_end]`,
    /// combined through `f`.
    pub fn trapezoid<F: Fn(&T) -> f64>(&self, f: F) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.values.len() - 1 {
            acc += 0.5 * (f(&self.values[i]) + f(&self.values[i + 1]));
        }
        acc * self.dt
    }
}
