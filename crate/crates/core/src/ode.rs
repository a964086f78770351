//! Fixed-step classic Runge-Kutta integration over simple vector states.

/// State type with the vector-space operations RK4 needs.
pub trait OdeState: Clone {
    /// `self += c * other`
    fn axpy_state(&mut self, c: f64, other: &Self);
}

impl OdeState for nalgebra::DMatrix<f64> {
    fn axpy_state(&mut self, c: f64, other: &Self) {
        *self += other * c;
    }
}

impl OdeState for nalgebra::DVector<f64> {
    fn axpy_state(&mut self, c: f64, other: &Self) {
        self.axpy(c, other, 1.0);
    }
}

impl OdeState for f64 {
    fn axpy_state(&mut self, c: f64, other: &Self) {
        *self += c * other;
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn axpy_state(&mut self, c: f64, other: &Self) {
        self.0.axpy_state(c, &other.0);
        self.1.axpy_state(c, &other.1);
    }
}

impl<A: OdeState, B: OdeState, C: OdeState> OdeState for (A, B, C) {
    fn axpy_state(&mut self, c: f64, other: &Self) {
        self.0.axpy_state(c, &other.0);
        self.1.axpy_state(c, &other.1);
        self.2.axpy_state(c, &other.2);
    }
}

impl<A: OdeState, B: OdeState, C: OdeState, D: OdeState> OdeState for (A, B, C, D) {
    fn axpy_state(&mut self, c: f64, other: &Self) {
        self.0.axpy_state(c, &other.0);
        self.1.axpy_state(c, &other.1);
        self.2.axpy_state(c, &other.2);
        self.3.axpy_state(c, &other.3);
    }
}

/// One classic RK4 step of `dy/dt = f(t, y)` from `t` with signed step `dt`
/// (negative `dt` integrates backward).
pub fn rk4_step<S: OdeState, F: FnMut(f64, &S) -> S>(f: &mut F, t: f64, y: &S, dt: f64) -> S {
    let k1 = f(t, y);
    let mut y2 = y.clone();
    y2.axpy_state(dt / 2.0, &k1);
    let k2 = f(t + dt / 2.0, &y2);
    let mut y3 = y.clone();
    y3.axpy_state(dt / 2.0, &k2);
    let k3 = f(t + dt / 2.0, &y3);
    let mut y4 = y.clone();
    y4.axpy_state(dt, &k3);
    let k4 = f(t + dt, &y4);

    let mut out = y.clone();
    out.axpy_state(dt / 6.0, &k1);
    out.axpy_state(dt / 3.0, &k2);
    out.axpy_state(dt / 3.0, &k3);
    out.axpy_state(dt / 6.0, &k4);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_exponential_order() {
        // y' = y, y(0) = 1; one unit of time at two resolutions.
        let run = |steps: usize| {
            let mut y = 1.0;
            let dt = 1.0 / steps as f64;
            let mut f = |_t: f64, y: &f64| *y;
            for i in 0..steps {
                y = rk4_step(&mut f, i as f64 * dt, &y, dt);
            }
            (y - 1.0f64.exp()).abs()
        };
        let e1 = run(50);
        let e2 = run(100);
        let order = (e1 / e2).log2();
        assert!(order > 3.8, "observed order {order}");
    }

    #[test]
    fn backward_step_approximately_inverts_forward() {
        // RK4 is not time-symmetric; round trip error is O(dt^5)
        let mut f = |t: f64, y: &f64| t * y;
        let y1 = rk4_step(&mut f, 0.0, &2.0, 0.1);
        let y0 = rk4_step(&mut f, 0.1, &y1, -0.1);
        assert!((y0 - 2.0).abs() < 1e-6);
    }
}
