//! Dormand-Prince 5(4) integrator with continuous (dense) output.
//!
//! Integration runs in either direction. Every accepted step is handed to a
//! caller-supplied observer together with its dense interpolant, so event
//! detection and tabulation live with the caller.

/// Tolerances and step limits for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest admissible |h|; hitting it is reported as an underflow.
    pub h_min: f64,
    /// Largest admissible |h|; `0` means the full span.
    pub h_max: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, h_min: 1e-14, h_max: 0.0 }
    }
}

/// Dense output for one accepted step, valid between `x0` and `x0 + h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseStep<const N: usize> {
    pub x0: f64,
    pub h: f64,
    pub y0: [f64; N],
    pub y1: [f64; N],
    r: [[f64; N]; 3],
}

impl<const N: usize> DenseStep<N> {
    pub fn x1(&self) -> f64 {
        self.x0 + self.h
    }

    /// Interpolated state at `x`; accurate to fourth order inside the step.
    pub fn eval(&self, x: f64) -> [f64; N] {
        let theta = (x - self.x0) / self.h;
        let theta1 = 1.0 - theta;
        let mut out = [0.0; N];
        for i in 0..N {
            let ydiff = self.y1[i] - self.y0[i];
            out[i] = self.y0[i]
                + theta * (ydiff + theta1 * (self.r[0][i] + theta * (self.r[1][i] + theta1 * self.r[2][i])));
        }
        out
    }

    /// Derivative of the interpolant at `x`; equals `f(x0, y0)` at `x0`.
    pub fn eval_derivative(&self, x: f64) -> [f64; N] {
        let theta = (x - self.x0) / self.h;
        let theta1 = 1.0 - theta;
        let mut out = [0.0; N];
        for i in 0..N {
            let ydiff = self.y1[i] - self.y0[i];
            let p = self.r[0][i] + theta * (self.r[1][i] + theta1 * self.r[2][i]);
            let dp = self.r[1][i] + (theta1 - theta) * self.r[2][i];
            let dq = -p + theta1 * dp;
            out[i] = (ydiff + theta1 * p + theta * dq) / self.h;
        }
        out
    }

    pub fn contains(&self, x: f64) -> bool {
        let (lo, hi) = if self.h > 0.0 { (self.x0, self.x1()) } else { (self.x1(), self.x0) };
        x >= lo && x <= hi
    }
}

/// What the observer wants after seeing an accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// How an integration run ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OdeOutcome<const N: usize> {
    /// Reached `x_end` with the given state.
    Completed { y: [f64; N], steps: usize },
    /// The observer requested a stop after the step ending at `x`.
    Stopped { x: f64, y: [f64; N], steps: usize },
    /// |h| fell below `h_min` (or the state went non-finite) at `x`.
    Underflow { x: f64, y: [f64; N], steps: usize },
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o += h * acc;
    }
    out
}

/// Integrates `y' = f(x, y)` from `(x0, y0)` to `x_end`.
///
/// `observe` sees every accepted step (in integration order) and may stop the
/// run early. The final step is clipped so that it lands exactly on `x_end`.
pub fn integrate<const N: usize, F, O>(
    mut f: F,
    x0: f64,
    y0: [f64; N],
    x_end: f64,
    opts: &OdeOptions,
    mut observe: O,
) -> OdeOutcome<N>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
    O: FnMut(&DenseStep<N>) -> Flow,
{
    let span = x_end - x0;
    if span == 0.0 {
        return OdeOutcome::Completed { y: y0, steps: 0 };
    }
    let dir = span.signum();
    let h_max = if opts.h_max > 0.0 { opts.h_max.min(span.abs()) } else { span.abs() };

    let mut x = x0;
    let mut y = y0;
    let mut k1 = f(x, &y);
    let mut h = initial_step(&mut f, x, &y, &k1, dir, h_max, opts);
    let mut steps = 0usize;
    let mut fac_old = 1e-4f64;

    loop {
        let remaining = (x_end - x).abs();
        let mut last = false;
        if h.abs() >= remaining {
            h = dir * remaining;
            last = true;
        }
        if h.abs() < opts.h_min && !last {
            return OdeOutcome::Underflow { x, y, steps };
        }

        let k2 = f(x + C2 * h, &axpy(&y, h, &[(A21, &k1)]));
        let k3 = f(x + C3 * h, &axpy(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(x + C4 * h, &axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(x + C5 * h, &axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = f(
            x + h,
            &axpy(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        );
        let y_new = axpy(&y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = f(x + h, &y_new);

        let mut err_sq = 0.0;
        let mut finite = true;
        for i in 0..N {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
            finite &= y_new[i].is_finite() && e.is_finite();
        }
        let err = if finite { (err_sq / N as f64).sqrt() } else { f64::INFINITY };

        if err <= 1.0 {
            let mut r = [[0.0; N]; 3];
            for i in 0..N {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                r[0][i] = bspl;
                r[1][i] = ydiff - h * k7[i] - bspl;
                r[2][i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            let step = DenseStep { x0: x, h, y0: y, y1: y_new, r };
            steps += 1;
            x = if last { x_end } else { x + h };
            y = y_new;
            k1 = k7;
            if observe(&step) == Flow::Stop {
                return OdeOutcome::Stopped { x, y, steps };
            }
            if last {
                return OdeOutcome::Completed { y, steps };
            }
            // Lund-stabilised PI controller (Hairer's dopri5 defaults).
            let fac11 = err.max(1e-16).powf(0.2 - 0.04 * 0.75);
            let fac = (fac11 / fac_old.powf(0.04) / 0.9).clamp(0.1, 5.0);
            fac_old = err.max(1e-4);
            h = dir * (h.abs() / fac).min(h_max);
        } else {
            if !finite && h.abs() <= opts.h_min {
                return OdeOutcome::Underflow { x, y, steps };
            }
            let shrink = if finite { (0.9 * err.powf(-0.2)).max(0.1) } else { 0.1 };
            h *= shrink;
        }
    }
}

fn initial_step<const N: usize, F>(
    f: &mut F,
    x: f64,
    y: &[f64; N],
    k1: &[f64; N],
    dir: f64,
    h_max: f64,
    opts: &OdeOptions,
) -> f64
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    let mut dnf = 0.0;
    let mut dny = 0.0;
    for i in 0..N {
        let sk = opts.atol + opts.rtol * y[i].abs();
        dnf += (k1[i] / sk).powi(2);
        dny += (y[i] / sk).powi(2);
    }
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
    h = h.min(h_max);
    let y1 = axpy(y, dir * h, &[(1.0, k1)]);
    let k2 = f(x + dir * h, &y1);
    let mut der2 = 0.0;
    for i in 0..N {
        let sk = opts.atol + opts.rtol * y[i].abs();
        der2 += ((k2[i] - k1[i]) / sk).powi(2);
    }
    let der2 = der2.sqrt() / h;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    dir * (100.0 * h).min(h1).min(h_max).max(opts.h_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_backward_and_dense() {
        // y' = y, integrated backward from x = 1 where y = e.
        let opts = OdeOptions { rtol: 1e-11, atol: 1e-13, ..Default::default() };
        let mut worst: f64 = 0.0;
        let out = integrate(
            |_x, y: &[f64; 1]| [y[0]],
            1.0,
            [1f64.exp()],
            -2.0,
            &opts,
            |s| {
                let xm = s.x0 + 0.37 * s.h;
                worst = worst.max((s.eval(xm)[0] - xm.exp()).abs() / xm.exp());
                Flow::Continue
            },
        );
        match out {
            OdeOutcome::Completed { y, .. } => assert!((y[0] - (-2f64).exp()).abs() < 1e-11),
            other => panic!("unexpected {other:?}"),
        }
        assert!(worst < 1e-9, "dense output relative error {worst}");
    }

    #[test]
    fn dense_derivative_matches_field() {
        let mut first = None;
        integrate(|_, y: &[f64; 1]| [y[0]], 0.0, [1.0], 1.0, &OdeOptions::default(), |s| {
            first.get_or_insert(*s);
            Flow::Continue
        });
        let s = first.unwrap();
        assert!((s.eval_derivative(s.x0)[0] - 1.0).abs() < 1e-12);
        let mid = s.x0 + 0.5 * s.h;
        assert!((s.eval_derivative(mid)[0] - mid.exp()).abs() < 1e-8);
    }

    #[test]
    fn harmonic_oscillator_two_dimensional() {
        let opts = OdeOptions::default();
        let out = integrate(|_x, y: &[f64; 2]| [y[1], -y[0]], 0.0, [0.0, 1.0], 10.0, &opts, |_| Flow::Continue);
        match out {
            OdeOutcome::Completed { y, .. } => {
                assert!((y[0] - 10f64.sin()).abs() < 1e-8);
                assert!((y[1] - 10f64.cos()).abs() < 1e-8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observer_can_stop() {
        let out = integrate(|_x, _y: &[f64; 1]| [1.0], 0.0, [0.0], 10.0, &OdeOptions::default(), |s| {
            if s.y1[0] > 1.0 { Flow::Stop } else { Flow::Continue }
        });
        assert!(matches!(out, OdeOutcome::Stopped { .. }));
    }

    #[test]
    fn finite_time_blowup_underflows() {
        // y' = y^2 from y(0) = 1 blows up at x = 1.
        let opts = OdeOptions { h_min: 1e-12, ..Default::default() };
        let out = integrate(|_x, y: &[f64; 1]| [y[0] * y[0]], 0.0, [1.0], 2.0, &opts, |_| Flow::Continue);
        match out {
            OdeOutcome::Underflow { x, .. } => assert!((x - 1.0).abs() < 1e-3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
