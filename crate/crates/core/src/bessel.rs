//! Bessel functions of the first kind for integer order, and their positive zeros.
//!
//! Small arguments use the ascending series. Everything else goes through
//! Miller's backward recurrence, normalized with `J_0 + 2 * sum J_2k = 1`,
//! which stays accurate in absolute terms for any order and argument.

const SERIES_LIMIT: f64 = 4.0;
const RESCALE_AT: f64 = 1e250;

/// `J_n(x)` for integer order `n >= 0`.
pub fn bessel_j(n: u32, x: f64) -> f64 {
    if x < 0.0 {
        // J_n(-x) = (-1)^n J_n(x)
        let v = bessel_j(n, -x);
        return if n.is_multiple_of(2) { v } else { -v };
    }
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if x <= SERIES_LIMIT {
        series(n, x)
    } else {
        miller(n, x)
    }
}

fn series(n: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut lead = 1.0;
    for k in 1..=n {
        lead *= half / k as f64;
        if lead == 0.0 {
            return 0.0;
        }
    }
    let q = -half * half;
    let mut term = lead;
    let mut sum = lead;
    let mut m = 1.0;
    loop {
        term *= q / (m * (m + n as f64));
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
        m += 1.0;
        if m > 200.0 {
            break;
        }
    }
    sum
}

fn miller(n: u32, x: f64) -> f64 {
    let top = (n as f64).max(x);
    let mut start = (top + 15.0 * top.cbrt() + 20.0).ceil() as u32;
    if start % 2 == 1 {
        start += 1;
    }
    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-300; // J_k
    let mut norm = 0.0;
    let mut wanted = 0.0;
    let mut k = start;
    while k > 0 {
        let prev = (2.0 * k as f64 / x) * cur - next;
        next = cur;
        cur = prev;
        k -= 1;
        if k == n {
            wanted = cur;
        }
        if k.is_multiple_of(2) && k > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > RESCALE_AT {
            cur /= RESCALE_AT;
            next /= RESCALE_AT;
            norm /= RESCALE_AT;
            wanted /= RESCALE_AT;
        }
    }
    norm += cur;
    wanted / norm
}

/// All positive zeros of `J_n` that are `<= upper`, in increasing order.
pub fn bessel_j_zeros(n: u32, upper: f64) -> Vec<f64> {
    const STEP: f64 = 0.5;
    let mut roots = Vec::new();
    // The first zero of J_n lies above n, and J_n(n) > 0.
    let mut a = n as f64;
    let mut fa = bessel_j(n, a);
    while a < upper {
        let b = (a + STEP).min(upper);
        let fb = bessel_j(n, b);
        if fb == 0.0 {
            roots.push(b);
        } else if fa.signum() != fb.signum() && fa != 0.0 {
            roots.push(bisect(n, a, b, fa));
        }
        if b >= upper {
            break;
        }
        a = b;
        fa = fb;
    }
    roots.retain(|&r| r <= upper && r > 0.0);
    roots
}

/// First `count` positive zeros of `J_n`.
pub fn bessel_j_first_zeros(n: u32, count: usize) -> Vec<f64> {
    let mut upper = n as f64 + 4.0 * count as f64 + 8.0;
    loop {
        let roots = bessel_j_zeros(n, upper);
        if roots.len() >= count {
            return roots[..count].to_vec();
        }
        upper *= 1.5;
    }
}

fn bisect(n: u32, mut lo: f64, mut hi: f64, mut flo: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = bessel_j(n, mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
