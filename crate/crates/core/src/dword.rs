//! Double-word floats: an unevaluated sum `hi + lo` carrying about 106 bits.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Dw {
    pub hi: f64,
    pub lo: f64,
}

impl Dw {
    pub const ZERO: Dw = Dw { hi: 0.0, lo: 0.0 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Exact product of two doubles.
    pub fn prod(a: f64, b: f64) -> Dw {
        let (hi, lo) = two_prod(a, b);
        Dw { hi, lo }
    }

    pub fn abs(self) -> Dw {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl From<f64> for Dw {
    fn from(v: f64) -> Self {
        Dw { hi: v, lo: 0.0 }
    }
}

impl Add for Dw {
    type Output = Dw;
    fn add(self, o: Dw) -> Dw {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = fast_two_sum(s, e + t);
        let (hi, lo) = fast_two_sum(s, e + f);
        Dw { hi, lo }
    }
}

impl AddAssign for Dw {
    fn add_assign(&mut self, o: Dw) {
        *self = *self + o;
    }
}

impl Neg for Dw {
    type Output = Dw;
    fn neg(self) -> Dw {
        Dw {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dw {
    type Output = Dw;
    fn sub(self, o: Dw) -> Dw {
        self + (-o)
    }
}

impl Mul for Dw {
    type Output = Dw;
    fn mul(self, o: Dw) -> Dw {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = fast_two_sum(p, e);
        Dw { hi, lo }
    }
}

impl Mul<f64> for Dw {
    type Output = Dw;
    fn mul(self, o: f64) -> Dw {
        let (p, e) = two_prod(self.hi, o);
        let (hi, lo) = fast_two_sum(p, e + self.lo * o);
        Dw { hi, lo }
    }
}

impl Div for Dw {
    type Output = Dw;
    fn div(self, o: Dw) -> Dw {
        let q1 = self.hi / o.hi;
        let r = self - o * q1;
        let q2 = r.hi / o.hi;
        let r = r - o * q2;
        let q3 = r.hi / o.hi;
        let (hi, lo) = fast_two_sum(q1, q2);
        Dw { hi, lo } + Dw::from(q3)
    }
}

/// Solves `C x = b` by Gaussian elimination with partial pivoting in double-word
/// arithmetic. `None` if a pivot vanishes.
pub(crate) fn gauss_solve(mut c: Vec<Vec<Dw>>, mut b: Vec<Dw>) -> Option<Vec<Dw>> {
    let k = b.len();
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| c[i][col].abs().hi.total_cmp(&c[j][col].abs().hi))?;
        if c[piv][col].hi == 0.0 {
            return None;
        }
        c.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..k {
            let f = c[row][col] / c[col][col];
            let (top, bottom) = c.split_at_mut(row);
            for (x, &v) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x = *x - f * v;
            }
            let v = b[col];
            b[row] = b[row] - f * v;
        }
    }
    let mut x = vec![Dw::ZERO; k];
    for row in (0..k).rev() {
        let mut s = b[row];
        for j in row + 1..k {
            s = s - c[row][j] * x[j];
        }
        x[row] = s / c[row][row];
    }
    Some(x)
}
