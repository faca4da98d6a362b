//! Double-double arithmetic (about 106 significant bits) and a cyclic Jacobi
//! eigensolver on top of it. Used as a high-precision oracle for block solves
//! whose condition numbers defeat plain `f64`.

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        // one Newton step from the f64 root
        let x = self.hi.sqrt();
        let xx = Dd::new(x) * Dd::new(x);
        let corr = (self - xx).hi / (2.0 * x);
        let (s, e) = quick_two_sum(x, corr);
        Dd { hi: s, lo: e }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

/// Dense matrix of double-doubles, row-major.
#[derive(Debug, Clone)]
pub struct DdMat {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<Dd>,
}

impl DdMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DdMat {
            rows,
            cols,
            a: vec![Dd::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, Dd::ONE);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, Dd::new(f(i, j)));
            }
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> Dd {
        self.a[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Dd) {
        self.a[i * self.cols + j] = v;
    }

    pub fn to_f64(&self, i: usize, j: usize) -> f64 {
        self.at(i, j).to_f64()
    }

    pub fn t(&self) -> DdMat {
        let mut m = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m.set(j, i, self.at(i, j));
            }
        }
        m
    }

    pub fn mul(&self, o: &DdMat) -> DdMat {
        assert_eq!(self.cols, o.rows);
        let mut m = Self::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let v = self.at(i, k);
                if v.hi == 0.0 {
                    continue;
                }
                for j in 0..o.cols {
                    let cur = m.at(i, j);
                    m.set(i, j, cur + v * o.at(k, j));
                }
            }
        }
        m
    }

    pub fn add(&self, o: &DdMat) -> DdMat {
        let mut m = self.clone();
        for (x, y) in m.a.iter_mut().zip(&o.a) {
            *x = *x + *y;
        }
        m
    }

    pub fn sub(&self, o: &DdMat) -> DdMat {
        let mut m = self.clone();
        for (x, y) in m.a.iter_mut().zip(&o.a) {
            *x = *x - *y;
        }
        m
    }

    pub fn scale(&self, s: Dd) -> DdMat {
        let mut m = self.clone();
        for x in m.a.iter_mut() {
            *x = *x * s;
        }
        m
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic Jacobi.
pub fn jacobi_eigen(mut m: DdMat) -> (Vec<Dd>, DdMat) {
    let n = m.rows;
    let mut v = DdMat::identity(n);
    for _sweep in 0..60 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = m.at(i, j).hi;
                if i == j {
                    diag += x * x;
                } else {
                    off += x * x;
                }
            }
        }
        if off <= 1e-64 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                let (app, aqq) = (m.at(p, p), m.at(q, q));
                if apq.hi.abs() <= 1e-34 * (app.hi.abs() * aqq.hi.abs()).sqrt() {
                    continue;
                }
                let theta = (aqq - app) / (Dd::new(2.0) * apq);
                let t = {
                    let r = (theta * theta + Dd::ONE).sqrt();
                    let t = Dd::ONE / (theta.abs() + r);
                    if theta.hi < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = Dd::ONE / (t * t + Dd::ONE).sqrt();
                let s = t * c;
                // two-sided rotation, keeping the matrix symmetric
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    let np = c * mkp - s * mkq;
                    let nq = s * mkp + c * mkq;
                    m.set(k, p, np);
                    m.set(p, k, np);
                    m.set(k, q, nq);
                    m.set(q, k, nq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, Dd::ZERO);
                m.set(q, p, Dd::ZERO);
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.at(i, i)).collect(), v)
}

/// Moore–Penrose inverse of a symmetric matrix, dropping eigenvalues below
/// `rel_tol × max |eigenvalue|`.
pub fn sym_pinv(c: &DdMat, rel_tol: f64) -> DdMat {
    let n = c.rows;
    let (vals, vecs) = jacobi_eigen(c.clone());
    let max = vals.iter().map(|v| v.hi.abs()).fold(0.0, f64::max);
    let mut scaled = vecs.clone();
    for (k, &v) in vals.iter().enumerate() {
        let w = if v.hi.abs() > rel_tol * max {
            Dd::ONE / v
        } else {
            Dd::ZERO
        };
        for i in 0..n {
            let cur = scaled.at(i, k);
            scaled.set(i, k, cur * w);
        }
    }
    scaled.mul(&vecs.t())
}
