//! Fixed-size vector, matrix and quaternion helpers used by the splatting math.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Unit quaternion stored as (w, x, y, z).
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn quat_norm(q: Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the entries of `quat_to_mat(q)` back onto `q`,
/// treating the formula as a polynomial in (w, x, y, z).
pub fn quat_to_mat_backward(q: Quat, d_r: &Mat3) -> Quat {
    let [w, x, y, z] = q;
    let g = d_r;
    let dw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let dy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let dz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [dw, dx, dy, dz]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        Some(Sym2::new(self.c / det, -self.b / det, self.a / det))
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let mid = 0.5 * (self.a + self.c);
        let half_diff = 0.5 * (self.a - self.c);
        mid + (half_diff * half_diff + self.b * self.b).sqrt()
    }

    /// Quadratic form dᵀ M d.
    #[inline]
    pub fn quad(&self, d0: f64, d1: f64) -> f64 {
        self.a * d0 * d0 + 2.0 * self.b * d0 * d1 + self.c * d1 * d1
    }

    /// Product M·G·M for symmetric M and G; used to pull gradients through an
    /// inverse (d(M⁻¹) = -M⁻¹ dM M⁻¹).
    pub fn sandwich(&self, g: &Sym2) -> Sym2 {
        // (M G) entries
        let mg00 = self.a * g.a + self.b * g.b;
        let mg01 = self.a * g.b + self.b * g.c;
        let mg10 = self.b * g.a + self.c * g.b;
        let mg11 = self.b * g.b + self.c * g.c;
        Sym2::new(
            mg00 * self.a + mg01 * self.b,
            mg00 * self.b + mg01 * self.c,
            mg10 * self.b + mg11 * self.c,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_quat(seed: u64) -> Quat {
        let s = seed as f64;
        let q = [(s * 0.7).sin() + 0.3, (s * 1.3).cos(), (s * 2.1).sin(), (s * 0.4).cos() - 0.2];
        let n = quat_norm(q);
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    #[test]
    fn rotation_is_orthonormal() {
        for seed in 0..20 {
            let r = quat_to_mat(rand_quat(seed));
            let rrt = mat3_mul(&r, &transpose3(&r));
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((rrt[i][j] - e).abs() < 1e-12);
                }
            }
            assert!((det3(&r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..10 {
            let q = rand_quat(seed);
            let g: Mat3 = [
                [0.3, -1.2, 0.5],
                [0.7, 0.1, -0.4],
                [-0.9, 0.2, 1.1],
            ];
            let f = |q: Quat| -> f64 {
                let r = quat_to_mat(q);
                (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum()
            };
            let analytic = quat_to_mat_backward(q, &g);
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (f(qp) - f(qm)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-7, "k={k} fd={fd} an={}", analytic[k]);
            }
        }
    }

    #[test]
    fn sym2_inverse_and_sandwich() {
        let m = Sym2::new(2.0, 0.5, 1.0);
        let inv = m.inverse().unwrap();
        // M·M⁻¹ = I
        assert!((m.a * inv.a + m.b * inv.b - 1.0).abs() < 1e-14);
        assert!((m.a * inv.b + m.b * inv.c).abs() < 1e-14);
        let g = Sym2::new(1.0, 0.0, 0.0);
        let s = m.sandwich(&g);
        // M e0 e0ᵀ M = column0 column0ᵀ
        assert!((s.a - 4.0).abs() < 1e-14 && (s.b - 1.0).abs() < 1e-14 && (s.c - 0.25).abs() < 1e-14);
        assert!(Sym2::new(1.0, 2.0, 1.0).inverse().is_none());
    }
}
