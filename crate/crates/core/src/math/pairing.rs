//! Reduced Tate pairing on the supersingular curve, made symmetric with the
//! distortion map phi(x, y) = (-x, i*y).
//!
//! e(P, Q) = f_{q,P}(phi(Q)) ^ ((p^2 - 1) / q), and since p + 1 = 4q the
//! final exponent collapses to 4(p - 1): one conjugate-divide plus two
//! squarings. Vertical lines evaluate inside F_p at phi(Q) and are wiped out
//! by the (p - 1) factor, so the Miller loop skips them, and every retained
//! line value may be scaled by any F_p factor. That freedom keeps the loop
//! inversion-free: lines are evaluated in Jacobian coordinates.

use super::curve::Affine;
use super::fp::Fp;
use super::fp2::Fp2;
use super::mont::Q_CTX;

struct MillerState {
    x: Fp,
    y: Fp,
    z: Fp,
}

impl MillerState {
    /// Tangent line at the current point, evaluated at (-xq, yq*i), scaled
    /// by 2YZ^3. Advances the point to its double.
    fn dbl_step(&mut self, neg_xq: &Fp, yq: &Fp) -> Fp2 {
        let xx = self.x.square();
        let yy = self.y.square();
        let yyyy = yy.square();
        let zz = self.z.square();
        let s = ((self.x + yy).square() - xx - yyyy).double();
        let m = xx.double() + xx + zz.square();
        let x3 = m.square() - s.double();
        let y3 = m * (s - x3) - yyyy.double().double().double();
        let z3 = (self.y + self.z).square() - yy - zz;

        let real = m * (self.x - zz * *neg_xq) - yy.double();
        let imag = z3 * zz * *yq;

        self.x = x3;
        self.y = y3;
        self.z = z3;
        Fp2::new(real, imag)
    }

    /// Chord line through the current point and the affine base, scaled by
    /// 2Z*H. Advances the point by the base. Returns None for the vertical
    /// line hit on the final addition.
    fn add_step(&mut self, base: &Affine, diff_x: &Fp, yq: &Fp) -> Option<Fp2> {
        let z1z1 = self.z.square();
        let u2 = base.x * z1z1;
        let s2 = base.y * self.z * z1z1;
        if u2 == self.x {
            if s2 == self.y {
                return Some(self.dbl_step(&(*diff_x + base.x), yq));
            }
            // Adding the inverse: the result is the identity and the line
            // is vertical, so it contributes nothing.
            self.z = Fp::ZERO;
            return None;
        }
        let h = u2 - self.x;
        let hh = h.square();
        let i = hh.double().double();
        let j = h * i;
        let r = (s2 - self.y).double();
        let v = self.x * i;
        let x3 = r.square() - j - v.double();
        let y3 = r * (v - x3) - (self.y * j).double();
        let z3 = (self.z + h).square() - z1z1 - hh;

        let real = -(z3 * base.y) - r * *diff_x;
        let imag = z3 * *yq;

        self.x = x3;
        self.y = y3;
        self.z = z3;
        Some(Fp2::new(real, imag))
    }
}

/// The symmetric pairing e: G x G -> mu_q in F_p^2.
pub fn pairing(p: &Affine, q: &Affine) -> Fp2 {
    if p.infinity || q.infinity {
        return Fp2::ONE;
    }
    let neg_xq = -q.x;
    let yq = q.y;
    // Loop-invariant x-difference for chord lines: (-xq) - xp.
    let diff_x = neg_xq - p.x;

    let mut state = MillerState {
        x: p.x,
        y: p.y,
        z: Fp::ONE,
    };
    let mut f = Fp2::ONE;

    let order = &Q_CTX.modulus;
    let top = 64 * 3 + (63 - order[3].leading_zeros() as usize);
    for idx in (0..top).rev() {
        f = f.square() * state.dbl_step(&neg_xq, &yq);
        if (order[idx / 64] >> (idx % 64)) & 1 == 1 {
            if let Some(line) = state.add_step(p, &diff_x, &yq) {
                f = f * line;
            }
        }
    }

    // f ^ (4(p-1)) = (conj(f) / f) ^ 4
    let g = f.conjugate() * f.invert().expect("miller value nonzero");
    g.square().square()
}
