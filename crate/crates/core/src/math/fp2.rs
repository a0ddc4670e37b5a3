//! F_p^2 = F_p[i] / (i^2 + 1), available because p = 3 (mod 4).
//!
//! Pairing values land here; `c0 + c1*i` serializes as the two 28-byte
//! coordinates concatenated.

use super::fp::Fp;
use std::ops::Mul;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Fp2 {
    pub c0: Fp,
    pub c1: Fp,
}

impl Fp2 {
    pub const ONE: Fp2 = Fp2 {
        c0: Fp::ONE,
        c1: Fp::ZERO,
    };

    pub fn new(c0: Fp, c1: Fp) -> Fp2 {
        Fp2 { c0, c1 }
    }

    pub fn square(self) -> Fp2 {
        // (a + bi)^2 = (a+b)(a-b) + 2ab i
        let c0 = (self.c0 + self.c1) * (self.c0 - self.c1);
        let c1 = (self.c0 * self.c1).double();
        Fp2 { c0, c1 }
    }

    pub fn conjugate(self) -> Fp2 {
        Fp2 {
            c0: self.c0,
            c1: -self.c1,
        }
    }

    pub fn invert(self) -> Option<Fp2> {
        let norm = self.c0.square() + self.c1.square();
        let inv = norm.invert()?;
        Some(Fp2 {
            c0: self.c0 * inv,
            c1: -(self.c1 * inv),
        })
    }

    #[cfg(test)]
    pub fn pow_limbs(self, exp: &[u64; 4]) -> Fp2 {
        let mut acc = Fp2::ONE;
        let mut started = false;
        for i in (0..4).rev() {
            for bit in (0..64).rev() {
                if started {
                    acc = acc.square();
                }
                if (exp[i] >> bit) & 1 == 1 {
                    acc = acc * self;
                    started = true;
                }
            }
        }
        acc
    }

    #[cfg(test)]
    pub fn pow_u64(self, exp: u64) -> Fp2 {
        self.pow_limbs(&[exp, 0, 0, 0])
    }

    #[cfg(test)]
    pub fn to_bytes(self) -> [u8; 56] {
        let mut out = [0u8; 56];
        out[..28].copy_from_slice(&self.c0.to_bytes());
        out[28..].copy_from_slice(&self.c1.to_bytes());
        out
    }
}

impl Mul for Fp2 {
    type Output = Fp2;
    fn mul(self, rhs: Fp2) -> Fp2 {
        // Karatsuba: three base-field multiplications.
        let v0 = self.c0 * rhs.c0;
        let v1 = self.c1 * rhs.c1;
        let mixed = (self.c0 + self.c1) * (rhs.c0 + rhs.c1);
        Fp2 {
            c0: v0 - v1,
            c1: mixed - v0 - v1,
        }
    }
}
