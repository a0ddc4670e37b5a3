//! The base field F_p, p = 2^223 + 23339, p = 3 (mod 4).

use super::mont::{self, MontCtx, INV_EXP, P_CTX, SQRT_EXP};
use std::ops::{Add, Mul, Neg, Sub};

const CTX: &MontCtx = &P_CTX;

/// A field element kept in Montgomery form.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Fp([u64; 4]);

impl Fp {
    pub const ZERO: Fp = Fp([0, 0, 0, 0]);
    pub const ONE: Fp = Fp(P_CTX.one);

    #[cfg(test)]
    pub fn from_u64(v: u64) -> Fp {
        Fp(mont::to_mont(&[v, 0, 0, 0], CTX))
    }

    /// Strict decode: rejects values >= p.
    pub fn from_bytes(bytes: &[u8; 28]) -> Option<Fp> {
        mont::from_bytes28(bytes, CTX).map(|v| Fp(mont::to_mont(&v, CTX)))
    }

    /// Decode with reduction, for folding hash output into the field.
    pub fn from_bytes_reduced(bytes: &[u8; 28]) -> Fp {
        Fp(mont::to_mont(&mont::from_bytes28_reduced(bytes, CTX), CTX))
    }

    pub fn to_bytes(self) -> [u8; 28] {
        mont::limbs_to_be28(&mont::from_mont(&self.0, CTX))
    }

    pub fn is_zero(self) -> bool {
        mont::is_zero(&self.0)
    }

    /// Parity of the canonical (non-Montgomery) representative.
    pub fn is_odd(self) -> bool {
        mont::from_mont(&self.0, CTX)[0] & 1 == 1
    }

    pub fn square(self) -> Fp {
        Fp(mont::mont_mul(&self.0, &self.0, CTX))
    }

    pub fn double(self) -> Fp {
        self + self
    }

    pub fn pow(self, exp: &[u64; 4]) -> Fp {
        Fp(mont::mont_pow(&self.0, exp, CTX))
    }

    pub fn invert(self) -> Option<Fp> {
        if self.is_zero() {
            None
        } else {
            Some(self.pow(&INV_EXP))
        }
    }

    /// Square root via the p = 3 (mod 4) shortcut, None for non-residues.
    pub fn sqrt(self) -> Option<Fp> {
        let root = self.pow(&SQRT_EXP);
        if root.square() == self {
            Some(root)
        } else {
            None
        }
    }

}

impl Add for Fp {
    type Output = Fp;
    fn add(self, rhs: Fp) -> Fp {
        Fp(mont::add_mod(&self.0, &rhs.0, CTX))
    }
}

impl Sub for Fp {
    type Output = Fp;
    fn sub(self, rhs: Fp) -> Fp {
        Fp(mont::sub_mod(&self.0, &rhs.0, CTX))
    }
}

impl Mul for Fp {
    type Output = Fp;
    fn mul(self, rhs: Fp) -> Fp {
        Fp(mont::mont_mul(&self.0, &rhs.0, CTX))
    }
}

impl Neg for Fp {
    type Output = Fp;
    fn neg(self) -> Fp {
        Fp(mont::neg_mod(&self.0, CTX))
    }
}

impl std::fmt::Debug for Fp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fp(0x{})", hex::encode(self.to_bytes()))
    }
}
