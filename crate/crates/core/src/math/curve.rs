//! The supersingular curve E: y^2 = x^3 + x over F_p.
//!
//! #E(F_p) = p + 1 = 4q with q prime, so the curve has a single subgroup G
//! of prime order q after clearing the cofactor 4. Since x^2 + 1 is
//! irreducible mod p, (0,0) is the only point of order two and the group is
//! cyclic. Point encodings:
//!
//!   compressed    29 B   (0x02 | y-parity) || x
//!   uncompressed  56 B   x || y, the identity as 56 zero bytes
//!
//! The identity never collides with (0,0) in honest data because (0,0) has
//! order 2 and everything handled here lives in G.

use super::fp::Fp;
use super::mont::{self, Q_CTX, Q_MINUS_1};
use sha2::{Digest, Sha224};
use std::cmp::Ordering;
use std::sync::OnceLock;

/// x-coordinate of the subgroup generator (4 * (2, sqrt(10)) cleared).
const GEN_X: [u8; 28] = [
    0x46, 0xce, 0x6e, 0x63, 0x04, 0x09, 0x92, 0x12, 0xcf, 0x3e, 0x50, 0x55, 0xb7, 0x3b, 0x78,
    0x97, 0x19, 0x5b, 0xa7, 0xb2, 0xdd, 0xdd, 0x00, 0x13, 0xed, 0x24, 0xd3, 0x14,
];
const GEN_Y: [u8; 28] = [
    0x13, 0x13, 0x0a, 0x1d, 0xa8, 0x28, 0xd7, 0xe8, 0xe7, 0xbe, 0xc6, 0x79, 0x23, 0x7e, 0x73,
    0xa1, 0x30, 0x36, 0xbb, 0xa4, 0x0c, 0xa3, 0x6d, 0x9c, 0x81, 0x77, 0x4d, 0xa1,
];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Affine {
    pub x: Fp,
    pub y: Fp,
    pub infinity: bool,
}

#[derive(Clone, Copy)]
pub struct Jacobian {
    x: Fp,
    y: Fp,
    z: Fp,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        x: Fp::ZERO,
        y: Fp::ZERO,
        infinity: true,
    };

    pub fn generator() -> Affine {
        static GEN: OnceLock<Affine> = OnceLock::new();
        *GEN.get_or_init(|| {
            let g = Affine {
                x: Fp::from_bytes(&GEN_X).unwrap(),
                y: Fp::from_bytes(&GEN_Y).unwrap(),
                infinity: false,
            };
            debug_assert!(g.is_on_curve());
            g
        })
    }

    pub fn is_on_curve(&self) -> bool {
        if self.infinity {
            return true;
        }
        let rhs = self.x.square() * self.x + self.x;
        self.y.square() == rhs
    }

    #[cfg(test)]
    pub fn neg(&self) -> Affine {
        if self.infinity {
            *self
        } else {
            Affine {
                x: self.x,
                y: -self.y,
                infinity: false,
            }
        }
    }

    /// True for the identity and for points of order q.
    pub fn is_torsion_free(&self) -> bool {
        scalar_mul_limbs(&Q_CTX.modulus, self).is_infinity()
    }

    pub fn to_uncompressed(&self) -> [u8; 56] {
        let mut out = [0u8; 56];
        if !self.infinity {
            out[..28].copy_from_slice(&self.x.to_bytes());
            out[28..].copy_from_slice(&self.y.to_bytes());
        }
        out
    }

    pub fn from_uncompressed(bytes: &[u8; 56]) -> Option<Affine> {
        if bytes.iter().all(|&b| b == 0) {
            return Some(Affine::IDENTITY);
        }
        let x = Fp::from_bytes(bytes[..28].try_into().unwrap())?;
        let y = Fp::from_bytes(bytes[28..].try_into().unwrap())?;
        let pt = Affine {
            x,
            y,
            infinity: false,
        };
        pt.is_on_curve().then_some(pt)
    }

    pub fn to_compressed(&self) -> [u8; 29] {
        assert!(!self.infinity, "cannot compress the identity");
        let mut out = [0u8; 29];
        out[0] = if self.y.is_odd() { 0x03 } else { 0x02 };
        out[1..].copy_from_slice(&self.x.to_bytes());
        out
    }

    pub fn from_compressed(bytes: &[u8; 29]) -> Option<Affine> {
        if bytes[0] != 0x02 && bytes[0] != 0x03 {
            return None;
        }
        let x = Fp::from_bytes(bytes[1..].try_into().unwrap())?;
        let rhs = x.square() * x + x;
        let mut y = rhs.sqrt()?;
        if y.is_odd() != (bytes[0] == 0x03) {
            y = -y;
        }
        if y.is_zero() && bytes[0] == 0x03 {
            return None;
        }
        Some(Affine {
            x,
            y,
            infinity: false,
        })
    }
}

impl Jacobian {
    pub const IDENTITY: Jacobian = Jacobian {
        x: Fp::ONE,
        y: Fp::ONE,
        z: Fp::ZERO,
    };

    pub fn from_affine(p: &Affine) -> Jacobian {
        if p.infinity {
            Jacobian::IDENTITY
        } else {
            Jacobian {
                x: p.x,
                y: p.y,
                z: Fp::ONE,
            }
        }
    }

    pub fn is_infinity(&self) -> bool {
        self.z.is_zero()
    }

    /// Doubling for a curve with a = 1 (dbl-2007-bl shape).
    pub fn double(&self) -> Jacobian {
        if self.is_infinity() || self.y.is_zero() {
            return Jacobian::IDENTITY;
        }
        let xx = self.x.square();
        let yy = self.y.square();
        let yyyy = yy.square();
        let zz = self.z.square();
        let s = ((self.x + yy).square() - xx - yyyy).double();
        let m = xx.double() + xx + zz.square();
        let x3 = m.square() - s.double();
        let y3 = m * (s - x3) - yyyy.double().double().double();
        let z3 = (self.y + self.z).square() - yy - zz;
        Jacobian {
            x: x3,
            y: y3,
            z: z3,
        }
    }

    /// Mixed addition of an affine point (madd-2007-bl shape).
    pub fn add_affine(&self, other: &Affine) -> Jacobian {
        if other.infinity {
            return *self;
        }
        if self.is_infinity() {
            return Jacobian::from_affine(other);
        }
        let z1z1 = self.z.square();
        let u2 = other.x * z1z1;
        let s2 = other.y * self.z * z1z1;
        if u2 == self.x {
            if s2 == self.y {
                return self.double();
            }
            return Jacobian::IDENTITY;
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
        Jacobian {
            x: x3,
            y: y3,
            z: z3,
        }
    }

    pub fn to_affine(&self) -> Affine {
        if self.is_infinity() {
            return Affine::IDENTITY;
        }
        let zinv = self.z.invert().expect("nonzero z");
        let zinv2 = zinv.square();
        Affine {
            x: self.x * zinv2,
            y: self.y * zinv2 * zinv,
            infinity: false,
        }
    }
}

/// Scalar mod q, canonical little-endian limbs.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Scalar([u64; 4]);

impl Scalar {
    #[cfg(test)]
    pub fn from_u64(v: u64) -> Scalar {
        let mut s = Scalar([v, 0, 0, 0]);
        while mont::cmp(&s.0, &Q_CTX.modulus) != Ordering::Less {
            s.0 = mont::sub_raw(&s.0, &Q_CTX.modulus);
        }
        s
    }

    pub fn from_bytes(bytes: &[u8; 28]) -> Option<Scalar> {
        mont::from_bytes28(bytes, &Q_CTX).map(Scalar)
    }

    /// Maps 28 uniform bytes into [1, q), the keygen range.
    pub fn from_bytes_nonzero(bytes: &[u8; 28]) -> Scalar {
        let mut v = mont::limbs_from_be28(bytes);
        while mont::cmp(&v, &Q_MINUS_1) != Ordering::Less {
            v = mont::sub_raw(&v, &Q_MINUS_1);
        }
        let (mut out, mut carry) = (v, 1u64);
        for limb in out.iter_mut() {
            let (s, c) = limb.overflowing_add(carry);
            *limb = s;
            carry = c as u64;
            if carry == 0 {
                break;
            }
        }
        debug_assert!(mont::cmp(&out, &Q_CTX.modulus) == Ordering::Less);
        Scalar(out)
    }

    pub fn to_bytes(&self) -> [u8; 28] {
        mont::limbs_to_be28(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        mont::is_zero(&self.0)
    }

}

impl std::fmt::Debug for Scalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Scalar(0x{})", hex::encode(self.to_bytes()))
    }
}

pub fn scalar_mul(k: &Scalar, p: &Affine) -> Affine {
    scalar_mul_limbs(&k.0, p).to_affine()
}

fn scalar_mul_limbs(k: &[u64; 4], p: &Affine) -> Jacobian {
    let mut acc = Jacobian::IDENTITY;
    let mut started = false;
    for i in (0..4).rev() {
        for bit in (0..64).rev() {
            if started {
                acc = acc.double();
            }
            if (k[i] >> bit) & 1 == 1 {
                acc = acc.add_affine(p);
                started = true;
            }
        }
    }
    acc
}

/// Deterministic hash onto G: try-and-increment on SHA-224(msg || ctr),
/// even-y root, then cofactor clearing by two doublings.
pub fn hash_to_point(msg: &[u8]) -> Affine {
    for ctr in 0u8..=255 {
        let mut h = Sha224::new();
        h.update(msg);
        h.update([ctr]);
        let digest: [u8; 28] = h.finalize().into();
        let x = Fp::from_bytes_reduced(&digest);
        let rhs = x.square() * x + x;
        if rhs.is_zero() {
            continue;
        }
        let Some(mut y) = rhs.sqrt() else { continue };
        if y.is_odd() {
            y = -y;
        }
        let cleared = Jacobian::from_affine(&Affine {
            x,
            y,
            infinity: false,
        })
        .double()
        .double();
        if !cleared.is_infinity() {
            return cleared.to_affine();
        }
    }
    unreachable!("no curve point found in 256 attempts");
}

/// Sum of affine points, used for signature aggregation.
pub fn sum_points<'a>(points: impl IntoIterator<Item = &'a Affine>) -> Affine {
    let mut acc = Jacobian::IDENTITY;
    for p in points {
        acc = acc.add_affine(p);
    }
    acc.to_affine()
}
