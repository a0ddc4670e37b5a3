//! Fixed-width Montgomery arithmetic on 4x64-bit limbs.
//!
//! Two moduli are in play: the base field prime `p = 2^223 + 23339` and the
//! subgroup order `q = 2^221 + 5835` (`p + 1 = 4q`). Values are little-endian
//! limb arrays; nothing here is constant-time, which is fine for a simulator.

use std::cmp::Ordering;

#[derive(Clone, Copy)]
pub struct MontCtx {
    pub modulus: [u64; 4],
    /// R mod m, the Montgomery form of 1 (R = 2^256).
    pub one: [u64; 4],
    /// R^2 mod m, used to enter Montgomery form.
    pub r2: [u64; 4],
    /// -m^-1 mod 2^64.
    pub n0inv: u64,
}

pub const P_CTX: MontCtx = MontCtx {
    modulus: [0x0000000000005b2b, 0, 0, 0x0000000080000000],
    one: [
        0xffff49aa00005b2b,
        0xffffffffffffffff,
        0xffffffffffffffff,
        0x000000007fffffff,
    ],
    r2: [0, 0x0000000081de64e4, 0, 0],
    n0inv: 0x9fa67eb0718c747d,
};

pub const Q_CTX: MontCtx = MontCtx {
    modulus: [0x00000000000016cb, 0, 0, 0x0000000020000000],
    one: [
        0xffff49a8000016cb,
        0xffffffffffffffff,
        0xffffffffffffffff,
        0x000000001fffffff,
    ],
    r2: [0, 0x0000000081e13e40, 0, 0],
    n0inv: 0x166b5054f03fe11d,
};

/// (p + 1) / 4, the square-root exponent; numerically equal to q.
pub const SQRT_EXP: [u64; 4] = Q_CTX.modulus;
/// (p - 1) / 2, the Euler criterion exponent.
#[cfg(test)]
pub const QR_EXP: [u64; 4] = [0x0000000000002d95, 0, 0, 0x0000000040000000];
/// p - 2, the Fermat inversion exponent.
pub const INV_EXP: [u64; 4] = [0x0000000000005b29, 0, 0, 0x0000000080000000];
/// q - 1, for reducing raw scalars into [0, q-1).
pub const Q_MINUS_1: [u64; 4] = [0x00000000000016ca, 0, 0, 0x0000000020000000];

pub fn cmp(a: &[u64; 4], b: &[u64; 4]) -> Ordering {
    for i in (0..4).rev() {
        match a[i].cmp(&b[i]) {
            Ordering::Equal => continue,
            ord => return ord,
        }
    }
    Ordering::Equal
}

pub fn is_zero(a: &[u64; 4]) -> bool {
    a.iter().all(|&w| w == 0)
}

/// a - b, assuming a >= b.
pub fn sub_raw(a: &[u64; 4], b: &[u64; 4]) -> [u64; 4] {
    let mut out = [0u64; 4];
    let mut borrow = 0u64;
    for i in 0..4 {
        let (d, b1) = a[i].overflowing_sub(b[i]);
        let (d, b2) = d.overflowing_sub(borrow);
        out[i] = d;
        borrow = (b1 | b2) as u64;
    }
    debug_assert_eq!(borrow, 0);
    out
}

fn add_raw(a: &[u64; 4], b: &[u64; 4]) -> ([u64; 4], u64) {
    let mut out = [0u64; 4];
    let mut carry = 0u64;
    for i in 0..4 {
        let s = a[i] as u128 + b[i] as u128 + carry as u128;
        out[i] = s as u64;
        carry = (s >> 64) as u64;
    }
    (out, carry)
}

pub fn add_mod(a: &[u64; 4], b: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    let (sum, carry) = add_raw(a, b);
    // Both inputs are below 2^224, so the raw sum never carries out.
    debug_assert_eq!(carry, 0);
    if cmp(&sum, &ctx.modulus) != Ordering::Less {
        sub_raw(&sum, &ctx.modulus)
    } else {
        sum
    }
}

pub fn sub_mod(a: &[u64; 4], b: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    if cmp(a, b) != Ordering::Less {
        sub_raw(a, b)
    } else {
        let (t, _) = add_raw(a, &ctx.modulus);
        sub_raw(&t, b)
    }
}

pub fn neg_mod(a: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    if is_zero(a) {
        *a
    } else {
        sub_raw(&ctx.modulus, a)
    }
}

/// Montgomery product a * b * R^-1 mod m (CIOS).
///
/// Requires b < m; a may be any 4-limb value, so `to_mont` can fold
/// arbitrary 256-bit inputs. The result is fully reduced.
pub fn mont_mul(a: &[u64; 4], b: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    let m = &ctx.modulus;
    let mut t = [0u64; 5];
    for i in 0..4 {
        let ai = a[i] as u128;
        let mut carry: u128 = 0;
        for j in 0..4 {
            let v = t[j] as u128 + ai * b[j] as u128 + carry;
            t[j] = v as u64;
            carry = v >> 64;
        }
        let t4 = t[4] as u128 + carry;

        let k = t[0].wrapping_mul(ctx.n0inv) as u128;
        let v = t[0] as u128 + k * m[0] as u128;
        let mut carry = v >> 64;
        for j in 1..4 {
            let v = t[j] as u128 + k * m[j] as u128 + carry;
            t[j - 1] = v as u64;
            carry = v >> 64;
        }
        let v = t4 + carry;
        t[3] = v as u64;
        t[4] = (v >> 64) as u64;
    }
    let mut out = [t[0], t[1], t[2], t[3]];
    if t[4] != 0 || cmp(&out, m) != Ordering::Less {
        out = sub_raw(&out, m);
    }
    out
}

pub fn to_mont(a: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    mont_mul(a, &ctx.r2, ctx)
}

pub fn from_mont(a: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    mont_mul(a, &[1, 0, 0, 0], ctx)
}

/// Montgomery-form exponentiation by a fixed 4-limb exponent.
pub fn mont_pow(base: &[u64; 4], exp: &[u64; 4], ctx: &MontCtx) -> [u64; 4] {
    let mut acc = ctx.one;
    let mut started = false;
    for i in (0..4).rev() {
        for bit in (0..64).rev() {
            if started {
                acc = mont_mul(&acc, &acc, ctx);
            }
            if (exp[i] >> bit) & 1 == 1 {
                if started {
                    acc = mont_mul(&acc, base, ctx);
                } else {
                    acc = *base;
                    started = true;
                }
            }
        }
    }
    if started {
        acc
    } else {
        ctx.one
    }
}

/// Big-endian 28-byte decode. Fails if the value is not below the modulus.
pub fn from_bytes28(bytes: &[u8; 28], ctx: &MontCtx) -> Option<[u64; 4]> {
    let v = limbs_from_be28(bytes);
    if cmp(&v, &ctx.modulus) == Ordering::Less {
        Some(v)
    } else {
        None
    }
}

/// Big-endian 28-byte decode reduced mod m. A 28-byte value is below
/// 2^224, so the subtraction loop runs at most once for p and at most
/// seven times for q.
pub fn from_bytes28_reduced(bytes: &[u8; 28], ctx: &MontCtx) -> [u64; 4] {
    let mut v = limbs_from_be28(bytes);
    while cmp(&v, &ctx.modulus) != Ordering::Less {
        v = sub_raw(&v, &ctx.modulus);
    }
    v
}

pub fn limbs_from_be28(bytes: &[u8; 28]) -> [u64; 4] {
    let mut w = [0u64; 4];
    w[3] = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as u64;
    w[2] = u64::from_be_bytes(bytes[4..12].try_into().unwrap());
    w[1] = u64::from_be_bytes(bytes[12..20].try_into().unwrap());
    w[0] = u64::from_be_bytes(bytes[20..28].try_into().unwrap());
    w
}

pub fn limbs_to_be28(v: &[u64; 4]) -> [u8; 28] {
    debug_assert!(v[3] >> 32 == 0, "value exceeds 224 bits");
    let mut out = [0u8; 28];
    out[0..4].copy_from_slice(&(v[3] as u32).to_be_bytes());
    out[4..12].copy_from_slice(&v[2].to_be_bytes());
    out[12..20].copy_from_slice(&v[1].to_be_bytes());
    out[20..28].copy_from_slice(&v[0].to_be_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use proptest::prelude::*;

    fn big(v: &[u64; 4]) -> BigUint {
        let mut x = BigUint::default();
        for i in (0..4).rev() {
            x = (x << 64u32) + BigUint::from(v[i]);
        }
        x
    }

    fn p_big() -> BigUint {
        big(&P_CTX.modulus)
    }

    fn arb_limbs_mod_p() -> impl Strategy<Value = [u64; 4]> {
        any::<[u64; 4]>().prop_map(|mut v| {
            v[3] &= 0x7fffffff; // below 2^223 < p
            v
        })
    }

    #[test]
    fn context_constants_are_consistent() {
        for ctx in [&P_CTX, &Q_CTX] {
            let m = big(&ctx.modulus);
            let r = BigUint::from(1u8) << 256u32;
            assert_eq!(big(&ctx.one), &r % &m);
            assert_eq!(big(&ctx.r2), (&r * &r) % &m);
            let n0 = BigUint::from(ctx.n0inv);
            let prod = (n0 * &m + 1u8) % (BigUint::from(1u8) << 64u32);
            assert_eq!(prod, BigUint::default());
        }
        let p = p_big();
        assert_eq!(big(&SQRT_EXP), (&p + 1u8) >> 2u32);
        assert_eq!(big(&QR_EXP), (&p - 1u8) >> 1u32);
        assert_eq!(big(&INV_EXP), &p - 2u8);
        assert_eq!(big(&Q_MINUS_1), big(&Q_CTX.modulus) - 1u8);
    }

    proptest! {
        #[test]
        fn mont_mul_matches_bigint(a in arb_limbs_mod_p(), b in arb_limbs_mod_p()) {
            let p = p_big();
            let am = to_mont(&a, &P_CTX);
            let bm = to_mont(&b, &P_CTX);
            let got = from_mont(&mont_mul(&am, &bm, &P_CTX), &P_CTX);
            let want = (big(&a) * big(&b)) % &p;
            prop_assert_eq!(big(&got), want);
        }

        #[test]
        fn add_sub_match_bigint(a in arb_limbs_mod_p(), b in arb_limbs_mod_p()) {
            let p = p_big();
            prop_assert_eq!(big(&add_mod(&a, &b, &P_CTX)), (big(&a) + big(&b)) % &p);
            let want_sub = ((big(&a) + &p) - big(&b)) % &p;
            prop_assert_eq!(big(&sub_mod(&a, &b, &P_CTX)), want_sub);
        }

        #[test]
        fn pow_matches_bigint(a in arb_limbs_mod_p(), e in any::<u64>()) {
            let p = p_big();
            let am = to_mont(&a, &P_CTX);
            let got = from_mont(&mont_pow(&am, &[e, 0, 0, 0], &P_CTX), &P_CTX);
            prop_assert_eq!(big(&got), big(&a).modpow(&BigUint::from(e), &p));
        }

        #[test]
        fn bytes_roundtrip(a in arb_limbs_mod_p()) {
            let b = limbs_to_be28(&a);
            prop_assert_eq!(limbs_from_be28(&b), a);
        }

        #[test]
        fn to_mont_accepts_unreduced(raw in any::<[u64; 4]>()) {
            let p = p_big();
            let got = from_mont(&to_mont(&raw, &P_CTX), &P_CTX);
            prop_assert_eq!(big(&got), big(&raw) % &p);
        }
    }

    #[test]
    fn fermat_inversion() {
        let a = to_mont(&[12345, 0, 0, 0], &P_CTX);
        let inv = mont_pow(&a, &INV_EXP, &P_CTX);
        assert_eq!(mont_mul(&a, &inv, &P_CTX), P_CTX.one);
    }
}
